//! Small end-to-end training runs on the ten-record toy set.

use fusionrec::fusion::EncoderConfig;
use fusionrec::model::{Example, FusionModel, ModalityMode, ModelConfig, Stores};
use fusionrec::train::{cross_entropy, evaluate_rmse, train, TrainConfig};

use super::{tiny_config, tiny_dataset, tiny_examples, tiny_stores};

pub const OVERFIT_TARGET: f64 = 0.3;
pub const OVERFIT_EPOCHS: usize = 200;

/// Mean cross-entropy of `model` over `examples`.
pub fn mean_loss(model: &FusionModel<f64>, examples: &[Example], stores: &Stores<'_>, mode: ModalityMode) -> f64 {
    let batch: Vec<&Example> = examples.iter().collect();
    let probs = model.probabilities(&batch, stores, mode).unwrap();
    probs
        .iter()
        .zip(examples)
        .map(|(p, e)| cross_entropy(p, e.rating).unwrap())
        .sum::<f64>()
        / examples.len() as f64
}

pub fn overfit_config() -> ModelConfig {
    let ds = tiny_dataset();
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
        },
        id_dim: 8,
        hidden_dim: 16,
        ..tiny_config(&ds)
    }
}

pub struct Overfit {
    /// First epoch whose post-epoch train RMSE is below the target.
    pub reached_at: Option<usize>,
    pub final_rmse: f64,
}

/// Trains on the toy set, scoring the full set after every epoch.
pub fn overfit_toy() -> Overfit {
    let ds = tiny_dataset();
    let examples = tiny_examples(&ds);
    let [title, intro, poster] = tiny_stores();
    let stores = Stores {
        title: Some(&title),
        intro: Some(&intro),
        poster: Some(&poster),
    };
    let mut model = FusionModel::<f64>::new(overfit_config(), 3).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        batch_size: 10,
        epochs: OVERFIT_EPOCHS,
        patience: 0,
        seed: 1,
        mode: ModalityMode::Cross,
    };
    let mut reached_at = None;
    // validation on the training records makes each epoch's val RMSE the
    // post-update train RMSE
    train(&mut model, &examples, &examples, &stores, &cfg, |s| {
        if reached_at.is_none() && s.rmse_val.unwrap() < OVERFIT_TARGET {
            reached_at = Some(s.epoch);
        }
    })
    .unwrap();
    let final_rmse = evaluate_rmse(&model, &examples, &stores, ModalityMode::Cross).unwrap();
    Overfit { reached_at, final_rmse }
}
