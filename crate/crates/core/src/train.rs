//! Loss, mini-batch training loop, RMSE evaluation and the learning-rate sweep.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::fusion::{DropoutCtx, NUM_CLASSES};
use crate::model::{rating_class, Example, FusionModel, ModalityMode, ModelConfig, Stores, PROB_FLOOR};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Real, Tape};
use crate::{Error, Result};

pub const RESULTS_HEADER: &str = "dataset,modality_mode,lr,rmse_train,rmse_val,rmse_test,epochs,seconds";
pub const CURVE_HEADER: &str = "epoch,loss,rmse_train,rmse_val,seconds";
/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

/// `-ln p[rating]` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], rating: u8) -> Result<f64> {
    if probs.len() != NUM_CLASSES {
        return Err(Error::Invalid(format!("expected {NUM_CLASSES} probabilities, got {}", probs.len())));
    }
    let c = rating_class(rating)?;
    Ok(-probs[c].max(PROB_FLOOR).ln())
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "rmse over {} targets and {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let se: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok((se / truth.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    pub mode: ModalityMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            batch_size: 64,
            epochs: 30,
            patience: 3,
            seed: 42,
            mode: ModalityMode::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// RMSE of the predictions made while training (dropout on).
    pub rmse_train: f64,
    pub rmse_val: Option<f64>,
    pub seconds: f64,
}

impl EpochStats {
    pub fn csv_row(&self) -> String {
        let val = self.rmse_val.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{},{:.3}",
            self.epoch, self.loss, self.rmse_train, val, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept (0 when no epoch ran).
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Mean training loss of one batch, its running squared error, and the
/// parameter gradients.
fn batch_step<F: Real>(
    model: &FusionModel<F>,
    batch: &[&Example],
    stores: &Stores<'_>,
    mode: ModalityMode,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, crate::tensor::ParamGrads<F>)> {
    let mut tape = Tape::with_params(&model.params);
    let mut drop = DropoutCtx {
        rate: model.config.encoder.dropout,
        rng,
    };
    let logits = model.forward(&mut tape, batch, stores, mode, Some(&mut drop))?;
    let probs = tape.softmax_rows(logits)?;
    let p = tape.value(probs);
    let mut se = 0.0;
    for (r, ex) in batch.iter().enumerate() {
        let expected: f64 = (0..NUM_CLASSES).map(|c| (c + 1) as f64 * p.get(r, c).as_f64()).sum();
        se += (expected - ex.rating as f64).powi(2);
    }
    let targets = batch
        .iter()
        .map(|e| rating_class(e.rating))
        .collect::<Result<Vec<_>>>()?;
    let loss = tape.nll(probs, &targets, F::of(PROB_FLOOR))?;
    let value = tape.value(loss).get(0, 0).as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {value}")));
    }
    let grads = tape.backward(loss)?.into_param_grads(&tape);
    Ok((value, se, grads))
}

/// Mini-batch Adam on `train`. After the run `model` holds the parameters of
/// the epoch with the best validation RMSE (the last epoch when `val` is
/// empty). `on_epoch` sees every epoch's statistics as they are produced.
pub fn train<F: Real>(
    model: &mut FusionModel<F>,
    train: &[Example],
    val: &[Example],
    stores: &Stores<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, ParamStore<F>)> = None;
    let mut best_epoch = 0;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut se, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, batch_se, grads) = batch_step(model, &batch, stores, cfg.mode, &mut rng)
                .map_err(|e| annotate(e, epoch, batches, cfg.lr))?;
            adam.step(&mut model.params, &grads)?;
            loss_sum += loss;
            se += batch_se;
            batches += 1;
        }
        let rmse_val = if val.is_empty() {
            None
        } else {
            Some(evaluate_rmse(model, val, stores, cfg.mode)?)
        };
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            rmse_train: (se / train.len() as f64).sqrt(),
            rmse_val,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        curve.push(stats);

        match rmse_val {
            None => best_epoch = epoch,
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, model.params.clone()));
                    best_epoch = epoch;
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params.load_from(&params)?;
    }
    Ok(TrainOutcome {
        epochs_run: curve.len(),
        curve,
        best_epoch,
    })
}

fn annotate(e: Error, epoch: usize, batch: usize, lr: f64) -> Error {
    let numeric = matches!(
        e,
        Error::Numeric(_) | Error::Tensor(crate::tensor::TensorError::NonFinite(_))
    );
    if numeric {
        Error::Numeric(format!(
            "{e} at epoch {epoch}, batch {batch} (lr {lr}); try a smaller learning rate"
        ))
    } else {
        e
    }
}

/// Predictions for `examples`, evaluated in parallel batches.
pub fn predict_all<F: Real>(
    model: &FusionModel<F>,
    examples: &[Example],
    stores: &Stores<'_>,
    mode: ModalityMode,
) -> Result<Vec<f64>> {
    let parts = examples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let batch: Vec<&Example> = chunk.iter().collect();
            model.predict(&batch, stores, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// RMSE of the model's predictions against the true ratings.
pub fn evaluate_rmse<F: Real>(
    model: &FusionModel<F>,
    examples: &[Example],
    stores: &Stores<'_>,
    mode: ModalityMode,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty split".into()));
    }
    let pred = predict_all(model, examples, stores, mode)?;
    let truth: Vec<f64> = examples.iter().map(|e| e.rating as f64).collect();
    rmse(&truth, &pred)
}

/// One row of the results table plus the training curve behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub modality_mode: String,
    pub lr: Option<f64>,
    pub rmse_train: f64,
    pub rmse_val: f64,
    pub rmse_test: f64,
    pub epochs: usize,
    pub seconds: f64,
    pub curve: Vec<EpochStats>,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let lr = self.lr.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{:.3}",
            self.dataset,
            self.modality_mode,
            lr,
            self.rmse_train,
            self.rmse_val,
            self.rmse_test,
            self.epochs,
            self.seconds
        )
    }

    pub fn curve_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for e in &self.curve {
            let _ = writeln!(s, "{}", e.csv_row());
        }
        s
    }
}

/// Appends rows to a results CSV, writing the header when the file is new
/// or empty.
pub fn append_results(path: impl AsRef<Path>, reports: &[EvalReport]) -> std::io::Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Splits and stores shared by every run of a sweep.
#[derive(Clone, Copy)]
pub struct Experiment<'a> {
    pub dataset: &'a str,
    pub model: &'a ModelConfig,
    pub model_seed: u64,
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub test: &'a [Example],
    pub stores: Stores<'a>,
}

/// Trains a fresh model and measures train, validation and test RMSE with
/// the selected parameters.
pub fn run_experiment<F: Real>(
    exp: &Experiment<'_>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(FusionModel<F>, EvalReport)> {
    let start = Instant::now();
    let mut model = FusionModel::<F>::new(exp.model.clone(), exp.model_seed)?;
    let outcome = train(&mut model, exp.train, exp.val, &exp.stores, cfg, on_epoch)?;
    let rmse_train = evaluate_rmse(&model, exp.train, &exp.stores, cfg.mode)?;
    let rmse_val = evaluate_rmse(&model, exp.val, &exp.stores, cfg.mode)?;
    let rmse_test = evaluate_rmse(&model, exp.test, &exp.stores, cfg.mode)?;
    let report = EvalReport {
        dataset: exp.dataset.to_string(),
        modality_mode: cfg.mode.to_string(),
        lr: Some(cfg.lr),
        rmse_train,
        rmse_val,
        rmse_test,
        epochs: outcome.epochs_run,
        seconds: start.elapsed().as_secs_f64(),
        curve: outcome.curve,
    };
    Ok((model, report))
}

/// One report per learning rate, each from a fresh model with the same seeds.
pub fn lr_sweep<F: Real>(
    exp: &Experiment<'_>,
    base: &TrainConfig,
    lrs: &[f64],
    mut on_epoch: impl FnMut(f64, &EpochStats),
) -> Result<Vec<EvalReport>> {
    if lrs.is_empty() {
        return Err(Error::Invalid("sweep needs at least one learning rate".into()));
    }
    lrs.iter()
        .map(|&lr| {
            let cfg = TrainConfig { lr, ..base.clone() };
            run_experiment::<F>(exp, &cfg, |s| on_epoch(lr, s)).map(|(_, r)| r)
        })
        .collect()
}
