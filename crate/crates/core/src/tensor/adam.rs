use super::params::{ParamGrads, ParamStore};
use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update.
    ///
    /// A parameter whose gradient is identically zero is left alone, moments
    /// included, so a step with all-zero gradients never moves anything.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamGrads<F>) -> Result<()> {
        let cfg = self.config;
        if !cfg.lr.is_finite() || cfg.lr < 0.0 {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("learning rate {}", cfg.lr),
            });
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((id, _, p), g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() || self.m[id.index()].shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite("adam_step gradient"));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = F::of(1.0 / (1.0 - cfg.beta1.powi(t)));
        let c2 = F::of(1.0 / (1.0 - cfg.beta2.powi(t)));
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
        let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));

        for (i, (p, g)) in params.values_mut().zip(grads.iter()).enumerate() {
            if g.data().iter().all(|&x| x == F::zero()) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                let mhat = *mj * c1;
                let vhat = *vj * c2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
