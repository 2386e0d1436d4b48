use rand::Rng;

use super::EmbedError;
use crate::init;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Embedder weights start in `uniform(-EMBED_INIT, EMBED_INIT)`.
pub const EMBED_INIT: f64 = 0.02;

/// Dense layer `x W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        weight: Tensor<F>,
        with_bias: bool,
    ) -> Self {
        let out = weight.cols();
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, out)));
        Self { weight, bias }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> crate::Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        Ok(match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)?
            }
            None => y,
        })
    }
}

/// Two dense layers with ReLU after each, lifting a low-dimensional encoding
/// to the token width.
#[derive(Clone, Copy, Debug)]
pub struct Upsampler {
    pub first: Linear,
    pub second: Linear,
}

impl Upsampler {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = init::uniform(in_dim, hidden, EMBED_INIT, rng);
        let w2 = init::uniform(hidden, out_dim, EMBED_INIT, rng);
        Self {
            first: Linear::new(store, &format!("{name}.up0"), w1, true),
            second: Linear::new(store, &format!("{name}.up1"), w2, true),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> crate::Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h)?;
        let y = self.second.forward(tape, h)?;
        Ok(tape.relu(y)?)
    }
}

/// Trainable lookup table indexed by raw integer id (`0..capacity`).
#[derive(Clone, Copy, Debug)]
pub struct IdTable {
    pub table: ParamId,
    pub capacity: usize,
}

impl IdTable {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        capacity: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("{name}.table"), init::uniform(capacity, dim, EMBED_INIT, rng));
        Self { table, capacity }
    }

    /// One row per id.
    pub fn embed<F: Real>(&self, tape: &mut Tape<'_, F>, ids: &[usize]) -> crate::Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.capacity) {
            return Err(EmbedError::IdOutOfRange {
                id,
                capacity: self.capacity,
            }
            .into());
        }
        let t = tape.param(self.table);
        Ok(tape.gather_rows(t, ids)?)
    }
}
