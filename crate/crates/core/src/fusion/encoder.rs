use rand::{Rng, RngCore};

use crate::embed::Linear;
use crate::init;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            n_layers: 2,
            n_heads: 8,
            ffn_dim: 1024,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Invalid("encoder widths must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "{} heads do not divide width {}",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Inverted-dropout source. Without one the encoder runs deterministically.
pub struct DropoutCtx<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl DropoutCtx<'_> {
    fn mask<F: Real>(&mut self, n: usize) -> Vec<F> {
        let keep = 1.0 - self.rate;
        let scale = F::of(1.0 / keep);
        (0..n)
            .map(|_| if self.rng.random_bool(keep) { scale } else { F::zero() })
            .collect()
    }

    fn active(&self) -> bool {
        self.rate > 0.0
    }
}

fn dropout<F: Real>(tape: &mut Tape<'_, F>, x: Var, ctx: Option<&mut DropoutCtx<'_>>) -> Result<Var> {
    match ctx {
        Some(ctx) if ctx.active() => {
            let (r, c) = tape.shape(x);
            let mask = Tensor::from_vec(r, c, ctx.mask(r * c))?;
            let mask = tape.constant(mask);
            Ok(tape.mul(x, mask)?)
        }
        _ => Ok(x),
    }
}

/// One post-norm encoder block: attention and feed-forward sublayers, each
/// wrapped as `LayerNorm(x + sublayer(x))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
}

impl EncoderLayer {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let mut square = |store: &mut ParamStore<F>, n: &str| {
            store.add(format!("{name}.{n}"), init::xavier(d, d, rng))
        };
        let wq = square(store, "wq");
        let wk = square(store, "wk");
        let wv = square(store, "wv");
        let wo = square(store, "wo");
        let ffn_in = Linear::new(store, &format!("{name}.ffn0"), init::xavier(d, cfg.ffn_dim, rng), true);
        let ffn_out = Linear::new(store, &format!("{name}.ffn1"), init::xavier(cfg.ffn_dim, d, rng), true);
        let mut norm = |n: &str| {
            (
                store.add(format!("{name}.{n}.gain"), Tensor::filled(1, d, F::one())),
                store.add(format!("{name}.{n}.bias"), Tensor::zeros(1, d)),
            )
        };
        let norm1 = norm("norm1");
        let norm2 = norm("norm2");
        Self {
            wq,
            wk,
            wv,
            wo,
            ffn_in,
            ffn_out,
            norm1,
            norm2,
        }
    }

    /// Updates the rows of `x` picked by `query_rows` (all rows when `None`)
    /// while keys and values come from every row. `x` holds sequences of
    /// `seq_len` consecutive rows; with `query_rows` there must be exactly one
    /// query row per sequence.
    fn block<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        query_rows: Option<&[usize]>,
        seq_len: usize,
        cfg: &EncoderConfig,
        mut drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let rows = tape.shape(x).0;
        if seq_len == 0 || !rows.is_multiple_of(seq_len) {
            return Err(Error::Invalid(format!(
                "{rows} rows do not split into sequences of {seq_len}"
            )));
        }
        let (xq, q_group) = match query_rows {
            None => (x, seq_len),
            Some(idx) => (tape.gather_rows(x, idx)?, 1),
        };
        let (wq, wk, wv, wo) = (
            tape.param(self.wq),
            tape.param(self.wk),
            tape.param(self.wv),
            tape.param(self.wo),
        );
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mask = match drop.as_deref_mut() {
            Some(ctx) if ctx.active() => {
                let n_q = tape.shape(q).0;
                Some(ctx.mask(n_q * cfg.n_heads * seq_len))
            }
            _ => None,
        };
        let a = tape.attention(q, k, v, cfg.n_heads, q_group, seq_len, mask)?;
        let o = tape.matmul(a, wo)?;
        let o = dropout(tape, o, drop.as_deref_mut())?;
        let r = tape.add(xq, o)?;
        let eps = F::of(LAYER_NORM_EPS);
        let (g1, b1) = (tape.param(self.norm1.0), tape.param(self.norm1.1));
        let x1 = tape.layer_norm(r, g1, b1, eps)?;

        let h = self.ffn_in.forward(tape, x1)?;
        let h = tape.relu(h)?;
        let f = self.ffn_out.forward(tape, h)?;
        let f = dropout(tape, f, drop)?;
        let r = tape.add(x1, f)?;
        let (g2, b2) = (tape.param(self.norm2.0), tape.param(self.norm2.1));
        Ok(tape.layer_norm(r, g2, b2, eps)?)
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        seq_len: usize,
        cfg: &EncoderConfig,
        drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        self.block(tape, x, None, seq_len, cfg, drop)
    }

    /// Output for the first row of each sequence only.
    pub fn forward_first<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        seq_len: usize,
        cfg: &EncoderConfig,
        drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let rows = tape.shape(x).0;
        let idx: Vec<usize> = (0..rows / seq_len.max(1)).map(|b| b * seq_len).collect();
        self.block(tape, x, Some(&idx), seq_len, cfg, drop)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), &config, rng))
            .collect();
        Ok(Self { config, layers })
    }

    /// Full `(b * seq_len) x d` output.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        mut x: Var,
        seq_len: usize,
        mut drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, x, seq_len, &self.config, drop.as_deref_mut())?;
        }
        Ok(x)
    }

    /// `b x d` output rows at the CLS positions. The last layer only updates
    /// the CLS rows, which gives the same values as taking them from
    /// [`Encoder::forward`].
    pub fn forward_cls<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        mut x: Var,
        seq_len: usize,
        mut drop: Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let Some((last, rest)) = self.layers.split_last() else {
            let rows = tape.shape(x).0;
            let idx: Vec<usize> = (0..rows / seq_len.max(1)).map(|b| b * seq_len).collect();
            return Ok(tape.gather_rows(x, &idx)?);
        };
        for layer in rest {
            x = layer.forward(tape, x, seq_len, &self.config, drop.as_deref_mut())?;
        }
        last.forward_first(tape, x, seq_len, &self.config, drop)
    }
}

/// Single-head scaled dot-product attention for head `head` of `layer`, built
/// from elementary tape ops. `x` is one `n x d` sequence. Returns the head
/// output (`n x d_k`) and the attention weights (`n x n`).
pub fn self_attention<F: Real>(
    tape: &mut Tape<'_, F>,
    x: Var,
    layer: &EncoderLayer,
    head: usize,
    cfg: &EncoderConfig,
) -> Result<(Var, Var)> {
    if head >= cfg.n_heads {
        return Err(Error::Invalid(format!("head {head} of {}", cfg.n_heads)));
    }
    let dk = cfg.head_dim();
    let mut project = |w: ParamId| -> Result<Var> {
        let w = tape.param(w);
        let w = tape.slice_cols(w, head * dk, dk)?;
        Ok(tape.matmul(x, w)?)
    };
    let q = project(layer.wq)?;
    let k = project(layer.wk)?;
    let v = project(layer.wv)?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, F::of(1.0 / (dk as f64).sqrt()))?;
    let p = tape.softmax_rows(s)?;
    let out = tape.matmul(p, v)?;
    Ok((out, p))
}

/// `Concat(head_1..head_h) W_o` for one sequence, before the residual and
/// normalization.
pub fn multi_head<F: Real>(
    tape: &mut Tape<'_, F>,
    x: Var,
    layer: &EncoderLayer,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let heads = (0..cfg.n_heads)
        .map(|h| self_attention(tape, x, layer, h, cfg).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.param(layer.wo);
    Ok(tape.matmul(cat, wo)?)
}
