//! Transformer fusion over the `[CLS, V1..V10, SEP]` token sequence.
//!
//! Batches are stacked row-wise: a batch of `b` sequences of length 12 is a
//! `(12 b) x d` matrix with sequence `i` occupying rows `12 i .. 12 i + 12`.
//! Attention only mixes rows within the same sequence.

mod encoder;

use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub use encoder::{
    multi_head, self_attention, DropoutCtx, Encoder, EncoderConfig, EncoderLayer,
};

/// Feature tokens between CLS and SEP.
pub const NUM_FEATURE_TOKENS: usize = 10;
/// CLS + features + SEP.
pub const SEQ_LEN: usize = NUM_FEATURE_TOKENS + 2;
pub const NUM_CLASSES: usize = 5;

/// Fixed sinusoidal position table: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding(seq_len: usize, d: usize) -> Result<Tensor<f64>> {
    if !d.is_multiple_of(2) || d == 0 {
        return Err(Error::Invalid(format!(
            "positional encoding width must be even and positive, got {d}"
        )));
    }
    let mut p = Tensor::zeros(seq_len, d);
    for pos in 0..seq_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            p.set(pos, 2 * i, angle.sin());
            p.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(p)
}

/// Assembles `[cls; tokens; sep]` for every sequence of the batch and adds
/// the position table when one is given.
///
/// Each entry of `tokens` is `b x d` (one row per sequence), in slot order;
/// `cls` and `sep` are `1 x d`.
pub fn build_sequence<F: Real>(
    tape: &mut Tape<'_, F>,
    tokens: &[Var],
    cls: Var,
    sep: Var,
    positions: Option<&Tensor<F>>,
) -> Result<Var> {
    if tokens.len() != NUM_FEATURE_TOKENS {
        return Err(Error::Invalid(format!(
            "expected {NUM_FEATURE_TOKENS} feature tokens, got {}",
            tokens.len()
        )));
    }
    let batch = tape.shape(tokens[0]).0;
    let cls_rows = tape.repeat_rows(cls, batch)?;
    let sep_rows = tape.repeat_rows(sep, batch)?;
    let mut parts = Vec::with_capacity(SEQ_LEN);
    parts.push(cls_rows);
    parts.extend_from_slice(tokens);
    parts.push(sep_rows);
    let seq = tape.interleave_rows(&parts)?;
    match positions {
        None => Ok(seq),
        Some(p) => {
            let d = tape.shape(seq).1;
            if p.shape() != (SEQ_LEN, d) {
                return Err(Error::Invalid(format!(
                    "position table {:?} does not match {SEQ_LEN}x{d}",
                    p.shape()
                )));
            }
            let mut tiled = Tensor::zeros(batch * SEQ_LEN, d);
            for b in 0..batch {
                for s in 0..SEQ_LEN {
                    tiled.row_mut(b * SEQ_LEN + s).copy_from_slice(p.row(s));
                }
            }
            let tiled = tape.constant(tiled);
            Ok(tape.add(seq, tiled)?)
        }
    }
}

/// Row 0 of a single `12 x d` encoder output.
pub fn extract_cls<F: Real>(h: &Tensor<F>) -> Result<Vec<F>> {
    if h.rows() != SEQ_LEN {
        return Err(Error::Invalid(format!(
            "encoder output must have {SEQ_LEN} rows, got {}",
            h.rows()
        )));
    }
    Ok(h.row(0).to_vec())
}

/// CLS row of every sequence in a stacked batch.
pub fn cls_rows<F: Real>(tape: &mut Tape<'_, F>, h: Var) -> Result<Var> {
    let rows = tape.shape(h).0;
    if !rows.is_multiple_of(SEQ_LEN) {
        return Err(Error::Invalid(format!(
            "{rows} rows is not a whole number of sequences"
        )));
    }
    let index: Vec<usize> = (0..rows / SEQ_LEN).map(|b| b * SEQ_LEN).collect();
    Ok(tape.gather_rows(h, &index)?)
}

/// Softmax over `h_cls W + b`, untracked. `w` is `d x 5`, `b` is `1 x 5`.
pub fn classify<F: Real>(h_cls: &[F], w: &Tensor<F>, b: &Tensor<F>) -> Result<Vec<F>> {
    if w.rows() != h_cls.len() || w.cols() != NUM_CLASSES || b.shape() != (1, NUM_CLASSES) {
        return Err(Error::Invalid(format!(
            "classifier shapes {:?}/{:?} for input width {}",
            w.shape(),
            b.shape(),
            h_cls.len()
        )));
    }
    let mut logits = b.data().to_vec();
    for (k, &x) in h_cls.iter().enumerate() {
        for (l, &wv) in logits.iter_mut().zip(w.row(k)) {
            *l += x * wv;
        }
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    crate::tensor::softmax_row(&mut logits);
    Ok(logits)
}

/// How a class distribution becomes a real-valued rating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RatingReadout {
    #[default]
    Expectation,
    Argmax,
}

impl std::str::FromStr for RatingReadout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "expectation" => Ok(Self::Expectation),
            "argmax" => Ok(Self::Argmax),
            _ => Err(format!("unknown readout {s:?}")),
        }
    }
}

impl std::fmt::Display for RatingReadout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Expectation => "expectation",
            Self::Argmax => "argmax",
        })
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    let ok = probs.len() == NUM_CLASSES
        && probs.iter().all(|p| p.is_finite() && *p >= 0.0)
        && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-4;
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("not a rating distribution: {probs:?}")))
    }
}

/// Expected rating `sum_r r * p[r]` over ratings 1..=5.
pub fn predict_rating(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum())
}

pub fn predict_rating_with(probs: &[f64], readout: RatingReadout) -> Result<f64> {
    match readout {
        RatingReadout::Expectation => predict_rating(probs),
        RatingReadout::Argmax => {
            check_probs(probs)?;
            let best = probs
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            Ok((best.0 + 1) as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_values() {
        let p = positional_encoding(12, 768).unwrap();
        for c in 0..768 {
            assert_eq!(p.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((p.get(1, 0) - 0.841471).abs() < 1e-6);
        let small = positional_encoding(6, 4).unwrap();
        assert!((small.get(5, 2) - 0.049979).abs() < 1e-6);
        assert!(positional_encoding(3, 7).is_err());
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sequence_is_cls_tokens_sep_plus_positions() {
        let d = 4;
        let mut tape = Tape::<f64>::new();
        let zeros: Vec<Var> = (0..10).map(|_| tape.constant(Tensor::zeros(2, d))).collect();
        let cls = tape.constant(Tensor::zeros(1, d));
        let sep = tape.constant(Tensor::zeros(1, d));
        let p = positional_encoding(SEQ_LEN, d).unwrap();
        let s = build_sequence(&mut tape, &zeros, cls, sep, Some(&p)).unwrap();
        let v = tape.value(s);
        assert_eq!(v.shape(), (24, d));
        for b in 0..2 {
            for r in 0..SEQ_LEN {
                assert_eq!(v.row(b * SEQ_LEN + r), p.row(r));
            }
        }

        let toks: Vec<Var> = (0..10)
            .map(|i| tape.constant(Tensor::filled(1, d, i as f64 + 1.0)))
            .collect();
        let cls = tape.constant(Tensor::filled(1, d, -1.0));
        let sep = tape.constant(Tensor::filled(1, d, 99.0));
        let s = build_sequence(&mut tape, &toks, cls, sep, None).unwrap();
        let col0: Vec<f64> = (0..SEQ_LEN).map(|r| tape.value(s).get(r, 0)).collect();
        assert_eq!(col0, [-1.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 99.0]);

        assert!(build_sequence(&mut tape, &toks[..9], cls, sep, None).is_err());
    }

    #[test]
    fn cls_extraction() {
        let mut h = Tensor::<f64>::zeros(12, 768);
        h.set(0, 0, 1.0);
        let c = extract_cls(&h).unwrap();
        assert_eq!(c[0], 1.0);
        assert!(c[1..].iter().all(|&v| v == 0.0));
        assert!(extract_cls(&Tensor::<f64>::zeros(11, 768)).is_err());
    }

    #[test]
    fn classifier_examples() {
        let h = vec![0.3f64; 8];
        let w = Tensor::zeros(8, 5);
        let b = Tensor::zeros(1, 5);
        let p = classify(&h, &w, &b).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let b = Tensor::from_rows(&[[0.0, 0.0, 0.0, 0.0, 4f64.ln()]]).unwrap();
        let p = classify(&h, &w, &b).unwrap();
        for (x, e) in p.iter().zip([0.125, 0.125, 0.125, 0.125, 0.5]) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn rating_readouts() {
        assert!((predict_rating(&[0.2; 5]).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(predict_rating(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), 5.0);
        assert_eq!(predict_rating(&[0.125, 0.125, 0.125, 0.125, 0.5]).unwrap(), 3.75);
        assert!(predict_rating(&[0.5, 0.5]).is_err());
        assert!(predict_rating(&[0.5, 0.6, 0.0, 0.0, 0.0]).is_err());
        assert_eq!(
            predict_rating_with(&[0.1, 0.5, 0.2, 0.1, 0.1], RatingReadout::Argmax).unwrap(),
            2.0
        );
    }
}
