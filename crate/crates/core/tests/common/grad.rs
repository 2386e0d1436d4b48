//! Finite-difference checks over every tape op and the full model.

use fusionrec::model::{Example, FusionModel, ModalityMode, Stores};
use fusionrec::tensor::{grad_check, grad_check_params, Tape, Tensor, TensorError, Var};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_tensor, tiny_config, tiny_dataset, tiny_examples, tiny_stores};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type T = Tape<'static, f64>;
type R = Result<Var, TensorError>;

/// `sum(y * W)` for a fixed pseudo-random `W`, so every output entry gets a
/// distinct upstream gradient.
fn weighted(t: &mut T, y: Var, seed: u64) -> R {
    let (r, c) = t.shape(y);
    let w = t.constant(random_tensor(r, c, seed));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn c(t: &mut T, rows: usize, cols: usize, seed: u64) -> Var {
    t.constant(random_tensor(rows, cols, seed))
}

/// Entries pushed at least 0.2 away from zero, for the ReLU kink.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    random_tensor(rows, cols, seed).map(|x| if x >= 0.0 { x + 0.2 } else { x - 0.2 })
}

fn check(f: impl Fn(&mut T, Var) -> R, point: Tensor<f64>) -> f64 {
    grad_check(f, &point, STEP).expect("gradient check failed to run")
}

fn attention(t: &mut T, q: Var, k: Var, v: Var, q_group: usize, mask: Option<Vec<f64>>) -> R {
    let y = t.attention(q, k, v, 2, q_group, 3, mask)?;
    weighted(t, y, 99)
}

fn attention_mask() -> Vec<f64> {
    // 2 groups x 2 heads x 3 queries x 3 keys
    (0..36).map(|i| if i % 5 == 0 { 0.0 } else { 1.25 }).collect()
}

/// Worst relative error for each differentiable op, checked with respect to
/// each of its inputs.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let x34 = || random_tensor(3, 4, 1);
    vec![
        ("matmul lhs", check(|t, x| {
            let b = c(t, 4, 2, 2);
            let y = t.matmul(x, b)?;
            weighted(t, y, 3)
        }, x34())),
        ("matmul rhs", check(|t, x| {
            let a = c(t, 2, 3, 4);
            let y = t.matmul(a, x)?;
            weighted(t, y, 5)
        }, x34())),
        ("matmul square", check(|t, x| {
            let y = t.matmul(x, x)?;
            weighted(t, y, 6)
        }, random_tensor(3, 3, 7))),
        ("add", check(|t, x| {
            let b = c(t, 3, 4, 8);
            let y = t.add(b, x)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 9)
        }, x34())),
        ("mul", check(|t, x| {
            let b = c(t, 3, 4, 10);
            let y = t.mul(x, b)?;
            let y = t.mul(y, x)?;
            weighted(t, y, 11)
        }, x34())),
        ("add_row input", check(|t, x| {
            let b = c(t, 1, 4, 12);
            let y = t.add_row(x, b)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 13)
        }, x34())),
        ("add_row bias", check(|t, x| {
            let a = c(t, 5, 4, 14);
            let y = t.add_row(a, x)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 15)
        }, random_tensor(1, 4, 16))),
        ("scale", check(|t, x| {
            let y = t.scale(x, -2.5)?;
            let y = t.mul(y, x)?;
            weighted(t, y, 17)
        }, x34())),
        ("relu", check(|t, x| {
            let y = t.relu(x)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 18)
        }, away_from_zero(3, 4, 19))),
        ("softmax_rows", check(|t, x| {
            let y = t.softmax_rows(x)?;
            weighted(t, y, 20)
        }, random_tensor(3, 5, 21).map(|v| 3.0 * v))),
        ("layer_norm input", check(|t, x| {
            let g = c(t, 1, 4, 22);
            let b = c(t, 1, 4, 23);
            let y = t.layer_norm(x, g, b, 1e-5)?;
            weighted(t, y, 24)
        }, x34())),
        ("layer_norm gain", check(|t, x| {
            let a = c(t, 3, 4, 25);
            let b = c(t, 1, 4, 26);
            let y = t.layer_norm(a, x, b, 1e-5)?;
            weighted(t, y, 27)
        }, random_tensor(1, 4, 28))),
        ("layer_norm bias", check(|t, x| {
            let a = c(t, 3, 4, 29);
            let g = c(t, 1, 4, 30);
            let y = t.layer_norm(a, g, x, 1e-5)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 31)
        }, random_tensor(1, 4, 32))),
        ("concat_cols", check(|t, x| {
            let a = c(t, 3, 2, 33);
            let y = t.concat_cols(&[a, x, x])?;
            let y = t.mul(y, y)?;
            weighted(t, y, 34)
        }, x34())),
        ("slice_cols", check(|t, x| {
            let y = t.slice_cols(x, 1, 2)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 35)
        }, x34())),
        ("transpose", check(|t, x| {
            let y = t.transpose(x)?;
            let b = c(t, 3, 2, 36);
            let y = t.matmul(y, b)?;
            weighted(t, y, 37)
        }, x34())),
        ("gather_rows", check(|t, x| {
            let y = t.gather_rows(x, &[2, 0, 2, 1, 2])?;
            let y = t.mul(y, y)?;
            weighted(t, y, 38)
        }, x34())),
        ("interleave_rows", check(|t, x| {
            let a = c(t, 3, 4, 39);
            let y = t.interleave_rows(&[x, a, x])?;
            let y = t.mul(y, y)?;
            weighted(t, y, 40)
        }, x34())),
        ("repeat_rows", check(|t, x| {
            let y = t.repeat_rows(x, 3)?;
            let y = t.mul(y, y)?;
            weighted(t, y, 41)
        }, random_tensor(1, 4, 42))),
        ("overlay_rows base", check(|t, x| {
            let fill = c(t, 1, 4, 43);
            let y = t.overlay_rows(x, fill, &[0, 2])?;
            let y = t.mul(y, y)?;
            weighted(t, y, 44)
        }, x34())),
        ("overlay_rows fill", check(|t, x| {
            let base = c(t, 3, 4, 45);
            let y = t.overlay_rows(base, x, &[0, 2])?;
            let y = t.mul(y, y)?;
            weighted(t, y, 46)
        }, random_tensor(1, 4, 47))),
        ("attention q", check(|t, x| {
            let k = c(t, 6, 4, 48);
            let v = c(t, 6, 4, 49);
            attention(t, x, k, v, 3, None)
        }, random_tensor(6, 4, 50))),
        ("attention k", check(|t, x| {
            let q = c(t, 6, 4, 51);
            let v = c(t, 6, 4, 52);
            attention(t, q, x, v, 3, None)
        }, random_tensor(6, 4, 53))),
        ("attention v", check(|t, x| {
            let q = c(t, 6, 4, 54);
            let k = c(t, 6, 4, 55);
            attention(t, q, k, x, 3, None)
        }, random_tensor(6, 4, 56))),
        ("attention shared qkv", check(|t, x| attention(t, x, x, x, 3, None), random_tensor(6, 4, 57))),
        ("attention one query per group", check(|t, x| {
            let q = t.gather_rows(x, &[0, 3])?;
            let y = t.attention(q, x, x, 2, 1, 3, None)?;
            weighted(t, y, 58)
        }, random_tensor(6, 4, 59))),
        ("attention with mask", check(|t, x| attention(t, x, x, x, 3, Some(attention_mask())), random_tensor(6, 4, 60))),
        ("sum", check(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        }, x34())),
        ("nll", check(|t, x| {
            let p = t.softmax_rows(x)?;
            t.nll(p, &[4, 0, 2], 1e-12)
        }, random_tensor(3, 5, 61))),
    ]
}

/// Worst relative error over every parameter of the tiny model, in cross
/// mode so all three store slots and their missing tokens take part.
///
/// Biases start at zero, which puts some ReLU inputs exactly on the kink
/// (an all-zero encoding, such as the youngest user's normalized age). Every
/// parameter is therefore shifted by a seeded uniform offset in +-0.05 first.
pub fn model_gradient_error() -> f64 {
    let ds = tiny_dataset();
    let mut model = FusionModel::<f64>::new(tiny_config(&ds), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for t in model.params.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let examples = tiny_examples(&ds);
    let batch: Vec<&Example> = examples.iter().collect();
    let [title, intro, poster] = tiny_stores();
    let stores = Stores {
        title: Some(&title),
        intro: Some(&intro),
        poster: Some(&poster),
    };
    let ids: Vec<_> = model.params.ids().collect();
    let to_tensor_err = |e: fusionrec::Error| TensorError::Invalid {
        op: "model",
        msg: e.to_string(),
    };
    grad_check_params(
        &model.params,
        &ids,
        |tape| {
            let logits = model
                .forward(tape, &batch, &stores, ModalityMode::Cross, None)
                .map_err(to_tensor_err)?;
            model.loss(tape, logits, &batch).map_err(to_tensor_err)
        },
        STEP,
    )
    .expect("model gradient check failed to run")
}
