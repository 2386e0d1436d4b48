//! Measurements behind the fusion invariants.

use fusionrec::fusion::{build_sequence, positional_encoding, Encoder, EncoderConfig, NUM_FEATURE_TOKENS, SEQ_LEN};
use fusionrec::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{direct_position, random_tensor};

pub const PE_TOLERANCE: f64 = 1e-12;
pub const PERMUTATION_TOLERANCE: f64 = 1e-5;
/// Smallest CLS change that counts as "broken" once positions are added.
pub const PERMUTATION_BREAK: f64 = 1e-6;

/// Seeded `(pos, dim)` pairs over a 768-wide table of 512 positions.
pub fn pe_samples(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random_range(0..512), rng.random_range(0..768))).collect()
}

pub fn pe_max_error(samples: &[(usize, usize)]) -> f64 {
    let table = positional_encoding(512, 768).unwrap();
    samples
        .iter()
        .map(|&(p, i)| (table.get(p, i) - direct_position(p, i, 768)).abs())
        .fold(0.0, f64::max)
}

/// Largest deviation of an attention row sum from 1, or infinity when a
/// weight is negative.
pub fn attention_row_sum_error(seed: u64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(random_tensor(2 * SEQ_LEN, 8, seed).map(|v| 4.0 * v));
    let k = tape.constant(random_tensor(2 * SEQ_LEN, 8, seed + 1).map(|v| 4.0 * v));
    let v = tape.constant(random_tensor(2 * SEQ_LEN, 8, seed + 2));
    let out = tape.attention(q, k, v, 2, SEQ_LEN, SEQ_LEN, None).unwrap();
    let w = tape.attention_weights(out).unwrap();
    w.chunks(SEQ_LEN)
        .map(|row| {
            if row.iter().any(|&p| p < 0.0) {
                f64::INFINITY
            } else {
                (row.iter().sum::<f64>() - 1.0).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Largest change of the CLS output when the ten feature tokens are
/// reordered by `perm`, with or without the position table.
pub fn cls_permutation_gap(perm: &[usize], positional: bool, seed: u64) -> f64 {
    assert_eq!(perm.len(), NUM_FEATURE_TOKENS);
    let cfg = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
    let batch = 3;
    let tokens: Vec<Tensor<f64>> = (0..NUM_FEATURE_TOKENS)
        .map(|t| random_tensor(batch, 8, seed * 100 + t as u64))
        .collect();
    let cls = random_tensor(1, 8, seed * 100 + 50);
    let sep = random_tensor(1, 8, seed * 100 + 51);
    let positions = positional_encoding(SEQ_LEN, 8).unwrap();

    let run = |order: &[usize]| -> Tensor<f64> {
        let mut tape = Tape::with_params(&store);
        let vars: Vec<_> = order.iter().map(|&i| tape.constant(tokens[i].clone())).collect();
        let c = tape.constant(cls.clone());
        let s = tape.constant(sep.clone());
        let seq = build_sequence(&mut tape, &vars, c, s, positional.then_some(&positions)).unwrap();
        let h = encoder.forward_cls(&mut tape, seq, SEQ_LEN, None).unwrap();
        tape.value(h).clone()
    };
    let identity: Vec<usize> = (0..NUM_FEATURE_TOKENS).collect();
    let a = run(&identity);
    let b = run(perm);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
