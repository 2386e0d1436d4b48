//! Fixtures and independent reference implementations shared by the
//! integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod grad;
pub mod invariants;
pub mod toy;

use std::path::PathBuf;

use fusionrec::data::{Dataset, DatasetFormat, Gender, MovieMeta, Occupation, RatingRecord, UserProfile};
use fusionrec::embed::{EmbeddingStore, Modality};
use fusionrec::fusion::EncoderConfig;
use fusionrec::model::{Example, Featurizer, ModelConfig};
use fusionrec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_STORE_DIM: usize = 4;

/// Four users, five movies, ten ratings covering every rating level twice.
pub fn tiny_dataset() -> Dataset {
    let occupations = ["technician", "student", "writer", "other"];
    let users = (1..=4u32)
        .map(|u| UserProfile {
            user_id: u,
            age: 15 + 9 * u,
            gender: if u % 2 == 0 { Gender::F } else { Gender::M },
            occupation: Occupation::Named(occupations[u as usize - 1].into()),
            zip: format!("{}", 85700 + 11 * u),
        })
        .collect();
    let movies = (1..=5u32)
        .map(|m| MovieMeta {
            movie_id: m,
            title: format!("Movie {m} (199{m})"),
            genres: vec![m as usize % 19, (3 * m as usize + 1) % 19],
            release_year: Some(1990 + m as i32),
        })
        .collect();
    let pairs = [(1, 1), (1, 2), (2, 3), (2, 4), (3, 5), (3, 1), (4, 2), (4, 4), (1, 5), (2, 1)];
    let ratings = pairs
        .iter()
        .enumerate()
        .map(|(i, &(u, m))| RatingRecord {
            user_id: u,
            movie_id: m,
            rating: (i % 5 + 1) as u8,
            timestamp: 880_000_000 + i as i64,
        })
        .collect();
    Dataset {
        format: DatasetFormat::Ml100k,
        ratings,
        users,
        movies,
    }
}

pub fn tiny_config(ds: &Dataset) -> ModelConfig {
    let mut c = ModelConfig::for_dataset(ds);
    c.encoder = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 6,
        dropout: 0.0,
    };
    c.id_dim = 3;
    c.hidden_dim = 5;
    c.zip_buckets = 7;
    c.store_dim = TINY_STORE_DIM;
    c
}

pub fn tiny_examples(ds: &Dataset) -> Vec<Example> {
    Featurizer::new(ds, 7).examples(&ds.ratings).unwrap()
}

/// Title covers every movie, intro misses movie 5, poster only has 1 and 2.
pub fn tiny_stores() -> [EmbeddingStore; 3] {
    [
        EmbeddingStore::synthetic(Modality::Title, 1..=5, TINY_STORE_DIM, 11),
        EmbeddingStore::synthetic(Modality::Intro, 1..=4, TINY_STORE_DIM, 12),
        EmbeddingStore::synthetic(Modality::Poster, 1..=2, TINY_STORE_DIM, 13),
    ]
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Location of the ML100K release: `FUSIONREC_ML100K`, else `data/ml-100k`
/// at the workspace root.
pub fn ml100k_dir() -> Result<PathBuf, String> {
    let dir = match std::env::var_os("FUSIONREC_ML100K") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k"),
    };
    if dir.join("u.data").is_file() {
        Ok(dir)
    } else {
        Err(format!(
            "ML100K not found at {}; run `python3 scripts/fetch_ml100k.py` or set FUSIONREC_ML100K",
            dir.display()
        ))
    }
}

/// Sinusoidal position table evaluated entry by entry.
pub fn direct_position(pos: usize, dim: usize, d: usize) -> f64 {
    let i = dim / 2;
    let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
    if dim.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Dense rating grid for the neighbourhood oracles; `None` marks a hole.
/// Users and items get raw ids `1..=n` in row and column order.
pub type Grid = Vec<Vec<Option<f64>>>;

pub fn grid_records(g: &Grid) -> Vec<RatingRecord> {
    let mut out = Vec::new();
    for (u, row) in g.iter().enumerate() {
        for (i, r) in row.iter().enumerate() {
            if let Some(r) = r {
                out.push(RatingRecord {
                    user_id: u as u32 + 1,
                    movie_id: i as u32 + 1,
                    rating: *r as u8,
                    timestamp: 0,
                });
            }
        }
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn cosine(pairs: &[(f64, f64)], min_overlap: usize) -> Option<f64> {
    if pairs.len() < min_overlap {
        return None;
    }
    let dot: f64 = pairs.iter().map(|(x, y)| x * y).sum();
    let nx: f64 = pairs.iter().map(|(x, _)| x * x).sum();
    let ny: f64 = pairs.iter().map(|(_, y)| y * y).sum();
    if nx == 0.0 || ny == 0.0 {
        return None;
    }
    Some(dot / (nx.sqrt() * ny.sqrt()))
}

struct GridStats {
    user_mean: Vec<Option<f64>>,
    item_mean: Vec<Option<f64>>,
    global: f64,
}

fn grid_stats(g: &Grid) -> GridStats {
    let n_items = g[0].len();
    let user_mean = g
        .iter()
        .map(|row| mean(&row.iter().flatten().copied().collect::<Vec<_>>()))
        .collect();
    let item_mean = (0..n_items)
        .map(|i| mean(&g.iter().filter_map(|row| row[i]).collect::<Vec<_>>()))
        .collect();
    let all: Vec<f64> = g.iter().flatten().flatten().copied().collect();
    GridStats {
        user_mean,
        item_mean,
        global: mean(&all).unwrap(),
    }
}

/// Weighted deviation over every candidate, sorted by similarity then index,
/// keeping the first `k` with positive similarity.
fn top_k(mut cands: Vec<(usize, f64, f64)>, k: usize) -> Option<f64> {
    cands.retain(|c| c.1 > 0.0);
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cands.truncate(k);
    if cands.is_empty() {
        return None;
    }
    let den: f64 = cands.iter().map(|c| c.1).sum();
    Some(cands.iter().map(|c| c.1 * c.2).sum::<f64>() / den)
}

pub fn oracle_user_sim(g: &Grid, a: usize, b: usize, min_overlap: usize) -> Option<f64> {
    let s = grid_stats(g);
    let (ma, mb) = (s.user_mean[a]?, s.user_mean[b]?);
    let pairs: Vec<(f64, f64)> = (0..g[0].len())
        .filter_map(|i| Some((g[a][i]? - ma, g[b][i]? - mb)))
        .collect();
    cosine(&pairs, min_overlap)
}

pub fn oracle_item_sim(g: &Grid, a: usize, b: usize, min_overlap: usize) -> Option<f64> {
    let s = grid_stats(g);
    let pairs: Vec<(f64, f64)> = (0..g.len())
        .filter_map(|u| {
            let m = s.user_mean[u]?;
            Some((g[u][a]? - m, g[u][b]? - m))
        })
        .collect();
    cosine(&pairs, min_overlap)
}

/// User-based prediction for row `u`, column `i` of the grid.
pub fn oracle_user_cf(g: &Grid, u: usize, i: usize, k: usize, min_overlap: usize) -> f64 {
    let s = grid_stats(g);
    let fallback = s.item_mean[i].unwrap_or(s.global);
    let Some(mu) = s.user_mean[u] else {
        return fallback.clamp(1.0, 5.0);
    };
    let cands = (0..g.len())
        .filter(|&v| v != u)
        .filter_map(|v| {
            let r = g[v][i]?;
            let sim = oracle_user_sim(g, u, v, min_overlap)?;
            Some((v, sim, r - s.user_mean[v].unwrap()))
        })
        .collect();
    match top_k(cands, k) {
        Some(dev) => (mu + dev).clamp(1.0, 5.0),
        None => fallback.clamp(1.0, 5.0),
    }
}

/// Item-based prediction for row `u`, column `i` of the grid.
pub fn oracle_item_cf(g: &Grid, u: usize, i: usize, k: usize, min_overlap: usize) -> f64 {
    let s = grid_stats(g);
    let fallback = s.user_mean[u].unwrap_or(s.global);
    let Some(mi) = s.item_mean[i] else {
        return fallback.clamp(1.0, 5.0);
    };
    let cands = (0..g[0].len())
        .filter(|&j| j != i)
        .filter_map(|j| {
            let r = g[u][j]?;
            let sim = oracle_item_sim(g, i, j, min_overlap)?;
            Some((j, sim, r - s.item_mean[j].unwrap()))
        })
        .collect();
    match top_k(cands, k) {
        Some(dev) => (mi + dev).clamp(1.0, 5.0),
        None => fallback.clamp(1.0, 5.0),
    }
}

/// Random grid with ratings in 1..=5, `hole_rate` of the cells left empty.
/// Every row and column keeps at least one rating.
pub fn random_grid(rng: &mut impl Rng, users: usize, items: usize, hole_rate: f64) -> Grid {
    loop {
        let g: Grid = (0..users)
            .map(|_| {
                (0..items)
                    .map(|_| (!rng.random_bool(hole_rate)).then(|| rng.random_range(1..=5) as f64))
                    .collect()
            })
            .collect();
        let rows_ok = g.iter().all(|r| r.iter().any(Option::is_some));
        let cols_ok = (0..items).all(|i| g.iter().any(|r| r[i].is_some()));
        if rows_ok && cols_ok {
            return g;
        }
    }
}

/// Worst disagreement between both CF implementations and the oracles over
/// every cell of `g`.
pub fn cf_oracle_gap(g: &Grid, k: usize, min_overlap: usize) -> f64 {
    use fusionrec::baselines::{ItemCf, RatingsMatrix, UserCf};
    let m = RatingsMatrix::from_records(&grid_records(g)).unwrap();
    let ucf = UserCf::fit(&m, k, min_overlap);
    let icf = ItemCf::fit(&m, k, min_overlap);
    let mut worst = 0.0f64;
    for u in 0..g.len() {
        for i in 0..g[0].len() {
            let (uid, iid) = (u as u32 + 1, i as u32 + 1);
            worst = worst.max((ucf.predict(&m, uid, iid) - oracle_user_cf(g, u, i, k, min_overlap)).abs());
            worst = worst.max((icf.predict(&m, uid, iid) - oracle_item_cf(g, u, i, k, min_overlap)).abs());
        }
    }
    worst
}
