//! Neighbourhood collaborative filtering, biased matrix factorization and a
//! global-mean reference predictor.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::RatingRecord;
use crate::train::{rmse, EvalReport};
use crate::{Error, Result};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

fn clamp_rating(x: f64) -> f64 {
    x.clamp(MIN_RATING, MAX_RATING)
}

/// Sparse user x item ratings with dense internal indices.
#[derive(Clone, Debug)]
pub struct RatingsMatrix {
    user_index: HashMap<u32, usize>,
    item_index: HashMap<u32, usize>,
    /// Per user, `(item, rating)` sorted by item.
    by_user: Vec<Vec<(usize, f64)>>,
    /// Per item, `(user, rating)` sorted by user.
    by_item: Vec<Vec<(usize, f64)>>,
    user_mean: Vec<f64>,
    item_mean: Vec<f64>,
    global_mean: f64,
}

impl RatingsMatrix {
    /// Indices follow ascending raw id. A repeated (user, item) pair keeps the
    /// last rating.
    pub fn from_records(records: &[RatingRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("no ratings to build a matrix from".into()));
        }
        let index = |ids: &mut Vec<u32>| -> HashMap<u32, usize> {
            ids.sort_unstable();
            ids.dedup();
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
        };
        let user_index = index(&mut records.iter().map(|r| r.user_id).collect());
        let item_index = index(&mut records.iter().map(|r| r.movie_id).collect());
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for r in records {
            if !(1..=5).contains(&r.rating) {
                return Err(Error::Invalid(format!("rating {} outside 1..=5", r.rating)));
            }
            cells.insert((user_index[&r.user_id], item_index[&r.movie_id]), r.rating as f64);
        }
        let mut by_user = vec![Vec::new(); user_index.len()];
        let mut by_item = vec![Vec::new(); item_index.len()];
        for (&(u, i), &r) in &cells {
            by_user[u].push((i, r));
            by_item[i].push((u, r));
        }
        by_user.iter_mut().for_each(|v| v.sort_unstable_by_key(|&(i, _)| i));
        by_item.iter_mut().for_each(|v| v.sort_unstable_by_key(|&(u, _)| u));
        let mean = |v: &Vec<(usize, f64)>| v.iter().map(|&(_, r)| r).sum::<f64>() / v.len() as f64;
        let user_mean = by_user.iter().map(mean).collect();
        let item_mean = by_item.iter().map(mean).collect();
        let global_mean = cells.values().sum::<f64>() / cells.len() as f64;
        Ok(Self {
            user_index,
            item_index,
            by_user,
            by_item,
            user_mean,
            item_mean,
            global_mean,
        })
    }

    pub fn n_users(&self) -> usize {
        self.by_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.by_item.len()
    }

    pub fn n_ratings(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn user(&self, id: u32) -> Option<usize> {
        self.user_index.get(&id).copied()
    }

    pub fn item(&self, id: u32) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    pub fn user_mean(&self, id: u32) -> Option<f64> {
        self.user(id).map(|u| self.user_mean[u])
    }

    pub fn item_mean(&self, id: u32) -> Option<f64> {
        self.item(id).map(|i| self.item_mean[i])
    }

    /// Observed `(user index, item index, rating)` triples in user-major order.
    pub fn triples(&self) -> Vec<(usize, usize, f64)> {
        self.by_user
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().map(move |&(i, r)| (u, i, r)))
            .collect()
    }
}

/// Cosine of two sparse vectors over their shared keys after subtracting
/// the given centers. `None` with fewer than `min_overlap` shared keys or a
/// zero norm.
fn centered_cosine(
    a: &[(usize, f64)],
    b: &[(usize, f64)],
    center_a: impl Fn(usize) -> f64,
    center_b: impl Fn(usize) -> f64,
    min_overlap: usize,
) -> Option<f64> {
    let (mut i, mut j) = (0, 0);
    let (mut dot, mut na, mut nb, mut n) = (0.0, 0.0, 0.0, 0usize);
    while i < a.len() && j < b.len() {
        let (ka, kb) = (a[i].0, b[j].0);
        if ka < kb {
            i += 1;
        } else if kb < ka {
            j += 1;
        } else {
            let x = a[i].1 - center_a(ka);
            let y = b[j].1 - center_b(kb);
            dot += x * y;
            na += x * x;
            nb += y * y;
            n += 1;
            i += 1;
            j += 1;
        }
    }
    if n < min_overlap || na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// Dense symmetric similarity table; NaN marks an undefined pair.
#[derive(Clone, Debug)]
struct SimilarityTable {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityTable {
    fn build(n: usize, sim: impl Fn(usize, usize) -> Option<f64> + Sync) -> Self {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|a| (0..n).map(|b| if b > a { sim(a, b).unwrap_or(f64::NAN) } else { f64::NAN }).collect())
            .collect();
        let mut values = vec![f64::NAN; n * n];
        for (a, row) in rows.iter().enumerate() {
            for b in a + 1..n {
                values[a * n + b] = row[b];
                values[b * n + a] = row[b];
            }
        }
        Self { n, values }
    }

    fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n + b]
    }
}

/// Weighted mean-centered neighbour estimate: the `k` candidates with the
/// largest positive similarity (ties by index), each contributing
/// `sim * (rating - neighbour mean)`. `None` when no candidate qualifies.
fn neighbour_estimate(
    candidates: impl Iterator<Item = (usize, f64, f64)>,
    k: usize,
) -> Option<f64> {
    let mut cands: Vec<(usize, f64, f64)> = candidates.filter(|&(_, s, _)| s > 0.0).collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(k);
    if cands.is_empty() {
        return None;
    }
    let num: f64 = cands.iter().map(|&(_, s, dev)| s * dev).sum();
    let den: f64 = cands.iter().map(|&(_, s, _)| s).sum();
    Some(num / den)
}

/// User-based CF: cosine on mean-centered co-rated vectors.
#[derive(Clone, Debug)]
pub struct UserCf {
    pub k: usize,
    pub min_overlap: usize,
    sims: SimilarityTable,
}

impl UserCf {
    pub fn fit(m: &RatingsMatrix, k: usize, min_overlap: usize) -> Self {
        let sims = SimilarityTable::build(m.n_users(), |a, b| {
            centered_cosine(
                &m.by_user[a],
                &m.by_user[b],
                |_| m.user_mean[a],
                |_| m.user_mean[b],
                min_overlap,
            )
        });
        Self { k, min_overlap, sims }
    }

    /// NaN when the pair has no defined similarity.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.sims.get(a, b)
    }

    pub fn predict(&self, m: &RatingsMatrix, user: u32, item: u32) -> f64 {
        let fallback = m.item_mean(item).unwrap_or(m.global_mean);
        let (Some(u), Some(i)) = (m.user(user), m.item(item)) else {
            return clamp_rating(fallback);
        };
        let cands = m.by_item[i]
            .iter()
            .filter(|&&(v, _)| v != u)
            .map(|&(v, r)| (v, self.sims.get(u, v), r - m.user_mean[v]));
        match neighbour_estimate(cands, self.k) {
            Some(dev) => clamp_rating(m.user_mean[u] + dev),
            None => clamp_rating(fallback),
        }
    }
}

/// Item-based CF: adjusted cosine (co-rating users' means removed) between
/// item columns, predictions centered on item means.
#[derive(Clone, Debug)]
pub struct ItemCf {
    pub k: usize,
    pub min_overlap: usize,
    sims: SimilarityTable,
}

impl ItemCf {
    pub fn fit(m: &RatingsMatrix, k: usize, min_overlap: usize) -> Self {
        let um = &m.user_mean;
        let sims = SimilarityTable::build(m.n_items(), |a, b| {
            centered_cosine(&m.by_item[a], &m.by_item[b], |u| um[u], |u| um[u], min_overlap)
        });
        Self { k, min_overlap, sims }
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.sims.get(a, b)
    }

    pub fn predict(&self, m: &RatingsMatrix, user: u32, item: u32) -> f64 {
        let fallback = m.user_mean(user).unwrap_or(m.global_mean);
        let (Some(u), Some(i)) = (m.user(user), m.item(item)) else {
            return clamp_rating(fallback);
        };
        let cands = m.by_user[u]
            .iter()
            .filter(|&&(j, _)| j != i)
            .map(|&(j, r)| (j, self.sims.get(i, j), r - m.item_mean[j]));
        match neighbour_estimate(cands, self.k) {
            Some(dev) => clamp_rating(m.item_mean[i] + dev),
            None => clamp_rating(fallback),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdConfig {
    pub k: usize,
    pub lr: f64,
    pub reg: f64,
    pub epochs: usize,
    /// Standard deviation of the initial factor entries.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            k: 50,
            lr: 0.005,
            reg: 0.02,
            epochs: 30,
            init_std: 0.1,
            seed: 42,
        }
    }
}

/// Biased matrix factorization `mu + b_u + b_i + p_u . q_i`.
#[derive(Clone, Debug)]
pub struct FactorModel {
    pub k: usize,
    pub mu: f64,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    /// Row-major `n_users x k`.
    pub p: Vec<f64>,
    /// Row-major `n_items x k`.
    pub q: Vec<f64>,
}

impl FactorModel {
    fn raw(&self, u: usize, i: usize) -> f64 {
        let k = self.k;
        let dot: f64 = self.p[u * k..(u + 1) * k]
            .iter()
            .zip(&self.q[i * k..(i + 1) * k])
            .map(|(a, b)| a * b)
            .sum();
        self.mu + self.user_bias[u] + self.item_bias[i] + dot
    }

    /// Unknown users or items contribute no bias and no factors.
    pub fn predict(&self, m: &RatingsMatrix, user: u32, item: u32) -> f64 {
        let est = match (m.user(user), m.item(item)) {
            (Some(u), Some(i)) => self.raw(u, i),
            (Some(u), None) => self.mu + self.user_bias[u],
            (None, Some(i)) => self.mu + self.item_bias[i],
            (None, None) => self.mu,
        };
        clamp_rating(est)
    }

    /// Sum over observed entries of the squared error plus `reg` times the
    /// squared norms of the parameters that entry touches.
    pub fn objective(&self, m: &RatingsMatrix, reg: f64) -> f64 {
        let k = self.k;
        let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        m.triples()
            .iter()
            .map(|&(u, i, r)| {
                let e = r - self.raw(u, i);
                let penalty = self.user_bias[u].powi(2)
                    + self.item_bias[i].powi(2)
                    + norm2(&self.p[u * k..(u + 1) * k])
                    + norm2(&self.q[i * k..(i + 1) * k]);
                e * e + reg * penalty
            })
            .sum()
    }

    /// Unclamped RMSE over the training entries.
    pub fn train_rmse(&self, m: &RatingsMatrix) -> f64 {
        let t = m.triples();
        let se: f64 = t.iter().map(|&(u, i, r)| (r - self.raw(u, i)).powi(2)).sum();
        (se / t.len() as f64).sqrt()
    }
}

/// Plain SGD over shuffled observed entries; `on_epoch` sees the model after
/// every epoch.
pub fn svd_train(
    m: &RatingsMatrix,
    cfg: &SvdConfig,
    mut on_epoch: impl FnMut(usize, &FactorModel),
) -> Result<FactorModel> {
    if cfg.k == 0 {
        return Err(Error::Invalid("factor count k must be at least 1".into()));
    }
    if cfg.k > m.n_users().min(m.n_items()) {
        return Err(Error::Invalid(format!(
            "k = {} exceeds min(users, items) = {}",
            cfg.k,
            m.n_users().min(m.n_items())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std)
        .map_err(|e| Error::Invalid(format!("factor init: {e}")))?;
    let k = cfg.k;
    let mut model = FactorModel {
        k,
        mu: m.global_mean,
        user_bias: vec![0.0; m.n_users()],
        item_bias: vec![0.0; m.n_items()],
        p: (0..m.n_users() * k).map(|_| normal.sample(&mut rng)).collect(),
        q: (0..m.n_items() * k).map(|_| normal.sample(&mut rng)).collect(),
    };
    let mut triples = m.triples();
    let (lr, reg) = (cfg.lr, cfg.reg);
    for epoch in 1..=cfg.epochs {
        triples.shuffle(&mut rng);
        for &(u, i, r) in &triples {
            let e = r - model.raw(u, i);
            model.user_bias[u] += lr * (e - reg * model.user_bias[u]);
            model.item_bias[i] += lr * (e - reg * model.item_bias[i]);
            let (pu, qi) = (u * k, i * k);
            for f in 0..k {
                let (a, b) = (model.p[pu + f], model.q[qi + f]);
                model.p[pu + f] += lr * (e * b - reg * a);
                model.q[qi + f] += lr * (e * a - reg * b);
            }
        }
        let finite = model.user_bias.iter().chain(&model.item_bias).chain(&model.p).chain(&model.q).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Numeric(format!(
                "matrix factorization diverged at epoch {epoch} with lr {lr}; lower the learning rate"
            )));
        }
        on_epoch(epoch, &model);
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    UserCf,
    ItemCf,
    Svd,
    GlobalMean,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [Self::UserCf, Self::ItemCf, Self::Svd, Self::GlobalMean];

    pub fn name(self) -> &'static str {
        match self {
            Self::UserCf => "user_cf",
            Self::ItemCf => "item_cf",
            Self::Svd => "svd",
            Self::GlobalMean => "global_mean",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown baseline method {s:?} (expected user_cf, item_cf, svd or global_mean)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams {
    pub neighbours: usize,
    pub min_overlap: usize,
    pub svd: SvdConfig,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            neighbours: 40,
            min_overlap: 2,
            svd: SvdConfig::default(),
        }
    }
}

/// A fitted baseline ready to score (user, item) pairs.
pub enum Fitted {
    UserCf(UserCf),
    ItemCf(ItemCf),
    Svd(FactorModel),
    GlobalMean,
}

impl Fitted {
    pub fn fit(method: BaselineMethod, m: &RatingsMatrix, params: &BaselineParams) -> Result<Self> {
        Ok(match method {
            BaselineMethod::UserCf => Self::UserCf(UserCf::fit(m, params.neighbours, params.min_overlap)),
            BaselineMethod::ItemCf => Self::ItemCf(ItemCf::fit(m, params.neighbours, params.min_overlap)),
            BaselineMethod::Svd => Self::Svd(svd_train(m, &params.svd, |_, _| {})?),
            BaselineMethod::GlobalMean => Self::GlobalMean,
        })
    }

    pub fn predict(&self, m: &RatingsMatrix, user: u32, item: u32) -> f64 {
        match self {
            Self::UserCf(cf) => cf.predict(m, user, item),
            Self::ItemCf(cf) => cf.predict(m, user, item),
            Self::Svd(f) => f.predict(m, user, item),
            Self::GlobalMean => m.global_mean,
        }
    }

    pub fn rmse(&self, m: &RatingsMatrix, records: &[RatingRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Invalid("cannot evaluate on an empty split".into()));
        }
        let pred: Vec<f64> = records
            .par_iter()
            .map(|r| self.predict(m, r.user_id, r.movie_id))
            .collect();
        let truth: Vec<f64> = records.iter().map(|r| r.rating as f64).collect();
        rmse(&truth, &pred)
    }
}

/// Fits `method` on `train` and reports RMSE on every split, in the same row
/// format as the fusion model's results.
pub fn baseline_report(
    dataset: &str,
    method: BaselineMethod,
    params: &BaselineParams,
    train: &[RatingRecord],
    val: &[RatingRecord],
    test: &[RatingRecord],
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Invalid("empty test split".into()));
    }
    let start = Instant::now();
    let m = RatingsMatrix::from_records(train)?;
    let fitted = Fitted::fit(method, &m, params)?;
    let rmse_val = if val.is_empty() { f64::NAN } else { fitted.rmse(&m, val)? };
    Ok(EvalReport {
        dataset: dataset.to_string(),
        modality_mode: method.name().to_string(),
        lr: (method == BaselineMethod::Svd).then_some(params.svd.lr),
        rmse_train: fitted.rmse(&m, train)?,
        rmse_val,
        rmse_test: fitted.rmse(&m, test)?,
        epochs: if method == BaselineMethod::Svd { params.svd.epochs } else { 0 },
        seconds: start.elapsed().as_secs_f64(),
        curve: Vec::new(),
    })
}
