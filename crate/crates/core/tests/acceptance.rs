//! Acceptance criteria A1 to A7, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines always print. The
//! MovieLens 100K release is read from `FUSIONREC_ML100K` or
//! `data/ml-100k` at the workspace root.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::grad::{model_gradient_error, op_gradient_errors, TOLERANCE as GRAD_TOLERANCE};
use common::invariants::*;
use common::toy::{overfit_toy, OVERFIT_EPOCHS, OVERFIT_TARGET};
use common::{cf_oracle_gap, ml100k_dir, random_grid};
use fusionrec::baselines::{baseline_report, BaselineMethod, BaselineParams};
use fusionrec::data::{read_manifest, split_dataset, write_manifest, Dataset, DatasetFormat, SplitRatios, Splits};
use fusionrec::embed::{EmbeddingStore, Modality, STORE_DIM};
use fusionrec::fusion::EncoderConfig;
use fusionrec::model::{Featurizer, ModalityMode, ModelConfig, Stores};
use fusionrec::train::{append_results, lr_sweep, run_experiment, Experiment, TrainConfig, RESULTS_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPLIT_SEED: u64 = 42;

const A1_USERS: usize = 943;
const A1_ITEMS: usize = 1682;
const A1_RATINGS: usize = 100_000;
const A1_SPARSITY_PERCENT: &str = "93.695";
const A1_SPLIT: [usize; 3] = [90_000, 5_000, 5_000];
const A1_BUDGET: Duration = Duration::from_secs(10);

const A2_BUDGET: Duration = Duration::from_secs(60);

const A3_PE_SAMPLES: usize = 20;
const A3_PERMUTATIONS: usize = 20;

const A4_BUDGET: Duration = Duration::from_secs(120);

const A5_LR: f64 = 0.0005;
/// Epoch budget for the end-to-end run; at most the ten epochs allowed.
const A5_EPOCHS: usize = 1;
const A5_MAX_RMSE: f64 = 1.05;
const A5_MODEL_SEED: u64 = 7;
const A5_TRAIN_SEED: u64 = 42;
const A5_STORE_SEED: u64 = 1;

const A6_MATRICES: usize = 200;
const A6_ORACLE_TOLERANCE: f64 = 1e-10;
const A6_METHOD_BAND: (f64, f64) = (0.90, 1.15);
const A6_GLOBAL_BAND: (f64, f64) = (1.10, 1.15);

const A7_LRS: [f64; 3] = [0.001, 0.0005, 0.0001];

type Outcome = Result<String, String>;
type Check = (&'static str, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn load_ml100k() -> Result<(Dataset, Splits), String> {
    let dir = ml100k_dir()?;
    let ds = Dataset::load(&dir, DatasetFormat::Ml100k).map_err(|e| e.to_string())?;
    let splits = split_dataset(&ds.ratings, SplitRatios::default(), SPLIT_SEED).map_err(|e| e.to_string())?;
    Ok((ds, splits))
}

fn a1() -> Outcome {
    let start = Instant::now();
    let dir = ml100k_dir()?;
    let ds = Dataset::load(&dir, DatasetFormat::Ml100k).map_err(|e| e.to_string())?;
    let stats = ds.stats().map_err(|e| e.to_string())?;
    let splits = split_dataset(&ds.ratings, SplitRatios::default(), SPLIT_SEED).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("manifest.csv");
    let file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
    write_manifest(std::io::BufWriter::new(file), &ds.ratings, &splits.labels).map_err(|e| e.to_string())?;
    let reread = Splits::from_labeled(&read_manifest(&path).map_err(|e| e.to_string())?);
    let elapsed = start.elapsed();

    let sparsity = format!("{:.3}", stats.sparsity * 100.0);
    let sizes = [splits.train.len(), splits.val.len(), splits.test.len()];
    let summary = format!(
        "{}/{}/{} sparsity {sparsity}% split {}/{}/{} in {:.2}s",
        stats.n_users,
        stats.n_items,
        stats.n_ratings,
        sizes[0],
        sizes[1],
        sizes[2],
        elapsed.as_secs_f64()
    );
    ensure(
        (stats.n_users, stats.n_items, stats.n_ratings) == (A1_USERS, A1_ITEMS, A1_RATINGS)
            && sparsity == A1_SPARSITY_PERCENT
            && sizes == A1_SPLIT
            && reread == splits
            && elapsed < A1_BUDGET,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn a2() -> Outcome {
    let start = Instant::now();
    let ops = op_gradient_errors();
    let worst_op = ops.iter().cloned().fold(("none", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let model = model_gradient_error();
    let elapsed = start.elapsed();
    let summary = format!(
        "{} op checks, worst {} {:.2e}; full tiny model {:.2e}; limit {GRAD_TOLERANCE:.0e}; {:.1}s",
        ops.len(),
        worst_op.0,
        worst_op.1,
        model,
        elapsed.as_secs_f64()
    );
    let all_ok = ops.iter().all(|(_, e)| *e < GRAD_TOLERANCE) && model < GRAD_TOLERANCE;
    ensure(all_ok && elapsed < A2_BUDGET, || summary.clone())?;
    Ok(summary)
}

fn a3() -> Outcome {
    let pe = pe_max_error(&pe_samples(A3_PE_SAMPLES, 7));
    let rows = (0..10).map(attention_row_sum_error).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut invariant_gap = 0.0f64;
    let mut broken_gap = f64::INFINITY;
    for t in 0..A3_PERMUTATIONS {
        let mut perm: Vec<usize> = (0..10).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            for i in (1..10).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
        }
        invariant_gap = invariant_gap.max(cls_permutation_gap(&perm, false, t as u64));
        broken_gap = broken_gap.min(cls_permutation_gap(&perm, true, t as u64));
    }
    let summary = format!(
        "PE error {pe:.1e} over {A3_PE_SAMPLES} points; attention row-sum error {rows:.1e}; \
         CLS change under {A3_PERMUTATIONS} permutations {invariant_gap:.1e} without positions, \
         at least {broken_gap:.1e} with positions"
    );
    ensure(
        pe <= PE_TOLERANCE && rows < 1e-12 && invariant_gap <= PERMUTATION_TOLERANCE && broken_gap > PERMUTATION_BREAK,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn a4() -> Outcome {
    let start = Instant::now();
    let r = overfit_toy();
    let elapsed = start.elapsed();
    let summary = format!(
        "train RMSE < {OVERFIT_TARGET} at epoch {} of {OVERFIT_EPOCHS}; final {:.4}; {:.1}s",
        r.reached_at.map_or("never".into(), |e| e.to_string()),
        r.final_rmse,
        elapsed.as_secs_f64()
    );
    ensure(r.reached_at.is_some() && elapsed < A4_BUDGET, || summary.clone())?;
    Ok(summary)
}

fn synthetic_stores(ds: &Dataset) -> [EmbeddingStore; 3] {
    let ids = || ds.movies.iter().map(|m| m.movie_id);
    Modality::ALL.map(|m| EmbeddingStore::synthetic(m, ids(), STORE_DIM, A5_STORE_SEED))
}

fn a5() -> Outcome {
    let start = Instant::now();
    let (ds, splits) = load_ml100k()?;
    let global = baseline_report(
        "ml100k",
        BaselineMethod::GlobalMean,
        &BaselineParams::default(),
        &splits.train,
        &splits.val,
        &splits.test,
    )
    .map_err(|e| e.to_string())?
    .rmse_test;
    let feat = Featurizer::new(&ds, 1000);
    let examples = |r| feat.examples(r).map_err(|e| e.to_string());
    let (train, val, test) = (examples(&splits.train)?, examples(&splits.val)?, examples(&splits.test)?);
    let stores = synthetic_stores(&ds);
    let model = ModelConfig::for_dataset(&ds);
    let exp = Experiment {
        dataset: "ml100k",
        model: &model,
        model_seed: A5_MODEL_SEED,
        train: &train,
        val: &val,
        test: &test,
        stores: Stores {
            title: Some(&stores[0]),
            intro: Some(&stores[1]),
            poster: Some(&stores[2]),
        },
    };
    let cfg = TrainConfig {
        lr: A5_LR,
        epochs: A5_EPOCHS,
        seed: A5_TRAIN_SEED,
        mode: ModalityMode::Single,
        ..TrainConfig::default()
    };
    let (_, report) = run_experiment::<f32>(&exp, &cfg, |s| {
        eprintln!("  A5 epoch {}: {}", s.epoch, s.csv_row());
    })
    .map_err(|e| e.to_string())?;
    let summary = format!(
        "test RMSE {:.4} (limit {A5_MAX_RMSE}, global mean {global:.4}) after {} of {A5_EPOCHS} epochs, \
         poster reads {}; {:.0}s",
        report.rmse_test,
        report.epochs,
        stores[2].access_count(),
        start.elapsed().as_secs_f64()
    );
    ensure(
        report.rmse_test <= A5_MAX_RMSE && report.rmse_test < global && stores[2].access_count() == 0,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn a6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..A6_MATRICES {
        let users = rng.random_range(2..=6);
        let items = rng.random_range(2..=6);
        let k = rng.random_range(1..=6);
        let min_overlap = rng.random_range(1..=3);
        let g = random_grid(&mut rng, users, items, 0.0);
        worst = worst.max(cf_oracle_gap(&g, k, min_overlap));
    }
    let (_, splits) = load_ml100k()?;
    let params = BaselineParams::default();
    let mut rows = Vec::new();
    let mut bands_ok = true;
    for method in BaselineMethod::ALL {
        let r = baseline_report("ml100k", method, &params, &splits.train, &splits.val, &splits.test)
            .map_err(|e| e.to_string())?;
        let (lo, hi) = if method == BaselineMethod::GlobalMean { A6_GLOBAL_BAND } else { A6_METHOD_BAND };
        bands_ok &= (lo..=hi).contains(&r.rmse_test);
        rows.push(format!("{} {:.4}", method, r.rmse_test));
    }
    let summary = format!(
        "oracle gap {worst:.1e} over {A6_MATRICES} matrices; test RMSE {}; \
         published baseline values 2.298 to 2.812 not reproduced",
        rows.join(", ")
    );
    ensure(worst <= A6_ORACLE_TOLERANCE && bands_ok, || summary.clone())?;
    Ok(summary)
}

/// Reduced model so that two full sweeps fit the acceptance budget.
fn a7_model(ds: &Dataset) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            ffn_dim: 64,
            dropout: 0.1,
        },
        id_dim: 16,
        hidden_dim: 32,
        ..ModelConfig::for_dataset(ds)
    }
}

fn a7() -> Outcome {
    let (ds, splits) = load_ml100k()?;
    let feat = Featurizer::new(&ds, 1000);
    let examples = |r| feat.examples(r).map_err(|e| e.to_string());
    let (train, val, test) = (examples(&splits.train)?, examples(&splits.val)?, examples(&splits.test)?);
    let stores = synthetic_stores(&ds);
    let model = a7_model(&ds);
    let exp = Experiment {
        dataset: "ml100k",
        model: &model,
        model_seed: 3,
        train: &train,
        val: &val,
        test: &test,
        stores: Stores {
            title: Some(&stores[0]),
            intro: Some(&stores[1]),
            poster: Some(&stores[2]),
        },
    };
    let cfg = TrainConfig {
        epochs: 1,
        mode: ModalityMode::Single,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut tables = Vec::new();
    for run in 0..2 {
        let reports = lr_sweep::<f32>(&exp, &cfg, &A7_LRS, |_, _| {}).map_err(|e| e.to_string())?;
        let path = tmp.path().join(format!("results{run}.csv"));
        append_results(&path, &reports).map_err(|e| e.to_string())?;
        tables.push(std::fs::read_to_string(&path).map_err(|e| e.to_string())?);
    }
    let lines: Vec<&str> = tables[0].lines().collect();
    let header_ok = lines.first() == Some(&RESULTS_HEADER);
    let rows: Vec<Vec<&str>> = lines.iter().skip(1).map(|l| l.split(',').collect()).collect();
    let width = RESULTS_HEADER.split(',').count();
    let rows_ok = rows.len() == A7_LRS.len()
        && rows.iter().zip(A7_LRS).all(|(r, lr)| {
            r.len() == width
                && r[0] == "ml100k"
                && r[1] == "single"
                && r[2].parse::<f64>() == Ok(lr)
                && r[3..6].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
        });
    // seconds (last column) is wall-clock and excluded from the comparison
    let strip = |t: &str| -> Vec<String> {
        t.lines().map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string()).collect()
    };
    let deterministic = strip(&tables[0]) == strip(&tables[1]);
    let test_rmses: Vec<&str> = rows.iter().map(|r| r.get(5).copied().unwrap_or("?")).collect();
    let summary = format!(
        "{} rows for lr {:?}, header {}, repeat run identical: {deterministic}; test RMSE {}",
        rows.len(),
        A7_LRS,
        if header_ok { "ok" } else { "wrong" },
        test_rmses.join("/")
    );
    ensure(header_ok && rows_ok && deterministic, || summary.clone())?;
    Ok(summary)
}

fn main() -> ExitCode {
    let checks: [Check; 7] = [
        ("A1", "dataset fidelity", a1),
        ("A2", "gradient checks", a2),
        ("A3", "fusion invariants", a3),
        ("A4", "toy overfit", a4),
        ("A5", "end-to-end single-modal", a5),
        ("A6", "baselines", a6),
        ("A7", "sweep harness", a7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let mut failed = 0;
    for (id, name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
