//! `fusionrec`: ingestion, training, evaluation and baselines from one binary.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fusionrec::baselines::{baseline_report, BaselineMethod};
use fusionrec::config::{ConfigError, RunConfig};
use fusionrec::data::{read_manifest, split_dataset, write_manifest, Dataset, Part, Splits};
use fusionrec::embed::{EmbeddingStore, Modality, STORE_DIM};
use fusionrec::model::{Example, Featurizer, FusionModel, Stores};
use fusionrec::tensor::ParamStore;
use fusionrec::train::{append_results, evaluate_rmse, lr_sweep, run_experiment, EvalReport, Experiment};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const THREADS_VAR: &str = "FUSIONREC_THREADS";

#[derive(Parser)]
#[command(name = "fusionrec", version, about = "Multi-modal transformer rating prediction on MovieLens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MovieLens release, print its statistics and write the split manifest.
    Ingest(Common),
    /// Train the fusion model and append its results row.
    Train(Common),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `val` or `test`.
        #[arg(long, default_value = "test")]
        split: Part,
    },
    /// Fit and score a classic baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// `user_cf`, `item_cf`, `svd` or `global_mean`.
        #[arg(long)]
        method: BaselineMethod,
    },
    /// Train one model per learning rate in `sweep_lrs`.
    Sweep(Common),
    /// Write seeded random title, intro and poster stores for the dataset's movies.
    SynthStores(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value`, with `schema_version = 1`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set dataset_dir=...`: directory holding the MovieLens files.
    #[arg(long)]
    dataset_dir: Option<String>,
    /// Shorthand for `--set format=...`: `ml100k` or `ml1m`.
    #[arg(long)]
    format: Option<String>,
    /// Shorthand for `--set manifest=...`: split manifest CSV to reuse.
    #[arg(long)]
    manifest: Option<String>,
    /// Shorthand for `--set out_dir=...`: every output file goes under it.
    #[arg(long)]
    out_dir: Option<String>,
    /// Shorthand for `--set mode=...`: `single` or `cross`.
    #[arg(long)]
    mode: Option<String>,
    /// Shorthand for `--set lr=...`.
    #[arg(long)]
    lr: Option<String>,
    /// Shorthand for `--set epochs=...`.
    #[arg(long)]
    epochs: Option<String>,
    /// Shorthand for `--set seed=...`: training shuffle and dropout seed.
    #[arg(long)]
    seed: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e.to_string())
    }
}

impl From<fusionrec::Error> for Failure {
    fn from(e: fusionrec::Error) -> Self {
        let code = match &e {
            fusionrec::Error::Config(_) => 2,
            fusionrec::Error::Numeric(_) => 4,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<fusionrec::data::DataError> for Failure {
    fn from(e: fusionrec::data::DataError) -> Self {
        fusionrec::Error::from(e).into()
    }
}

impl From<fusionrec::embed::StoreError> for Failure {
    fn from(e: fusionrec::embed::StoreError) -> Self {
        fusionrec::Error::from(e).into()
    }
}

impl From<fusionrec::tensor::TensorError> for Failure {
    fn from(e: fusionrec::tensor::TensorError) -> Self {
        fusionrec::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: 3, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(e.to_string()))
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Ingest(c) => ingest(&c.resolve()?),
        Command::Train(c) => train(&c.resolve()?),
        Command::Eval { common, checkpoint, split } => eval(&common.resolve()?, &checkpoint, split),
        Command::Baseline { common, method } => baseline(&common.resolve()?, method),
        Command::Sweep(c) => sweep(&c.resolve()?),
        Command::SynthStores(c) => synth_stores(&c.resolve()?),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut overrides = Vec::new();
        let mut problems = Vec::new();
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
                None => problems.push(format!("--set {kv:?}: expected KEY=VALUE")),
            }
        }
        for (key, value) in [
            ("dataset_dir", &self.dataset_dir),
            ("format", &self.format),
            ("manifest", &self.manifest),
            ("out_dir", &self.out_dir),
            ("mode", &self.mode),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
        ] {
            if let Some(v) = value {
                overrides.push((key.to_string(), v.clone()));
            }
        }
        let cfg = RunConfig::resolve(self.config.as_deref(), &overrides);
        match cfg {
            Ok(cfg) if problems.is_empty() => {
                cfg.check_paths(true, true)?;
                Ok(cfg)
            }
            Ok(_) => Err(ConfigError { problems }.into()),
            Err(mut e) => {
                problems.append(&mut e.problems);
                Err(ConfigError { problems }.into())
            }
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn write_run_config(cfg: &RunConfig, dir: &Path) -> CmdResult {
    let text = format!("# fusionrec {VERSION}\n{}", cfg.to_text());
    fs::write(dir.join("run.conf"), text)?;
    Ok(())
}

struct Loaded {
    dataset: Dataset,
    splits: Splits,
}

fn load_data(cfg: &RunConfig) -> Result<Loaded, Failure> {
    let dataset = Dataset::load(&cfg.dataset_dir, cfg.format)?;
    let splits = match &cfg.manifest {
        Some(path) => Splits::from_labeled(&read_manifest(path)?),
        None => split_dataset(&dataset.ratings, cfg.ratios(), cfg.split_seed)?,
    };
    Ok(Loaded { dataset, splits })
}

fn store_path(cfg: &RunConfig, m: Modality) -> Option<&PathBuf> {
    match m {
        Modality::Title => cfg.store_title.as_ref(),
        Modality::Intro => cfg.store_intro.as_ref(),
        Modality::Poster => cfg.store_poster.as_ref(),
    }
}

fn load_stores(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Option<EmbeddingStore>>, Failure> {
    Modality::ALL
        .into_iter()
        .map(|m| {
            if let Some(path) = store_path(cfg, m) {
                let store = EmbeddingStore::load(path)?;
                if store.modality() != m {
                    return Err(Failure::config(format!(
                        "{}: holds {} embeddings, expected {m}",
                        path.display(),
                        store.modality()
                    )));
                }
                if store.dim() != STORE_DIM {
                    return Err(Failure::config(format!(
                        "{}: dimension {} differs from {STORE_DIM}",
                        path.display(),
                        store.dim()
                    )));
                }
                Ok(Some(store))
            } else if cfg.synthetic_stores {
                let ids = ds.movies.iter().map(|mv| mv.movie_id);
                Ok(Some(EmbeddingStore::synthetic(m, ids, STORE_DIM, cfg.synthetic_seed)))
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn stores_view(stores: &[Option<EmbeddingStore>]) -> Stores<'_> {
    Stores {
        title: stores[0].as_ref(),
        intro: stores[1].as_ref(),
        poster: stores[2].as_ref(),
    }
}

fn report_store_access(stores: &[Option<EmbeddingStore>]) {
    let mut line = String::from("store accesses:");
    for (m, s) in Modality::ALL.iter().zip(stores) {
        match s {
            Some(s) => write!(line, " {m}={}", s.access_count()).unwrap(),
            None => write!(line, " {m}=absent").unwrap(),
        }
    }
    println!("{line}");
}

struct Featurized {
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

fn featurize(cfg: &RunConfig, data: &Loaded) -> Result<Featurized, Failure> {
    let f = Featurizer::new(&data.dataset, cfg.zip_buckets);
    Ok(Featurized {
        train: f.examples(&data.splits.train)?,
        val: f.examples(&data.splits.val)?,
        test: f.examples(&data.splits.test)?,
    })
}

fn ingest(cfg: &RunConfig) -> CmdResult {
    let start = Instant::now();
    let ds = Dataset::load(&cfg.dataset_dir, cfg.format)?;
    let stats = ds.stats()?;
    let splits = split_dataset(&ds.ratings, cfg.ratios(), cfg.split_seed)?;
    let dir = out_dir(cfg)?;
    let file = fs::File::create(dir.join("manifest.csv"))?;
    write_manifest(BufWriter::new(file), &ds.ratings, &splits.labels)?;
    let block = format!(
        "Dataset   {}\n{stats}\nSplit     {}/{}/{} (seed {})\n",
        cfg.format,
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.split_seed
    );
    fs::write(dir.join("stats.txt"), &block)?;
    write_run_config(cfg, dir)?;
    print!("{block}");
    eprintln!("ingested in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn train(cfg: &RunConfig) -> CmdResult {
    let data = load_data(cfg)?;
    let stores = load_stores(cfg, &data.dataset)?;
    let ex = featurize(cfg, &data)?;
    let model_cfg = cfg.model_config(&data.dataset);
    let exp = Experiment {
        dataset: cfg.format.name(),
        model: &model_cfg,
        model_seed: cfg.model_seed,
        train: &ex.train,
        val: &ex.val,
        test: &ex.test,
        stores: stores_view(&stores),
    };
    let dir = out_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let (model, report) = run_experiment::<f32>(&exp, &cfg.train_config(), |s| eprintln!("{}", s.csv_row()))?;
    let file = fs::File::create(dir.join("checkpoint.frwt"))?;
    model.params.write_checkpoint(BufWriter::new(file))?;
    fs::write(dir.join("loss_curve.csv"), report.curve_csv())?;
    append_results(dir.join("results.csv"), std::slice::from_ref(&report))?;
    println!("{}", report.csv_row());
    report_store_access(&stores);
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, split: Part) -> CmdResult {
    let data = load_data(cfg)?;
    let stores = load_stores(cfg, &data.dataset)?;
    let records = data.splits.part(split);
    let examples = Featurizer::new(&data.dataset, cfg.zip_buckets).examples(records)?;
    let mut model = FusionModel::<f32>::new(cfg.model_config(&data.dataset), cfg.model_seed)?;
    let saved = ParamStore::<f32>::read_checkpoint(fs::File::open(checkpoint)?)?;
    model.params.load_from(&saved)?;
    let rmse = evaluate_rmse(&model, &examples, &stores_view(&stores), cfg.mode)?;
    let dir = out_dir(cfg)?;
    let path = dir.join("eval.csv");
    let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
    let mut text = String::new();
    if fresh {
        text.push_str("dataset,modality_mode,split,rmse\n");
    }
    writeln!(text, "{},{},{split},{rmse:.6}", cfg.format, cfg.mode).unwrap();
    append(&path, &text)?;
    println!("rmse {split} {rmse:.6}");
    Ok(())
}

fn append(path: &Path, text: &str) -> std::io::Result<()> {
    use std::io::Write;
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?
        .write_all(text.as_bytes())
}

fn baseline(cfg: &RunConfig, method: BaselineMethod) -> CmdResult {
    let data = load_data(cfg)?;
    let s = &data.splits;
    let report = baseline_report(
        cfg.format.name(),
        method,
        &cfg.baseline_params(),
        &s.train,
        &s.val,
        &s.test,
    )?;
    let dir = out_dir(cfg)?;
    write_run_config(cfg, dir)?;
    append_results(dir.join("results.csv"), std::slice::from_ref(&report))?;
    println!("{}", report.csv_row());
    Ok(())
}

fn sweep(cfg: &RunConfig) -> CmdResult {
    let data = load_data(cfg)?;
    let stores = load_stores(cfg, &data.dataset)?;
    let ex = featurize(cfg, &data)?;
    let model_cfg = cfg.model_config(&data.dataset);
    let exp = Experiment {
        dataset: cfg.format.name(),
        model: &model_cfg,
        model_seed: cfg.model_seed,
        train: &ex.train,
        val: &ex.val,
        test: &ex.test,
        stores: stores_view(&stores),
    };
    let dir = out_dir(cfg)?;
    write_run_config(cfg, dir)?;
    let reports: Vec<EvalReport> = lr_sweep::<f32>(&exp, &cfg.train_config(), &cfg.sweep_lrs, |lr, s| {
        eprintln!("lr={lr} {}", s.csv_row())
    })?;
    for r in &reports {
        let lr = r.lr.map(|v| v.to_string()).unwrap_or_default();
        fs::write(dir.join(format!("loss_curve_lr{lr}.csv")), r.curve_csv())?;
        println!("{}", r.csv_row());
    }
    append_results(dir.join("results.csv"), &reports)?;
    Ok(())
}

fn synth_stores(cfg: &RunConfig) -> CmdResult {
    let ds = Dataset::load(&cfg.dataset_dir, cfg.format)?;
    let dir = out_dir(cfg)?.join("stores");
    fs::create_dir_all(&dir)?;
    for m in Modality::ALL {
        let ids = ds.movies.iter().map(|mv| mv.movie_id);
        let store = EmbeddingStore::synthetic(m, ids, STORE_DIM, cfg.synthetic_seed);
        let path = dir.join(format!("{m}.mmeb"));
        store.write_file(&path)?;
        println!("{} {} vectors", path.display(), store.len());
    }
    Ok(())
}
