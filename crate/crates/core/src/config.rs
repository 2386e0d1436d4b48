//! Flat `key = value` run configuration.
//!
//! Files must declare `schema_version = 1`. Blank lines and lines starting
//! with `#` are ignored. Overrides (from the command line) are applied after
//! the file, and every problem found is reported at once.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::baselines::{BaselineParams, SvdConfig};
use crate::data::{Dataset, DatasetFormat, SplitRatios};
use crate::fusion::{EncoderConfig, RatingReadout};
use crate::model::{ModalityMode, ModelConfig};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem", self.problems.len())?;
        if self.problems.len() != 1 {
            f.write_str("s")?;
        }
        f.write_str("):")?;
        for p in &self.problems {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub format: DatasetFormat,
    pub manifest: Option<PathBuf>,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,
    pub store_title: Option<PathBuf>,
    pub store_intro: Option<PathBuf>,
    pub store_poster: Option<PathBuf>,
    /// Fill modalities without a store path with seeded N(0, 1) vectors.
    pub synthetic_stores: bool,
    pub synthetic_seed: u64,
    pub mode: ModalityMode,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub id_dim: usize,
    pub hidden_dim: usize,
    pub zip_buckets: usize,
    pub positional: bool,
    pub readout: RatingReadout,
    pub model_seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub sweep_lrs: Vec<f64>,
    pub cf_neighbours: usize,
    pub cf_min_overlap: usize,
    pub svd_k: usize,
    pub svd_lr: f64,
    pub svd_reg: f64,
    pub svd_epochs: usize,
    pub svd_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        let ratios = SplitRatios::default();
        let svd = SvdConfig::default();
        let cf = BaselineParams::default();
        Self {
            dataset_dir: PathBuf::from("data/ml-100k"),
            format: DatasetFormat::Ml100k,
            manifest: None,
            split_train: ratios.train,
            split_val: ratios.val,
            split_test: ratios.test,
            split_seed: 42,
            store_title: None,
            store_intro: None,
            store_poster: None,
            synthetic_stores: false,
            synthetic_seed: 7,
            mode: ModalityMode::Single,
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            ffn_dim: enc.ffn_dim,
            dropout: enc.dropout,
            id_dim: 64,
            hidden_dim: 256,
            zip_buckets: 1000,
            positional: true,
            readout: RatingReadout::Expectation,
            model_seed: 7,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            patience: train.patience,
            seed: train.seed,
            sweep_lrs: vec![0.001, 0.0005, 0.0001],
            cf_neighbours: cf.neighbours,
            cf_min_overlap: cf.min_overlap,
            svd_k: svd.k,
            svd_lr: svd.lr,
            svd_reg: svd.reg,
            svd_epochs: svd.epochs,
            svd_seed: svd.seed,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "schema_version" => {
                let n: u32 = parse(key, v)?;
                if n != SCHEMA_VERSION {
                    return Err(format!("schema_version {n} is not supported (expected {SCHEMA_VERSION})"));
                }
            }
            "dataset_dir" => self.dataset_dir = PathBuf::from(v),
            "format" => self.format = parse(key, v)?,
            "manifest" => self.manifest = opt_path(v),
            "split_train" => self.split_train = parse(key, v)?,
            "split_val" => self.split_val = parse(key, v)?,
            "split_test" => self.split_test = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "store_title" => self.store_title = opt_path(v),
            "store_intro" => self.store_intro = opt_path(v),
            "store_poster" => self.store_poster = opt_path(v),
            "synthetic_stores" => self.synthetic_stores = parse_bool(key, v)?,
            "synthetic_seed" => self.synthetic_seed = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "id_dim" => self.id_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "zip_buckets" => self.zip_buckets = parse(key, v)?,
            "positional" => self.positional = parse_bool(key, v)?,
            "readout" => self.readout = parse(key, v)?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "sweep_lrs" => {
                self.sweep_lrs = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "cf_neighbours" => self.cf_neighbours = parse(key, v)?,
            "cf_min_overlap" => self.cf_min_overlap = parse(key, v)?,
            "svd_k" => self.svd_k = parse(key, v)?,
            "svd_lr" => self.svd_lr = parse(key, v)?,
            "svd_reg" => self.svd_reg = parse(key, v)?,
            "svd_epochs" => self.svd_epochs = parse(key, v)?,
            "svd_seed" => self.svd_seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key in canonical order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let lrs: Vec<String> = self.sweep_lrs.iter().map(|v| v.to_string()).collect();
        vec![
            ("schema_version", SCHEMA_VERSION.to_string()),
            ("dataset_dir", self.dataset_dir.display().to_string()),
            ("format", self.format.to_string()),
            ("manifest", show_path(&self.manifest)),
            ("split_train", self.split_train.to_string()),
            ("split_val", self.split_val.to_string()),
            ("split_test", self.split_test.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("store_title", show_path(&self.store_title)),
            ("store_intro", show_path(&self.store_intro)),
            ("store_poster", show_path(&self.store_poster)),
            ("synthetic_stores", self.synthetic_stores.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("mode", self.mode.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("id_dim", self.id_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("zip_buckets", self.zip_buckets.to_string()),
            ("positional", self.positional.to_string()),
            ("readout", self.readout.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("sweep_lrs", lrs.join(",")),
            ("cf_neighbours", self.cf_neighbours.to_string()),
            ("cf_min_overlap", self.cf_min_overlap.to_string()),
            ("svd_k", self.svd_k.to_string()),
            ("svd_lr", self.svd_lr.to_string()),
            ("svd_reg", self.svd_reg.to_string()),
            ("svd_epochs", self.svd_epochs.to_string()),
            ("svd_seed", self.svd_seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses config text on top of the defaults. `origin` names the source
    /// in messages.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        let mut saw_version = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("{origin}:{}: expected key = value", n + 1));
                continue;
            };
            let k = k.trim();
            saw_version |= k == "schema_version";
            if let Err(e) = cfg.set(k, v) {
                problems.push(format!("{origin}:{}: {e}", n + 1));
            }
        }
        if !saw_version {
            problems.push(format!("{origin}: missing schema_version = {SCHEMA_VERSION}"));
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError { problems })
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            problems: vec![format!("{}: {e}", path.display())],
        })?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Builds a config from an optional file plus `key=value` overrides and
    /// validates the result.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut problems = Vec::new();
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                problems.push(e);
            }
        }
        if let Err(e) = cfg.validate() {
            problems.extend(e.problems);
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError { problems })
        }
    }

    /// Value checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        if let Err(e) = self.ratios().validate() {
            p.push(e.to_string());
        }
        if let Err(e) = self.encoder().validate() {
            p.push(e.to_string());
        }
        if !self.d_model.is_multiple_of(2) {
            p.push(format!("d_model {} must be even", self.d_model));
        }
        for (name, v) in [
            ("id_dim", self.id_dim),
            ("hidden_dim", self.hidden_dim),
            ("zip_buckets", self.zip_buckets),
            ("batch_size", self.batch_size),
            ("cf_neighbours", self.cf_neighbours),
            ("svd_k", self.svd_k),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr", self.lr), ("svd_lr", self.svd_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.svd_reg >= 0.0 && self.svd_reg.is_finite()) {
            p.push(format!("svd_reg must be non-negative, got {}", self.svd_reg));
        }
        if self.sweep_lrs.is_empty() || self.sweep_lrs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            p.push(format!("sweep_lrs must be positive values, got {:?}", self.sweep_lrs));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }

    /// Existence of every referenced input path.
    pub fn check_paths(&self, need_dataset: bool, need_manifest: bool) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        if need_dataset && !self.dataset_dir.is_dir() {
            p.push(format!("dataset_dir {} is not a directory", self.dataset_dir.display()));
        }
        if need_manifest {
            match &self.manifest {
                Some(m) if !m.is_file() => p.push(format!("manifest {} does not exist", m.display())),
                _ => {}
            }
        }
        for (name, path) in [
            ("store_title", &self.store_title),
            ("store_intro", &self.store_intro),
            ("store_poster", &self.store_poster),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    p.push(format!("{name} {} does not exist", path.display()));
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems: p })
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            id_dim: self.id_dim,
            hidden_dim: self.hidden_dim,
            zip_buckets: self.zip_buckets,
            positional: self.positional,
            readout: self.readout,
            ..ModelConfig::for_dataset(ds)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            mode: self.mode,
        }
    }

    pub fn baseline_params(&self) -> BaselineParams {
        BaselineParams {
            neighbours: self.cf_neighbours,
            min_overlap: self.cf_min_overlap,
            svd: SvdConfig {
                k: self.svd_k,
                lr: self.svd_lr,
                reg: self.svd_reg,
                epochs: self.svd_epochs,
                seed: self.svd_seed,
                ..SvdConfig::default()
            },
        }
    }
}
