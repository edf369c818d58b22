//! `key = value` configuration files with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::DEFAULT_SLOPE;
use crate::stepsize::{ProjectionStyle, StepComposition, DEFAULT_ETA0};
use crate::trainer::{EngineSettings, OptimizerKind};

/// Every key a configuration may set.
pub const KNOWN_KEYS: &[&str] = &[
    "dataset",
    "n_train",
    "n_test",
    "input_dim",
    "noise_sd",
    "classes",
    "class_spread",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "csv_train",
    "csv_test",
    "target_column",
    "standardize",
    "test_fraction",
    "data_seed",
    "widths",
    "hidden_width",
    "slope",
    "optimizer",
    "eta0",
    "projection_style",
    "ablation",
    "inner_steps",
    "meta_lag",
    "meta_learning_rate",
    "eta_hidden",
    "bypass",
    "adam_rate",
    "hd_hyper_rate",
    "batch_size",
    "eval_batch_size",
    "epochs",
    "seed",
    "grouping",
    "output",
];

const DATASET_CHOICES: &str = "synthetic, synthetic_classification, idx, csv";

/// Where the train and test splits come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Linear regression `y = W*x + ε`; train and test share `W*`.
    Synthetic { n_train: usize, n_test: usize, dim: usize, noise_sd: f64 },
    /// Gaussian class blobs.
    SyntheticClassification { n_train: usize, n_test: usize, dim: usize, classes: usize, spread: f64 },
    /// IDX image/label files; `n_train`/`n_test` keep only the first samples.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        n_train: Option<usize>,
        n_test: Option<usize>,
    },
    /// CSV regression; without a test file the last `test_fraction` of rows is held out.
    Csv { train: PathBuf, test: Option<PathBuf>, target: String, standardize: bool, test_fraction: f64 },
}

/// A fully validated training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    /// Layer widths including input and output; derived from the data when absent.
    pub widths: Option<Vec<usize>>,
    pub hidden_width: usize,
    pub slope: f64,
    pub optimizer: OptimizerKind,
    pub eta0: f64,
    pub projection: ProjectionStyle,
    pub ablation: StepComposition,
    pub inner_steps: usize,
    pub meta_lag: u8,
    pub meta_lr: f64,
    pub eta_hidden: usize,
    pub bypass: bool,
    pub adam_rate: f64,
    pub hd_hyper_rate: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Blocks of 0-based layer indices; `None` means the optimizer's default partition.
    pub grouping: Option<Vec<Vec<usize>>>,
    pub output: PathBuf,
}

impl TrainConfig {
    /// Engine settings derived from this configuration.
    pub fn engine_settings(&self) -> EngineSettings {
        EngineSettings {
            optimizer: self.optimizer,
            eta0: self.eta0,
            projection: self.projection,
            composition: self.ablation,
            meta_lag: self.meta_lag,
            meta_lr: self.meta_lr,
            hidden: self.eta_hidden,
            bypass: self.bypass,
            adam_rate: self.adam_rate,
            hd_hyper_rate: self.hd_hyper_rate,
        }
    }

    /// Parses a key/value map, filling defaults and validating every field.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(bad) = pairs.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key '{bad}'")));
        }
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let dataset_name = get("dataset").unwrap_or("synthetic");
        let dataset = match dataset_name {
            "synthetic" => DatasetSpec::Synthetic {
                n_train: num(pairs, "n_train", 2000)?,
                n_test: num(pairs, "n_test", 2000)?,
                dim: num(pairs, "input_dim", 10)?,
                noise_sd: num(pairs, "noise_sd", 0.1)?,
            },
            "synthetic_classification" => DatasetSpec::SyntheticClassification {
                n_train: num(pairs, "n_train", 2000)?,
                n_test: num(pairs, "n_test", 1000)?,
                dim: num(pairs, "input_dim", 10)?,
                classes: num(pairs, "classes", 3)?,
                spread: num(pairs, "class_spread", 3.0)?,
            },
            "idx" => DatasetSpec::Idx {
                train_images: path(pairs, "train_images")?,
                train_labels: path(pairs, "train_labels")?,
                test_images: path(pairs, "test_images")?,
                test_labels: path(pairs, "test_labels")?,
                n_train: opt_num(pairs, "n_train")?,
                n_test: opt_num(pairs, "n_test")?,
            },
            "csv" => DatasetSpec::Csv {
                train: path(pairs, "csv_train")?,
                test: get("csv_test").map(PathBuf::from),
                target: get("target_column")
                    .ok_or_else(|| Error::Config("csv dataset requires 'target_column'".into()))?
                    .to_string(),
                standardize: flag(pairs, "standardize", true)?,
                test_fraction: num(pairs, "test_fraction", 0.2)?,
            },
            other => {
                return Err(Error::Config(format!("invalid dataset '{other}'; choose one of: {DATASET_CHOICES}")))
            }
        };
        let config = TrainConfig {
            dataset,
            data_seed: num(pairs, "data_seed", 0)?,
            widths: get("widths").map(parse_widths).transpose()?,
            hidden_width: num(pairs, "hidden_width", 32)?,
            slope: num(pairs, "slope", DEFAULT_SLOPE)?,
            optimizer: parse_enum(pairs, "optimizer", OptimizerKind::SamtS)?,
            eta0: num(pairs, "eta0", DEFAULT_ETA0)?,
            projection: parse_enum(pairs, "projection_style", ProjectionStyle::Tanh)?,
            ablation: parse_enum(pairs, "ablation", StepComposition::Full)?,
            inner_steps: num(pairs, "inner_steps", 1)?,
            meta_lag: num(pairs, "meta_lag", 0)?,
            meta_lr: num(pairs, "meta_learning_rate", crate::etamodel::DEFAULT_META_LR)?,
            eta_hidden: num(pairs, "eta_hidden", crate::etamodel::DEFAULT_HIDDEN)?,
            bypass: flag(pairs, "bypass", false)?,
            adam_rate: num(pairs, "adam_rate", crate::optim::DEFAULT_ADAM_RATE)?,
            hd_hyper_rate: num(pairs, "hd_hyper_rate", crate::optim::DEFAULT_HD_HYPER_RATE)?,
            batch_size: num(pairs, "batch_size", 64)?,
            eval_batch_size: num(pairs, "eval_batch_size", 1000)?,
            epochs: num(pairs, "epochs", 1)?,
            seed: num(pairs, "seed", 0)?,
            grouping: get("grouping").map(parse_grouping).transpose()?,
            output: PathBuf::from(get("output").unwrap_or("runs/metrics.csv")),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("inner_steps", self.inner_steps),
            ("hidden_width", self.hidden_width),
            ("eta_hidden", self.eta_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("'{k}' must be at least 1")));
        }
        if !(self.eta0 > 0.0 && self.eta0 < 1.0) {
            return Err(Error::Config(format!("'eta0' must lie in (0, 1), got {}", self.eta0)));
        }
        if self.meta_lag > 1 {
            return Err(Error::Config(format!("'meta_lag' must be 0 or 1, got {}", self.meta_lag)));
        }
        for (k, v) in [("meta_learning_rate", self.meta_lr), ("adam_rate", self.adam_rate), ("hd_hyper_rate", self.hd_hyper_rate)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("'{k}' must be finite and >= 0, got {v}")));
            }
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return Err(Error::Config(format!("'slope' must be finite and >= 0, got {}", self.slope)));
        }
        if let Some(w) = &self.widths {
            if w.len() < 2 || w.contains(&0) {
                return Err(Error::Config("'widths' needs at least two positive entries".into()));
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { n_train, n_test, dim, noise_sd } => {
                if *n_train == 0 || *n_test == 0 || *dim == 0 {
                    return Err(Error::Config("synthetic data needs positive n_train, n_test, input_dim".into()));
                }
                if !(noise_sd.is_finite() && *noise_sd >= 0.0) {
                    return Err(Error::Config("'noise_sd' must be finite and >= 0".into()));
                }
            }
            DatasetSpec::SyntheticClassification { n_train, n_test, dim, classes, spread } => {
                if *n_train == 0 || *n_test == 0 || *dim == 0 || *classes < 2 || !spread.is_finite() {
                    return Err(Error::Config(
                        "synthetic classification needs positive sizes, at least 2 classes, finite spread".into(),
                    ));
                }
            }
            DatasetSpec::Idx { n_train, n_test, .. } => {
                if *n_train == Some(0) || *n_test == Some(0) {
                    return Err(Error::Config("'n_train' and 'n_test' must be positive".into()));
                }
            }
            DatasetSpec::Csv { test_fraction, test, .. } => {
                if test.is_none() && !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config("'test_fraction' must lie in (0, 1)".into()));
                }
            }
        }
        Ok(())
    }
}

fn raw<'a>(pairs: &'a BTreeMap<String, String>, key: &str) -> Option<&'a str> {
    pairs.get(key).map(String::as_str)
}

fn num<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match raw(pairs, key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'"))),
    }
}

fn opt_num<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    raw(pairs, key)
        .map(|v| v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'"))))
        .transpose()
}

fn flag(pairs: &BTreeMap<String, String>, key: &str, default: bool) -> Result<bool> {
    match raw(pairs, key) {
        None => Ok(default),
        Some("true" | "1" | "yes") => Ok(true),
        Some("false" | "0" | "no") => Ok(false),
        Some(v) => Err(Error::Config(format!("invalid value '{v}' for '{key}'; choose one of: true, false"))),
    }
}

fn path(pairs: &BTreeMap<String, String>, key: &str) -> Result<PathBuf> {
    raw(pairs, key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
}

fn parse_enum<T: FromStr<Err = Error>>(pairs: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    raw(pairs, key).map_or(Ok(default), str::parse)
}

/// `"784,100,10"` → `[784, 100, 10]`.
pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("invalid width '{}' in 'widths'", p.trim()))))
        .collect()
}

/// `"0,1;2"` → `[[0, 1], [2]]`.
pub fn parse_grouping(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|block| {
            block
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid layer index '{}' in 'grouping'", p.trim())))
                })
                .collect()
        })
        .collect()
}

/// Parses the text of a configuration file into key/value pairs.
///
/// `#` starts a comment, `[section]` lines only organize the file, and keys are global.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                return Err(Error::Config(format!("{}:{}: malformed section header '{line}'", origin.display(), i + 1)));
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected 'key = value'", origin.display(), i + 1)))?;
        let key = k.trim().to_string();
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("{}:{}: empty key", origin.display(), i + 1)));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("{}:{}: duplicate key '{key}'", origin.display(), i + 1)));
        }
    }
    Ok(out)
}

/// Parses `--key=value` / `--key value` override arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("override '{arg}' must look like --key=value")))?;
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("override '--{body}' is missing a value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

/// Reads `path` (if any), applies `overrides` on top, and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut pairs = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config_text(&text, p)?
        }
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        pairs.insert(k.clone(), v.clone());
    }
    TrainConfig::from_pairs(&pairs)
}
