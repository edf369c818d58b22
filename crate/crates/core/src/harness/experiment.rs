//! End-to-end training runs and the metrics CSV.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{DatasetSpec, TrainConfig};
use crate::data::{load_csv, load_idx_limited, synth_classification, synth_regression, Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::model::{Batch, LossKind, NetworkModel, Targets};
use crate::numerics::Matrix;
use crate::stepsize::{ProjectionStyle, StepComposition};
use crate::trainer::{
    block_partition, build_engines, evaluate, train_epoch, NoHooks, OptimizerKind, SeedStreams, TrainHooks,
    TrainRunState,
};

/// Exact header of every metrics file.
pub const METRICS_HEADER: &str = "epoch,split,loss,metric,wall_ms,eta_mean,eta_min,eta_max";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One line of the metrics CSV. `metric` is accuracy for classification and MSE for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metric: f64,
    pub wall_ms: u128,
    pub eta_mean: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.metric, self.wall_ms, self.eta_mean, self.eta_min, self.eta_max
        )
    }
}

/// Outcome of one run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub optimizer: OptimizerKind,
    pub ablation: StepComposition,
    pub projection: ProjectionStyle,
    pub task: TaskKind,
    pub rows: Vec<MetricsRow>,
    pub final_net: NetworkModel,
    /// Digest of the initial network weights.
    pub init_digest: u64,
    /// Digest of every main and meta batch drawn, in order.
    pub batch_digest: u64,
    pub output: Option<PathBuf>,
}

impl RunSummary {
    pub fn final_test(&self) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == Split::Test)
    }

    pub fn summary_line(&self) -> String {
        let metric_name = match self.task {
            TaskKind::Classification { .. } => "accuracy",
            TaskKind::Regression => "mse",
        };
        let (loss, metric) = self.final_test().map_or((f64::NAN, f64::NAN), |r| (r.loss, r.metric));
        let wall = self.rows.last().map_or(0, |r| r.wall_ms);
        format!(
            "optimizer={} ablation={} projection={} epochs={} test_loss={loss:.6} test_{metric_name}={metric:.6} wall_ms={wall}",
            self.optimizer,
            self.ablation.name(),
            self.projection,
            self.rows.len() / 2,
        )
    }

    /// Metrics file content with `wall_ms` zeroed, for determinism comparisons.
    pub fn csv_without_wall(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&MetricsRow { wall_ms: 0, ..r.clone() }.to_csv_line());
            s.push('\n');
        }
        s
    }
}

/// Loads the train and test splits described by `config`.
pub fn load_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetSpec::Synthetic { n_train, n_test, dim, noise_sd } => {
            let (all, _) = synth_regression(config.data_seed, n_train + n_test, *dim, *noise_sd)?;
            Ok((all.slice(0, *n_train), all.slice(*n_train, n_train + n_test)))
        }
        DatasetSpec::SyntheticClassification { n_train, n_test, dim, classes, spread } => {
            let all = synth_classification(config.data_seed, n_train + n_test, *dim, *classes, *spread)?;
            let test = all.slice(*n_train, n_train + n_test).with_class_count(*classes)?;
            Ok((all.slice(0, *n_train).with_class_count(*classes)?, test))
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, n_train, n_test } => {
            let train = load_idx_limited(train_images, train_labels, *n_train)?;
            let test = load_idx_limited(test_images, test_labels, *n_test)?;
            let (TaskKind::Classification { classes: a }, TaskKind::Classification { classes: b }) =
                (train.kind(), test.kind())
            else {
                unreachable!("IDX data is always classification")
            };
            let classes = a.max(b);
            Ok((train.with_class_count(classes)?, test.with_class_count(classes)?))
        }
        DatasetSpec::Csv { train, test, target, standardize, test_fraction } => {
            let (mut tr, mut te) = match test {
                Some(test_path) => (load_csv(train, target, false)?, load_csv(test_path, target, false)?),
                None => {
                    let all = load_csv(train, target, false)?;
                    let n_test = ((all.len() as f64) * test_fraction).round() as usize;
                    if n_test == 0 || n_test >= all.len() {
                        return Err(Error::Config(format!(
                            "test_fraction {test_fraction} leaves an empty split of {} rows",
                            all.len()
                        )));
                    }
                    let cut = all.len() - n_test;
                    (all.slice(0, cut), all.slice(cut, all.len()))
                }
            };
            if tr.dim() != te.dim() {
                return Err(Error::Consistency(format!(
                    "train has {} features but test has {}",
                    tr.dim(),
                    te.dim()
                )));
            }
            if *standardize {
                let norm = tr.standardize();
                te.apply_normalization(&norm);
            }
            Ok((tr, te))
        }
    }
}

/// Layer widths: the configured ones (checked against the data) or `[input, hidden, output]`.
pub fn resolve_widths(config: &TrainConfig, train: &Dataset) -> Result<Vec<usize>> {
    let (input, output) = (train.dim(), train.target_dim());
    match &config.widths {
        Some(w) => {
            if w[0] != input || *w.last().expect("validated nonempty") != output {
                return Err(Error::Config(format!(
                    "widths {w:?} do not match the data: input {input}, output {output}"
                )));
            }
            Ok(w.clone())
        }
        None => Ok(vec![input, config.hidden_width, output]),
    }
}

/// Network, plan and engines for `config`, before any training.
pub fn prepare_run(config: &TrainConfig, train: &Dataset) -> Result<TrainRunState> {
    let widths = resolve_widths(config, train)?;
    let loss = match train.kind() {
        TaskKind::Classification { .. } => LossKind::SoftmaxCe,
        TaskKind::Regression => LossKind::Mse,
    };
    let net = NetworkModel::init(&widths, config.slope, loss, &mut SeedStreams::rng(config.seed, SeedStreams::NET_INIT))?;
    let layers = net.num_layers();
    let all_layers: Vec<Vec<usize>>;
    let grouping = match (&config.grouping, config.optimizer.step_kind()) {
        (Some(g), _) => Some(g.as_slice()),
        (None, Some(_)) => None,
        (None, None) => {
            all_layers = vec![(0..layers).collect()];
            Some(all_layers.as_slice())
        }
    };
    let plan = block_partition(layers, grouping, config.inner_steps)?;
    let engines = build_engines(
        &net,
        &plan,
        &config.engine_settings(),
        &mut SeedStreams::rng(config.seed, SeedStreams::PSI_INIT),
    )?;
    TrainRunState::new(net, plan, engines, config.seed)
}

fn hash_matrix(h: &mut DefaultHasher, m: &Matrix) {
    h.write_usize(m.rows());
    h.write_usize(m.cols());
    for v in m.data() {
        h.write_u64(v.to_bits());
    }
}

fn hash_batch(h: &mut DefaultHasher, b: &Batch) {
    hash_matrix(h, &b.x);
    match &b.y {
        Targets::Classes(c) => c.iter().for_each(|&v| h.write_usize(v)),
        Targets::Values(m) => hash_matrix(h, m),
    }
}

/// Digest of all layer weights.
pub fn network_digest(net: &NetworkModel) -> u64 {
    let mut h = DefaultHasher::new();
    net.layers().iter().for_each(|m| hash_matrix(&mut h, m));
    h.finish()
}

struct Recorder<'a> {
    inner: &'a mut dyn TrainHooks,
    batches: DefaultHasher,
}

impl TrainHooks for Recorder<'_> {
    fn on_batches(&mut self, block: usize, main: &Batch, meta: Option<&Batch>) {
        self.batches.write_usize(block);
        hash_batch(&mut self.batches, main);
        if let Some(m) = meta {
            hash_batch(&mut self.batches, m);
        }
        self.inner.on_batches(block, main, meta);
    }

    fn before_block_step(&mut self, iteration: usize, block: usize, net: &NetworkModel) {
        self.inner.before_block_step(iteration, block, net);
    }

    fn after_block_step(&mut self, iteration: usize, block: usize, net: &NetworkModel, loss: f64) {
        self.inner.after_block_step(iteration, block, net, loss);
    }
}

/// Trains for `config.epochs`, evaluating both splits after every epoch. Writes nothing.
pub fn run_training(config: &TrainConfig, hooks: &mut dyn TrainHooks) -> Result<RunSummary> {
    let (train, test) = load_datasets(config)?;
    if config.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            config.batch_size,
            train.len()
        )));
    }
    let mut state = prepare_run(config, &train)?;
    let init_digest = network_digest(&state.net);
    let mut recorder = Recorder { inner: hooks, batches: DefaultHasher::new() };
    let start = Instant::now();
    let mut rows = Vec::with_capacity(2 * config.epochs);
    for epoch in 1..=config.epochs {
        train_epoch(&mut state, &train, config.batch_size, &mut recorder)?;
        let (eta_mean, eta_min, eta_max) = state.step_stats();
        for (split, data) in [(Split::Train, &train), (Split::Test, &test)] {
            let m = evaluate(&state.net, data, config.eval_batch_size)?;
            rows.push(MetricsRow {
                epoch,
                split,
                loss: m.loss,
                metric: m.metric,
                wall_ms: start.elapsed().as_millis(),
                eta_mean,
                eta_min,
                eta_max,
            });
        }
    }
    Ok(RunSummary {
        optimizer: config.optimizer,
        ablation: config.ablation,
        projection: config.projection,
        task: train.kind(),
        rows,
        final_net: state.net,
        init_digest,
        batch_digest: recorder.batches.finish(),
        output: None,
    })
}

/// Writes the metrics CSV (`\n` line endings, exact header).
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from(METRICS_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&r.to_csv_line());
        body.push('\n');
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Runs `config` and writes its metrics to `config.output`.
pub fn run_experiment(config: &TrainConfig) -> Result<RunSummary> {
    let mut summary = run_training(config, &mut NoHooks)?;
    write_metrics(&config.output, &summary.rows)?;
    summary.output = Some(config.output.clone());
    Ok(summary)
}
