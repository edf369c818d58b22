//! The outer alternating-minimization loop: blocks of layers are swept in ascending order,
//! each receiving `K` inner updates from its own engine per outer iteration.

use std::fmt;
use std::str::FromStr;

use crate::data::{meta_subset, sample_meta_minibatch, sample_minibatch, Dataset, MetaSubset, TaskKind};
use crate::error::{Error, Result};
use crate::etamodel::{EtaModel, HeadSpec};
use crate::model::{argmax_columns, batch_loss, predict, Batch, NetworkModel, Targets};
use crate::numerics::{seeded_rng, Matrix, Rng};
use crate::optim::{AdamState, BlockEngine, HdState, OagdState};
use crate::stepsize::{step_stats, ProjectionStyle, StepComposition, StepSize, StepSizeKind};

/// Disjoint, covering, ascending blocks of layer indices plus the inner step count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    blocks: Vec<Vec<usize>>,
    inner_steps: usize,
}

impl BlockPlan {
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn inner_steps(&self) -> usize {
        self.inner_steps
    }

    /// Parameter updates performed per outer iteration.
    pub fn updates_per_iteration(&self) -> usize {
        self.blocks.len() * self.inner_steps
    }
}

/// One block per layer, or the given grouping (0-based layer indices).
pub fn block_partition(
    layer_count: usize,
    grouping: Option<&[Vec<usize>]>,
    inner_steps: usize,
) -> Result<BlockPlan> {
    if layer_count == 0 {
        return Err(Error::Plan("network has no layers".into()));
    }
    if inner_steps == 0 {
        return Err(Error::Plan("inner_steps must be at least 1".into()));
    }
    let mut blocks: Vec<Vec<usize>> = match grouping {
        None => (0..layer_count).map(|l| vec![l]).collect(),
        Some(groups) => {
            let mut seen = vec![false; layer_count];
            for g in groups {
                if g.is_empty() {
                    return Err(Error::Plan("empty block in grouping".into()));
                }
                for &l in g {
                    if l >= layer_count {
                        return Err(Error::Plan(format!(
                            "layer {l} out of range for {layer_count} layers"
                        )));
                    }
                    if seen[l] {
                        return Err(Error::Plan(format!("layer {l} appears in two blocks")));
                    }
                    seen[l] = true;
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::Plan(format!("layer {missing} is not in any block")));
            }
            groups.to_vec()
        }
    };
    for b in &mut blocks {
        b.sort_unstable();
    }
    blocks.sort_by_key(|b| b[0]);
    Ok(BlockPlan {
        blocks,
        inner_steps,
    })
}

/// Which update rule serves the blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SamtS,
    SamtE,
    SamtR,
    SamtC,
    Sgd,
    Adam,
    Hd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::SamtS,
        OptimizerKind::SamtE,
        OptimizerKind::SamtR,
        OptimizerKind::SamtC,
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Hd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SamtS => "samt_s",
            OptimizerKind::SamtE => "samt_e",
            OptimizerKind::SamtR => "samt_r",
            OptimizerKind::SamtC => "samt_c",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Hd => "hd",
        }
    }

    /// The step kind of a trainable-step optimizer.
    pub fn step_kind(self) -> Option<StepSizeKind> {
        match self {
            OptimizerKind::SamtS => Some(StepSizeKind::Scalar),
            OptimizerKind::SamtE => Some(StepSizeKind::Element),
            OptimizerKind::SamtR => Some(StepSizeKind::Row),
            OptimizerKind::SamtC => Some(StepSizeKind::Column),
            _ => None,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = OptimizerKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "invalid optimizer '{s}'; choose one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Everything needed to build the per-block engines.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub optimizer: OptimizerKind,
    pub eta0: f64,
    pub projection: ProjectionStyle,
    pub composition: StepComposition,
    pub meta_lag: u8,
    pub meta_lr: f64,
    pub hidden: usize,
    pub bypass: bool,
    pub adam_rate: f64,
    pub hd_hyper_rate: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::SamtS,
            eta0: crate::stepsize::DEFAULT_ETA0,
            projection: ProjectionStyle::Tanh,
            composition: StepComposition::Full,
            meta_lag: 0,
            meta_lr: crate::etamodel::DEFAULT_META_LR,
            hidden: crate::etamodel::DEFAULT_HIDDEN,
            bypass: false,
            adam_rate: crate::optim::DEFAULT_ADAM_RATE,
            hd_hyper_rate: crate::optim::DEFAULT_HD_HYPER_RATE,
        }
    }
}

/// One engine per block; trainable-step engines get one eta model per block.
pub fn build_engines(
    net: &NetworkModel,
    plan: &BlockPlan,
    settings: &EngineSettings,
    rng: &mut Rng,
) -> Result<Vec<BlockEngine>> {
    plan.blocks
        .iter()
        .map(|block| {
            let shapes: Vec<(usize, usize)> = block.iter().map(|&l| net.layer(l).shape()).collect();
            Ok(match settings.optimizer {
                OptimizerKind::Sgd => BlockEngine::Sgd {
                    rate: settings.eta0,
                },
                OptimizerKind::Adam => BlockEngine::Adam(AdamState::new(&shapes, settings.adam_rate)),
                OptimizerKind::Hd => {
                    BlockEngine::Hd(HdState::new(&shapes, settings.eta0, settings.hd_hyper_rate))
                }
                samt => {
                    let kind = samt.step_kind().expect("trainable-step optimizer");
                    let steps = shapes
                        .iter()
                        .map(|&s| StepSize::new(kind, s, settings.eta0))
                        .collect::<Result<Vec<_>>>()?;
                    let heads = shapes
                        .iter()
                        .map(|&target| HeadSpec { kind, target })
                        .collect();
                    let psi = EtaModel::new(
                        heads,
                        settings.hidden,
                        net.slope(),
                        settings.projection,
                        settings.meta_lr,
                        rng,
                    )?;
                    BlockEngine::Oagd(OagdState::new(
                        steps,
                        psi,
                        settings.meta_lag,
                        settings.composition,
                        settings.bypass,
                    )?)
                }
            })
        })
        .collect()
}

/// Random streams derived from one seed, so that changing how one consumer draws does not
/// shift another's sequence.
pub struct SeedStreams;

impl SeedStreams {
    pub const MAIN: u64 = 0;
    pub const META: u64 = 1;
    pub const NET_INIT: u64 = 2;
    pub const PSI_INIT: u64 = 3;

    pub fn rng(seed: u64, stream: u64) -> Rng {
        let mut r = seeded_rng(seed);
        r.set_stream(stream);
        r
    }
}

/// Instrumentation points inside [`train_epoch`].
pub trait TrainHooks {
    fn on_batches(&mut self, _block: usize, _main: &Batch, _meta: Option<&Batch>) {}
    fn before_block_step(&mut self, _iteration: usize, _block: usize, _net: &NetworkModel) {}
    fn after_block_step(&mut self, _iteration: usize, _block: usize, _net: &NetworkModel, _loss: f64) {}
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Network, engines, plan and random streams of one training run.
pub struct TrainRunState {
    pub net: NetworkModel,
    pub engines: Vec<BlockEngine>,
    pub plan: BlockPlan,
    pub epoch: usize,
    main_rng: Rng,
    meta_rng: Rng,
    meta: Option<MetaSubset>,
}

impl TrainRunState {
    pub fn new(net: NetworkModel, plan: BlockPlan, engines: Vec<BlockEngine>, seed: u64) -> Result<Self> {
        if engines.len() != plan.blocks.len() {
            return Err(Error::Plan(format!(
                "{} engines for {} blocks",
                engines.len(),
                plan.blocks.len()
            )));
        }
        if let Some(&bad) = plan.blocks.iter().flatten().find(|&&l| l >= net.num_layers()) {
            return Err(Error::Plan(format!(
                "plan names layer {bad} but the network has {} layers",
                net.num_layers()
            )));
        }
        Ok(Self {
            net,
            engines,
            plan,
            epoch: 0,
            main_rng: SeedStreams::rng(seed, SeedStreams::MAIN),
            meta_rng: SeedStreams::rng(seed, SeedStreams::META),
            meta: None,
        })
    }

    /// Mean, min and max over every trainable step entry (or baseline rate) of all blocks.
    pub fn step_stats(&self) -> (f64, f64, f64) {
        let values: Vec<Matrix> = self.engines.iter().flat_map(BlockEngine::step_values).collect();
        step_stats(values.iter()).unwrap_or((f64::NAN, f64::NAN, f64::NAN))
    }
}

/// Summary of one pass of [`train_epoch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub outer_iterations: usize,
    pub block_updates: usize,
    pub mean_step_loss: f64,
}

/// `⌈N/b⌉` outer iterations; in each, every block in plan order gets `K` updates, each on a
/// fresh main batch from the training set and (for trainable steps) a fresh meta batch
/// from its stride-two subset.
pub fn train_epoch(
    state: &mut TrainRunState,
    train: &Dataset,
    batch_size: usize,
    hooks: &mut dyn TrainHooks,
) -> Result<EpochSummary> {
    if train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if batch_size == 0 || batch_size > train.len() {
        return Err(Error::Argument(format!(
            "batch size {batch_size} must lie in 1..={}",
            train.len()
        )));
    }
    if state.meta.is_none() {
        state.meta = Some(meta_subset(train));
    }
    let meta = state.meta.as_ref().expect("set above");
    let iterations = train.len().div_ceil(batch_size);
    let mut updates = 0;
    let mut loss_sum = 0.0;
    for it in 0..iterations {
        for (bi, block) in state.plan.blocks.iter().enumerate() {
            for _ in 0..state.plan.inner_steps {
                let main = sample_minibatch(train, batch_size, &mut state.main_rng)?;
                let meta_batch = if state.engines[bi].needs_meta_batch() {
                    Some(sample_meta_minibatch(train, meta, batch_size, &mut state.meta_rng)?)
                } else {
                    None
                };
                hooks.on_batches(bi, &main, meta_batch.as_ref());
                hooks.before_block_step(it, bi, &state.net);
                let loss = state.engines[bi].step(&mut state.net, block, &main, meta_batch.as_ref())?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                hooks.after_block_step(it, bi, &state.net, loss);
                loss_sum += loss;
                updates += 1;
            }
        }
    }
    state.epoch += 1;
    Ok(EpochSummary {
        epoch: state.epoch,
        outer_iterations: iterations,
        block_updates: updates,
        mean_step_loss: loss_sum / updates as f64,
    })
}

/// Loss and accuracy (classification) or MSE (regression) over a full dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub metric: f64,
}

/// Full-pass metrics in batches of `batch_size`; never mutates `net`.
pub fn evaluate(net: &NetworkModel, dataset: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if dataset.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let n = dataset.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for batch in dataset.chunks(batch_size) {
        let out = predict(net, &batch.x)?;
        let (l, _) = batch_loss(net.loss_kind(), &out, &batch.y)?;
        loss += l * batch.size() as f64;
        if let Targets::Classes(labels) = &batch.y {
            correct += argmax_columns(&out)
                .iter()
                .zip(labels)
                .filter(|(p, y)| p == y)
                .count();
        }
    }
    let loss = loss / n;
    let metric = match dataset.kind() {
        TaskKind::Classification { .. } => correct as f64 / n,
        TaskKind::Regression => loss,
    };
    Ok(EvalMetrics { loss, metric })
}
