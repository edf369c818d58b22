//! Shared fixtures for the kernel benchmarks.

use samt_core::data::synth_classification;
use samt_core::model::DEFAULT_SLOPE;
use samt_core::optim::BlockEngine;
use samt_core::trainer::{build_engines, EngineSettings};
use samt_core::{seeded_rng, Batch, LossKind, Matrix, NetworkModel, OptimizerKind, Result};

/// MNIST-shaped classifier and a pair of batches drawn from Gaussian blobs.
pub struct Fixture {
    pub net: NetworkModel,
    pub main: Batch,
    pub meta: Batch,
}

impl Fixture {
    pub fn new(widths: &[usize], batch: usize, seed: u64) -> Result<Self> {
        let classes = *widths.last().expect("widths are nonempty");
        let data = synth_classification(seed, 2 * batch, widths[0], classes, 1.0)?;
        let net = NetworkModel::init(widths, DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut seeded_rng(seed))?;
        let main = data.gather(&(0..batch).collect::<Vec<_>>());
        let meta = data.gather(&(batch..2 * batch).collect::<Vec<_>>());
        Ok(Self { net, main, meta })
    }

    /// One engine serving every layer as a single block.
    pub fn engine(&self, optimizer: OptimizerKind) -> Result<(Vec<usize>, BlockEngine)> {
        let block: Vec<usize> = (0..self.net.num_layers()).collect();
        let plan = samt_core::trainer::block_partition(self.net.num_layers(), Some(std::slice::from_ref(&block)), 1)?;
        let settings = EngineSettings { optimizer, ..EngineSettings::default() };
        let engine = build_engines(&self.net, &plan, &settings, &mut seeded_rng(1))?.remove(0);
        Ok((block, engine))
    }
}

/// Square matrix with entries cycling through a small range.
pub fn patterned(n: usize) -> Matrix {
    let data = (0..n * n).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect();
    Matrix::new(n, n, data).expect("n*n entries")
}
