//! Stochastic alternating minimization with meta-learned trainable step sizes.

pub mod data;
pub mod error;
pub mod etamodel;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod stepsize;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use data::{Dataset, TaskKind};
pub use etamodel::EtaModel;
pub use model::{Batch, LossKind, NetworkModel, Targets};
pub use numerics::{seeded_rng, Matrix, Rng};
pub use stepsize::{ProjectionStyle, StepComposition, StepSizeKind};
pub use trainer::{OptimizerKind, SeedStreams};
