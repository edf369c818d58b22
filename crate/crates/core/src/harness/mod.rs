//! Configuration, experiment orchestration, metrics files, and the verification suites.

mod config;
mod experiment;
mod suite;

pub use config::{
    parse_config, parse_config_text, parse_grouping, parse_overrides, parse_widths, DatasetSpec, TrainConfig,
    KNOWN_KEYS,
};
pub use experiment::{
    load_datasets, network_digest, prepare_run, resolve_widths, run_experiment, run_training, write_metrics,
    MetricsRow, RunSummary, Split, METRICS_HEADER,
};
pub use suite::{
    contractivity_suite, gradcheck, recursion_suite, relative_error, run_protocol, run_theory_suite,
    ContractivitySuite, GradcheckOptions, GradcheckReport, ProtocolArm, ProtocolReport, RecursionSuite,
    SuiteSelection, TheorySuiteOptions, TheorySuiteReport, FD_STEP, LAYER_GRAD_TOL, META_GRAD_TOL,
    PLATEAU_FACTOR_RANGE, REL_ERROR_FLOOR,
};

use crate::error::Error;

/// Process exit status for a result: 0 success, 1 configuration or data error, 2 failed check.
pub fn exit_code(result: &Result<(), Error>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_input_error() => 1,
        Err(_) => 2,
    }
}
