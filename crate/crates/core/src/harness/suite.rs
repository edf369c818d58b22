//! Theory suite, gradient suite, and the ablation × projection protocol.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;

use super::config::TrainConfig;
use super::experiment::{run_training, write_metrics, RunSummary};
use crate::error::{Error, Result};
use crate::etamodel::{candidate_steps, meta_gradients, psi_forward, EtaModel, HeadSpec};
use crate::model::{block_gradient, loss, Batch, LossKind, NetworkModel, Targets, DEFAULT_SLOPE};
use crate::numerics::{seeded_rng, Matrix, Rng};
use crate::stepsize::{apply_step, grad_features_of, ProjectionStyle, StepComposition, StepSizeKind};
use crate::theory::{
    balls_around, contractivity_check, coupled_isotropic, monte_carlo, plateau_comparison, random_quadratic,
    recursion_check_scaled, start_at_distance, AmRunConfig, EtaSchedule, PlateauComparison, RecursionReport, Sweep,
};
use crate::trainer::NoHooks;

/// Central-difference step of the gradient suite.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error limit for layer gradients.
pub const LAYER_GRAD_TOL: f64 = 1e-6;
/// Relative-error limit for eta-model meta-gradients.
pub const META_GRAD_TOL: f64 = 1e-5;
/// Norm floor in the relative error, so that vanishing gradients compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;
/// Cases with a pre-activation closer than this to the LeakyReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
/// Accepted range of `plateau(η) / plateau(η/2)`.
pub const PLATEAU_FACTOR_RANGE: (f64, f64) = (2.5, 6.0);

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    Ok(diff / a.frobenius_norm().max(b.frobenius_norm()).max(REL_ERROR_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuiteSelection {
    Contractivity,
    Recursion,
    #[default]
    All,
}

impl FromStr for SuiteSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contractivity" => Ok(SuiteSelection::Contractivity),
            "recursion" => Ok(SuiteSelection::Recursion),
            "all" => Ok(SuiteSelection::All),
            other => Err(Error::Config(format!(
                "invalid suite '{other}'; choose one of: contractivity, recursion, all"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheorySuiteOptions {
    pub selection: SuiteSelection,
    /// Contractivity at 1.5× the step ceiling; recursion bound without its noise term.
    pub inject_bug: bool,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub quadratics: usize,
    pub points: usize,
    pub mc_runs: usize,
    pub steps: usize,
    pub eta_large: f64,
    pub eta_small: f64,
}

impl Default for TheorySuiteOptions {
    fn default() -> Self {
        Self {
            selection: SuiteSelection::All,
            inject_bug: false,
            out_dir: PathBuf::from("runs/theory"),
            seed: 0,
            quadratics: 100,
            points: 100,
            mc_runs: 30,
            steps: 500,
            eta_large: 0.8,
            eta_small: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractivitySuite {
    pub problems: usize,
    pub checks: usize,
    pub violations: usize,
    pub worst_slack: [f64; 3],
    pub literal_unsquared_failures: usize,
    pub literal_cross_block_failures: usize,
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RecursionSuite {
    pub reports: Vec<(f64, RecursionReport)>,
    pub plateau: PlateauComparison,
    /// `γ < 2ξ/(3(L−1))` on the test problem.
    pub coupling_admissible: bool,
    /// `1/δ`; both steps must stay below it.
    pub step_upper_bound: f64,
}

impl RecursionSuite {
    pub fn plateau_ok(&self) -> bool {
        let f = self.plateau.factor;
        f >= PLATEAU_FACTOR_RANGE.0 && f <= PLATEAU_FACTOR_RANGE.1
    }

    pub fn preconditions_hold(&self) -> bool {
        self.coupling_admissible && self.reports.iter().all(|(eta, _)| *eta < self.step_upper_bound)
    }

    pub fn passed(&self) -> bool {
        self.preconditions_hold() && self.reports.iter().all(|(_, r)| r.passed()) && self.plateau_ok()
    }
}

#[derive(Debug, Clone)]
pub struct TheorySuiteReport {
    pub contractivity: Option<ContractivitySuite>,
    pub recursion: Option<RecursionSuite>,
    pub files: Vec<PathBuf>,
    pub text: String,
}

impl TheorySuiteReport {
    pub fn passed(&self) -> bool {
        self.contractivity.as_ref().is_none_or(|c| c.violations == 0)
            && self.recursion.as_ref().is_none_or(RecursionSuite::passed)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sampled contraction checks over `quadratics` random problems with 1–3 blocks of dimension ≤ 16.
pub fn contractivity_suite(options: &TheorySuiteOptions, csv: &mut String) -> Result<ContractivitySuite> {
    let mut rng = seeded_rng(options.seed);
    let mut out = ContractivitySuite {
        problems: options.quadratics,
        checks: 0,
        violations: 0,
        worst_slack: [f64::INFINITY; 3],
        literal_unsquared_failures: 0,
        literal_cross_block_failures: 0,
        first_failure: None,
    };
    csv.push_str("problem,block,eta,trials,squared_slack,spectral_slack,cross_block_slack,violations,literal_unsquared_failures,literal_cross_block_failures\n");
    for q in 0..options.quadratics {
        let problem = random_quadratic(1 + q % 3, 16, 0.0, 1.0, &mut rng)?;
        let mut eta = problem.step_ceiling();
        if options.inject_bug {
            eta *= 1.5;
        }
        for d in 0..problem.blocks() {
            let r = contractivity_check(&problem, d, eta, options.points, &mut rng)?;
            out.checks += r.trials;
            out.violations += r.violations.len();
            for k in 0..3 {
                out.worst_slack[k] = out.worst_slack[k].min(r.worst_slack[k]);
            }
            out.literal_unsquared_failures += r.literal_unsquared_failures;
            out.literal_cross_block_failures += r.literal_cross_block_failures;
            if out.first_failure.is_none() && !r.passed() {
                out.first_failure = Some(format!("problem {q}: {}", r.to_text()));
            }
            let _ = writeln!(
                csv,
                "{q},{d},{eta},{},{},{},{},{},{},{}",
                r.trials,
                r.worst_slack[0],
                r.worst_slack[1],
                r.worst_slack[2],
                r.violations.len(),
                r.literal_unsquared_failures,
                r.literal_cross_block_failures
            );
        }
    }
    Ok(out)
}

/// Monte-Carlo recursion check at two steps on a coupled two-block problem, plus the plateau ratio.
pub fn recursion_suite(options: &TheorySuiteOptions) -> Result<RecursionSuite> {
    let mut rng = seeded_rng(options.seed);
    let problem = coupled_isotropic(4, 1.0, 0.45, 0.1, 4.0, &mut rng)?;
    let start = start_at_distance(&problem, 1.0, &mut rng)?;
    let balls = balls_around(&problem, &start)?;
    let seeds: Vec<u64> = (0..options.mc_runs as u64).map(|i| options.seed.wrapping_mul(1_000_003).wrapping_add(1000 + i)).collect();
    let noise_scale = if options.inject_bug { 0.0 } else { 1.0 };
    let mut reports = Vec::new();
    for eta in [options.eta_large, options.eta_small] {
        let cfg = AmRunConfig { steps: options.steps, schedule: EtaSchedule::Constant(eta), sweep: Sweep::GaussSeidel };
        let mc = monte_carlo(&problem, &balls, &start, &cfg, &seeds)?;
        reports.push((eta, recursion_check_scaled(&problem, &mc, noise_scale)?));
    }
    let plateau =
        plateau_comparison(&problem, &balls, &start, options.steps, options.eta_large, options.eta_small, &seeds)?;
    Ok(RecursionSuite {
        reports,
        plateau,
        coupling_admissible: problem.coupling_admissible(),
        step_upper_bound: problem.step_upper_bound(),
    })
}

/// Runs the selected theory checks and writes text and CSV reports under `options.out_dir`.
pub fn run_theory_suite(options: &TheorySuiteOptions) -> Result<TheorySuiteReport> {
    std::fs::create_dir_all(&options.out_dir).map_err(|e| Error::io(&options.out_dir, e))?;
    let mut files = Vec::new();
    let mut text = String::new();
    let contractivity = if options.selection != SuiteSelection::Recursion {
        let mut csv = String::new();
        let c = contractivity_suite(options, &mut csv)?;
        let _ = writeln!(
            text,
            "contractivity: {} problems, {} sampled points, {} violations: {}",
            c.problems,
            c.checks,
            c.violations,
            if c.violations == 0 { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            text,
            "  worst relative slack: squared {:.3e}, spectral {:.3e}, cross_block {:.3e}",
            c.worst_slack[0], c.worst_slack[1], c.worst_slack[2]
        );
        let _ = writeln!(
            text,
            "  literal unsquared factors (informational): single block fails at {} points, cross block at {}",
            c.literal_unsquared_failures, c.literal_cross_block_failures
        );
        if let Some(f) = &c.first_failure {
            let _ = write!(text, "  first failure: {f}");
        }
        let path = options.out_dir.join("contractivity.csv");
        write_text(&path, &csv)?;
        files.push(path);
        Some(c)
    } else {
        None
    };
    let recursion = if options.selection != SuiteSelection::Contractivity {
        let r = recursion_suite(options)?;
        let c = r.preconditions_hold();
        let _ = writeln!(
            text,
            "recursion preconditions: coupling admissible {}, steps below 1/delta = {:.4}: {}",
            r.coupling_admissible,
            r.step_upper_bound,
            if c { "PASS" } else { "FAIL" }
        );
        for (eta, report) in &r.reports {
            let _ = write!(text, "eta {eta}: {}", report.to_text());
            let path = options.out_dir.join(format!("recursion_eta_{eta}.csv"));
            report.write_csv(&path)?;
            files.push(path);
        }
        let _ = writeln!(
            text,
            "plateau eta {} -> {:.6e}, eta {} -> {:.6e}, factor {:.4} (accepted {:?}): {}",
            r.plateau.eta_large,
            r.plateau.plateau_large,
            r.plateau.eta_small,
            r.plateau.plateau_small,
            r.plateau.factor,
            PLATEAU_FACTOR_RANGE,
            if r.plateau_ok() { "PASS" } else { "FAIL" }
        );
        Some(r)
    } else {
        None
    };
    let report_path = options.out_dir.join("theory_report.txt");
    write_text(&report_path, &text)?;
    files.push(report_path);
    Ok(TheorySuiteReport { contractivity, recursion, files, text })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub cases: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { cases: 24, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub layer_checks: usize,
    pub meta_checks: usize,
    pub worst_layer: f64,
    pub worst_meta: f64,
    pub worst_layer_case: String,
    pub worst_meta_case: String,
    /// Meta cases dropped because the meta batch hit the kink at the temporary weights.
    pub meta_skipped: usize,
}

impl GradcheckReport {
    pub fn layers_ok(&self) -> bool {
        self.worst_layer <= LAYER_GRAD_TOL
    }

    pub fn meta_ok(&self) -> bool {
        self.worst_meta <= META_GRAD_TOL
    }

    pub fn passed(&self) -> bool {
        self.layers_ok() && self.meta_ok()
    }

    pub fn to_text(&self) -> String {
        format!(
            "layer gradients: {} tensors, worst relative error {:.3e} ({}) limit {:.0e}: {}\n\
             meta gradients: {} tensors ({} cases skipped at a kink), worst relative error {:.3e} ({}) limit {:.0e}: {}\n",
            self.layer_checks,
            self.worst_layer,
            self.worst_layer_case,
            LAYER_GRAD_TOL,
            if self.layers_ok() { "PASS" } else { "FAIL" },
            self.meta_checks,
            self.meta_skipped,
            self.worst_meta,
            self.worst_meta_case,
            META_GRAD_TOL,
            if self.meta_ok() { "PASS" } else { "FAIL" },
        )
    }
}

fn random_batch(rng: &mut Rng, net: &NetworkModel, b: usize) -> Result<Batch> {
    let d = net.input_dim();
    let x = Matrix::new(d, b, (0..d * b).map(|_| rng.random_range(-1.5..1.5)).collect())?;
    let k = net.output_dim();
    let y = match net.loss_kind() {
        LossKind::SoftmaxCe => Targets::Classes((0..b).map(|_| rng.random_range(0..k)).collect()),
        LossKind::Mse => Targets::Values(Matrix::new(k, b, (0..k * b).map(|_| rng.random_range(-1.0..1.0)).collect())?),
    };
    Batch::new(x, y)
}

fn random_net(rng: &mut Rng) -> Result<NetworkModel> {
    let depth = rng.random_range(2..=4);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=8)).collect();
    let loss = if rng.random_bool(0.5) { LossKind::SoftmaxCe } else { LossKind::Mse };
    let net = NetworkModel::init(&widths, DEFAULT_SLOPE, loss, rng)?;
    // widen the weights so hidden units sit in both LeakyReLU regimes
    let layers = net.layers().iter().map(|w| w.scale(2.0)).collect();
    NetworkModel::new(layers, DEFAULT_SLOPE, loss)
}

/// Smallest `|z|` over every hidden pre-activation.
fn kink_distance(net: &NetworkModel, batch: &Batch) -> Result<f64> {
    let (_, cache) = crate::model::forward(net, &batch.x)?;
    Ok(cache.pre.iter().flat_map(|p| p.data().iter().map(|v| v.abs())).fold(f64::INFINITY, f64::min))
}

/// A random network with a batch whose hidden units all sit away from the kink.
fn smooth_case(rng: &mut Rng) -> Result<(NetworkModel, Batch, usize)> {
    loop {
        let net = random_net(rng)?;
        let b = rng.random_range(1..=5);
        let batch = random_batch(rng, &net, b)?;
        if kink_distance(&net, &batch)? >= KINK_MARGIN {
            return Ok((net, batch, b));
        }
    }
}

fn fd_layer(net: &NetworkModel, batch: &Batch, l: usize) -> Result<Matrix> {
    let w = net.layer(l);
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for j in 0..w.len() {
        let mut plus = net.clone();
        let mut minus = net.clone();
        let mut wp = w.clone();
        wp.data_mut()[j] += FD_STEP;
        plus.set_layer(l, wp)?;
        let mut wm = w.clone();
        wm.data_mut()[j] -= FD_STEP;
        minus.set_layer(l, wm)?;
        out.data_mut()[j] = (loss(&plus, batch)? - loss(&minus, batch)?) / (2.0 * FD_STEP);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn meta_loss_at(
    psi: &EtaModel,
    net: &NetworkModel,
    block: &[usize],
    grads: &[Matrix],
    eta0: &[Matrix],
    comp: StepComposition,
    d: &crate::stepsize::GradFeatures,
    meta: &Batch,
) -> Result<f64> {
    let steps = candidate_steps(&psi_forward(psi, d), eta0, comp)?;
    let mut moved = net.clone();
    for ((&l, g), s) in block.iter().zip(grads).zip(&steps) {
        moved.set_layer(l, apply_step(net.layer(l), s, g)?)?;
    }
    loss(&moved, meta)
}

/// Analytic vs central-difference gradients for layer weights and for every eta-model weight,
/// over random small networks, all four step kinds and all four step compositions.
pub fn gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = seeded_rng(options.seed);
    let mut report = GradcheckReport {
        layer_checks: 0,
        meta_checks: 0,
        worst_layer: 0.0,
        worst_meta: 0.0,
        worst_layer_case: String::new(),
        worst_meta_case: String::new(),
        meta_skipped: 0,
    };
    for case in 0..options.cases {
        let (net, batch, b) = smooth_case(&mut rng)?;
        let all: Vec<usize> = (0..net.num_layers()).collect();
        let (_, grads) = block_gradient(&net, &batch, &all)?;
        for (l, g) in grads.iter().enumerate() {
            let err = relative_error(g, &fd_layer(&net, &batch, l)?)?;
            report.layer_checks += 1;
            if err >= report.worst_layer {
                report.worst_layer = err;
                report.worst_layer_case = format!("case {case} layer {l}");
            }
        }

        let kind = StepSizeKind::ALL[case % 4];
        let comp = StepComposition::ALL[(case / 4) % 4];
        let style = if case % 2 == 0 { ProjectionStyle::Tanh } else { ProjectionStyle::Sigmoid };
        let first = rng.random_range(0..net.num_layers());
        let last = rng.random_range(first..net.num_layers()).min(first + 1);
        let block: Vec<usize> = (first..=last).collect();
        let (_, bgrads) = block_gradient(&net, &batch, &block)?;
        let mut meta = random_batch(&mut rng, &net, b)?;
        while kink_distance(&net, &meta)? < KINK_MARGIN {
            meta = random_batch(&mut rng, &net, b)?;
        }
        let heads: Vec<HeadSpec> = block.iter().map(|&l| HeadSpec { kind, target: net.layer(l).shape() }).collect();
        let features = grad_features_of(&bgrads);
        let psi = loop {
            let psi = EtaModel::new(heads.clone(), 8, DEFAULT_SLOPE, style, 1e-3, &mut rng)?;
            let (_, cache) = psi.forward_cached(&features);
            let smooth = cache.hidden_pre().iter().all(|z| {
                let top = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                z.iter().all(|v| v.abs() >= KINK_MARGIN * top)
            });
            if smooth {
                break psi;
            }
        };
        let eta0: Vec<Matrix> = psi
            .heads()
            .iter()
            .map(|h| {
                let (r, c) = h.shape();
                Matrix::filled(r, c, 0.1)
            })
            .collect();
        let mut scratch = net.clone();
        let mg = meta_gradients(&psi, &features, &mut scratch, &block, &bgrads, &eta0, comp, &meta)?;
        let mut moved = net.clone();
        for (&l, w) in block.iter().zip(&mg.w_prime) {
            moved.set_layer(l, w.clone())?;
        }
        if kink_distance(&moved, &meta)? < KINK_MARGIN {
            report.meta_skipped += 1;
            continue;
        }
        for i in 0..3 {
            let analytic = mg.grads.dense(i);
            let mut fd = Matrix::zeros(analytic.rows(), analytic.cols());
            for j in 0..analytic.len() {
                let mut plus = psi.clone();
                plus.weights_mut()[i].data_mut()[j] += FD_STEP;
                let mut minus = psi.clone();
                minus.weights_mut()[i].data_mut()[j] -= FD_STEP;
                let up = meta_loss_at(&plus, &net, &block, &bgrads, &eta0, comp, &features, &meta)?;
                let dn = meta_loss_at(&minus, &net, &block, &bgrads, &eta0, comp, &features, &meta)?;
                fd.data_mut()[j] = (up - dn) / (2.0 * FD_STEP);
            }
            let err = relative_error(&analytic, &fd)?;
            report.meta_checks += 1;
            if err >= report.worst_meta {
                report.worst_meta = err;
                report.worst_meta_case = format!("case {case} {kind} {} psi layer {i}", comp.name());
            }
        }
    }
    Ok(report)
}

/// One arm of the protocol matrix.
#[derive(Debug, Clone)]
pub struct ProtocolArm {
    pub ablation: StepComposition,
    pub projection: ProjectionStyle,
    pub path: PathBuf,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub arms: Vec<ProtocolArm>,
    pub summary_path: PathBuf,
}

impl ProtocolReport {
    /// Every arm started from the same network and consumed the same batches.
    pub fn shared_inputs_identical(&self) -> bool {
        self.arms.windows(2).all(|w| {
            w[0].summary.init_digest == w[1].summary.init_digest
                && w[0].summary.batch_digest == w[1].summary.batch_digest
        })
    }
}

/// Runs every ablation arm under every projection style from `base`, writing one metrics CSV
/// per arm plus `protocol_summary.csv` into `out_dir`.
pub fn run_protocol(base: &TrainConfig, out_dir: &Path) -> Result<ProtocolReport> {
    if base.optimizer.step_kind().is_none() {
        return Err(Error::Config(format!(
            "the protocol needs a trainable-step optimizer (samt_s, samt_e, samt_r, samt_c), got {}",
            base.optimizer
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut arms = Vec::new();
    let mut csv = String::from("ablation,projection,test_loss,test_metric,eta_mean,init_digest,batch_digest,file\n");
    for projection in [ProjectionStyle::Tanh, ProjectionStyle::Sigmoid] {
        for ablation in StepComposition::ALL {
            let config = TrainConfig { ablation, projection, ..base.clone() };
            let summary = run_training(&config, &mut NoHooks)?;
            let path = out_dir.join(format!("{}_{}.csv", ablation.name(), projection));
            write_metrics(&path, &summary.rows)?;
            let last = summary.final_test().expect("at least one epoch");
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{:016x},{:016x},{}",
                ablation.name(),
                projection,
                last.loss,
                last.metric,
                last.eta_mean,
                summary.init_digest,
                summary.batch_digest,
                path.file_name().and_then(|s| s.to_str()).unwrap_or_default()
            );
            arms.push(ProtocolArm { ablation, projection, path, summary });
        }
    }
    let summary_path = out_dir.join("protocol_summary.csv");
    write_text(&summary_path, &csv)?;
    Ok(ProtocolReport { arms, summary_path })
}
