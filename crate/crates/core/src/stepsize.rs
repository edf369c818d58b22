//! Trainable step sizes: the four broadcast kinds, the five-number gradient summary fed to
//! the eta model, the squashing maps into (0,1), and the convex-combination update.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{broadcastable, hadamard_broadcast, Matrix};

pub const DEFAULT_ETA0: f64 = 0.1;

/// Largest double strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepSizeKind {
    Scalar,
    Element,
    Row,
    Column,
}

impl StepSizeKind {
    pub const ALL: [StepSizeKind; 4] = [
        StepSizeKind::Scalar,
        StepSizeKind::Element,
        StepSizeKind::Row,
        StepSizeKind::Column,
    ];

    /// Shape of a step of this kind serving an `(m, n)` gradient.
    pub fn shape_for(self, target: (usize, usize)) -> (usize, usize) {
        let (m, n) = target;
        match self {
            StepSizeKind::Scalar => (1, 1),
            StepSizeKind::Element => (m, n),
            StepSizeKind::Row => (m, 1),
            StepSizeKind::Column => (1, n),
        }
    }

    pub fn entries_for(self, target: (usize, usize)) -> usize {
        let (r, c) = self.shape_for(target);
        r * c
    }
}

impl fmt::Display for StepSizeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepSizeKind::Scalar => "scalar",
            StepSizeKind::Element => "element",
            StepSizeKind::Row => "row",
            StepSizeKind::Column => "column",
        })
    }
}

/// The step `η̄` for one layer together with its fixed initial value `η̄⁰`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSize {
    kind: StepSizeKind,
    target: (usize, usize),
    values: Matrix,
    init: Matrix,
}

impl StepSize {
    /// Step of `kind` for a layer of shape `target`, every entry set to `eta0`.
    pub fn new(kind: StepSizeKind, target: (usize, usize), eta0: f64) -> Result<Self> {
        if !(eta0 > 0.0 && eta0 < 1.0) {
            return Err(Error::Argument(format!(
                "initial step must lie in (0,1), got {eta0}"
            )));
        }
        let (r, c) = kind.shape_for(target);
        let init = Matrix::filled(r, c, eta0);
        Ok(Self {
            kind,
            target,
            values: init.clone(),
            init,
        })
    }

    pub fn kind(&self) -> StepSizeKind {
        self.kind
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn init_values(&self) -> &Matrix {
        &self.init
    }

    pub fn entries(&self) -> usize {
        self.values.len()
    }

    /// Installs new values; they must match the shape and lie strictly in (0,1).
    pub fn set_values(&mut self, values: Matrix) -> Result<()> {
        if values.shape() != self.values.shape() {
            return Err(Error::Shape {
                op: "StepSize::set_values",
                left: self.values.shape(),
                right: values.shape(),
            });
        }
        if let Some(v) = values.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Argument(format!("step entry {v} outside (0,1)")));
        }
        self.values = values;
        Ok(())
    }
}

/// `D = [mean, variance, max, min, norm]` of a gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFeatures {
    pub mean: f64,
    pub variance: f64,
    pub max: f64,
    pub min: f64,
    pub norm: f64,
}

impl GradFeatures {
    pub fn to_array(self) -> [f64; 5] {
        [self.mean, self.variance, self.max, self.min, self.norm]
    }

    pub fn to_column(self) -> Matrix {
        Matrix::column(&self.to_array())
    }
}

/// Statistics over every entry of `g`, with population variance.
pub fn grad_features(g: &Matrix) -> GradFeatures {
    grad_features_of(std::slice::from_ref(g))
}

/// Statistics over the entries of several matrices taken together.
pub fn grad_features_of(parts: &[Matrix]) -> GradFeatures {
    let values = || parts.iter().flat_map(|m| m.data().iter().copied());
    let count = parts.iter().map(Matrix::len).sum::<usize>().max(1) as f64;
    let mean = values().sum::<f64>() / count;
    let variance = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    let sq = values().map(|v| v * v).sum::<f64>();
    let max = values().fold(f64::NEG_INFINITY, f64::max);
    let min = values().fold(f64::INFINITY, f64::min);
    // Rounding in the mean can put it a hair outside [min, max] for near-constant input.
    GradFeatures {
        mean: mean.clamp(min, max),
        variance,
        max,
        min,
        norm: sq.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionStyle {
    /// `0.5·(tanh(u) + 1)`
    #[default]
    Tanh,
    /// `1 / (1 + e^{-u})`
    Sigmoid,
}

impl ProjectionStyle {
    /// Squashes one value into the open unit interval.
    pub fn apply(self, u: f64) -> f64 {
        let p = match self {
            // 0.5(tanh u + 1) == sigmoid(2u), and the sigmoid form keeps precision near 0.
            ProjectionStyle::Tanh => stable_sigmoid(2.0 * u),
            ProjectionStyle::Sigmoid => stable_sigmoid(u),
        };
        p.clamp(f64::MIN_POSITIVE, BELOW_ONE)
    }

    /// Derivative of [`apply`](Self::apply) expressed through its output `p`.
    pub fn derivative_from_output(self, p: f64) -> f64 {
        match self {
            ProjectionStyle::Tanh => 2.0 * p * (1.0 - p),
            ProjectionStyle::Sigmoid => p * (1.0 - p),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for ProjectionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionStyle::Tanh => "tanh",
            ProjectionStyle::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for ProjectionStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ProjectionStyle::Tanh),
            "sigmoid" => Ok(ProjectionStyle::Sigmoid),
            other => Err(Error::Config(format!(
                "invalid projection_style '{other}'; choose one of: tanh, sigmoid"
            ))),
        }
    }
}

/// Entrywise projection of `u` into (0,1).
pub fn project_unit(u: &Matrix, style: ProjectionStyle) -> Matrix {
    u.map(|v| style.apply(v))
}

/// How the final step is assembled from `β`, `η̄⁰` and `η̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepComposition {
    /// `β⊙η̄⁰ + (1−β)⊙η̂`
    #[default]
    Full,
    /// `η̄⁰`, ignoring the eta model
    Fixed,
    /// `β⊙η̄⁰`
    LeftOnly,
    /// `(1−β)⊙η̂`
    RightOnly,
}

impl StepComposition {
    pub const ALL: [StepComposition; 4] = [
        StepComposition::Full,
        StepComposition::Fixed,
        StepComposition::LeftOnly,
        StepComposition::RightOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StepComposition::Full => "full",
            StepComposition::Fixed => "baseline",
            StepComposition::LeftOnly => "left_only",
            StepComposition::RightOnly => "right_only",
        }
    }

    /// Step for one entry.
    #[inline]
    pub fn compose(self, beta: f64, eta0: f64, eta_hat: f64) -> f64 {
        match self {
            StepComposition::Full => convex(beta, eta0, eta_hat),
            StepComposition::Fixed => eta0,
            // Products of two tiny factors could underflow to zero and leave the open interval.
            StepComposition::LeftOnly => (beta * eta0).max(f64::MIN_POSITIVE),
            StepComposition::RightOnly => ((1.0 - beta) * eta_hat).max(f64::MIN_POSITIVE),
        }
    }

    /// Partial derivatives `(∂η̄/∂β, ∂η̄/∂η̂)` for one entry.
    #[inline]
    pub fn partials(self, beta: f64, eta0: f64, eta_hat: f64) -> (f64, f64) {
        match self {
            StepComposition::Full => (eta0 - eta_hat, 1.0 - beta),
            StepComposition::Fixed => (0.0, 0.0),
            StepComposition::LeftOnly => (eta0, 0.0),
            StepComposition::RightOnly => (-eta_hat, 1.0 - beta),
        }
    }
}

impl fmt::Display for StepComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StepComposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StepComposition::Full),
            "baseline" => Ok(StepComposition::Fixed),
            "left_only" => Ok(StepComposition::LeftOnly),
            "right_only" => Ok(StepComposition::RightOnly),
            other => Err(Error::Config(format!(
                "invalid ablation '{other}'; choose one of: full, baseline, left_only, right_only"
            ))),
        }
    }
}

/// `β·a + (1−β)·b`, kept inside `[min(a,b), max(a,b)]` despite rounding.
#[inline]
fn convex(beta: f64, a: f64, b: f64) -> f64 {
    let v = beta * a + (1.0 - beta) * b;
    v.clamp(a.min(b), a.max(b))
}

/// `β ⊙ η̄⁰ + (1−β) ⊙ η̂`, where any `(1,1)` operand is broadcast.
pub fn step_update(beta: &Matrix, eta0: &Matrix, eta_hat: &Matrix) -> Result<Matrix> {
    compose_step(StepComposition::Full, beta, eta0, eta_hat)
}

/// Entrywise composition of the three step ingredients under `comp`.
pub fn compose_step(
    comp: StepComposition,
    beta: &Matrix,
    eta0: &Matrix,
    eta_hat: &Matrix,
) -> Result<Matrix> {
    let shape = [beta, eta0, eta_hat]
        .iter()
        .map(|m| m.shape())
        .find(|&s| s != (1, 1))
        .unwrap_or((1, 1));
    for (m, other) in [(beta, eta0), (eta0, eta_hat), (eta_hat, beta)] {
        let ok = |s: (usize, usize)| s == (1, 1) || s == shape;
        if !ok(m.shape()) {
            return Err(Error::Shape {
                op: "step_update",
                left: m.shape(),
                right: other.shape(),
            });
        }
    }
    let at = |m: &Matrix, i: usize| if m.len() == 1 { m.data()[0] } else { m.data()[i] };
    let data = (0..shape.0 * shape.1)
        .map(|i| comp.compose(at(beta, i), at(eta0, i), at(eta_hat, i)))
        .collect();
    Ok(Matrix::from_raw(shape.0, shape.1, data))
}

/// Tiles a step to its target gradient shape.
pub fn expand(step: &Matrix, target: (usize, usize)) -> Result<Matrix> {
    crate::numerics::expand(step, target.0, target.1)
}

/// Adjoint of broadcasting: sums `full_grad` along the axes `kind` broadcasts over.
pub fn reduce_to_kind(full_grad: &Matrix, kind: StepSizeKind) -> Matrix {
    let (m, n) = full_grad.shape();
    match kind {
        StepSizeKind::Element => full_grad.clone(),
        StepSizeKind::Scalar => Matrix::scalar(full_grad.sum()),
        StepSizeKind::Row => {
            let sums: Vec<f64> = (0..m).map(|r| full_grad.row(r).iter().sum()).collect();
            Matrix::from_raw(m, 1, sums)
        }
        StepSizeKind::Column => {
            let mut sums = vec![0.0; n];
            for r in 0..m {
                for (s, v) in sums.iter_mut().zip(full_grad.row(r)) {
                    *s += v;
                }
            }
            Matrix::from_raw(1, n, sums)
        }
    }
}

/// `w − η̄ ⊙ g` with `η̄` broadcast from its kind's shape.
pub fn apply_step(w: &Matrix, step: &Matrix, g: &Matrix) -> Result<Matrix> {
    if !broadcastable(step.shape(), g.shape()) {
        return Err(Error::Broadcast {
            step: step.shape(),
            target: g.shape(),
        });
    }
    let scaled = hadamard_broadcast(step, g)?;
    w.sub(&scaled)
}

/// Mean, min and max over every entry of a collection of steps.
pub fn step_stats<'a>(steps: impl IntoIterator<Item = &'a Matrix>) -> Option<(f64, f64, f64)> {
    let mut count = 0usize;
    let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for m in steps {
        for &v in m.data() {
            count += 1;
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    // equal entries report their exact value rather than a rounded sum / count
    (count > 0).then(|| (if lo == hi { lo } else { (sum / count as f64).clamp(lo, hi) }, lo, hi))
}
