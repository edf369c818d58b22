//! Per-block update engines: the trainable-step OAGD steps (scalar and non-scalar) and the
//! SGD, Adam and hypergradient baselines.

use crate::error::{Error, Result};
use crate::etamodel::{
    candidate_steps, chain_to_psi, meta_gradients, probe_steps, psi_step, EtaModel, HeadSpec,
};
use crate::model::{block_gradient, Batch, NetworkModel};
use crate::numerics::{scale_add, Matrix};
use crate::stepsize::{apply_step, grad_features_of, GradFeatures, StepComposition, StepSize, StepSizeKind};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_ADAM_RATE: f64 = 1e-3;
pub const DEFAULT_HD_HYPER_RATE: f64 = 1e-4;
pub const HD_RATE_FLOOR: f64 = 1e-8;

/// `w − eta · g`.
pub fn sgd_step(w: &Matrix, g: &Matrix, eta: f64) -> Result<Matrix> {
    scale_add(w, -eta, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    rate: f64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], rate: f64) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
            rate,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// One bias-corrected Adam step over every parameter of a block.
pub fn adam_step(state: &mut AdamState, w: &[Matrix], g: &[Matrix]) -> Result<Vec<Matrix>> {
    check_lengths(w.len(), g.len(), state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let mut out = Vec::with_capacity(w.len());
    for (i, (wi, gi)) in w.iter().zip(g).enumerate() {
        check_same(wi, gi, "adam_step")?;
        check_same(&state.m[i], gi, "adam_step")?;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let mut next = wi.clone();
        for (j, (nw, &gj)) in next.data_mut().iter_mut().zip(gi.data()).enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *nw -= state.rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        out.push(next);
    }
    Ok(out)
}

/// Hypergradient descent on a single scalar rate shared by a block.
#[derive(Debug, Clone, PartialEq)]
pub struct HdState {
    prev: Vec<Matrix>,
    rate: f64,
    hyper_rate: f64,
}

impl HdState {
    pub fn new(shapes: &[(usize, usize)], rate: f64, hyper_rate: f64) -> Self {
        Self {
            prev: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            rate,
            hyper_rate,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// `η ← max(floor, η + α⟨g, g_prev⟩)`, then `w ← w − η g`.
pub fn hd_step(state: &mut HdState, w: &[Matrix], g: &[Matrix]) -> Result<Vec<Matrix>> {
    check_lengths(w.len(), g.len(), state.prev.len())?;
    let mut inner = 0.0;
    for (gi, pi) in g.iter().zip(&state.prev) {
        check_same(gi, pi, "hd_step")?;
        inner += gi.dot(pi);
    }
    state.rate = (state.rate + state.hyper_rate * inner).max(HD_RATE_FLOOR);
    let out = w
        .iter()
        .zip(g)
        .map(|(wi, gi)| sgd_step(wi, gi, state.rate))
        .collect::<Result<Vec<_>>>()?;
    state.prev = g.to_vec();
    Ok(out)
}

fn check_lengths(w: usize, g: usize, state: usize) -> Result<()> {
    if w != g || w != state {
        return Err(Error::Argument(format!(
            "{w} weights, {g} gradients and {state} state slots must agree"
        )));
    }
    Ok(())
}

fn check_same(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Trainable steps and eta model for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct OagdState {
    pub steps: Vec<StepSize>,
    pub psi: EtaModel,
    pub meta_lag: u8,
    pub composition: StepComposition,
    /// Pins `β ≡ 1` so the step stays at `η̄⁰` and the eta model is never consulted.
    pub bypass: bool,
    prev_features: Option<GradFeatures>,
}

impl OagdState {
    pub fn new(
        steps: Vec<StepSize>,
        psi: EtaModel,
        meta_lag: u8,
        composition: StepComposition,
        bypass: bool,
    ) -> Result<Self> {
        if meta_lag > 1 {
            return Err(Error::Argument(format!("meta_lag must be 0 or 1, got {meta_lag}")));
        }
        let heads: Vec<HeadSpec> = steps
            .iter()
            .map(|s| HeadSpec {
                kind: s.kind(),
                target: s.target(),
            })
            .collect();
        if heads != psi.heads() {
            return Err(Error::Argument(
                "eta model heads do not match the block's step sizes".into(),
            ));
        }
        Ok(Self {
            steps,
            psi,
            meta_lag,
            composition,
            bypass,
            prev_features: None,
        })
    }

    fn kinds(&self) -> Vec<StepSizeKind> {
        self.steps.iter().map(StepSize::kind).collect()
    }

    fn init_values(&self) -> Vec<Matrix> {
        self.steps.iter().map(|s| s.init_values().clone()).collect()
    }

    fn values(&self) -> Vec<Matrix> {
        self.steps.iter().map(|s| s.values().clone()).collect()
    }

    fn store(&mut self, values: Vec<Matrix>) -> Result<()> {
        for (s, v) in self.steps.iter_mut().zip(values) {
            s.set_values(v)?;
        }
        Ok(())
    }
}

/// Scalar-step OAGD: one trainable-step update of `block` on `main`, with `ψ` trained on `meta`.
///
/// Returns the main-batch loss at the pre-update weights.
pub fn oagd_s_step(
    state: &mut OagdState,
    net: &mut NetworkModel,
    block: &[usize],
    main: &Batch,
    meta: &Batch,
) -> Result<f64> {
    if state.steps.iter().any(|s| s.kind() != StepSizeKind::Scalar) {
        return Err(Error::Argument("oagd_s_step needs scalar step sizes".into()));
    }
    oagd_step(state, net, block, main, meta)
}

/// Non-scalar OAGD (element, row or column steps broadcast onto the gradient).
pub fn oagd_ns_step(
    state: &mut OagdState,
    net: &mut NetworkModel,
    block: &[usize],
    main: &Batch,
    meta: &Batch,
) -> Result<f64> {
    if state.steps.iter().any(|s| s.kind() == StepSizeKind::Scalar) {
        return Err(Error::Argument("oagd_ns_step needs non-scalar step sizes".into()));
    }
    oagd_step(state, net, block, main, meta)
}

/// Shared OAGD pipeline for any mix of step kinds.
pub fn oagd_step(
    state: &mut OagdState,
    net: &mut NetworkModel,
    block: &[usize],
    main: &Batch,
    meta: &Batch,
) -> Result<f64> {
    if state.steps.len() != block.len() {
        return Err(Error::Argument(format!(
            "block of {} layers served by {} step sizes",
            block.len(),
            state.steps.len()
        )));
    }
    let (loss, grads) = block_gradient(net, main, block)?;
    let eta0 = state.init_values();

    let (w_prime, next_steps) = if state.bypass {
        let w_prime = block
            .iter()
            .zip(&grads)
            .zip(&eta0)
            .map(|((&l, g), e)| apply_step(net.layer(l), e, g))
            .collect::<Result<Vec<_>>>()?;
        (w_prime, eta0)
    } else if state.meta_lag == 0 {
        let d = grad_features_of(&grads);
        let mg = meta_gradients(
            &state.psi,
            &d,
            net,
            block,
            &grads,
            &eta0,
            state.composition,
            meta,
        )?;
        psi_step(&mut state.psi, &mg.grads)?;
        (mg.w_prime, mg.candidate)
    } else {
        // Lagged reading: W′ uses the stored step, whose dependence on ψ runs through the
        // features seen at the previous step.
        let d = grad_features_of(&grads);
        let current = state.values();
        let probe = probe_steps(net, block, &grads, &current, &state.kinds(), meta)?;
        if let Some(prev) = state.prev_features {
            let (outputs, cache) = state.psi.forward_cached(&prev);
            let pg = chain_to_psi(
                &state.psi,
                &cache,
                &outputs,
                &eta0,
                &probe.d_eta,
                state.composition,
            )?;
            psi_step(&mut state.psi, &pg)?;
        }
        let outputs = state.psi.forward_cached(&d).0;
        let next = candidate_steps(&outputs, &eta0, state.composition)?;
        state.prev_features = Some(d);
        (probe.w_prime, next)
    };

    for (&l, w) in block.iter().zip(w_prime) {
        net.set_layer(l, w)?;
    }
    state.store(next_steps)?;
    Ok(loss)
}

/// The update rule serving one block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockEngine {
    Oagd(OagdState),
    Sgd { rate: f64 },
    Adam(AdamState),
    Hd(HdState),
}

impl BlockEngine {
    pub fn needs_meta_batch(&self) -> bool {
        matches!(self, BlockEngine::Oagd(_))
    }

    /// Performs one update of `block`; returns the main-batch loss before the update.
    pub fn step(
        &mut self,
        net: &mut NetworkModel,
        block: &[usize],
        main: &Batch,
        meta: Option<&Batch>,
    ) -> Result<f64> {
        match self {
            BlockEngine::Oagd(state) => {
                let meta = meta.ok_or_else(|| {
                    Error::Argument("trainable-step engine needs a meta batch".into())
                })?;
                oagd_step(state, net, block, main, meta)
            }
            BlockEngine::Sgd { rate } => {
                let (loss, grads) = block_gradient(net, main, block)?;
                for (&l, g) in block.iter().zip(&grads) {
                    let w = sgd_step(net.layer(l), g, *rate)?;
                    net.set_layer(l, w)?;
                }
                Ok(loss)
            }
            BlockEngine::Adam(state) => {
                let (loss, grads) = block_gradient(net, main, block)?;
                let ws: Vec<Matrix> = block.iter().map(|&l| net.layer(l).clone()).collect();
                let next = adam_step(state, &ws, &grads)?;
                for (&l, w) in block.iter().zip(next) {
                    net.set_layer(l, w)?;
                }
                Ok(loss)
            }
            BlockEngine::Hd(state) => {
                let (loss, grads) = block_gradient(net, main, block)?;
                let ws: Vec<Matrix> = block.iter().map(|&l| net.layer(l).clone()).collect();
                let next = hd_step(state, &ws, &grads)?;
                for (&l, w) in block.iter().zip(next) {
                    net.set_layer(l, w)?;
                }
                Ok(loss)
            }
        }
    }

    /// Current step values for logging: the trainable steps, or the scalar rate.
    pub fn step_values(&self) -> Vec<Matrix> {
        match self {
            BlockEngine::Oagd(s) => s.steps.iter().map(|st| st.values().clone()).collect(),
            BlockEngine::Sgd { rate } => vec![Matrix::scalar(*rate)],
            BlockEngine::Adam(s) => vec![Matrix::scalar(s.rate())],
            BlockEngine::Hd(s) => vec![Matrix::scalar(s.rate())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etamodel::FEATURE_COUNT;
    use crate::model::{loss, LossKind, Targets, DEFAULT_SLOPE};
    use crate::numerics::{seeded_rng, Rng};
    use crate::stepsize::ProjectionStyle;
    use rand::Rng as _;

    #[test]
    fn sgd_examples() {
        let w = Matrix::from_rows(&[&[1.0, -2.0]]);
        assert_eq!(sgd_step(&w, &Matrix::zeros(1, 2), 0.3).unwrap(), w);
        let out = sgd_step(&Matrix::scalar(1.0), &Matrix::scalar(2.0), 0.1).unwrap();
        assert!((out.data()[0] - 0.8).abs() < 1e-15);
        let g = Matrix::from_rows(&[&[0.5, 0.25]]);
        let two = sgd_step(&sgd_step(&w, &g, 0.05).unwrap(), &g, 0.05).unwrap();
        let one = sgd_step(&w, &g, 0.1).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-15);
    }

    #[test]
    fn adam_examples() {
        let r = 0.01;
        let mut st = AdamState::new(&[(1, 1)], r);
        let out = adam_step(&mut st, &[Matrix::scalar(0.0)], &[Matrix::scalar(1.0)]).unwrap();
        assert!((out[0].data()[0] + r / (1.0 + ADAM_EPS)).abs() < 1e-15);

        let mut st = AdamState::new(&[(2, 1)], r);
        let mut w = vec![Matrix::column(&[1.0, -1.0])];
        for _ in 0..50 {
            w = adam_step(&mut st, &w, &[Matrix::zeros(2, 1)]).unwrap();
        }
        assert_eq!(w[0], Matrix::column(&[1.0, -1.0]));

        let mut st = AdamState::new(&[(1, 2)], r);
        let g = Matrix::from_rows(&[&[0.3, -2.0]]);
        let mut w = vec![Matrix::zeros(1, 2)];
        for _ in 0..10 {
            let next = adam_step(&mut st, &w, std::slice::from_ref(&g)).unwrap();
            let delta = next[0].sub(&w[0]).unwrap();
            assert!(delta.data()[0] < 0.0 && delta.data()[1] > 0.0);
            w = next;
        }
    }

    #[test]
    fn hd_examples() {
        let g1 = Matrix::from_rows(&[&[1.0, 2.0]]);
        let g2 = Matrix::from_rows(&[&[0.5, 1.0]]);
        let w0 = vec![Matrix::from_rows(&[&[0.0, 1.0]])];

        let mut st = HdState::new(&[(1, 2)], 0.1, 0.0);
        let w1 = hd_step(&mut st, &w0, std::slice::from_ref(&g1)).unwrap();
        let w2 = hd_step(&mut st, &w1, std::slice::from_ref(&g2)).unwrap();
        let s1 = sgd_step(&w0[0], &g1, 0.1).unwrap();
        assert_eq!(w2[0], sgd_step(&s1, &g2, 0.1).unwrap());

        let mut st = HdState::new(&[(1, 2)], 0.1, 1e-2);
        hd_step(&mut st, &w0, std::slice::from_ref(&g1)).unwrap();
        assert_eq!(st.rate(), 0.1);
        hd_step(&mut st, &w0, std::slice::from_ref(&g2)).unwrap();
        assert!(st.rate() > 0.1);
        assert!((st.rate() - (0.1 + 1e-2 * 2.5)).abs() < 1e-15);
    }

    fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn class_batch(d: usize, k: usize, b: usize, rng: &mut Rng) -> Batch {
        let x = rand_matrix(d, b, rng);
        Batch::new(x, Targets::Classes((0..b).map(|_| rng.random_range(0..k)).collect())).unwrap()
    }

    fn oagd_for(
        net: &NetworkModel,
        block: &[usize],
        kind: StepSizeKind,
        bypass: bool,
        lag: u8,
        rng: &mut Rng,
    ) -> OagdState {
        let steps: Vec<StepSize> = block
            .iter()
            .map(|&l| StepSize::new(kind, net.layer(l).shape(), 0.1).unwrap())
            .collect();
        let heads = steps
            .iter()
            .map(|s| HeadSpec {
                kind: s.kind(),
                target: s.target(),
            })
            .collect();
        let psi = EtaModel::new(heads, 16, DEFAULT_SLOPE, ProjectionStyle::Tanh, 1e-3, rng).unwrap();
        OagdState::new(steps, psi, lag, StepComposition::Full, bypass).unwrap()
    }

    #[test]
    fn bypass_matches_sgd() {
        let mut rng = seeded_rng(2);
        let mut net = NetworkModel::init(&[6, 5, 3], DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut rng).unwrap();
        let mut sgd_net = net.clone();
        let mut st = oagd_for(&net, &[0, 1], StepSizeKind::Scalar, true, 0, &mut rng);
        for _ in 0..200 {
            let main = class_batch(6, 3, 4, &mut rng);
            let meta = class_batch(6, 3, 4, &mut rng);
            oagd_s_step(&mut st, &mut net, &[0, 1], &main, &meta).unwrap();
            let (_, g) = block_gradient(&sgd_net, &main, &[0, 1]).unwrap();
            for l in 0..2 {
                let w = sgd_step(sgd_net.layer(l), &g[l], 0.1).unwrap();
                sgd_net.set_layer(l, w).unwrap();
            }
            assert_eq!(st.steps[0].values(), &Matrix::scalar(0.1));
        }
        for l in 0..2 {
            assert!(net.layer(l).max_abs_diff(sgd_net.layer(l)) <= 1e-12);
        }
    }

    #[test]
    fn element_bypass_matches_scalar_bypass() {
        let mut rng = seeded_rng(4);
        let net0 = NetworkModel::init(&[4, 3, 2], DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut rng).unwrap();
        let (mut a, mut b) = (net0.clone(), net0);
        let mut sa = oagd_for(&a, &[1], StepSizeKind::Scalar, true, 0, &mut rng);
        let mut sb = oagd_for(&b, &[1], StepSizeKind::Element, true, 0, &mut rng);
        for _ in 0..50 {
            let main = class_batch(4, 2, 3, &mut rng);
            let meta = class_batch(4, 2, 3, &mut rng);
            oagd_s_step(&mut sa, &mut a, &[1], &main, &meta).unwrap();
            oagd_ns_step(&mut sb, &mut b, &[1], &main, &meta).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gradient_leaves_weights_but_updates_step() {
        let net0 = NetworkModel::new(vec![Matrix::scalar(2.0)], DEFAULT_SLOPE, LossKind::Mse).unwrap();
        // x = 0 makes the gradient vanish.
        let batch = Batch::new(Matrix::scalar(0.0), Targets::Values(Matrix::scalar(1.0))).unwrap();
        let mut rng = seeded_rng(0);
        let mut st = oagd_for(&net0, &[0], StepSizeKind::Scalar, false, 0, &mut rng);
        let mut net = net0.clone();
        let out = crate::etamodel::psi_forward(&st.psi, &grad_features_of(&[Matrix::scalar(0.0)]));
        let expect = crate::stepsize::step_update(&out.beta[0], &Matrix::scalar(0.1), &out.eta_hat[0]).unwrap();
        oagd_s_step(&mut st, &mut net, &[0], &batch, &batch).unwrap();
        assert_eq!(net, net0);
        assert_eq!(st.steps[0].values(), &expect);
        assert_ne!(st.steps[0].values(), &Matrix::scalar(0.1));
    }

    #[test]
    fn hand_computed_single_step() {
        // W = 2, x = 1, y = 0, so g = 4 and all gradient features but the norm are 4 as well.
        // ψ: hidden width 1, first layer reads the norm, last layer zero ⇒ β = η̂ = 0.5.
        let mut net = NetworkModel::new(vec![Matrix::scalar(2.0)], DEFAULT_SLOPE, LossKind::Mse).unwrap();
        let batch = Batch::new(Matrix::scalar(1.0), Targets::Values(Matrix::scalar(0.0))).unwrap();
        let mut w1 = Matrix::zeros(1, FEATURE_COUNT);
        w1.set(0, 4, 1.0);
        let heads = vec![HeadSpec {
            kind: StepSizeKind::Scalar,
            target: (1, 1),
        }];
        let psi = EtaModel::from_weights(
            [w1, Matrix::scalar(1.0), Matrix::column(&[0.0, 0.0])],
            heads,
            DEFAULT_SLOPE,
            ProjectionStyle::Tanh,
            0.01,
        )
        .unwrap();
        let steps = vec![StepSize::new(StepSizeKind::Scalar, (1, 1), 0.1).unwrap()];
        let mut st = OagdState::new(steps, psi, 0, StepComposition::Full, false).unwrap();
        let l = oagd_s_step(&mut st, &mut net, &[0], &batch, &batch).unwrap();
        assert_eq!(l, 4.0);
        // η̄ = 0.5·0.1 + 0.5·0.5 = 0.3; W′ = 2 − 0.3·4 = 0.8.
        assert!((net.layer(0).data()[0] - 0.8).abs() < 1e-15);
        assert!((st.steps[0].values().data()[0] - 0.3).abs() < 1e-15);
        // ∂L/∂W′ = 1.6, ∂L/∂η̄ = −6.4; β head: −6.4·(0.1−0.5)·0.5 = 1.28; η̂ head: −6.4·0.5·0.5 = −1.6.
        // Hidden activation is 4, so ∂L/∂W3 = [5.12; −6.4] and W3 ← −0.01·that.
        let w3 = &st.psi.weights()[2];
        assert!((w3.data()[0] + 0.0512).abs() < 1e-15);
        assert!((w3.data()[1] - 0.064).abs() < 1e-15);
        assert_eq!(st.psi.weights()[1], Matrix::scalar(1.0));
    }

    #[test]
    fn row_kind_step_matches_expand_then_multiply() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let g = Matrix::from_rows(&[&[0.5, -1.0], &[2.0, 1.0]]);
        let eta = Matrix::column(&[0.1, 0.2]);
        let out = apply_step(&w, &eta, &g).unwrap();
        let want = Matrix::from_rows(&[&[0.95, 2.1], &[2.6, 3.8]]);
        assert!(out.max_abs_diff(&want) < 1e-15);
        let tiled = crate::stepsize::expand(&eta, (2, 2)).unwrap();
        assert_eq!(out, w.sub(&tiled.hadamard(&g).unwrap()).unwrap());
    }

    #[test]
    fn steps_stay_boxed_and_loss_is_pre_update() {
        for (kind, lag) in [
            (StepSizeKind::Element, 0),
            (StepSizeKind::Row, 1),
            (StepSizeKind::Column, 0),
        ] {
            let mut rng = seeded_rng(8);
            let mut net = NetworkModel::init(&[5, 4, 3], DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut rng).unwrap();
            let mut st = oagd_for(&net, &[0], kind, false, lag, &mut rng);
            for _ in 0..1000 {
                let main = class_batch(5, 3, 4, &mut rng);
                let meta = class_batch(5, 3, 4, &mut rng);
                let before = loss(&net, &main).unwrap();
                let l = oagd_ns_step(&mut st, &mut net, &[0], &main, &meta).unwrap();
                assert_eq!(l, before);
                assert!(st.steps[0].values().data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn kind_guards() {
        let mut rng = seeded_rng(1);
        let mut net = NetworkModel::init(&[2, 2], DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut rng).unwrap();
        let b = class_batch(2, 2, 2, &mut rng);
        let mut s = oagd_for(&net, &[0], StepSizeKind::Element, false, 0, &mut rng);
        assert!(oagd_s_step(&mut s, &mut net, &[0], &b, &b).is_err());
        let mut s = oagd_for(&net, &[0], StepSizeKind::Scalar, false, 0, &mut rng);
        assert!(oagd_ns_step(&mut s, &mut net, &[0], &b, &b).is_err());
    }

    #[test]
    fn lagged_first_step_uses_initial_step() {
        let mut rng = seeded_rng(6);
        let net0 = NetworkModel::init(&[3, 2], DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut rng).unwrap();
        let mut net = net0.clone();
        let mut st = oagd_for(&net, &[0], StepSizeKind::Scalar, false, 1, &mut rng);
        let psi0 = st.psi.clone();
        let b = class_batch(3, 2, 4, &mut rng);
        oagd_s_step(&mut st, &mut net, &[0], &b, &b).unwrap();
        let (_, g) = block_gradient(&net0, &b, &[0]).unwrap();
        assert_eq!(net.layer(0), &sgd_step(net0.layer(0), &g[0], 0.1).unwrap());
        assert_eq!(st.psi, psi0);
        assert_ne!(st.steps[0].values(), &Matrix::scalar(0.1));
    }
}
