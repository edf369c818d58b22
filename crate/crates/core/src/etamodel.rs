//! The eta model `ψ`: a three-layer bias-free MLP mapping the five gradient features of a
//! block to a mixing factor `β` and a candidate step `η̂` for every layer in the block,
//! and the meta-gradient that trains it through the temporary weights `W′`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{block_gradient_with, Batch, NetworkModel};
use crate::numerics::{Matrix, Rng};
use crate::stepsize::{
    apply_step, compose_step, reduce_to_kind, GradFeatures, ProjectionStyle, StepComposition,
    StepSizeKind,
};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_META_LR: f64 = 1e-3;
pub const FEATURE_COUNT: usize = 5;

/// One output head: the step kind and gradient shape of a layer the model serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub kind: StepSizeKind,
    pub target: (usize, usize),
}

impl HeadSpec {
    pub fn shape(&self) -> (usize, usize) {
        self.kind.shape_for(self.target)
    }

    pub fn entries(&self) -> usize {
        self.kind.entries_for(self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaModel {
    weights: [Matrix; 3],
    heads: Vec<HeadSpec>,
    slope: f64,
    style: ProjectionStyle,
    meta_lr: f64,
}

/// `β` and `η̂` per served layer, each shaped like that layer's step.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaOutputs {
    pub beta: Vec<Matrix>,
    pub eta_hat: Vec<Matrix>,
}

/// Gradient of a scalar with respect to the three weight matrices of `ψ`.
///
/// `ψ` sees a single feature vector per step, so each gradient is the outer product
/// `delta · inputᵀ` and is stored in that factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiGrads {
    pub deltas: [Vec<f64>; 3],
    pub inputs: [Vec<f64>; 3],
}

impl PsiGrads {
    /// Dense gradient of weight matrix `i`.
    pub fn dense(&self, i: usize) -> Matrix {
        let (d, a) = (&self.deltas[i], &self.inputs[i]);
        let data = d
            .iter()
            .flat_map(|&di| a.iter().map(move |&aj| di * aj))
            .collect();
        Matrix::from_raw(d.len(), a.len(), data)
    }

    /// Frobenius norm over all three gradients.
    pub fn norm(&self) -> f64 {
        let sq = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>();
        (0..3)
            .map(|i| sq(&self.deltas[i]) * sq(&self.inputs[i]))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        (0..3).all(|i| {
            self.deltas[i].iter().all(|&v| v == 0.0) || self.inputs[i].iter().all(|&v| v == 0.0)
        })
    }
}

/// Intermediates of one `ψ` evaluation.
#[derive(Debug, Clone)]
pub struct PsiCache {
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    post: [Vec<f64>; 2],
    projected: Vec<f64>,
}

impl PsiCache {
    /// Hidden pre-activations of both hidden layers.
    pub fn hidden_pre(&self) -> &[Vec<f64>; 2] {
        &self.pre
    }
}

impl EtaModel {
    /// Randomly initialized model, weights uniform in `±√(6/(fan_in+fan_out))`.
    pub fn new(
        heads: Vec<HeadSpec>,
        hidden: usize,
        slope: f64,
        style: ProjectionStyle,
        meta_lr: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out = 2 * heads.iter().map(HeadSpec::entries).sum::<usize>();
        let dims = [(hidden, FEATURE_COUNT), (hidden, hidden), (out, hidden)];
        let weights = dims.map(|(rows, cols)| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Matrix::from_raw(rows, cols, data)
        });
        Self::from_weights(weights, heads, slope, style, meta_lr)
    }

    /// Model with the given weights; shapes must chain `5 → h → h → 2K`.
    pub fn from_weights(
        weights: [Matrix; 3],
        heads: Vec<HeadSpec>,
        slope: f64,
        style: ProjectionStyle,
        meta_lr: f64,
    ) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Argument("eta model needs at least one head".into()));
        }
        if !(meta_lr >= 0.0 && meta_lr.is_finite()) {
            return Err(Error::Argument(format!(
                "meta learning rate must be finite and nonnegative, got {meta_lr}"
            )));
        }
        let out = 2 * heads.iter().map(HeadSpec::entries).sum::<usize>();
        let hidden = weights[0].rows();
        let expect = [(hidden, FEATURE_COUNT), (hidden, hidden), (out, hidden)];
        for (i, (w, e)) in weights.iter().zip(expect).enumerate() {
            if w.shape() != e {
                return Err(Error::LayerChain {
                    layer: i,
                    expected: e.1,
                    actual: w.cols(),
                });
            }
        }
        Ok(Self {
            weights,
            heads,
            slope,
            style,
            meta_lr,
        })
    }

    /// Model whose weights are all zero.
    pub fn zeros(
        heads: Vec<HeadSpec>,
        hidden: usize,
        slope: f64,
        style: ProjectionStyle,
        meta_lr: f64,
    ) -> Result<Self> {
        let out = 2 * heads.iter().map(HeadSpec::entries).sum::<usize>();
        let weights = [
            Matrix::zeros(hidden, FEATURE_COUNT),
            Matrix::zeros(hidden, hidden),
            Matrix::zeros(out, hidden),
        ];
        Self::from_weights(weights, heads, slope, style, meta_lr)
    }

    pub fn weights(&self) -> &[Matrix; 3] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix; 3] {
        &mut self.weights
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    /// Total step entries `K` over all heads.
    pub fn step_entries(&self) -> usize {
        self.heads.iter().map(HeadSpec::entries).sum()
    }

    pub fn style(&self) -> ProjectionStyle {
        self.style
    }

    pub fn meta_lr(&self) -> f64 {
        self.meta_lr
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    /// Evaluates `ψ` and keeps the intermediates for backpropagation.
    pub fn forward_cached(&self, d: &GradFeatures) -> (EtaOutputs, PsiCache) {
        let input = d.to_array().to_vec();
        let slope = self.slope;
        let leaky = |v: f64| if v > 0.0 { v } else { slope * v };
        let z1 = matvec(&self.weights[0], &input);
        let a1: Vec<f64> = z1.iter().map(|&v| leaky(v)).collect();
        let z2 = matvec(&self.weights[1], &a1);
        let a2: Vec<f64> = z2.iter().map(|&v| leaky(v)).collect();
        let raw = matvec(&self.weights[2], &a2);
        let projected: Vec<f64> = raw.iter().map(|&u| self.style.apply(u)).collect();
        let outputs = self.split(&projected);
        (
            outputs,
            PsiCache {
                input,
                pre: [z1, z2],
                post: [a1, a2],
                projected,
            },
        )
    }

    fn split(&self, flat: &[f64]) -> EtaOutputs {
        let k = self.step_entries();
        let mut beta = Vec::with_capacity(self.heads.len());
        let mut eta_hat = Vec::with_capacity(self.heads.len());
        let mut offset = 0;
        for h in &self.heads {
            let (r, c) = h.shape();
            let n = r * c;
            beta.push(Matrix::from_raw(r, c, flat[offset..offset + n].to_vec()));
            eta_hat.push(Matrix::from_raw(
                r,
                c,
                flat[k + offset..k + offset + n].to_vec(),
            ));
            offset += n;
        }
        EtaOutputs { beta, eta_hat }
    }

    /// Backpropagates `∂L/∂β` and `∂L/∂η̂` (post-projection) to the weights.
    pub fn backward(
        &self,
        cache: &PsiCache,
        d_beta: &[Matrix],
        d_eta_hat: &[Matrix],
    ) -> Result<PsiGrads> {
        if d_beta.len() != self.heads.len() || d_eta_hat.len() != self.heads.len() {
            return Err(Error::Argument(format!(
                "expected {} head gradients",
                self.heads.len()
            )));
        }
        let k = self.step_entries();
        let mut d_raw = vec![0.0; 2 * k];
        let mut offset = 0;
        for (h, (db, dh)) in self.heads.iter().zip(d_beta.iter().zip(d_eta_hat)) {
            for m in [db, dh] {
                if m.shape() != h.shape() {
                    return Err(Error::Shape {
                        op: "EtaModel::backward",
                        left: h.shape(),
                        right: m.shape(),
                    });
                }
            }
            let n = h.entries();
            for i in 0..n {
                let pb = cache.projected[offset + i];
                let ph = cache.projected[k + offset + i];
                d_raw[offset + i] = db.data()[i] * self.style.derivative_from_output(pb);
                d_raw[k + offset + i] = dh.data()[i] * self.style.derivative_from_output(ph);
            }
            offset += n;
        }
        let slope = self.slope;
        let through = |g: Vec<f64>, z: &[f64]| -> Vec<f64> {
            g.into_iter()
                .zip(z)
                .map(|(gi, &zi)| if zi > 0.0 { gi } else { slope * gi })
                .collect()
        };
        let d_a2 = matvec_t(&self.weights[2], &d_raw);
        let d_z2 = through(d_a2, &cache.pre[1]);
        let d_a1 = matvec_t(&self.weights[1], &d_z2);
        let d_z1 = through(d_a1, &cache.pre[0]);
        Ok(PsiGrads {
            deltas: [d_z1, d_z2, d_raw],
            inputs: [
                cache.input.clone(),
                cache.post[0].clone(),
                cache.post[1].clone(),
            ],
        })
    }

    /// Plain gradient descent on the weights: `ψ ← ψ − meta_lr · grads`.
    pub fn apply_gradients(&mut self, grads: &PsiGrads) -> Result<()> {
        for i in 0..3 {
            let w = &self.weights[i];
            if (grads.deltas[i].len(), grads.inputs[i].len()) != w.shape() {
                return Err(Error::Shape {
                    op: "psi_step",
                    left: w.shape(),
                    right: (grads.deltas[i].len(), grads.inputs[i].len()),
                });
            }
        }
        if self.meta_lr == 0.0 {
            return Ok(());
        }
        for i in 0..3 {
            let cols = self.weights[i].cols();
            let data = self.weights[i].data_mut();
            for (r, &di) in grads.deltas[i].iter().enumerate() {
                let scale = self.meta_lr * di;
                if scale == 0.0 {
                    continue;
                }
                let row = &mut data[r * cols..(r + 1) * cols];
                for (w, &a) in row.iter_mut().zip(&grads.inputs[i]) {
                    *w -= scale * a;
                }
            }
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("psi_step"));
        }
        Ok(())
    }
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(w: &Matrix, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(w.row(r)) {
            *o += a * yr;
        }
    }
    out
}

/// `β, η̂ ← ψ(D)`.
pub fn psi_forward(psi: &EtaModel, d: &GradFeatures) -> EtaOutputs {
    psi.forward_cached(d).0
}

/// `ψ ← ψ − meta_lr · grads`.
pub fn psi_step(psi: &mut EtaModel, grads: &PsiGrads) -> Result<()> {
    psi.apply_gradients(grads)
}

/// Candidate steps for every head under `comp`.
pub fn candidate_steps(
    outputs: &EtaOutputs,
    eta0: &[Matrix],
    comp: StepComposition,
) -> Result<Vec<Matrix>> {
    outputs
        .beta
        .iter()
        .zip(&outputs.eta_hat)
        .zip(eta0)
        .map(|((b, h), e0)| compose_step(comp, b, e0, h))
        .collect()
}

/// `∂L/∂η̄ = reduce_to_kind(−(∂L/∂W′) ⊙ g)` for `W′ = w − η̄ ⊙ g`.
pub fn step_sensitivity(dl_dwprime: &Matrix, g: &Matrix, kind: StepSizeKind) -> Result<Matrix> {
    let prod = dl_dwprime.hadamard(g)?;
    Ok(reduce_to_kind(&prod.scale(-1.0), kind))
}

/// Meta-loss at the temporary weights and its sensitivity to the step of each layer.
#[derive(Debug, Clone)]
pub struct MetaProbe {
    pub meta_loss: f64,
    pub w_prime: Vec<Matrix>,
    pub d_eta: Vec<Matrix>,
}

/// Forms `W′_l = W_l − η̄_l ⊙ g_l` for the block, evaluates the loss on the meta batch,
/// and returns `∂L/∂η̄_l` for every layer.
pub fn probe_steps(
    net: &mut NetworkModel,
    block: &[usize],
    grads: &[Matrix],
    steps: &[Matrix],
    kinds: &[StepSizeKind],
    meta_batch: &Batch,
) -> Result<MetaProbe> {
    if grads.len() != block.len() || steps.len() != block.len() || kinds.len() != block.len() {
        return Err(Error::Argument(
            "block, gradients, steps and kinds must have equal length".into(),
        ));
    }
    let mut w_prime = Vec::with_capacity(block.len());
    for ((&l, g), s) in block.iter().zip(grads).zip(steps) {
        let w = net.layer(l);
        if w.shape() != g.shape() {
            return Err(Error::Shape {
                op: "meta_gradients",
                left: w.shape(),
                right: g.shape(),
            });
        }
        w_prime.push(apply_step(w, s, g)?);
    }
    let (meta_loss, dl_dw) = block_gradient_with(net, meta_batch, block, &mut w_prime)?;
    let d_eta = dl_dw
        .iter()
        .zip(grads)
        .zip(kinds)
        .map(|((dw, g), &k)| step_sensitivity(dw, g, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaProbe {
        meta_loss,
        w_prime,
        d_eta,
    })
}

/// Chains `∂L/∂η̄` through the step composition and `ψ`'s projection into weight gradients.
pub fn chain_to_psi(
    psi: &EtaModel,
    cache: &PsiCache,
    outputs: &EtaOutputs,
    eta0: &[Matrix],
    d_eta: &[Matrix],
    comp: StepComposition,
) -> Result<PsiGrads> {
    let mut d_beta = Vec::with_capacity(d_eta.len());
    let mut d_hat = Vec::with_capacity(d_eta.len());
    for (((b, h), e0), de) in outputs.beta.iter().zip(&outputs.eta_hat).zip(eta0).zip(d_eta) {
        let n = b.len();
        let e0_at = |i: usize| if e0.len() == 1 { e0.data()[0] } else { e0.data()[i] };
        let mut db = Vec::with_capacity(n);
        let mut dh = Vec::with_capacity(n);
        for i in 0..n {
            let (pb, ph) = comp.partials(b.data()[i], e0_at(i), h.data()[i]);
            db.push(de.data()[i] * pb);
            dh.push(de.data()[i] * ph);
        }
        d_beta.push(Matrix::from_raw(b.rows(), b.cols(), db));
        d_hat.push(Matrix::from_raw(h.rows(), h.cols(), dh));
    }
    psi.backward(cache, &d_beta, &d_hat)
}

/// Everything one immediate-coupling meta step produces.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grads: PsiGrads,
    pub meta_loss: f64,
    pub outputs: EtaOutputs,
    pub candidate: Vec<Matrix>,
    pub w_prime: Vec<Matrix>,
}

/// Gradient of the meta-loss `L(φ(ẋ; W′), ẏ)` with respect to every weight of `ψ`, where
/// `W′ = W − η̄_cand ⊙ g` and `η̄_cand` is composed from `ψ(D)`.
///
/// The block's current weights are read from `net`; `grads` are the block gradients on the
/// main batch and `eta0` the initial steps, both in block order.
pub fn meta_gradients(
    psi: &EtaModel,
    d: &GradFeatures,
    net: &mut NetworkModel,
    block: &[usize],
    grads: &[Matrix],
    eta0: &[Matrix],
    comp: StepComposition,
    meta_batch: &Batch,
) -> Result<MetaGradient> {
    let (outputs, cache) = psi.forward_cached(d);
    let candidate = candidate_steps(&outputs, eta0, comp)?;
    let kinds: Vec<StepSizeKind> = psi.heads().iter().map(|h| h.kind).collect();
    let probe = probe_steps(net, block, grads, &candidate, &kinds, meta_batch)?;
    let grads = chain_to_psi(psi, &cache, &outputs, eta0, &probe.d_eta, comp)?;
    Ok(MetaGradient {
        grads,
        meta_loss: probe.meta_loss,
        outputs,
        candidate,
        w_prime: probe.w_prime,
    })
}

/// Outputs a bypassed model would produce: `β ≡ 1`, so the composed step is `η̄⁰`.
pub fn bypass_outputs(heads: &[HeadSpec]) -> EtaOutputs {
    let ones: Vec<Matrix> = heads
        .iter()
        .map(|h| {
            let (r, c) = h.shape();
            Matrix::filled(r, c, 1.0)
        })
        .collect();
    EtaOutputs {
        beta: ones.clone(),
        eta_hat: ones,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss, LossKind, Targets, DEFAULT_SLOPE};
    use crate::numerics::seeded_rng;
    use crate::stepsize::grad_features;

    fn head(kind: StepSizeKind, target: (usize, usize)) -> HeadSpec {
        HeadSpec { kind, target }
    }

    fn features(rng: &mut Rng) -> GradFeatures {
        let g = Matrix::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        grad_features(&g)
    }

    #[test]
    fn zero_model_outputs_one_half() {
        let psi = EtaModel::zeros(
            vec![head(StepSizeKind::Row, (3, 2))],
            8,
            DEFAULT_SLOPE,
            ProjectionStyle::Tanh,
            1e-3,
        )
        .unwrap();
        let out = psi_forward(&psi, &features(&mut seeded_rng(0)));
        assert_eq!(out.beta[0], Matrix::filled(3, 1, 0.5));
        assert_eq!(out.eta_hat[0], Matrix::filled(3, 1, 0.5));
    }

    #[test]
    fn outputs_are_open_unit_and_shaped() {
        let mut rng = seeded_rng(1);
        for trial in 0..1000 {
            let style = if trial % 2 == 0 {
                ProjectionStyle::Tanh
            } else {
                ProjectionStyle::Sigmoid
            };
            let psi = EtaModel::new(
                vec![head(StepSizeKind::Scalar, (4, 3))],
                6,
                DEFAULT_SLOPE,
                style,
                1e-3,
                &mut rng,
            )
            .unwrap();
            let scale = rng.random_range(0.0..50.0);
            let g = Matrix::new(4, 3, (0..12).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let out = psi_forward(&psi, &grad_features(&g));
            assert_eq!(out.beta[0].shape(), (1, 1));
            assert_eq!(out.eta_hat[0].shape(), (1, 1));
            for v in out.beta[0].data().iter().chain(out.eta_hat[0].data()) {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn step_sensitivity_scalar_example() {
        let d = step_sensitivity(
            &Matrix::from_rows(&[&[1.0, 1.0]]),
            &Matrix::from_rows(&[&[2.0, 3.0]]),
            StepSizeKind::Scalar,
        )
        .unwrap();
        assert_eq!(d, Matrix::scalar(-5.0));
    }

    fn tiny_setup(seed: u64, kind: StepSizeKind) -> (EtaModel, NetworkModel, Batch, Batch) {
        let mut rng = seeded_rng(seed);
        let widths = [3, 4, 2];
        let net = NetworkModel::init(&widths, DEFAULT_SLOPE, LossKind::SoftmaxCe, &mut rng).unwrap();
        let mk = |rng: &mut Rng, b: usize| {
            let x = Matrix::new(3, b, (0..3 * b).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = (0..b).map(|_| rng.random_range(0..2)).collect();
            Batch::new(x, Targets::Classes(y)).unwrap()
        };
        let main = mk(&mut rng, 3);
        let meta = mk(&mut rng, 3);
        let heads = vec![head(kind, (4, 3)), head(kind, (2, 4))];
        let psi = EtaModel::new(heads, 6, DEFAULT_SLOPE, ProjectionStyle::Tanh, 1e-3, &mut rng).unwrap();
        (psi, net, main, meta)
    }

    fn meta_loss_at(
        psi: &EtaModel,
        net: &NetworkModel,
        block: &[usize],
        grads: &[Matrix],
        eta0: &[Matrix],
        comp: StepComposition,
        d: &GradFeatures,
        meta: &Batch,
    ) -> f64 {
        let outputs = psi_forward(psi, d);
        let steps = candidate_steps(&outputs, eta0, comp).unwrap();
        let mut moved = net.clone();
        for ((&l, g), s) in block.iter().zip(grads).zip(&steps) {
            let w = apply_step(net.layer(l), s, g).unwrap();
            moved.set_layer(l, w).unwrap();
        }
        loss(&moved, meta).unwrap()
    }

    #[test]
    fn meta_gradients_match_finite_differences() {
        let h = 1e-5;
        for kind in StepSizeKind::ALL {
            for comp in StepComposition::ALL {
                let (psi, mut net, main, meta) = tiny_setup(7, kind);
                let block = [0, 1];
                let (_, grads) = crate::model::block_gradient(&net, &main, &block).unwrap();
                let d = crate::stepsize::grad_features_of(&grads);
                let eta0: Vec<Matrix> = psi
                    .heads()
                    .iter()
                    .map(|hd| {
                        let (r, c) = hd.shape();
                        Matrix::filled(r, c, 0.1)
                    })
                    .collect();
                let mg = meta_gradients(&psi, &d, &mut net, &block, &grads, &eta0, comp, &meta).unwrap();
                let mut worst: f64 = 0.0;
                for i in 0..3 {
                    let dense = mg.grads.dense(i);
                    for j in 0..dense.len() {
                        let mut plus = psi.clone();
                        plus.weights_mut()[i].data_mut()[j] += h;
                        let mut minus = psi.clone();
                        minus.weights_mut()[i].data_mut()[j] -= h;
                        let fd = (meta_loss_at(&plus, &net, &block, &grads, &eta0, comp, &d, &meta)
                            - meta_loss_at(&minus, &net, &block, &grads, &eta0, comp, &d, &meta))
                            / (2.0 * h);
                        let an = dense.data()[j];
                        worst = worst.max((an - fd).abs() / (1.0 + an.abs()));
                    }
                }
                assert!(worst <= 1e-5, "{kind} {comp}: {worst}");
                if comp == StepComposition::Fixed {
                    assert!(mg.grads.is_zero());
                }
            }
        }
    }

    #[test]
    fn zero_gradient_gives_zero_meta_gradient() {
        let (psi, mut net, _, meta) = tiny_setup(3, StepSizeKind::Element);
        let grads = vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)];
        let eta0 = vec![Matrix::filled(4, 3, 0.1), Matrix::filled(2, 4, 0.1)];
        let d = crate::stepsize::grad_features_of(&grads);
        let before = net.clone();
        let mg = meta_gradients(&psi, &d, &mut net, &[0, 1], &grads, &eta0, StepComposition::Full, &meta)
            .unwrap();
        assert!(mg.grads.is_zero());
        assert_eq!(mg.w_prime[0], *before.layer(0));
        assert_eq!(net, before);
    }

    #[test]
    fn psi_step_fixed_points() {
        let (psi, _, _, _) = tiny_setup(5, StepSizeKind::Scalar);
        let zero = PsiGrads {
            deltas: [vec![0.0; 6], vec![0.0; 6], vec![0.0; 4]],
            inputs: [vec![1.0; 5], vec![1.0; 6], vec![1.0; 6]],
        };
        let mut p = psi.clone();
        psi_step(&mut p, &zero).unwrap();
        assert_eq!(p, psi);

        let ones = PsiGrads {
            deltas: [vec![1.0; 6], vec![1.0; 6], vec![1.0; 4]],
            inputs: [vec![1.0; 5], vec![1.0; 6], vec![1.0; 6]],
        };
        let mut frozen = EtaModel::from_weights(
            psi.weights().clone(),
            psi.heads().to_vec(),
            DEFAULT_SLOPE,
            ProjectionStyle::Tanh,
            0.0,
        )
        .unwrap();
        psi_step(&mut frozen, &ones).unwrap();
        assert_eq!(frozen.weights(), psi.weights());
    }

    #[test]
    fn psi_step_descends_on_one_parameter_instance() {
        // 1x1 linear net, scalar step; only the last ψ weight row is nonzero so the
        // meta-loss depends on a single active path.
        let net0 = NetworkModel::new(vec![Matrix::scalar(2.0)], DEFAULT_SLOPE, LossKind::Mse).unwrap();
        let batch = Batch::new(Matrix::scalar(1.0), Targets::Values(Matrix::scalar(0.0))).unwrap();
        let heads = vec![head(StepSizeKind::Scalar, (1, 1))];
        let mut w1 = Matrix::zeros(1, FEATURE_COUNT);
        w1.set(0, 4, 1.0);
        let w2 = Matrix::scalar(1.0);
        let w3 = Matrix::column(&[0.0, 0.0]);
        let mut psi = EtaModel::from_weights([w1, w2, w3], heads, DEFAULT_SLOPE, ProjectionStyle::Tanh, 0.005)
            .unwrap();
        let (_, g) = crate::model::block_gradient(&net0, &batch, &[0]).unwrap();
        let d = grad_features(&g[0]);
        let eta0 = vec![Matrix::scalar(0.1)];
        let mut net = net0.clone();
        let mg = meta_gradients(&psi, &d, &mut net, &[0], &g, &eta0, StepComposition::Full, &batch).unwrap();
        let before = mg.meta_loss;
        psi_step(&mut psi, &mg.grads).unwrap();
        let after = meta_loss_at(&psi, &net0, &[0], &g, &eta0, StepComposition::Full, &d, &batch);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn psi_updates_stay_finite() {
        let mut rng = seeded_rng(9);
        let heads = vec![head(StepSizeKind::Element, (2, 2))];
        let mut psi = EtaModel::new(heads, 8, DEFAULT_SLOPE, ProjectionStyle::Sigmoid, 1e-2, &mut rng).unwrap();
        for _ in 0..10_000 {
            let d = features(&mut rng);
            let (out, cache) = psi.forward_cached(&d);
            let db: Vec<Matrix> = out
                .beta
                .iter()
                .map(|m| {
                    let vals = (0..m.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Matrix::new(m.rows(), m.cols(), vals).unwrap()
                })
                .collect();
            let dh = db.clone();
            let grads = psi.backward(&cache, &db, &dh).unwrap();
            psi_step(&mut psi, &grads).unwrap();
        }
        assert!(psi.weights().iter().all(Matrix::is_finite));
    }
}
