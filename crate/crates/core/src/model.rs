//! The prediction network: bias-free linear layers with LeakyReLU between them,
//! its two losses, and per-block gradients by backpropagation.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix, Rng};

pub const DEFAULT_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    SoftmaxCe,
}

/// Supervision for a batch: class indices or a `k × b` target matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(m) => m.cols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Column-per-sample inputs with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Targets,
}

impl Batch {
    pub fn new(x: Matrix, y: Targets) -> Result<Self> {
        if x.cols() != y.len() {
            return Err(Error::Consistency(format!(
                "batch has {} inputs but {} targets",
                x.cols(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn size(&self) -> usize {
        self.x.cols()
    }
}

/// `φ = F_L ∘ σ ∘ … ∘ σ ∘ F_1` with `F_l(a) = W_l a`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    layers: Vec<Matrix>,
    slope: f64,
    loss: LossKind,
}

impl NetworkModel {
    pub fn new(layers: Vec<Matrix>, slope: f64, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Argument(format!(
                "activation slope must lie in (0,1), got {slope}"
            )));
        }
        for l in 1..layers.len() {
            if layers[l].cols() != layers[l - 1].rows() {
                return Err(Error::LayerChain {
                    layer: l,
                    expected: layers[l - 1].rows(),
                    actual: layers[l].cols(),
                });
            }
        }
        Ok(Self {
            layers,
            slope,
            loss,
        })
    }

    /// Random network for `widths = [in, h_1, …, out]`, entries uniform in `±1/√fan_in`.
    pub fn init(widths: &[usize], slope: f64, loss: LossKind, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Argument(format!(
                "widths must list at least two positive sizes, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Matrix::from_raw(fan_out, fan_in, data)
            })
            .collect();
        Self::new(layers, slope, loss)
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Matrix::len).sum()
    }

    /// Replaces layer `l`; the new matrix must keep the old shape.
    pub fn set_layer(&mut self, l: usize, w: Matrix) -> Result<()> {
        let old = self.layers.get(l).ok_or_else(|| {
            Error::Argument(format!("layer {l} out of range for {} layers", self.layers.len()))
        })?;
        if old.shape() != w.shape() {
            return Err(Error::Shape {
                op: "set_layer",
                left: old.shape(),
                right: w.shape(),
            });
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("set_layer"));
        }
        self.layers[l] = w;
        Ok(())
    }

    /// Swaps layer `l` with `w`; callers guarantee the shape.
    fn swap_layer(&mut self, l: usize, w: &mut Matrix) {
        debug_assert_eq!(self.layers[l].shape(), w.shape());
        std::mem::swap(&mut self.layers[l], w);
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub input: Matrix,
    /// `z_l = W_l a_{l-1}` for every layer.
    pub pre: Vec<Matrix>,
    /// `a_l = σ(z_l)`; the last entry equals the network output.
    pub post: Vec<Matrix>,
}

/// LeakyReLU value and derivative; the derivative at exactly zero is `slope`.
pub fn leaky_relu(x: &Matrix, slope: f64) -> (Matrix, Matrix) {
    let value = x.map(|v| if v > 0.0 { v } else { slope * v });
    let deriv = x.map(|v| if v > 0.0 { 1.0 } else { slope });
    (value, deriv)
}

fn activate(z: &Matrix, slope: f64) -> Matrix {
    z.map(|v| if v > 0.0 { v } else { slope * v })
}

fn check_input(net: &NetworkModel, x: &Matrix) -> Result<()> {
    if x.rows() != net.input_dim() {
        return Err(Error::LayerChain {
            layer: 0,
            expected: net.input_dim(),
            actual: x.rows(),
        });
    }
    Ok(())
}

/// Forward pass keeping every intermediate.
pub fn forward(net: &NetworkModel, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    check_input(net, x)?;
    let depth = net.num_layers();
    let mut pre = Vec::with_capacity(depth);
    let mut post: Vec<Matrix> = Vec::with_capacity(depth);
    for (l, w) in net.layers.iter().enumerate() {
        let a_prev = if l == 0 { x } else { &post[l - 1] };
        let z = matmul(w, a_prev)?;
        let a = if l + 1 == depth {
            z.clone()
        } else {
            activate(&z, net.slope)
        };
        pre.push(z);
        post.push(a);
    }
    let output = post[depth - 1].clone();
    Ok((
        output,
        ForwardCache {
            input: x.clone(),
            pre,
            post,
        },
    ))
}

/// Forward pass returning only the output.
pub fn predict(net: &NetworkModel, x: &Matrix) -> Result<Matrix> {
    check_input(net, x)?;
    let depth = net.num_layers();
    let mut a = matmul(&net.layers[0], x)?;
    for l in 1..depth {
        a = activate(&a, net.slope);
        a = matmul(&net.layers[l], &a)?;
    }
    Ok(a)
}

/// Mean over samples of the squared Euclidean error, with its gradient.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let b = pred.cols() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / b;
    Ok((loss, diff.scale(2.0 / b)))
}

/// Mean softmax cross-entropy with its gradient, computed with the max-shift.
pub fn softmax_ce_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (k, b) = logits.shape();
    if labels.len() != b {
        return Err(Error::Consistency(format!(
            "{b} logit columns but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    let probs = softmax_columns(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    let inv_b = 1.0 / b as f64;
    for (j, &y) in labels.iter().enumerate() {
        // -log p_y computed from the shifted logits for accuracy when p_y is tiny.
        let col_max = (0..k).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..k)
            .map(|i| (logits.get(i, j) - col_max).exp())
            .sum::<f64>()
            .ln();
        loss += lse - (logits.get(y, j) - col_max);
        grad.set(y, j, grad.get(y, j) - 1.0);
    }
    for v in grad.data_mut() {
        *v *= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Column-wise softmax.
pub fn softmax_columns(logits: &Matrix) -> Matrix {
    let (k, b) = logits.shape();
    let mut out = logits.clone();
    for j in 0..b {
        let m = (0..k).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for i in 0..k {
            let e = (logits.get(i, j) - m).exp();
            out.set(i, j, e);
            s += e;
        }
        for i in 0..k {
            out.set(i, j, out.get(i, j) / s);
        }
    }
    out
}

/// Loss of `pred` against `y` under `kind`, with the gradient w.r.t. `pred`.
pub fn batch_loss(kind: LossKind, pred: &Matrix, y: &Targets) -> Result<(f64, Matrix)> {
    match (kind, y) {
        (LossKind::Mse, Targets::Values(t)) => mse_loss(pred, t),
        (LossKind::SoftmaxCe, Targets::Classes(c)) => softmax_ce_loss(pred, c),
        (LossKind::Mse, Targets::Classes(_)) => Err(Error::Consistency(
            "MSE loss needs real-valued targets".into(),
        )),
        (LossKind::SoftmaxCe, Targets::Values(_)) => Err(Error::Consistency(
            "softmax cross-entropy needs class targets".into(),
        )),
    }
}

/// Loss of the network on a batch.
pub fn loss(net: &NetworkModel, batch: &Batch) -> Result<f64> {
    let pred = predict(net, &batch.x)?;
    Ok(batch_loss(net.loss, &pred, &batch.y)?.0)
}

/// Batch loss and `∂loss/∂W_l` for every `l` in `block`, all other layers held fixed.
///
/// Gradients come back in the order of `block`.
pub fn block_gradient(
    net: &NetworkModel,
    batch: &Batch,
    block: &[usize],
) -> Result<(f64, Vec<Matrix>)> {
    if block.is_empty() {
        return Err(Error::Argument("block must name at least one layer".into()));
    }
    let depth = net.num_layers();
    if let Some(&bad) = block.iter().find(|&&l| l >= depth) {
        return Err(Error::Argument(format!(
            "block layer {bad} out of range for {depth} layers"
        )));
    }
    let (out, cache) = forward(net, &batch.x)?;
    let (value, dout) = batch_loss(net.loss, &out, &batch.y)?;
    let lowest = *block.iter().min().expect("nonempty");
    let mut grads: Vec<Option<Matrix>> = vec![None; depth];
    let mut delta = dout;
    for l in (lowest..depth).rev() {
        let a_prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
        if block.contains(&l) {
            grads[l] = Some(matmul_nt(&delta, a_prev)?);
        }
        if l > lowest {
            let back = matmul_tn(&net.layers[l], &delta)?;
            let slope = net.slope;
            let z = &cache.pre[l - 1];
            let data = back
                .data()
                .iter()
                .zip(z.data())
                .map(|(&g, &zv)| if zv > 0.0 { g } else { slope * g })
                .collect();
            delta = Matrix::from_raw(back.rows(), back.cols(), data);
        }
    }
    let out = block
        .iter()
        .map(|&l| grads[l].clone().expect("computed above"))
        .collect();
    Ok((value, out))
}

/// [`block_gradient`] evaluated with the block's layers replaced by `weights`.
///
/// The substitution is undone before returning, so `net` is unchanged afterwards.
pub fn block_gradient_with(
    net: &mut NetworkModel,
    batch: &Batch,
    block: &[usize],
    weights: &mut [Matrix],
) -> Result<(f64, Vec<Matrix>)> {
    if weights.len() != block.len() {
        return Err(Error::Argument(format!(
            "{} substitute weights for a block of {} layers",
            weights.len(),
            block.len()
        )));
    }
    for (&l, w) in block.iter().zip(weights.iter()) {
        let have = net.layers.get(l).map(Matrix::shape);
        if have != Some(w.shape()) {
            return Err(Error::Shape {
                op: "block_gradient_with",
                left: have.unwrap_or((0, 0)),
                right: w.shape(),
            });
        }
    }
    for (&l, w) in block.iter().zip(weights.iter_mut()) {
        net.swap_layer(l, w);
    }
    let out = block_gradient(net, batch, block);
    for (&l, w) in block.iter().zip(weights.iter_mut()) {
        net.swap_layer(l, w);
    }
    out
}

/// Index of the largest entry of every column.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..m.rows() {
                if m.get(i, j) > m.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    fn net1(w: f64, loss: LossKind) -> NetworkModel {
        NetworkModel::new(vec![Matrix::scalar(w)], DEFAULT_SLOPE, loss).unwrap()
    }

    #[test]
    fn leaky_relu_examples() {
        let x = Matrix::from_rows(&[&[3.0, -2.0, 0.0]]);
        let (v, d) = leaky_relu(&x, 0.01);
        assert_eq!(v.data()[0], 3.0);
        assert_eq!(d.data()[0], 1.0);
        assert!((v.data()[1] + 0.02).abs() < 1e-15);
        assert_eq!(d.data()[1], 0.01);
        assert_eq!(v.data()[2], 0.0);
        assert_eq!(d.data()[2], 0.01);
    }

    #[test]
    fn forward_examples() {
        let net = net1(2.0, LossKind::Mse);
        let (out, cache) = forward(&net, &Matrix::scalar(3.0)).unwrap();
        assert_eq!(out, Matrix::scalar(6.0));
        assert_eq!(cache.pre.len(), 1);

        let zero = NetworkModel::new(
            vec![Matrix::zeros(3, 2), Matrix::zeros(2, 3)],
            DEFAULT_SLOPE,
            LossKind::Mse,
        )
        .unwrap();
        let x = Matrix::from_rows(&[&[1.0, -1.0], &[2.0, 5.0]]);
        assert_eq!(forward(&zero, &x).unwrap().0, Matrix::zeros(2, 2));

        let mut rng = seeded_rng(3);
        let net2 = NetworkModel::init(&[4, 5, 3], DEFAULT_SLOPE, LossKind::Mse, &mut rng).unwrap();
        assert_eq!(
            forward(&net2, &Matrix::zeros(4, 1)).unwrap().0,
            Matrix::zeros(3, 1)
        );
    }

    #[test]
    fn forward_rejects_bad_input_width() {
        let net = net1(2.0, LossKind::Mse);
        let err = forward(&net, &Matrix::zeros(2, 1)).unwrap_err();
        assert!(matches!(err, Error::LayerChain { layer: 0, .. }));
        let err = NetworkModel::new(
            vec![Matrix::zeros(3, 2), Matrix::zeros(2, 4)],
            DEFAULT_SLOPE,
            LossKind::Mse,
        )
        .unwrap_err();
        assert!(matches!(err, Error::LayerChain { layer: 1, .. }));
    }

    #[test]
    fn cache_replays_exactly() {
        let mut rng = seeded_rng(1);
        let net = NetworkModel::init(&[3, 4, 2], DEFAULT_SLOPE, LossKind::Mse, &mut rng).unwrap();
        let x = Matrix::new(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (out, cache) = forward(&net, &x).unwrap();
        assert_eq!(cache.pre.len(), net.num_layers());
        let z0 = matmul(net.layer(0), &cache.input).unwrap();
        assert_eq!(z0, cache.pre[0]);
        assert_eq!(leaky_relu(&z0, DEFAULT_SLOPE).0, cache.post[0]);
        assert_eq!(matmul(net.layer(1), &cache.post[0]).unwrap(), out);
        assert_eq!(predict(&net, &x).unwrap(), out);
    }

    #[test]
    fn mse_examples() {
        let p = Matrix::from_rows(&[&[1.0, 2.0]]);
        let (l, g) = mse_loss(&p, &p).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, Matrix::zeros(1, 2));

        let (l, g) = mse_loss(&Matrix::column(&[1.0, 2.0]), &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g, Matrix::column(&[2.0, 4.0]));

        let pred = Matrix::from_rows(&[&[1.0, 3.0]]);
        let tgt = Matrix::from_rows(&[&[0.5, -1.0]]);
        let pred2 = Matrix::from_rows(&[&[1.0, 3.0, 1.0, 3.0]]);
        let tgt2 = Matrix::from_rows(&[&[0.5, -1.0, 0.5, -1.0]]);
        let a = mse_loss(&pred, &tgt).unwrap().0;
        let b = mse_loss(&pred2, &tgt2).unwrap().0;
        assert!((a - b).abs() < 1e-15);
        assert!(mse_loss(&pred, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn softmax_ce_examples() {
        let (l, g) = softmax_ce_loss(&Matrix::column(&[0.0, 0.0]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.get(0, 0) + 0.5).abs() < 1e-15 && (g.get(1, 0) - 0.5).abs() < 1e-15);

        let (l, g) = softmax_ce_loss(&Matrix::column(&[1000.0, 0.0]), &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));

        let z = Matrix::from_rows(&[&[0.3, -1.0], &[2.0, 0.1], &[-0.5, 0.7]]);
        let (l1, g1) = softmax_ce_loss(&z, &[1, 2]).unwrap();
        let (l2, g2) = softmax_ce_loss(&z.map(|v| v + 37.5), &[1, 2]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);

        assert!(matches!(
            softmax_ce_loss(&z, &[3, 0]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn block_gradient_examples() {
        let net = net1(2.0, LossKind::Mse);
        let batch = Batch::new(Matrix::scalar(1.0), Targets::Values(Matrix::scalar(0.0))).unwrap();
        let (l, g) = block_gradient(&net, &batch, &[0]).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g[0], Matrix::scalar(4.0));
        assert!(block_gradient(&net, &batch, &[]).is_err());
        assert!(block_gradient(&net, &batch, &[1]).is_err());
    }

    #[test]
    fn block_gradient_vanishes_at_least_squares_fit() {
        // y = 2x exactly fit by a single linear layer.
        let x = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]);
        let y = x.scale(2.0);
        let net = net1(2.0, LossKind::Mse);
        let batch = Batch::new(x, Targets::Values(y)).unwrap();
        let (_, g) = block_gradient(&net, &batch, &[0]).unwrap();
        assert!(g[0].frobenius_norm() <= 1e-10);
    }

    fn random_net_and_batch(seed: u64, loss: LossKind) -> (NetworkModel, Batch) {
        let mut rng = seeded_rng(seed);
        let widths: Vec<usize> = (0..4).map(|_| rng.random_range(1..=8)).collect();
        let widths = if loss == LossKind::SoftmaxCe {
            let mut w = widths;
            w[3] = w[3].max(2);
            w
        } else {
            widths
        };
        let net = NetworkModel::init(&widths, DEFAULT_SLOPE, loss, &mut rng).unwrap();
        let b = rng.random_range(1..=4);
        let x = Matrix::new(
            widths[0],
            b,
            (0..widths[0] * b).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = match loss {
            LossKind::Mse => Targets::Values(
                Matrix::new(
                    widths[3],
                    b,
                    (0..widths[3] * b).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            ),
            LossKind::SoftmaxCe => {
                Targets::Classes((0..b).map(|_| rng.random_range(0..widths[3])).collect())
            }
        };
        (net, Batch::new(x, y).unwrap())
    }

    fn fd_check(net: &NetworkModel, batch: &Batch) -> f64 {
        let h = 1e-5;
        let all: Vec<usize> = (0..net.num_layers()).collect();
        let (_, grads) = block_gradient(net, batch, &all).unwrap();
        let mut worst: f64 = 0.0;
        for l in 0..net.num_layers() {
            for i in 0..net.layer(l).len() {
                let mut plus = net.clone();
                let mut w = plus.layer(l).clone();
                w.data_mut()[i] += h;
                plus.set_layer(l, w).unwrap();
                let mut minus = net.clone();
                let mut w = minus.layer(l).clone();
                w.data_mut()[i] -= h;
                minus.set_layer(l, w).unwrap();
                let fd = (loss(&plus, batch).unwrap() - loss(&minus, batch).unwrap()) / (2.0 * h);
                let an = grads[l].data()[i];
                worst = worst.max((an - fd).abs() / (1.0 + an.abs()));
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_on_random_nets() {
        for seed in 0..40 {
            for kind in [LossKind::Mse, LossKind::SoftmaxCe] {
                let (net, batch) = random_net_and_batch(seed, kind);
                let err = fd_check(&net, &batch);
                assert!(err <= 1e-6, "seed {seed} {kind:?}: {err}");
            }
        }
    }

    #[test]
    fn partial_block_matches_full_gradient_slice() {
        let (net, batch) = random_net_and_batch(11, LossKind::SoftmaxCe);
        let (_, all) = block_gradient(&net, &batch, &[0, 1, 2]).unwrap();
        let (_, part) = block_gradient(&net, &batch, &[2, 1]).unwrap();
        assert_eq!(part[0], all[2]);
        assert_eq!(part[1], all[1]);
    }

    proptest! {
        #[test]
        fn softmax_columns_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let z = Matrix::new(4, 3, vals).unwrap();
            let p = softmax_columns(&z);
            for j in 0..3 {
                let s: f64 = (0..4).map(|i| p.get(i, j)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let (net, batch) = random_net_and_batch(seed, LossKind::Mse);
            prop_assert_eq!(forward(&net, &batch.x).unwrap(), forward(&net, &batch.x).unwrap());
        }
    }
}
