//! Minimal feed-forward network with hand-written backpropagation.
//!
//! The model is split into a backbone (one or more parallel MLP branches whose outputs are
//! concatenated into the feature vector) and a linear classification head. Weight matrices
//! are stored `out × in`, so `logits = head_weight · features + head_bias`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Layer {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..=a));
        Layer {
            weight,
            bias: DVector::zeros(fan_out),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// One backbone column. Frozen branches are skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub layers: Vec<Layer>,
    pub frozen: bool,
}

impl Branch {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            layers.push(Layer::init(fan_in, w, Activation::Relu, rng));
            fan_in = w;
        }
        Branch {
            layers,
            frozen: false,
        }
    }

    fn output_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, Layer::output_dim)
    }
}

/// Model parameters θ = (φ, w): backbone branches plus the linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub input_dim: usize,
    pub branches: Vec<Branch>,
    pub head_weight: DMatrix<f64>,
    pub head_bias: DVector<f64>,
}

impl ParamSet {
    /// Single-branch MLP with ReLU hidden layers and a zero-initialized head.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let branch = Branch::init(input_dim, widths, rng);
        let feature_dim = branch.output_dim(input_dim);
        ParamSet {
            input_dim,
            branches: vec![branch],
            head_weight: DMatrix::zeros(num_classes, feature_dim),
            head_bias: DVector::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.branches.iter().map(|b| b.output_dim(self.input_dim)).sum()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that layer dimensions chain and every entry is finite.
    pub fn validate(&self) -> Result<()> {
        for (bi, branch) in self.branches.iter().enumerate() {
            let mut dim = self.input_dim;
            for (li, layer) in branch.layers.iter().enumerate() {
                if layer.input_dim() != dim || layer.bias.len() != layer.output_dim() {
                    return Err(Error::config(format!(
                        "branch {bi} layer {li}: expected input dim {dim}, got {}x{} weight with bias {}",
                        layer.output_dim(),
                        layer.input_dim(),
                        layer.bias.len()
                    )));
                }
                dim = layer.output_dim();
            }
        }
        if self.head_weight.ncols() != self.feature_dim() || self.head_bias.len() != self.head_weight.nrows()
        {
            return Err(Error::config(format!(
                "head shape {}x{} (bias {}) does not match feature dim {}",
                self.head_weight.nrows(),
                self.head_weight.ncols(),
                self.head_bias.len(),
                self.feature_dim()
            )));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::numerical("non-finite parameter"));
        }
        Ok(())
    }

    /// A parameter set of identical shape filled with zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Flat views of every tensor in a fixed order: branch layers (weight, bias), then head
    /// weight and head bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for branch in &self.branches {
            for layer in &branch.layers {
                out.push(layer.weight.as_slice());
                out.push(layer.bias.as_slice());
            }
        }
        out.push(self.head_weight.as_slice());
        out.push(self.head_bias.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for branch in &mut self.branches {
            for layer in &mut branch.layers {
                out.push(layer.weight.as_mut_slice());
                out.push(layer.bias.as_mut_slice());
            }
        }
        out.push(self.head_weight.as_mut_slice());
        out.push(self.head_bias.as_mut_slice());
        out
    }

    /// Per-tensor frozen flags aligned with [`ParamSet::tensors`].
    pub fn frozen_flags(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for branch in &self.branches {
            for _ in &branch.layers {
                out.push(branch.frozen);
                out.push(branch.frozen);
            }
        }
        out.push(false);
        out.push(false);
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::config(format!(
                "flat vector has {} entries, parameter set has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`; shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn dot(&self, other: &ParamSet) -> f64 {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y))
            .sum()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && self.branches.len() == other.branches.len()
            && self.head_weight.shape() == other.head_weight.shape()
            && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// Returns a copy of `self` reshaped to `template`'s shape: overlapping entries are
    /// copied, everything else is zero.
    pub fn padded_to(&self, template: &ParamSet) -> ParamSet {
        let mut out = template.zeros_like();
        for (bo, bs) in out.branches.iter_mut().zip(&self.branches) {
            for (lo, ls) in bo.layers.iter_mut().zip(&bs.layers) {
                copy_overlap(&mut lo.weight, &ls.weight);
                copy_overlap_vec(&mut lo.bias, &ls.bias);
            }
        }
        copy_overlap(&mut out.head_weight, &self.head_weight);
        copy_overlap_vec(&mut out.head_bias, &self.head_bias);
        out
    }

    /// Backbone features h(x; φ) without caching.
    pub fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(forward(self, x)?.features)
    }

    /// Head-only logits for a given feature vector.
    pub fn head_logits(&self, features: &DVector<f64>) -> DVector<f64> {
        &self.head_weight * features + &self.head_bias
    }
}

fn copy_overlap(dst: &mut DMatrix<f64>, src: &DMatrix<f64>) {
    let r = dst.nrows().min(src.nrows());
    let c = dst.ncols().min(src.ncols());
    dst.view_mut((0, 0), (r, c)).copy_from(&src.view((0, 0), (r, c)));
}

fn copy_overlap_vec(dst: &mut DVector<f64>, src: &DVector<f64>) {
    let n = dst.len().min(src.len());
    dst.rows_mut(0, n).copy_from(&src.rows(0, n));
}

/// Numerically stable softmax.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    if logits.is_empty() {
        return DVector::zeros(0);
    }
    let max = logits.max();
    let mut out = logits.map(|z| (z - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    if logits.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = logits.max();
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct LayerCache {
    pub input: DVector<f64>,
    pub preact: DVector<f64>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub input: DVector<f64>,
    pub features: DVector<f64>,
    pub logits: DVector<f64>,
    pub probs: DVector<f64>,
    /// Per branch, per layer.
    pub hidden_preacts: Vec<Vec<LayerCache>>,
}

pub fn forward(params: &ParamSet, x: &[f64]) -> Result<ForwardRecord> {
    if x.len() != params.input_dim {
        return Err(Error::config(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            params.input_dim
        )));
    }
    let input = DVector::from_column_slice(x);
    let mut caches = Vec::with_capacity(params.branches.len());
    let mut parts = Vec::with_capacity(params.branches.len());
    for branch in &params.branches {
        let mut h = input.clone();
        let mut bc = Vec::with_capacity(branch.layers.len());
        for layer in &branch.layers {
            let pre = &layer.weight * &h + &layer.bias;
            let out = pre.map(|v| layer.activation.apply(v));
            bc.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                preact: pre,
            });
        }
        caches.push(bc);
        parts.push(h);
    }
    let features = if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.iter().flat_map(|p| p.iter().copied()),
        )
    };
    if features.len() != params.head_weight.ncols() {
        return Err(Error::config(format!(
            "feature dim {} does not match head width {}",
            features.len(),
            params.head_weight.ncols()
        )));
    }
    let logits = params.head_logits(&features);
    let probs = softmax(&logits);
    Ok(ForwardRecord {
        input,
        features,
        logits,
        probs,
        hidden_preacts: caches,
    })
}

/// Parameter gradient together with the gradient with respect to the input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParamSet,
    pub input: DVector<f64>,
}

/// Backpropagates `dlogits` (∂loss/∂logits) through the network.
pub fn backward(params: &ParamSet, record: &ForwardRecord, dlogits: &DVector<f64>) -> Gradients {
    let mut grads = params.zeros_like();
    let input = backward_accumulate(params, record, dlogits, 1.0, &mut grads);
    Gradients { params: grads, input }
}

/// Adds `scale · ∂loss/∂θ` into `acc` and returns `scale · ∂loss/∂x`.
pub fn backward_accumulate(
    params: &ParamSet,
    record: &ForwardRecord,
    dlogits: &DVector<f64>,
    scale: f64,
    acc: &mut ParamSet,
) -> DVector<f64> {
    let d = dlogits * scale;
    acc.head_weight.ger(1.0, &d, &record.features, 1.0);
    acc.head_bias += &d;
    let dfeat = params.head_weight.tr_mul(&d);

    let mut dinput = DVector::zeros(params.input_dim);
    let mut offset = 0;
    for (bi, branch) in params.branches.iter().enumerate() {
        let width = branch.output_dim(params.input_dim);
        let mut dh = dfeat.rows(offset, width).into_owned();
        offset += width;
        let caches = &record.hidden_preacts[bi];
        for (li, layer) in branch.layers.iter().enumerate().rev() {
            let cache = &caches[li];
            let da = dh.zip_map(&cache.preact, |g, p| g * layer.activation.derivative(p));
            let gl = &mut acc.branches[bi].layers[li];
            gl.weight.ger(1.0, &da, &cache.input, 1.0);
            gl.bias += &da;
            dh = layer.weight.tr_mul(&da);
        }
        dinput += dh;
    }
    dinput
}

/// −log p[label], floored at [`LOG_FLOOR`].
pub fn cross_entropy(probs: &DVector<f64>, label: usize) -> f64 {
    let p = probs[label];
    if p < LOG_FLOOR {
        log::debug!("cross-entropy probability {p:e} clamped to {LOG_FLOOR:e}");
    }
    -p.max(LOG_FLOOR).ln()
}

/// ∂CE/∂logits for softmax outputs: `p − onehot(label)`.
pub fn cross_entropy_grad(probs: &DVector<f64>, label: usize) -> DVector<f64> {
    let mut g = probs.clone();
    g[label] -= 1.0;
    g
}

/// Appends `new_class_count` zero-initialized rows to the head.
pub fn expand_head(params: &mut ParamSet, new_class_count: usize) -> Result<()> {
    if new_class_count == 0 {
        return Err(Error::config("expand_head needs a positive class count"));
    }
    let k = params.num_classes();
    let w = std::mem::replace(&mut params.head_weight, DMatrix::zeros(0, 0));
    params.head_weight = w.insert_rows(k, new_class_count, 0.0);
    let b = std::mem::replace(&mut params.head_bias, DVector::zeros(0));
    params.head_bias = b.insert_rows(k, new_class_count, 0.0);
    Ok(())
}

/// Multiplicative learning-rate drop applied from `epoch` onward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub momentum_buffers: ParamSet,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<Milestone>,
}

impl OptimizerState {
    pub fn new(
        params: &ParamSet,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        milestones: Vec<Milestone>,
    ) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0,1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(OptimizerState {
            momentum_buffers: params.zeros_like(),
            lr,
            momentum,
            weight_decay,
            milestones,
        })
    }

    /// Learning rate in effect at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| epoch >= m.epoch)
            .fold(self.lr, |lr, m| lr * m.factor)
    }
}

/// SGD with momentum and L2 weight decay: `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
///
/// Tensors belonging to frozen branches are left untouched, momentum included.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    opt: &mut OptimizerState,
    epoch: usize,
) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::config("gradient shape does not match parameters"));
    }
    if !opt.momentum_buffers.same_shape(params) {
        opt.momentum_buffers = opt.momentum_buffers.padded_to(params);
    }
    if let Some((ti, _)) = grads
        .tensors()
        .iter()
        .enumerate()
        .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::numerical(format!(
            "non-finite gradient in tensor {ti}; step rejected"
        )));
    }
    let lr = opt.lr_at(epoch);
    let (m, wd) = (opt.momentum, opt.weight_decay);
    let frozen = params.frozen_flags();
    let ps = params.tensors_mut();
    let vs = opt.momentum_buffers.tensors_mut();
    let gs = grads.tensors();
    for (((p, v), g), frozen) in ps.into_iter().zip(vs).zip(gs).zip(frozen) {
        if frozen {
            continue;
        }
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = m * *vi + (gi + wd * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, widths: &[usize], k: usize) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::init(3, widths, k, &mut rng);
        for v in p.head_weight.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn zero_network_gives_uniform_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::init(3, &[4], 5, &mut rng);
        for t in p.tensors_mut() {
            t.fill(0.0);
        }
        let r = forward(&p, &[0.3, -2.0, 7.0]).unwrap();
        assert!(r.logits.iter().all(|&z| z == 0.0));
        assert!(r.probs.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    }

    #[test]
    fn identity_backbone_identity_head() {
        let p = ParamSet {
            input_dim: 2,
            branches: vec![Branch {
                layers: vec![Layer {
                    weight: DMatrix::identity(2, 2),
                    bias: DVector::zeros(2),
                    activation: Activation::Identity,
                }],
                frozen: false,
            }],
            head_weight: DMatrix::identity(2, 2),
            head_bias: DVector::zeros(2),
        };
        let r = forward(&p, &[1.0, 0.0]).unwrap();
        assert_eq!(r.logits.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn probs_normalized_on_two_layer_net() {
        let p = small_net(7, &[5, 4], 3);
        let r = forward(&p, &[0.5, -1.5, 2.0]).unwrap();
        assert!((r.probs.sum() - 1.0).abs() < 1e-9);
        assert!(r.probs.iter().all(|&q| (0.0..=1.0).contains(&q)));
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let p = small_net(7, &[5], 3);
        assert!(matches!(forward(&p, &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let half = DVector::from_vec(vec![0.5, 0.5]);
        assert!((cross_entropy(&half, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        let onehot = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(cross_entropy(&onehot, 1), 0.0);
        let p = DVector::from_vec(vec![0.9, 0.1]);
        assert!((cross_entropy(&p, 1) - std::f64::consts::LN_10).abs() < 1e-12);
        // floor
        assert!((cross_entropy(&onehot, 0) - (-LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = small_net(3, &[4], 3);
        let r = forward(&p, &[1.0, 2.0, -1.0]).unwrap();
        let g = backward(&p, &r, &DVector::zeros(3));
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = ParamSet {
            input_dim: 1,
            branches: vec![Branch {
                layers: vec![],
                frozen: false,
            }],
            head_weight: DMatrix::from_element(1, 1, 1.0),
            head_bias: DVector::zeros(1),
        };
        let mut g = p.zeros_like();
        g.head_weight[(0, 0)] = 1.0;
        let mut opt = OptimizerState::new(&p, 0.1, 0.0, 0.0, vec![]).unwrap();
        sgd_step(&mut p, &g, &mut opt, 0).unwrap();
        assert!((p.head_weight[(0, 0)] - 0.9).abs() < 1e-15);

        let before = p.clone();
        sgd_step(&mut p, &before.zeros_like(), &mut opt, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn milestone_schedule() {
        let p = small_net(1, &[2], 2);
        let opt = OptimizerState::new(
            &p,
            0.1,
            0.9,
            5e-4,
            vec![Milestone {
                epoch: 60,
                factor: 0.1,
            }],
        )
        .unwrap();
        assert!((opt.lr_at(59) - 0.1).abs() < 1e-15);
        assert!((opt.lr_at(60) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = small_net(1, &[2], 2);
        let mut g = p.zeros_like();
        g.head_bias[0] = f64::NAN;
        let mut opt = OptimizerState::new(&p, 0.1, 0.9, 0.0, vec![]).unwrap();
        let before = p.clone();
        assert!(matches!(
            sgd_step(&mut p, &g, &mut opt, 0),
            Err(Error::Numerical(_))
        ));
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_branch_untouched_by_sgd() {
        let mut p = small_net(2, &[3], 2);
        p.branches[0].frozen = true;
        let before = p.branches[0].clone();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.fill(1.0);
        }
        let mut opt = OptimizerState::new(&p, 0.1, 0.9, 0.01, vec![]).unwrap();
        for _ in 0..5 {
            sgd_step(&mut p, &g, &mut opt, 0).unwrap();
        }
        assert_eq!(p.branches[0], before);
    }

    #[test]
    fn expand_head_preserves_old_logits() {
        let mut p = small_net(4, &[4], 2);
        let x = [0.2, -0.7, 1.1];
        let old = forward(&p, &x).unwrap().logits;
        expand_head(&mut p, 2).unwrap();
        let new = forward(&p, &x).unwrap().logits;
        assert_eq!(new.len(), 4);
        assert_eq!(new.rows(0, 2), old.rows(0, 2));
        assert_eq!(new[2], 0.0);
        assert_eq!(new[3], 0.0);
        assert!(expand_head(&mut p, 0).is_err());
    }

    #[test]
    fn expand_head_ten_task_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::init(4, &[8], 0, &mut rng);
        for _ in 0..10 {
            expand_head(&mut p, 10).unwrap();
        }
        assert_eq!(p.num_classes(), 100);
    }

    #[test]
    fn flat_roundtrip_and_padding() {
        let p = small_net(9, &[4, 3], 3);
        let mut q = p.zeros_like();
        q.set_from_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        let mut bigger = p.clone();
        expand_head(&mut bigger, 2).unwrap();
        let padded = p.padded_to(&bigger);
        assert!(padded.same_shape(&bigger));
        assert_eq!(padded.head_weight.row(4).sum(), 0.0);
        assert_eq!(padded.head_weight.row(1), p.head_weight.row(1));
    }
}
