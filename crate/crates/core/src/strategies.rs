//! Continual-learning strategies expressed as training-loop hooks.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::{BufferPolicy, Exemplar, ExemplarBuffer, PrototypeSet};
use crate::model::{Model, Network};
use crate::nn::{
    argmax, backward, backward_accumulate, cross_entropy, cross_entropy_grad, forward, softmax, Branch,
    ForwardRecord, ParamSet, LOG_FLOOR,
};
use crate::ood_train::{logitnorm_backward, logitnorm_transform};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Naive,
    Cumulative,
    Replay,
    Gdumb,
    Lwf,
    Ewc,
    Agem,
    IcarlLite,
    Bic,
    DynamicErLite,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::Naive,
        StrategyKind::Cumulative,
        StrategyKind::Replay,
        StrategyKind::Gdumb,
        StrategyKind::Lwf,
        StrategyKind::Ewc,
        StrategyKind::Agem,
        StrategyKind::IcarlLite,
        StrategyKind::Bic,
        StrategyKind::DynamicErLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::Cumulative => "cumulative",
            StrategyKind::Replay => "replay",
            StrategyKind::Gdumb => "gdumb",
            StrategyKind::Lwf => "lwf",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Agem => "agem",
            StrategyKind::IcarlLite => "icarl-lite",
            StrategyKind::Bic => "bic",
            StrategyKind::DynamicErLite => "dynamic-er-lite",
        }
    }

    fn buffer_policy(self) -> Option<BufferPolicy> {
        match self {
            StrategyKind::Replay | StrategyKind::Agem | StrategyKind::DynamicErLite => {
                Some(BufferPolicy::Reservoir)
            }
            StrategyKind::Gdumb | StrategyKind::IcarlLite | StrategyKind::Bic => {
                Some(BufferPolicy::ClassBalanced)
            }
            _ => None,
        }
    }

    fn replays(self) -> bool {
        matches!(
            self,
            StrategyKind::Replay | StrategyKind::IcarlLite | StrategyKind::Bic | StrategyKind::DynamicErLite
        )
    }

    fn distills(self) -> bool {
        matches!(
            self,
            StrategyKind::Lwf | StrategyKind::IcarlLite | StrategyKind::Bic
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Weight of the current-batch loss in the replay mixture.
    pub alpha: f64,
    pub kd_weight: f64,
    pub reg_weight: f64,
    pub kd_temperature: f64,
    pub agem_ref_batch: usize,
    pub buffer_capacity: usize,
    /// Replay mini-batch size; `None` uses the current batch size.
    pub replay_batch: Option<usize>,
    pub fisher_samples: usize,
    /// Hidden widths of each added branch; `None` repeats the base widths.
    pub branch_widths: Option<Vec<usize>>,
    pub bic_holdout: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::Naive,
            alpha: 0.5,
            kd_weight: 1.0,
            reg_weight: 100.0,
            kd_temperature: 2.0,
            agem_ref_batch: 64,
            buffer_capacity: 200,
            replay_batch: None,
            fisher_samples: 200,
            branch_widths: None,
            bic_holdout: 0.1,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "strategy.alpha = {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.kd_weight >= 0.0) || !(self.reg_weight >= 0.0) {
            return Err(Error::config(
                "strategy.kd_weight and strategy.reg_weight must be >= 0",
            ));
        }
        if !(self.kd_temperature > 0.0) {
            return Err(Error::config("strategy.kd_temperature must be > 0"));
        }
        if !(self.bic_holdout > 0.0 && self.bic_holdout < 1.0) {
            return Err(Error::config("strategy.bic_holdout must lie in (0, 1)"));
        }
        if self.kind.buffer_policy().is_some() && self.buffer_capacity == 0 {
            return Err(Error::config(format!(
                "strategy {} needs buffer_capacity > 0",
                self.kind
            )));
        }
        Ok(())
    }
}

/// `α·L_current + (1−α)·L_buffer`.
pub fn replay_loss(current: f64, buffer: f64, alpha: f64) -> f64 {
    alpha * current + (1.0 - alpha) * buffer
}

/// `KL(student ‖ teacher)`, teacher probabilities floored at 1e-12.
pub fn distillation_loss(student: &DVector<f64>, teacher: &DVector<f64>) -> f64 {
    student
        .iter()
        .zip(teacher.iter())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.max(LOG_FLOOR).ln()))
        .sum()
}

/// Loss and gradient of tempered KD with respect to the student logits over `old` classes.
/// Logits outside `old` receive zero gradient.
pub fn distillation_grad(
    student_logits: &DVector<f64>,
    teacher_logits: &DVector<f64>,
    old: usize,
    temperature: f64,
) -> (f64, DVector<f64>) {
    let s = softmax(&(student_logits.rows(0, old) / temperature));
    let q = softmax(&(teacher_logits.rows(0, old) / temperature));
    let kl = distillation_loss(&s, &q);
    let mut g = DVector::zeros(student_logits.len());
    for k in 0..old {
        if s[k] > 0.0 {
            g[k] = s[k] * (s[k].ln() - q[k].max(LOG_FLOOR).ln() - kl) / temperature;
        }
    }
    (kl, g)
}

/// Per-parameter importance Ω with the anchor θ* it protects.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap {
    pub omega: ParamSet,
    pub anchor: ParamSet,
}

impl ImportanceMap {
    /// Reshapes to `params`; parameters created after the anchor get Ω = 0.
    pub fn aligned_to(&self, params: &ParamSet) -> ImportanceMap {
        ImportanceMap {
            omega: self.omega.padded_to(params),
            anchor: self.anchor.padded_to(params),
        }
    }
}

/// `Σ Ω (θ − θ*)²`.
pub fn ewc_penalty(params: &ParamSet, importance: &ImportanceMap) -> f64 {
    let imp = importance.aligned_to(params);
    params
        .tensors()
        .into_iter()
        .zip(imp.omega.tensors())
        .zip(imp.anchor.tensors())
        .flat_map(|((p, o), a)| p.iter().zip(o).zip(a).map(|((p, o), a)| o * (p - a).powi(2)))
        .sum()
}

/// Adds `weight · ∂/∂θ Σ Ω (θ − θ*)²` into `grads`.
pub fn ewc_grad_accumulate(params: &ParamSet, importance: &ImportanceMap, weight: f64, grads: &mut ParamSet) {
    let imp = importance.aligned_to(params);
    for (((g, p), o), a) in grads
        .tensors_mut()
        .into_iter()
        .zip(params.tensors())
        .zip(imp.omega.tensors())
        .zip(imp.anchor.tensors())
    {
        for (((g, p), o), a) in g.iter_mut().zip(p).zip(o).zip(a) {
            *g += 2.0 * weight * o * (p - a);
        }
    }
}

/// Mean of squared per-sample gradients over `samples` evaluations of `grad_of`.
pub fn fisher_diagonal(
    n_params: usize,
    samples: usize,
    mut grad_of: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut f = vec![0.0; n_params];
    for i in 0..samples {
        for (fi, g) in f.iter_mut().zip(grad_of(i)?) {
            *fi += g * g;
        }
    }
    if samples > 0 {
        f.iter_mut().for_each(|v| *v /= samples as f64);
    }
    Ok(f)
}

/// Empirical diagonal Fisher on the first `min(num_samples, |data|)` samples, using the true
/// labels, anchored at the current parameters.
pub fn fisher_update(params: &ParamSet, data: &Dataset, num_samples: usize) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(Error::config("fisher_update on an empty dataset"));
    }
    let n = num_samples.clamp(1, data.len());
    let flat = fisher_diagonal(params.num_params(), n, |i| {
        let rec = forward(params, data.row(i))?;
        let g = backward(params, &rec, &cross_entropy_grad(&rec.probs, data.label(i)));
        Ok(g.params.to_flat())
    })?;
    let mut omega = params.zeros_like();
    omega.set_from_flat(&flat)?;
    Ok(ImportanceMap {
        omega,
        anchor: params.clone(),
    })
}

/// A-GEM: removes the component of `g` conflicting with `g_ref`.
pub fn agem_project(g: &[f64], g_ref: &[f64]) -> Vec<f64> {
    let dot: f64 = g.iter().zip(g_ref).map(|(a, b)| a * b).sum();
    if dot >= 0.0 {
        return g.to_vec();
    }
    let rr: f64 = g_ref.iter().map(|v| v * v).sum();
    if rr.sqrt() < 1e-12 {
        log::debug!("agem: reference gradient vanishes, projection skipped");
        return g.to_vec();
    }
    let c = dot / rr;
    g.iter().zip(g_ref).map(|(a, b)| a - c * b).collect()
}

/// Per-stage logit correction; only the newest stage's parameters are applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BicLayer {
    pub stages: Vec<BicStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicStage {
    pub classes: Range<usize>,
    pub alpha: f64,
    pub beta: f64,
}

impl BicStage {
    pub fn identity(classes: Range<usize>) -> Self {
        BicStage {
            classes,
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

impl BicLayer {
    fn active(&self, len: usize) -> Option<(&BicStage, Range<usize>)> {
        let s = self.stages.last()?;
        Some((s, s.classes.start.min(len)..s.classes.end.min(len)))
    }

    pub fn apply(&self, logits: &DVector<f64>) -> DVector<f64> {
        let mut z = logits.clone();
        if let Some((s, r)) = self.active(z.len()) {
            for j in r {
                z[j] = s.alpha * z[j] + s.beta;
            }
        }
        z
    }

    /// Pulls a gradient with respect to corrected logits back to raw logits.
    pub fn backward(&self, upstream: &DVector<f64>) -> DVector<f64> {
        let mut d = upstream.clone();
        if let Some((s, r)) = self.active(d.len()) {
            for j in r {
                d[j] *= s.alpha;
            }
        }
        d
    }
}

fn bic_objective(
    logits: &[DVector<f64>],
    labels: &[usize],
    new: &Range<usize>,
    a: f64,
    b: f64,
) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let n = logits.len() as f64;
    let (mut loss, mut g, mut h) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
    for (z, &y) in logits.iter().zip(labels) {
        let mut zc = z.clone();
        for j in new.clone() {
            zc[j] = a * z[j] + b;
        }
        let p = softmax(&zc);
        loss += cross_entropy(&p, y);
        // derivative of z' with respect to (a, b) is (z_j, 1) on the new range, 0 elsewhere
        let (mut eu, mut ev, mut euu, mut euv, mut evv) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in new.clone() {
            eu += p[j] * z[j];
            ev += p[j];
            euu += p[j] * z[j] * z[j];
            euv += p[j] * z[j];
            evv += p[j];
        }
        let (yu, yv) = if new.contains(&y) { (z[y], 1.0) } else { (0.0, 0.0) };
        g[0] += eu - yu;
        g[1] += ev - yv;
        h[0][0] += euu - eu * eu;
        h[0][1] += euv - eu * ev;
        h[1][1] += evv - ev * ev;
    }
    h[1][0] = h[0][1];
    let scale = |v: f64| v / n;
    (
        loss / n,
        [scale(g[0]), scale(g[1])],
        [[scale(h[0][0]), scale(h[0][1])], [scale(h[1][0]), scale(h[1][1])]],
    )
}

/// Fits `(α, β)` for the classes in `new` by minimizing held-out cross-entropy with damped
/// Newton steps. With `fix_alpha`, only `β` moves. A held-out set lacking old- or new-class
/// samples yields the identity stage.
pub fn bic_fit(
    logits: &[DVector<f64>],
    labels: &[usize],
    new: Range<usize>,
    fix_alpha: bool,
) -> Result<BicStage> {
    if logits.len() != labels.len() {
        return Err(Error::config("bic_fit: logits and labels are not aligned"));
    }
    let has_new = labels.iter().any(|y| new.contains(y));
    let has_old = labels.iter().any(|y| !new.contains(y));
    if !has_new || !has_old {
        log::warn!("bic: held-out set lacks old or new classes, using identity correction");
        return Ok(BicStage::identity(new));
    }
    let (mut a, mut b) = (1.0, 0.0);
    let (mut loss, mut g, mut h) = bic_objective(logits, labels, &new, a, b);
    for _ in 0..100 {
        let step = if fix_alpha {
            [0.0, -g[1] / (h[1][1] + 1e-9)]
        } else {
            let m = DMatrix::from_row_slice(2, 2, &[h[0][0] + 1e-9, h[0][1], h[1][0], h[1][1] + 1e-9]);
            match m.try_inverse() {
                Some(inv) => {
                    let s = inv * DVector::from_column_slice(&g);
                    [-s[0], -s[1]]
                }
                None => [-g[0], -g[1]],
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-8 {
            let (na, nb) = (a + t * step[0], b + t * step[1]);
            let cand = bic_objective(logits, labels, &new, na, nb);
            if cand.0 <= loss {
                moved = cand.0 < loss;
                (a, b) = (na, nb);
                (loss, g, h) = cand;
                break;
            }
            t *= 0.5;
        }
        let gnorm = if fix_alpha { g[1].abs() } else { g[0].hypot(g[1]) };
        if !moved || gnorm < 1e-10 {
            break;
        }
    }
    Ok(BicStage {
        classes: new,
        alpha: a,
        beta: b,
    })
}

/// Nearest prototype in Euclidean distance, lowest class index on ties.
pub fn ncm_predict(prototypes: &PrototypeSet, h: &DVector<f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, p) in prototypes.present() {
        let d = (h - &p.vector).norm_squared();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((c, d));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::config("ncm_predict: no prototypes"))
}

/// Freezes every existing branch, appends a fresh branch with hidden `widths`, and widens the
/// head with zero columns for the new features. Returns the frozen mask over
/// [`ParamSet::tensors`].
pub fn dynamic_expand<R: Rng + ?Sized>(params: &mut ParamSet, widths: &[usize], rng: &mut R) -> Vec<bool> {
    for b in &mut params.branches {
        b.frozen = true;
    }
    let branch = Branch::init(params.input_dim, widths, rng);
    let added = widths.last().copied().unwrap_or(params.input_dim);
    params.branches.push(branch);
    let fd = params.head_weight.ncols();
    let w = std::mem::replace(&mut params.head_weight, DMatrix::zeros(0, 0));
    params.head_weight = w.insert_columns(fd, added, 0.0);
    params.frozen_flags()
}

/// Accumulates a scalar loss and its parameter gradient over one optimization step.
#[derive(Clone, Debug)]
pub struct LossAccumulator {
    pub loss: f64,
    pub grads: ParamSet,
    /// When set, cross-entropy terms see LogitNorm-transformed logits.
    pub logitnorm_tau: Option<f64>,
}

impl LossAccumulator {
    pub fn new(params: &ParamSet, logitnorm_tau: Option<f64>) -> Self {
        LossAccumulator {
            loss: 0.0,
            grads: params.zeros_like(),
            logitnorm_tau,
        }
    }

    /// Adds `weight · mean_i CE(x_i, y_i)` over `batch`.
    pub fn add_ce(&mut self, params: &ParamSet, batch: &Dataset, weight: f64) -> Result<()> {
        if batch.is_empty() || weight == 0.0 {
            return Ok(());
        }
        let scale = weight / batch.len() as f64;
        for (x, y) in batch.rows() {
            let rec = forward(params, x)?;
            let (loss, d) = match self.logitnorm_tau {
                Some(tau) => {
                    let p = softmax(&logitnorm_transform(&rec.logits, tau));
                    let d = logitnorm_backward(&rec.logits, tau, &cross_entropy_grad(&p, y));
                    (cross_entropy(&p, y), d)
                }
                None => (cross_entropy(&rec.probs, y), cross_entropy_grad(&rec.probs, y)),
            };
            self.loss += scale * loss;
            backward_accumulate(params, &rec, &d, scale, &mut self.grads);
        }
        Ok(())
    }

    /// Adds `weight · mean_i ℓ(x_i)` where `term` maps a forward pass to `(ℓ, ∂ℓ/∂logits)`.
    pub fn add_term(
        &mut self,
        params: &ParamSet,
        inputs: &[&[f64]],
        weight: f64,
        mut term: impl FnMut(usize, &ForwardRecord) -> Result<(f64, DVector<f64>)>,
    ) -> Result<()> {
        if inputs.is_empty() || weight == 0.0 {
            return Ok(());
        }
        let scale = weight / inputs.len() as f64;
        for (i, x) in inputs.iter().enumerate() {
            let rec = forward(params, x)?;
            let (loss, d) = term(i, &rec)?;
            self.loss += scale * loss;
            backward_accumulate(params, &rec, &d, scale, &mut self.grads);
        }
        Ok(())
    }
}

/// What a strategy sees at a task boundary.
#[derive(Clone, Debug)]
pub struct TaskContext<'a> {
    /// 0-based task index.
    pub index: usize,
    pub train: &'a Dataset,
    /// Classes introduced by this task.
    pub classes: Range<usize>,
}

/// Training-loop hooks. The runner calls, per task: `before_task`, then for every mini-batch
/// of `train_set` `assemble_loss` followed by `after_backward` and the optimizer step, and
/// finally `after_task`. When `retrain_set` returns data, the runner re-initializes the
/// network and fits it on that data with plain cross-entropy.
pub trait Strategy {
    fn kind(&self) -> StrategyKind;

    fn before_task(&mut self, _params: &mut ParamSet, _ctx: &TaskContext<'_>) -> Result<()> {
        Ok(())
    }

    fn train_set(&self, ctx: &TaskContext<'_>) -> Dataset {
        ctx.train.clone()
    }

    fn assemble_loss(&mut self, params: &ParamSet, batch: &Dataset, acc: &mut LossAccumulator) -> Result<()> {
        acc.add_ce(params, batch, 1.0)
    }

    fn after_backward(&mut self, _params: &ParamSet, _grads: &mut ParamSet) -> Result<()> {
        Ok(())
    }

    fn after_task(&mut self, _params: &mut ParamSet, _ctx: &TaskContext<'_>) -> Result<()> {
        Ok(())
    }

    fn retrain_set(&self) -> Option<Dataset> {
        None
    }

    fn buffer(&self) -> Option<&ExemplarBuffer> {
        None
    }

    fn bic(&self) -> Option<&BicLayer> {
        None
    }

    /// Exemplars replayed in the most recent `assemble_loss` call.
    fn replayed(&self) -> Option<&Dataset> {
        None
    }

    fn predict(&self, params: &ParamSet, x: &[f64]) -> Result<usize> {
        Ok(argmax(&Network::with_bic(params, self.bic()).logits(x)?))
    }
}

/// State shared by the built-in strategies; which parts are active depends on the kind.
pub struct Hooks {
    cfg: StrategyConfig,
    dim: usize,
    rng: ChaCha8Rng,
    expand_rng: ChaCha8Rng,
    buffer: Option<ExemplarBuffer>,
    replay_pool: Dataset,
    seen: Dataset,
    teacher: Option<ParamSet>,
    old_classes: usize,
    importance: Option<ImportanceMap>,
    prototypes: Option<PrototypeSet>,
    bic: Option<BicLayer>,
    holdout: Dataset,
    bic_train: Dataset,
    last_replayed: Option<Dataset>,
    base_widths: Vec<usize>,
}

/// Built-in strategy for `cfg.kind`. `base_widths` are the hidden widths of the first
/// branch, used as the default for added branches.
pub fn strategy_hooks(
    cfg: &StrategyConfig,
    dim: usize,
    base_widths: &[usize],
    seed: u64,
) -> Result<Box<dyn Strategy>> {
    cfg.validate()?;
    let buffer = cfg
        .kind
        .buffer_policy()
        .map(|p| ExemplarBuffer::new(cfg.buffer_capacity, p));
    Ok(Box::new(Hooks {
        cfg: cfg.clone(),
        dim,
        rng: stream_rng(seed, Stream::Replay),
        expand_rng: stream_rng(seed, Stream::Expand),
        buffer,
        replay_pool: Dataset::empty(dim),
        seen: Dataset::empty(dim),
        teacher: None,
        old_classes: 0,
        importance: None,
        prototypes: None,
        bic: (cfg.kind == StrategyKind::Bic).then(BicLayer::default),
        holdout: Dataset::empty(dim),
        bic_train: Dataset::empty(dim),
        last_replayed: None,
        base_widths: base_widths.to_vec(),
    }))
}

impl Hooks {
    fn replay_batch(&mut self, n: usize) -> Dataset {
        let n = n.min(self.replay_pool.len());
        let idx = index::sample(&mut self.rng, self.replay_pool.len(), n).into_vec();
        self.replay_pool.subset(&idx)
    }

    fn add_distillation(&self, params: &ParamSet, batch: &Dataset, acc: &mut LossAccumulator) -> Result<()> {
        let Some(teacher) = &self.teacher else {
            return Ok(());
        };
        if self.old_classes == 0 || self.cfg.kd_weight == 0.0 {
            return Ok(());
        }
        let inputs: Vec<&[f64]> = batch.rows().map(|(x, _)| x).collect();
        let (old, t) = (self.old_classes, self.cfg.kd_temperature);
        acc.add_term(params, &inputs, self.cfg.kd_weight, |i, rec| {
            let tz = forward(teacher, inputs[i])?.logits;
            Ok(distillation_grad(&rec.logits, &tz, old, t))
        })
    }

    fn update_buffer(&mut self, params: &ParamSet, train: &Dataset) -> Result<()> {
        let kind = self.cfg.kind;
        let Some(buf) = &mut self.buffer else {
            return Ok(());
        };
        match buf.policy {
            BufferPolicy::Reservoir => {
                let mut rng = stream_rng(self.rng.random(), Stream::Reservoir);
                for (x, y) in train.rows() {
                    buf.reservoir_update(Exemplar::new(x, y), &mut rng)?;
                }
            }
            BufferPolicy::ClassBalanced => {
                if kind == StrategyKind::Gdumb {
                    buf.class_balanced_update(train, DVector::from_column_slice)?;
                    buf.entries.sort_by(|a, b| {
                        a.label.cmp(&b.label).then_with(|| {
                            a.input
                                .iter()
                                .zip(&b.input)
                                .map(|(u, v)| u.total_cmp(v))
                                .find(|o| o.is_ne())
                                .unwrap_or(std::cmp::Ordering::Equal)
                        })
                    });
                } else {
                    let feats = |x: &[f64]| params.features(x).unwrap_or_else(|_| DVector::zeros(0));
                    buf.class_balanced_update(train, feats)?;
                }
            }
        }
        Ok(())
    }
}

impl Strategy for Hooks {
    fn kind(&self) -> StrategyKind {
        self.cfg.kind
    }

    fn before_task(&mut self, params: &mut ParamSet, ctx: &TaskContext<'_>) -> Result<()> {
        let kind = self.cfg.kind;
        if kind.distills() && ctx.index > 0 {
            self.teacher = Some(params.clone());
            self.old_classes = ctx.classes.start;
        }
        if kind == StrategyKind::DynamicErLite && ctx.index > 0 {
            let widths = self
                .cfg
                .branch_widths
                .clone()
                .unwrap_or_else(|| self.base_widths.clone());
            dynamic_expand(params, &widths, &mut self.expand_rng);
        }
        if kind == StrategyKind::Cumulative {
            self.seen.extend(ctx.train);
        }
        self.replay_pool = match &self.buffer {
            Some(b) => b.as_dataset(self.dim),
            None => Dataset::empty(self.dim),
        };
        if kind == StrategyKind::Bic {
            // hold out a stratified share of buffer ∪ current for the bias correction
            let n_buf = self.replay_pool.len();
            let union = Dataset::concat(self.dim, [&self.replay_pool, ctx.train]);
            // split row indices, carried as a one-column dataset
            let ids = Dataset::from_rows(
                1,
                (0..union.len()).map(|i| i as f64).collect(),
                union.labels().to_vec(),
            )?;
            let mut split_rng = stream_rng(self.rng.random(), Stream::Split);
            let (_, held) = ids.stratified_split(self.cfg.bic_holdout, &mut split_rng);
            let mut is_held = vec![false; union.len()];
            for (row, _) in held.rows() {
                is_held[row[0] as usize] = true;
            }
            let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<usize> {
                (0..union.len()).filter(|&i| keep(i)).collect()
            };
            self.holdout = union.subset(&pick(&|i| is_held[i]));
            self.replay_pool = union.subset(&pick(&|i| i < n_buf && !is_held[i]));
            self.bic_train = union.subset(&pick(&|i| i >= n_buf && !is_held[i]));
        }
        Ok(())
    }

    fn train_set(&self, ctx: &TaskContext<'_>) -> Dataset {
        match self.cfg.kind {
            StrategyKind::Cumulative => self.seen.clone(),
            StrategyKind::Gdumb => Dataset::empty(self.dim),
            StrategyKind::Bic => self.bic_train.clone(),
            _ => ctx.train.clone(),
        }
    }

    fn assemble_loss(&mut self, params: &ParamSet, batch: &Dataset, acc: &mut LossAccumulator) -> Result<()> {
        let kind = self.cfg.kind;
        if kind.replays() {
            let alpha = self.cfg.alpha;
            acc.add_ce(params, batch, alpha)?;
            self.last_replayed = None;
            if !self.replay_pool.is_empty() {
                let n = self.cfg.replay_batch.unwrap_or(batch.len());
                let rb = self.replay_batch(n);
                acc.add_ce(params, &rb, 1.0 - alpha)?;
                self.last_replayed = Some(rb);
            }
        } else {
            acc.add_ce(params, batch, 1.0)?;
        }
        if kind.distills() {
            self.add_distillation(params, batch, acc)?;
        }
        if kind == StrategyKind::Ewc && self.cfg.reg_weight != 0.0 {
            if let Some(imp) = &self.importance {
                acc.loss += self.cfg.reg_weight * ewc_penalty(params, imp);
                ewc_grad_accumulate(params, imp, self.cfg.reg_weight, &mut acc.grads);
            }
        }
        Ok(())
    }

    fn after_backward(&mut self, params: &ParamSet, grads: &mut ParamSet) -> Result<()> {
        if self.cfg.kind != StrategyKind::Agem || self.replay_pool.is_empty() {
            return Ok(());
        }
        let rb = self.replay_batch(self.cfg.agem_ref_batch);
        let mut reference = LossAccumulator::new(params, None);
        reference.add_ce(params, &rb, 1.0)?;
        let projected = agem_project(&grads.to_flat(), &reference.grads.to_flat());
        grads.set_from_flat(&projected)
    }

    fn after_task(&mut self, params: &mut ParamSet, ctx: &TaskContext<'_>) -> Result<()> {
        let kind = self.cfg.kind;
        self.update_buffer(params, ctx.train)?;
        if kind == StrategyKind::Ewc {
            let fresh = fisher_update(params, ctx.train, self.cfg.fisher_samples)?;
            let mut omega = fresh.omega;
            if let Some(prev) = &self.importance {
                omega.axpy(1.0, &prev.omega.padded_to(params));
            }
            self.importance = Some(ImportanceMap {
                omega,
                anchor: fresh.anchor,
            });
        }
        if kind == StrategyKind::IcarlLite {
            if let Some(buf) = &self.buffer {
                self.prototypes = Some(PrototypeSet::recompute_from_buffer(buf, params, ctx.classes.end)?);
            }
        }
        if let Some(bic) = &mut self.bic {
            let stage = if ctx.index == 0 {
                BicStage::identity(ctx.classes.clone())
            } else {
                let logits: Vec<DVector<f64>> = self
                    .holdout
                    .rows()
                    .map(|(x, _)| Ok(forward(params, x)?.logits))
                    .collect::<Result<_>>()?;
                bic_fit(&logits, self.holdout.labels(), ctx.classes.clone(), false)?
            };
            log::debug!(
                "bic stage {}: alpha {:.4} beta {:.4}",
                ctx.index,
                stage.alpha,
                stage.beta
            );
            bic.stages.push(stage);
        }
        Ok(())
    }

    fn retrain_set(&self) -> Option<Dataset> {
        match (self.cfg.kind, &self.buffer) {
            (StrategyKind::Gdumb, Some(b)) => Some(b.as_dataset(self.dim)),
            _ => None,
        }
    }

    fn buffer(&self) -> Option<&ExemplarBuffer> {
        self.buffer.as_ref()
    }

    fn bic(&self) -> Option<&BicLayer> {
        self.bic.as_ref()
    }

    fn replayed(&self) -> Option<&Dataset> {
        self.last_replayed.as_ref()
    }

    fn predict(&self, params: &ParamSet, x: &[f64]) -> Result<usize> {
        match &self.prototypes {
            Some(p) => ncm_predict(p, &params.features(x)?),
            None => Ok(argmax(&Network::with_bic(params, self.bic()).logits(x)?)),
        }
    }
}
