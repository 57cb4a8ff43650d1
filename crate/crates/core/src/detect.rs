//! Post-hoc OOD detectors.
//!
//! Every score returned here is in canonical orientation: larger means more likely OOD.
//! Detectors fall in three groups:
//!
//! - output scores (`msp`, `maxlogit`, `energy`, `entropy`, `odin`, `tempscale`),
//! - activation shaping before the head (`react`, `dice`, `ash`, `scale`), scored with energy,
//! - feature-space statistics fitted at calibration time (`mahalanobis`, `knn`, `vim`, `she`).
//!
//! Calibration happens once per task on that task's training data. Per-task hyperparameters
//! (ReAct clip, DICE mask, temperature, ViM subspace) are overwritten at each calibration;
//! class statistics (Mahalanobis, SHE) are extended with the new classes only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{argmax, log_sum_exp, softmax};

/// Ridge added to the shared covariance when it is (near-)singular.
pub const COV_RIDGE: f64 = 1e-6;
/// Eigenvalue ratio below which the covariance counts as near-singular.
const COND_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Msp,
    MaxLogit,
    Energy,
    Entropy,
    Odin,
    React,
    Dice,
    Ash,
    Scale,
    TempScale,
    Mahalanobis,
    Knn,
    Vim,
    She,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 14] = [
        DetectorKind::Msp,
        DetectorKind::MaxLogit,
        DetectorKind::Energy,
        DetectorKind::Entropy,
        DetectorKind::Odin,
        DetectorKind::React,
        DetectorKind::Dice,
        DetectorKind::Ash,
        DetectorKind::Scale,
        DetectorKind::TempScale,
        DetectorKind::Mahalanobis,
        DetectorKind::Knn,
        DetectorKind::Vim,
        DetectorKind::She,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Msp => "msp",
            DetectorKind::MaxLogit => "maxlogit",
            DetectorKind::Energy => "energy",
            DetectorKind::Entropy => "entropy",
            DetectorKind::Odin => "odin",
            DetectorKind::React => "react",
            DetectorKind::Dice => "dice",
            DetectorKind::Ash => "ash",
            DetectorKind::Scale => "scale",
            DetectorKind::TempScale => "tempscale",
            DetectorKind::Mahalanobis => "mahalanobis",
            DetectorKind::Knn => "knn",
            DetectorKind::Vim => "vim",
            DetectorKind::She => "she",
        }
    }

    /// Direction of the detector's native score before canonicalization.
    pub fn raw_orientation(self) -> Orientation {
        match self {
            DetectorKind::Entropy | DetectorKind::Mahalanobis => Orientation::HigherIsOod,
            _ => Orientation::HigherIsInd,
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown detector `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherIsInd,
    HigherIsOod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Ind,
    Ood,
}

/// OOD iff `score ≥ tau` (boundary inclusive).
pub fn threshold_decide(score: f64, tau: f64) -> Decision {
    if score >= tau {
        Decision::Ood
    } else {
        Decision::Ind
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasicScore {
    Msp,
    MaxLogit,
    Energy,
    Entropy,
}

/// Canonical output scores. `temperature` applies to MSP and energy.
pub fn score_basic(kind: BasicScore, logits: &DVector<f64>, temperature: f64) -> f64 {
    match kind {
        BasicScore::Msp => -softmax(&(logits / temperature)).max(),
        BasicScore::MaxLogit => -logits.max(),
        BasicScore::Energy => energy_score(logits, temperature),
        BasicScore::Entropy => entropy(&softmax(logits)),
    }
}

/// `−T·logsumexp(z/T)`.
pub fn energy_score(logits: &DVector<f64>, temperature: f64) -> f64 {
    -temperature * log_sum_exp(&(logits / temperature))
}

pub fn entropy(probs: &DVector<f64>) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// ODIN: one signed-gradient input step that raises the temperature-scaled confidence of the
/// predicted class, then the negated max softmax at temperature `T`.
pub fn odin_score(model: &dyn Model, x: &[f64], temperature: f64, epsilon: f64) -> Result<f64> {
    let logits = model.logits(x)?;
    let pred = argmax(&logits);
    let upstream = |z: &DVector<f64>| {
        let mut g = softmax(&(z / temperature));
        g[pred] -= 1.0;
        g / temperature
    };
    let grad = model
        .input_gradient(x, &upstream)?
        .ok_or_else(|| Error::config("odin requires a model with input gradients"))?;
    let perturbed: Vec<f64> = x
        .iter()
        .zip(grad.iter())
        .map(|(v, g)| v - epsilon * sign(*g))
        .collect();
    let z = model.logits(&perturbed)?;
    Ok(score_basic(BasicScore::Msp, &z, temperature))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Nearest-rank percentile of `values` (`p` in `[0, 100]`).
pub fn nearest_rank(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0 * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// ReAct clip value: nearest-rank percentile of every activation in the calibration set.
pub fn react_fit(features: &[DVector<f64>], percentile: f64) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::config("react calibration set is empty"));
    }
    let all: Vec<f64> = features.iter().flat_map(|f| f.iter().copied()).collect();
    Ok(nearest_rank(&all, percentile))
}

pub fn react_apply(features: &DVector<f64>, clip: f64) -> DVector<f64> {
    features.map(|v| v.min(clip))
}

/// DICE mask: per output unit keep the `⌈keep·D⌉` largest contributions `w_ij·m_j`, ties to
/// the lowest index.
pub fn dice_fit(head_weight: &DMatrix<f64>, mean_features: &DVector<f64>, keep: f64) -> DMatrix<f64> {
    let (k, d) = head_weight.shape();
    let n_keep = ((keep * d as f64) - 1e-9).ceil().clamp(0.0, d as f64) as usize;
    let mut mask = DMatrix::zeros(k, d);
    for i in 0..k {
        let mut idx: Vec<usize> = (0..d).collect();
        let c = |j: usize| head_weight[(i, j)] * mean_features[j];
        idx.sort_by(|&a, &b| c(b).total_cmp(&c(a)).then(a.cmp(&b)));
        for &j in &idx[..n_keep] {
            mask[(i, j)] = 1.0;
        }
    }
    mask
}

/// Logits from the masked head, `(M ⊙ W)·h + b`; the bias is never masked.
pub fn dice_logits(model: &dyn Model, mask: &DMatrix<f64>, features: &DVector<f64>) -> DVector<f64> {
    let w = model.head_weight().component_mul(mask);
    model.adjust_logits(w * features + model.head_bias())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AshMode {
    /// Zero the pruned activations.
    Prune,
    /// Keep all activations, multiplied by `exp(s₁/s₂)`.
    Scale,
}

/// Activation shaping. The `round(D·percentile/100)` smallest activations form the pruned
/// share (ties: higher index pruned first); the remainder is the surviving top share.
pub fn ash_apply(features: &DVector<f64>, percentile: f64, mode: AshMode) -> DVector<f64> {
    let d = features.len();
    let n_prune = ((d as f64 * percentile / 100.0).round() as usize).min(d);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| features[a].total_cmp(&features[b]).then(b.cmp(&a)));
    match mode {
        AshMode::Prune => {
            let mut out = features.clone();
            for &j in &idx[..n_prune] {
                out[j] = 0.0;
            }
            out
        }
        AshMode::Scale => {
            let s1 = features.sum();
            let s2: f64 = idx[n_prune..].iter().map(|&j| features[j]).sum();
            if s2 > 0.0 {
                features * (s1 / s2).exp()
            } else {
                features.clone()
            }
        }
    }
}

/// Temperature grid `0.5, 0.55, …, 10` minimizing mean NLL; ties to the smallest `T`.
pub fn temp_fit(logits: &[DVector<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::config(
            "temperature fit needs a nonempty aligned validation set",
        ));
    }
    let mut best = (f64::INFINITY, 1.0);
    for i in 0..=190 {
        let t = 0.5 + 0.05 * i as f64;
        let nll = logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let zt = z / t;
                log_sum_exp(&zt) - zt[y]
            })
            .sum::<f64>()
            / logits.len() as f64;
        if nll < best.0 {
            best = (nll, t);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMoments {
    pub mean: DVector<f64>,
    pub count: usize,
}

/// Class means with a shared (pooled within-class) covariance, updated incrementally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub dim: usize,
    pub classes: BTreeMap<usize, ClassMoments>,
    /// Sum over classes of `Σ (x − μ_c)(x − μ_c)ᵀ`.
    pub scatter: DMatrix<f64>,
    pub total_count: usize,
    pub covariance: DMatrix<f64>,
    pub precision: Option<DMatrix<f64>>,
    pub ridge_applied: bool,
}

impl GaussianStats {
    pub fn new(dim: usize) -> Self {
        GaussianStats {
            dim,
            classes: BTreeMap::new(),
            scatter: DMatrix::zeros(dim, dim),
            total_count: 0,
            covariance: DMatrix::zeros(dim, dim),
            precision: None,
            ridge_applied: false,
        }
    }

    /// One-shot fit on a full labeled feature set.
    pub fn fit_batch(features: &[DVector<f64>], labels: &[usize]) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.len());
        let mut s = GaussianStats::new(dim);
        s.maha_update(features, labels)?;
        Ok(s)
    }

    /// Adds a task's features. New classes get fresh means; a class seen before is merged
    /// with the pairwise (Chan) update. Stored statistics of classes absent from this batch
    /// are left untouched.
    pub fn maha_update(&mut self, features: &[DVector<f64>], labels: &[usize]) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::config("features and labels are not aligned"));
        }
        if features.is_empty() {
            return Ok(());
        }
        let mut groups: BTreeMap<usize, Vec<&DVector<f64>>> = BTreeMap::new();
        for (f, &y) in features.iter().zip(labels) {
            if f.len() != self.dim {
                return Err(Error::config("feature dimension changed between updates"));
            }
            groups.entry(y).or_default().push(f);
        }
        for (c, rows) in groups {
            let n_b = rows.len();
            let mut mean_b = DVector::zeros(self.dim);
            for r in &rows {
                mean_b += *r;
            }
            mean_b /= n_b as f64;
            for r in &rows {
                let d = *r - &mean_b;
                self.scatter.ger(1.0, &d, &d, 1.0);
            }
            match self.classes.get_mut(&c) {
                Some(m) => {
                    let n_a = m.count;
                    let n = n_a + n_b;
                    let delta = &mean_b - &m.mean;
                    let w = (n_a * n_b) as f64 / n as f64;
                    self.scatter.ger(w, &delta, &delta, 1.0);
                    m.mean += delta * (n_b as f64 / n as f64);
                    m.count = n;
                }
                None => {
                    self.classes.insert(
                        c,
                        ClassMoments {
                            mean: mean_b,
                            count: n_b,
                        },
                    );
                }
            }
            self.total_count += n_b;
        }
        self.covariance = &self.scatter / self.total_count as f64;
        self.refresh_precision()
    }

    fn refresh_precision(&mut self) -> Result<()> {
        let cov = (&self.covariance + self.covariance.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let well_posed = lo > 0.0 && hi / lo < COND_LIMIT;
        let target = if well_posed {
            cov
        } else {
            cov + DMatrix::identity(self.dim, self.dim) * COV_RIDGE
        };
        self.ridge_applied = !well_posed;
        match target.clone().cholesky() {
            Some(ch) => {
                self.precision = Some(ch.inverse());
                Ok(())
            }
            None => {
                let e = SymmetricEigen::new(target).eigenvalues;
                Err(Error::numerical(format!(
                    "covariance singular after ridge: eigenvalues in [{:e}, {:e}], condition number {:e}",
                    e.min(),
                    e.max(),
                    e.max() / e.min().abs()
                )))
            }
        }
    }

    /// Minimum squared Mahalanobis distance to any class mean.
    pub fn maha_score(&self, h: &DVector<f64>) -> Result<f64> {
        let p = self
            .precision
            .as_ref()
            .filter(|_| !self.classes.is_empty())
            .ok_or_else(|| Error::config("mahalanobis detector has no fitted classes"))?;
        Ok(self
            .classes
            .values()
            .map(|m| {
                let d = h - &m.mean;
                d.dot(&(p * &d))
            })
            .fold(f64::INFINITY, f64::min))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub features: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
}

/// Mean Euclidean distance to the `k` nearest stored features.
pub fn knn_score(index: &FeatureIndex, h: &DVector<f64>, k: usize) -> Result<f64> {
    if index.features.is_empty() {
        return Err(Error::config("knn index is empty"));
    }
    if k == 0 || k > index.features.len() {
        return Err(Error::config(format!(
            "k = {k} outside 1..={}",
            index.features.len()
        )));
    }
    let mut d: Vec<f64> = index.features.iter().map(|f| (f - h).norm()).collect();
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    d[..k].sort_by(f64::total_cmp);
    Ok(d[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VimState {
    /// `D × d` orthonormal basis of the principal subspace.
    pub basis: DMatrix<f64>,
    pub alpha: f64,
    pub offset: DVector<f64>,
}

impl VimState {
    pub fn residual(&self, h: &DVector<f64>) -> f64 {
        let c = h - &self.offset;
        let proj = &self.basis * self.basis.tr_mul(&c);
        (c - proj).norm()
    }
}

/// Fits the principal subspace (top `⌊D/2⌋` directions, at least one) of the centered
/// calibration features and the virtual-logit scale `Σ max z / Σ residual`.
pub fn vim_fit(features: &[DVector<f64>], logits: &[DVector<f64>]) -> Result<VimState> {
    let n = features.len();
    let dim = features.first().map_or(0, |f| f.len());
    if n < dim || n == 0 {
        return Err(Error::config(format!(
            "vim needs at least feature_dim = {dim} calibration samples, got {n}"
        )));
    }
    let mut offset = DVector::zeros(dim);
    for f in features {
        offset += f;
    }
    offset /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let c = f - &offset;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let d = (dim / 2).max(1);
    let basis = DMatrix::from_fn(dim, d, |r, c| eig.eigenvectors[(r, order[c])]);
    let mut state = VimState {
        basis,
        alpha: 1.0,
        offset,
    };
    let res_sum: f64 = features.iter().map(|f| state.residual(f)).sum();
    let logit_sum: f64 = logits.iter().map(|z| z.max()).sum();
    let scale: f64 = features.iter().map(|f| f.norm()).sum();
    if res_sum > 1e-9 * scale {
        state.alpha = logit_sum.abs() / res_sum;
    } else {
        log::warn!("vim: zero total residual on calibration set, alpha set to 1");
    }
    Ok(state)
}

/// Virtual-logit score `α·r − logsumexp(z)`.
pub fn vim_score(state: &VimState, h: &DVector<f64>, logits: &DVector<f64>) -> f64 {
    state.alpha * state.residual(h) - log_sum_exp(logits)
}

/// Per-class stored patterns: mean feature of correctly classified samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShePatterns {
    pub patterns: BTreeMap<usize, ClassMoments>,
}

impl ShePatterns {
    pub fn she_fit(features: &[DVector<f64>], labels: &[usize], predictions: &[usize]) -> Result<Self> {
        let mut p = ShePatterns::default();
        p.she_update(features, labels, predictions)?;
        Ok(p)
    }

    /// Folds a new batch into the stored patterns with count-weighted means.
    pub fn she_update(
        &mut self,
        features: &[DVector<f64>],
        labels: &[usize],
        predictions: &[usize],
    ) -> Result<()> {
        if features.len() != labels.len() || labels.len() != predictions.len() {
            return Err(Error::config("features, labels and predictions are not aligned"));
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let correct: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i] == c && predictions[i] == c)
                .collect();
            let rows = if correct.is_empty() {
                log::warn!("she: class {c} has no correctly classified sample, using all of its samples");
                (0..labels.len()).filter(|&i| labels[i] == c).collect()
            } else {
                correct
            };
            let mut sum = DVector::zeros(features[rows[0]].len());
            for &i in &rows {
                sum += &features[i];
            }
            let n_b = rows.len();
            match self.patterns.get_mut(&c) {
                Some(m) => {
                    let n = m.count + n_b;
                    m.mean = (&m.mean * m.count as f64 + sum) / n as f64;
                    m.count = n;
                }
                None => {
                    self.patterns.insert(
                        c,
                        ClassMoments {
                            mean: sum / n_b as f64,
                            count: n_b,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    /// `−⟨h, S_ŷ⟩`; zero when no pattern exists for the predicted class.
    pub fn she_score(&self, h: &DVector<f64>, predicted: usize) -> f64 {
        match self.patterns.get(&predicted) {
            Some(p) => -h.dot(&p.mean),
            None => {
                log::warn!("she: no stored pattern for class {predicted}");
                0.0
            }
        }
    }
}

/// Hyperparameters shared by the detector suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub energy_temperature: f64,
    pub odin_temperature: f64,
    pub odin_epsilon: f64,
    pub react_percentile: f64,
    pub dice_keep: f64,
    pub ash_percentile: f64,
    pub scale_percentile: f64,
    pub knn_k: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            energy_temperature: 1.0,
            odin_temperature: 1000.0,
            odin_epsilon: 0.0014,
            react_percentile: 90.0,
            dice_keep: 0.3,
            ash_percentile: 65.0,
            scale_percentile: 85.0,
            knn_k: 10,
        }
    }
}

/// Calibrated parameters of one detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum Fitted {
    None,
    React {
        clip: f64,
    },
    Dice {
        mask: DMatrix<f64>,
        mean_features: DVector<f64>,
    },
    Temperature {
        temperature: f64,
    },
    Gaussian(GaussianStats),
    Index(FeatureIndex),
    Vim(VimState),
    She(ShePatterns),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub kind: DetectorKind,
    pub orientation: Orientation,
    pub params: DetectorParams,
    pub fitted: Fitted,
}

/// Data made available to a detector at a task boundary.
pub struct CalibrationData<'a> {
    /// Training data of the task just learned.
    pub current: &'a Dataset,
    /// Exemplar buffer contents, when the strategy keeps one.
    pub buffer: Option<&'a Dataset>,
    /// Rebuild class statistics from buffer plus current data instead of extending them.
    pub refresh_from_buffer: bool,
}

impl DetectorState {
    pub fn new(kind: DetectorKind, params: DetectorParams) -> Self {
        DetectorState {
            kind,
            orientation: kind.raw_orientation(),
            params,
            fitted: Fitted::None,
        }
    }

    pub fn calibrate(&mut self, model: &dyn Model, data: &CalibrationData<'_>) -> Result<()> {
        let feats =
            |d: &Dataset| -> Result<Vec<DVector<f64>>> { d.rows().map(|(x, _)| model.features(x)).collect() };
        let pooled = || match data.buffer {
            Some(b) => Dataset::concat(data.current.dim(), [b, data.current]),
            None => data.current.clone(),
        };
        match self.kind {
            DetectorKind::Msp
            | DetectorKind::MaxLogit
            | DetectorKind::Energy
            | DetectorKind::Entropy
            | DetectorKind::Odin
            | DetectorKind::Ash
            | DetectorKind::Scale => {}
            DetectorKind::React => {
                let clip = react_fit(&feats(data.current)?, self.params.react_percentile)?;
                self.fitted = Fitted::React { clip };
            }
            DetectorKind::Dice => {
                let f = feats(data.current)?;
                let mean = mean_of(&f)?;
                let mask = dice_fit(model.head_weight(), &mean, self.params.dice_keep);
                self.fitted = Fitted::Dice {
                    mask,
                    mean_features: mean,
                };
            }
            DetectorKind::TempScale => {
                let logits: Vec<DVector<f64>> = data
                    .current
                    .rows()
                    .map(|(x, _)| model.logits(x))
                    .collect::<Result<_>>()?;
                let temperature = temp_fit(&logits, data.current.labels())?;
                self.fitted = Fitted::Temperature { temperature };
            }
            DetectorKind::Mahalanobis => {
                let refit = data.refresh_from_buffer || !matches!(self.fitted, Fitted::Gaussian(_));
                let src = if data.refresh_from_buffer {
                    pooled()
                } else {
                    data.current.clone()
                };
                let f = feats(&src)?;
                if refit {
                    let mut g = GaussianStats::new(f.first().map_or(0, |v| v.len()));
                    g.maha_update(&f, src.labels())?;
                    self.fitted = Fitted::Gaussian(g);
                } else if let Fitted::Gaussian(g) = &mut self.fitted {
                    g.maha_update(&f, src.labels())?;
                }
            }
            DetectorKind::Knn => {
                let src = match data.buffer {
                    Some(b) if !b.is_empty() => b,
                    _ => data.current,
                };
                self.fitted = Fitted::Index(FeatureIndex {
                    features: feats(src)?,
                    labels: src.labels().to_vec(),
                });
            }
            DetectorKind::Vim => {
                let f = feats(data.current)?;
                let logits: Vec<DVector<f64>> = f.iter().map(|h| model.logits_from_features(h)).collect();
                self.fitted = Fitted::Vim(vim_fit(&f, &logits)?);
            }
            DetectorKind::She => {
                let src = if data.refresh_from_buffer {
                    pooled()
                } else {
                    data.current.clone()
                };
                let f = feats(&src)?;
                let preds: Vec<usize> = f.iter().map(|h| argmax(&model.logits_from_features(h))).collect();
                match &mut self.fitted {
                    Fitted::She(p) if !data.refresh_from_buffer => p.she_update(&f, src.labels(), &preds)?,
                    _ => self.fitted = Fitted::She(ShePatterns::she_fit(&f, src.labels(), &preds)?),
                }
            }
        }
        Ok(())
    }

    /// Canonical OOD score of `x`.
    pub fn score(&self, model: &dyn Model, x: &[f64]) -> Result<f64> {
        let p = &self.params;
        let not_fitted = || Error::config(format!("detector {} used before calibration", self.kind));
        let h = model.features(x)?;
        let energy_of = |h: &DVector<f64>| energy_score(&model.logits_from_features(h), p.energy_temperature);
        Ok(match (self.kind, &self.fitted) {
            (DetectorKind::Msp, _) => score_basic(BasicScore::Msp, &model.logits_from_features(&h), 1.0),
            (DetectorKind::MaxLogit, _) => {
                score_basic(BasicScore::MaxLogit, &model.logits_from_features(&h), 1.0)
            }
            (DetectorKind::Energy, _) => energy_of(&h),
            (DetectorKind::Entropy, _) => {
                score_basic(BasicScore::Entropy, &model.logits_from_features(&h), 1.0)
            }
            (DetectorKind::Odin, _) => odin_score(model, x, p.odin_temperature, p.odin_epsilon)?,
            (DetectorKind::Ash, _) => energy_of(&ash_apply(&h, p.ash_percentile, AshMode::Prune)),
            (DetectorKind::Scale, _) => energy_of(&ash_apply(&h, p.scale_percentile, AshMode::Scale)),
            (DetectorKind::React, Fitted::React { clip }) => energy_of(&react_apply(&h, *clip)),
            (DetectorKind::Dice, Fitted::Dice { mask, .. }) => {
                energy_score(&dice_logits(model, mask, &h), p.energy_temperature)
            }
            (DetectorKind::TempScale, Fitted::Temperature { temperature }) => {
                score_basic(BasicScore::Msp, &model.logits_from_features(&h), *temperature)
            }
            (DetectorKind::Mahalanobis, Fitted::Gaussian(g)) => g.maha_score(&h)?,
            (DetectorKind::Knn, Fitted::Index(idx)) => knn_score(idx, &h, p.knn_k.min(idx.features.len()))?,
            (DetectorKind::Vim, Fitted::Vim(v)) => vim_score(v, &h, &model.logits_from_features(&h)),
            (DetectorKind::She, Fitted::She(s)) => s.she_score(&h, argmax(&model.logits_from_features(&h))),
            _ => return Err(not_fitted()),
        })
    }
}

fn mean_of(features: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = features
        .first()
        .ok_or_else(|| Error::config("calibration set is empty"))?;
    let mut m = DVector::zeros(first.len());
    for f in features {
        m += f;
    }
    Ok(m / features.len() as f64)
}
