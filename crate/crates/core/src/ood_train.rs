//! Training-time OOD objectives: LogitNorm, Outlier Exposure and mix augmentation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DataRange;
use crate::error::{Error, Result};
use crate::nn::{softmax, LOG_FLOOR};

const LOGITNORM_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodTrainKind {
    None,
    LogitNorm,
    Oe,
    Mix,
}

impl FromStr for OodTrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OodTrainKind::None),
            "logitnorm" => Ok(OodTrainKind::LogitNorm),
            "oe" => Ok(OodTrainKind::Oe),
            "mix" => Ok(OodTrainKind::Mix),
            _ => Err(Error::config(format!("unknown ood_train kind `{s}`"))),
        }
    }
}

impl fmt::Display for OodTrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodTrainKind::None => "none",
            OodTrainKind::LogitNorm => "logitnorm",
            OodTrainKind::Oe => "oe",
            OodTrainKind::Mix => "mix",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodTrainConfig {
    pub kind: OodTrainKind,
    pub lambda: f64,
    pub logitnorm_tau: f64,
    pub mix_strength: f64,
    pub mix_chain_len: usize,
}

impl Default for OodTrainConfig {
    fn default() -> Self {
        OodTrainConfig {
            kind: OodTrainKind::None,
            lambda: 0.5,
            logitnorm_tau: 0.04,
            mix_strength: 0.3,
            mix_chain_len: 2,
        }
    }
}

impl OodTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config("ood_train.lambda must be >= 0"));
        }
        if !(self.logitnorm_tau > 0.0) {
            return Err(Error::config("ood_train.tau must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.mix_strength) {
            return Err(Error::config("ood_train.mix_strength must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `z / (τ·max(‖z‖₂, 1e-7))`.
pub fn logitnorm_transform(logits: &DVector<f64>, tau: f64) -> DVector<f64> {
    logits / (tau * logits.norm().max(LOGITNORM_EPS))
}

/// Pulls a gradient with respect to LogitNorm outputs back to the raw logits.
pub fn logitnorm_backward(logits: &DVector<f64>, tau: f64, upstream: &DVector<f64>) -> DVector<f64> {
    let n = logits.norm();
    if n <= LOGITNORM_EPS {
        return upstream / (tau * LOGITNORM_EPS);
    }
    let mut g = upstream / (tau * n);
    g.axpy(-logits.dot(upstream) / (tau * n.powi(3)), logits, 1.0);
    g
}

/// Cross-entropy to the uniform distribution, `−(1/K)·Σ_k log p_k`, averaged over the batch.
/// An empty batch contributes zero.
pub fn oe_loss(batch_probs: &[DVector<f64>]) -> f64 {
    if batch_probs.is_empty() {
        return 0.0;
    }
    let total: f64 = batch_probs
        .iter()
        .map(|p| -p.iter().map(|q| q.max(LOG_FLOOR).ln()).sum::<f64>() / p.len() as f64)
        .sum();
    total / batch_probs.len() as f64
}

/// ∂/∂z of the per-sample uniform cross-entropy: `p − 1/K`.
pub fn oe_logit_grad(logits: &DVector<f64>) -> DVector<f64> {
    let k = logits.len() as f64;
    softmax(logits).map(|p| p - 1.0 / k)
}

/// Seeded, fractal-like mixing source over the data range: a sum of sinusoidal octaves with
/// halving amplitude and random phases, rescaled into `[lo, hi]` per coordinate.
pub fn mixing_source<R: Rng + ?Sized>(range: &DataRange, rng: &mut R) -> Vec<f64> {
    let dim = range.lo.len();
    let mut field = vec![0.0; dim];
    let base_freq: f64 = rng.random_range(0.5..2.0);
    for octave in 0..4 {
        let amp = 0.5f64.powi(octave);
        let freq = base_freq * 2f64.powi(octave);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        for (i, v) in field.iter_mut().enumerate() {
            let t = i as f64 / dim.max(1) as f64;
            *v += amp * (2.0 * PI * freq * t + phase).sin();
        }
    }
    // octave amplitudes sum to 1.875
    field
        .iter()
        .zip(range.lo.iter().zip(&range.hi))
        .map(|(v, (lo, hi))| lo + (hi - lo) * (v / 1.875 + 1.0) / 2.0)
        .collect()
}

/// Applies `chain_len` random elementary perturbations (additive noise, swap of two
/// coordinates, rescaling), convexly mixes the result with `source` at weight `strength`
/// and clips to `range`.
pub fn mix_augment<R: Rng + ?Sized>(
    x: &[f64],
    source: &[f64],
    strength: f64,
    chain_len: usize,
    range: &DataRange,
    rng: &mut R,
) -> Vec<f64> {
    let mut aug = x.to_vec();
    for _ in 0..chain_len {
        match rng.random_range(0..3) {
            0 => {
                for v in aug.iter_mut() {
                    *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            1 => {
                if aug.len() >= 2 {
                    let i = rng.random_range(0..aug.len());
                    let j = rng.random_range(0..aug.len());
                    aug.swap(i, j);
                }
            }
            _ => {
                let s: f64 = rng.random_range(0.8..1.2);
                aug.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    let mut out: Vec<f64> = if strength == 0.0 {
        aug
    } else {
        aug.iter()
            .zip(source)
            .map(|(a, m)| (1.0 - strength) * a + strength * m)
            .collect()
    };
    range.clip(&mut out);
    out
}
