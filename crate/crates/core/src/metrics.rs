//! Continual-learning accuracy metrics and OOD detection metrics.
//!
//! OOD metrics treat OOD as the positive class and expect scores in canonical orientation
//! (larger means more likely OOD).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows[i][j]` is the accuracy on task `j` after training task `i` (both 0-based); row `i`
/// has `i + 1` entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::config(format!(
                "accuracy row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("accuracy entries must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }
}

/// Mean accuracy over tasks `1..=t` after training task `t` (1-based `t`).
pub fn aca(m: &AccuracyMatrix, t: usize) -> f64 {
    let row = &m.rows[t - 1];
    row.iter().sum::<f64>() / row.len() as f64
}

pub fn aca_sequence(m: &AccuracyMatrix) -> Vec<f64> {
    (1..=m.num_tasks()).map(|t| aca(m, t)).collect()
}

/// Average of ACA_t over all rows.
pub fn aia(m: &AccuracyMatrix) -> f64 {
    let s = aca_sequence(m);
    s.iter().sum::<f64>() / s.len() as f64
}

/// Average forgetting: for each task before the last, the best accuracy it reached before the
/// final task minus its final accuracy. Negative values are kept. `None` for a single task.
pub fn af(m: &AccuracyMatrix) -> Option<f64> {
    let t = m.num_tasks();
    if t < 2 {
        return None;
    }
    let last = &m.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let best = (j..t - 1).map(|i| m.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Some(total / (t - 1) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub ind_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSample {
    pub fn new(ind_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        ScoreSample {
            ind_scores,
            ood_scores,
        }
    }

    fn usable(&self) -> bool {
        !self.ind_scores.is_empty()
            && !self.ood_scores.is_empty()
            && self
                .ind_scores
                .iter()
                .chain(&self.ood_scores)
                .all(|s| s.is_finite())
    }
}

/// Mann-Whitney form: `P(ood > ind) + ½·P(ood = ind)`, computed from average ranks.
pub fn auroc(s: &ScoreSample) -> Option<f64> {
    if !s.usable() {
        return None;
    }
    let n = s.ind_scores.len();
    let m = s.ood_scores.len();
    let mut all: Vec<(f64, bool)> = s
        .ind_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let pos = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum += avg * pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (m * (m + 1)) as f64 / 2.0;
    Some(u / (n as f64 * m as f64))
}

/// FPR on IND at the largest threshold whose TPR on OOD (`score ≥ τ`) reaches `tpr_target`.
pub fn fpr_at_tpr(s: &ScoreSample, tpr_target: f64) -> Option<f64> {
    if !s.usable() {
        return None;
    }
    let mut ood = s.ood_scores.clone();
    ood.sort_by(|a, b| b.total_cmp(a));
    let m = ood.len();
    let needed = ((tpr_target * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    let tau = ood[needed - 1];
    let fp = s.ind_scores.iter().filter(|&&v| v >= tau).count();
    Some(fp as f64 / s.ind_scores.len() as f64)
}

/// Average precision with OOD as positive; tied scores form one threshold step.
pub fn aupr(s: &ScoreSample) -> Option<f64> {
    if !s.usable() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = s
        .ind_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let m = s.ood_scores.len() as f64;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let pos = all[i..=j].iter().filter(|e| e.1).count();
        tp += pos;
        fp += j + 1 - i - pos;
        if pos > 0 {
            ap += (pos as f64 / m) * (tp as f64 / (tp + fp) as f64);
        }
        i = j + 1;
    }
    Some(ap)
}
