//! Exemplar buffers, herding selection and class prototypes.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_csv_with_extra, Dataset};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    Reservoir,
    ClassBalanced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    /// Raw input, or backbone features when the buffer is in feature mode.
    pub input: Vec<f64>,
    pub label: usize,
    /// Logits recorded at storage time; length equals the class count at that moment.
    pub logits: Option<Vec<f64>>,
}

impl Exemplar {
    pub fn new(input: &[f64], label: usize) -> Self {
        Exemplar {
            input: input.to_vec(),
            label,
            logits: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExemplarBuffer {
    pub capacity: usize,
    pub entries: Vec<Exemplar>,
    pub seen_count: usize,
    pub policy: BufferPolicy,
    /// Entries hold features h(x) instead of inputs.
    pub feature_mode: bool,
}

impl ExemplarBuffer {
    pub fn new(capacity: usize, policy: BufferPolicy) -> Self {
        ExemplarBuffer {
            capacity,
            entries: Vec::new(),
            seen_count: 0,
            policy,
            feature_mode: false,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Algorithm R: insert while not full; afterwards replace slot `j ~ U[0, seen_count]`
    /// when `j < capacity`.
    pub fn reservoir_update<R: Rng + ?Sized>(&mut self, item: Exemplar, rng: &mut R) -> Result<()> {
        if self.policy != BufferPolicy::Reservoir {
            return Err(Error::config("reservoir_update on a class-balanced buffer"));
        }
        if self.entries.len() < self.capacity {
            self.entries.push(item);
        } else if self.capacity > 0 {
            let j = rng.random_range(0..=self.seen_count);
            if j < self.capacity {
                self.entries[j] = item;
            }
        }
        self.seen_count += 1;
        Ok(())
    }

    /// Re-divides capacity evenly over every class seen so far, truncates old classes to the
    /// new quota (entries are kept in herding order) and fills the new classes of `task`
    /// with their herding picks computed on `feature_of(x)`.
    pub fn class_balanced_update(
        &mut self,
        task: &Dataset,
        feature_of: impl Fn(&[f64]) -> DVector<f64>,
    ) -> Result<()> {
        if self.policy != BufferPolicy::ClassBalanced {
            return Err(Error::config("class_balanced_update on a reservoir buffer"));
        }
        let mut by_class: BTreeMap<usize, Vec<Exemplar>> = BTreeMap::new();
        for e in self.entries.drain(..) {
            by_class.entry(e.label).or_default().push(e);
        }
        let new_classes: Vec<usize> = task
            .classes()
            .into_iter()
            .filter(|c| !by_class.contains_key(c))
            .collect();
        let n_classes = by_class.len() + new_classes.len();
        if n_classes == 0 {
            return Ok(());
        }
        let quota = self.capacity / n_classes;
        for list in by_class.values_mut() {
            list.truncate(quota);
        }
        for c in new_classes {
            let idx = task.indices_of_class(c);
            let feats: Vec<DVector<f64>> = idx.iter().map(|&i| feature_of(task.row(i))).collect();
            let picks = herding_select(&feats, quota.min(idx.len()));
            by_class.insert(
                c,
                picks
                    .into_iter()
                    .map(|p| Exemplar::new(task.row(idx[p]), c))
                    .collect(),
            );
        }
        self.seen_count += task.len();
        self.entries = by_class.into_values().flatten().collect();
        Ok(())
    }

    /// Uniform sample without replacement of `min(n, len)` entries.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Exemplar> {
        let n = n.min(self.entries.len());
        index::sample(rng, self.entries.len(), n)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.label).or_insert(0) += 1;
        }
        m
    }

    pub fn as_dataset(&self, dim: usize) -> Dataset {
        let mut d = Dataset::empty(dim);
        for e in &self.entries {
            d.push(&e.input, e.label);
        }
        d
    }

    /// Dataset schema plus `l0..` columns for stored logits (blank when absent).
    pub fn export_csv(&self, path: impl AsRef<Path>, dim: usize) -> Result<()> {
        let width = self
            .entries
            .iter()
            .filter_map(|e| e.logits.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0);
        let headers: Vec<String> = (0..width).map(|k| format!("l{k}")).collect();
        write_csv_with_extra(path, &self.as_dataset(dim), &headers, |i| {
            let l = self.entries[i].logits.as_deref().unwrap_or(&[]);
            (0..width)
                .map(|k| l.get(k).map(|v| v.to_string()).unwrap_or_default())
                .collect()
        })
    }
}

/// Greedy herding: repeatedly picks the sample that brings the running mean of the selected
/// set closest to the class mean. Returns the first `m` picks in selection order; ties go to
/// the lowest index.
pub fn herding_select(features: &[DVector<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let dim = features[0].len();
    let mut mu = DVector::zeros(dim);
    for f in features {
        mu += f;
    }
    mu /= n as f64;
    let mut taken = vec![false; n];
    let mut sum = DVector::zeros(dim);
    let mut order = Vec::with_capacity(m);
    for k in 1..=m {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = mu
                .iter()
                .zip(sum.iter().zip(f.iter()))
                .map(|(u, (s, x))| {
                    let diff = u - (s + x) / k as f64;
                    diff * diff
                })
                .sum::<f64>();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        taken[best] = true;
        sum += &features[best];
        order.push(best);
    }
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: DVector<f64>,
    pub count: usize,
}

/// Per-class feature centroids, indexed by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<Option<Prototype>>,
}

impl PrototypeSet {
    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.classes.get(class).and_then(Option::as_ref)
    }

    pub fn present(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.as_ref().map(|p| (c, p)))
    }

    /// Recomputes the centroid of every class appearing in `labels`; other classes keep
    /// their current prototype.
    pub fn prototype_update(&mut self, features: &[DVector<f64>], labels: &[usize]) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::config("features and labels are not aligned"));
        }
        let mut sums: BTreeMap<usize, (DVector<f64>, usize)> = BTreeMap::new();
        for (f, &y) in features.iter().zip(labels) {
            let e = sums.entry(y).or_insert_with(|| (DVector::zeros(f.len()), 0));
            e.0 += f;
            e.1 += 1;
        }
        for (c, (sum, n)) in sums {
            if self.classes.len() <= c {
                self.classes.resize(c + 1, None);
            }
            self.classes[c] = Some(Prototype {
                vector: sum / n as f64,
                count: n,
            });
        }
        Ok(())
    }

    /// Re-extracts features of every buffered exemplar with `params` and rebuilds the set.
    /// Classes without exemplars are marked absent.
    pub fn recompute_from_buffer(
        buffer: &ExemplarBuffer,
        params: &ParamSet,
        num_classes: usize,
    ) -> Result<PrototypeSet> {
        let mut feats = Vec::with_capacity(buffer.len());
        let mut labels = Vec::with_capacity(buffer.len());
        for e in &buffer.entries {
            let h = if buffer.feature_mode {
                DVector::from_column_slice(&e.input)
            } else {
                params.features(&e.input)?
            };
            feats.push(h);
            labels.push(e.label);
        }
        let mut set = PrototypeSet {
            classes: vec![None; num_classes],
        };
        set.prototype_update(&feats, &labels)?;
        Ok(set)
    }
}
