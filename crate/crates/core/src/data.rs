//! Datasets, class-incremental task streams and synthetic generators.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Labeled samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Dataset {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != dim * labels.len() {
            return Err(Error::config(format!(
                "{} input values cannot form {} rows of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("dataset contains non-finite inputs"));
        }
        Ok(Dataset { dim, inputs, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs
            .chunks_exact(self.dim.max(1))
            .zip(self.labels.iter().copied())
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &Dataset) {
        debug_assert_eq!(self.dim, other.dim);
        self.inputs.extend_from_slice(&other.inputs);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn concat<'a>(dim: usize, parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut out = Dataset::empty(dim);
        for p in parts {
            out.extend(p);
        }
        out
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Keeps rows whose label satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx)
    }

    /// Stratified split: each class contributes `round(fraction · n_c)` rows to the second
    /// part (at least one when the class has two or more rows). Row selection is seeded.
    pub fn stratified_split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut first = Vec::new();
        let mut second = Vec::new();
        for c in self.classes() {
            let mut idx = self.indices_of_class(c);
            idx.shuffle(rng);
            let mut k = (fraction * idx.len() as f64).round() as usize;
            if k == 0 && idx.len() >= 2 && fraction > 0.0 {
                k = 1;
            }
            second.extend_from_slice(&idx[..k]);
            first.extend_from_slice(&idx[k..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        (self.subset(&first), self.subset(&second))
    }
}

/// Per-coordinate bounds of the training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DataRange {
    pub fn of(data: &Dataset) -> Self {
        let mut lo = vec![f64::INFINITY; data.dim()];
        let mut hi = vec![f64::NEG_INFINITY; data.dim()];
        for (x, _) in data.rows() {
            for (j, &v) in x.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        DataRange { lo, hi }
    }

    pub fn clip(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Dataset,
    pub test: Dataset,
    /// Contiguous (relabeled) class ids introduced by this task.
    pub classes: Range<usize>,
}

/// Ordered sequence of tasks with disjoint class sets.
///
/// Classes are relabeled so that task `b` owns the contiguous range
/// `[offset_b, offset_b + classes_per_task[b])`; `class_order[k]` is the original id of
/// relabeled class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_order: Vec<usize>,
    pub classes_per_task: Vec<usize>,
    pub seed: u64,
    pub data_range: DataRange,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    /// Union of test sets of tasks in `range`.
    pub fn test_union(&self, range: Range<usize>) -> Dataset {
        Dataset::concat(self.dim(), self.tasks[range].iter().map(|t| &t.test))
    }

    pub fn train_union(&self, range: Range<usize>) -> Dataset {
        Dataset::concat(self.dim(), self.tasks[range].iter().map(|t| &t.train))
    }
}

/// Splits a labeled train/test pair into `num_tasks` tasks with equal class counts under a
/// seeded class-order permutation.
pub fn split_class_incremental(
    train: &Dataset,
    test: &Dataset,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskStream> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if train.dim() != test.dim() {
        return Err(Error::config("train and test dimensions differ"));
    }
    let num_classes = train
        .labels()
        .iter()
        .chain(test.labels())
        .max()
        .map_or(0, |m| m + 1);
    if num_tasks == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(Error::config(format!(
            "{num_classes} classes cannot be divided evenly into {num_tasks} tasks"
        )));
    }
    let per_task = num_classes / num_tasks;
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut stream_rng(seed, Stream::ClassOrder));
    let mut relabel = vec![0; num_classes];
    for (new, &orig) in class_order.iter().enumerate() {
        relabel[orig] = new;
    }
    let remap = |d: &Dataset, classes: &Range<usize>| {
        let mut out = Dataset::empty(d.dim());
        for (x, y) in d.rows() {
            let r = relabel[y];
            if classes.contains(&r) {
                out.push(x, r);
            }
        }
        out
    };
    let mut tasks = Vec::with_capacity(num_tasks);
    for b in 0..num_tasks {
        let classes = b * per_task..(b + 1) * per_task;
        let task = Task {
            train: remap(train, &classes),
            test: remap(test, &classes),
            classes,
        };
        if task.test.is_empty() || task.train.is_empty() {
            return Err(Error::config(format!("task {b} has an empty train or test set")));
        }
        tasks.push(task);
    }
    Ok(TaskStream {
        tasks,
        class_order,
        classes_per_task: vec![per_task; num_tasks],
        seed,
        data_range: DataRange::of(train),
    })
}

/// Unit-variance isotropic Gaussian classes centered at `separation` times a seeded random
/// unit direction. Each class is split 80/20 into train and test.
pub fn gen_gaussian_tasks(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if separation < 0.0 || !separation.is_finite() {
        return Err(Error::config(format!(
            "separation must be >= 0, got {separation}"
        )));
    }
    if per_class < 2 || dim == 0 || num_classes == 0 {
        return Err(Error::config(
            "gaussian generator needs >= 1 class, dim >= 1 and >= 2 samples per class",
        ));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let means = class_means(num_classes, dim, separation, &mut rng);
    let n_train = ((0.8 * per_class as f64).round() as usize).clamp(1, per_class - 1);
    let mut train = Dataset::empty(dim);
    let mut test = Dataset::empty(dim);
    let mut x = vec![0.0; dim];
    for (c, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            for (v, m) in x.iter_mut().zip(mean) {
                *v = m + rng.sample::<f64, _>(StandardNormal);
            }
            if i < n_train {
                train.push(&x, c);
            } else {
                test.push(&x, c);
            }
        }
    }
    Ok((train, test))
}

/// Class means used by [`gen_gaussian_tasks`] for the same seed.
pub fn gaussian_class_means(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    class_means(num_classes, dim, separation, &mut stream_rng(seed, Stream::Data))
}

fn class_means<R: Rng + ?Sized>(
    num_classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|_| {
            let mut d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            d.iter_mut().for_each(|v| *v *= separation / norm);
            d
        })
        .collect()
}

/// Unlabeled auxiliary samples used by outlier-exposure training.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierSet {
    dim: usize,
    inputs: Vec<f64>,
}

impl OutlierSet {
    pub fn new(dim: usize, inputs: Vec<f64>) -> Self {
        debug_assert_eq!(inputs.len() % dim.max(1), 0);
        OutlierSet { dim, inputs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inputs.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug)]
pub enum OutlierMode {
    /// Points drawn uniformly on the sphere of the given radius around the origin.
    UniformShell { radius: f64 },
    /// Samples of classes withheld from the stream, labels dropped.
    HeldOutClasses { reserved: Dataset },
}

/// Builds an outlier set of at most `m` samples.
///
/// In held-out mode every reserved sample is returned when `m` covers them; otherwise a
/// seeded subset of size `m` is taken.
pub fn gen_outlier_set(dim: usize, m: usize, mode: &OutlierMode, seed: u64) -> Result<OutlierSet> {
    let mut rng = stream_rng(seed, Stream::Outliers);
    match mode {
        OutlierMode::UniformShell { radius } => {
            let mut inputs = Vec::with_capacity(m * dim);
            for _ in 0..m {
                let d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                inputs.extend(d.iter().map(|v| v * radius / norm));
            }
            Ok(OutlierSet::new(dim, inputs))
        }
        OutlierMode::HeldOutClasses { reserved } => {
            if reserved.is_empty() {
                return Err(Error::config("held-out outlier mode needs reserved classes"));
            }
            if reserved.dim() != dim {
                return Err(Error::config("reserved samples have the wrong dimension"));
            }
            let mut idx: Vec<usize> = (0..reserved.len()).collect();
            if m < idx.len() {
                idx.shuffle(&mut rng);
                idx.truncate(m);
                idx.sort_unstable();
            }
            let mut inputs = Vec::with_capacity(idx.len() * dim);
            for i in idx {
                inputs.extend_from_slice(reserved.row(i));
            }
            Ok(OutlierSet::new(dim, inputs))
        }
    }
}

/// Parses a `f0,...,f{D-1},label` CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = cols.len().saturating_sub(1);
    let expected = (0..dim)
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()));
    if cols.len() < 2 || !cols.iter().copied().eq(expected.clone()) {
        return Err(err(
            hline + 1,
            format!("header must be f0,...,f{{D-1}},label; got `{header}`"),
        ));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(err(
                i + 1,
                format!("expected {} cells, found {}", dim + 1, cells.len()),
            ));
        }
        for c in &cells[..dim] {
            let v: f64 = c
                .parse()
                .map_err(|_| err(i + 1, format!("non-numeric cell `{c}`")))?;
            if !v.is_finite() {
                return Err(err(i + 1, format!("non-finite cell `{c}`")));
            }
            inputs.push(v);
        }
        let l = cells[dim];
        labels.push(
            l.parse::<usize>()
                .map_err(|_| err(i + 1, format!("label `{l}` is not a nonnegative integer")))?,
        );
    }
    if labels.is_empty() {
        return Err(err(hline + 1, "empty dataset".into()));
    }
    Dataset::from_rows(dim, inputs, labels)
}

/// Writes `data` in the format read by [`load_csv`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    write_csv_with_extra(path, data, &[], |_| Vec::new())
}

/// Same schema as [`write_csv`] with additional trailing columns per row.
pub fn write_csv_with_extra(
    path: impl AsRef<Path>,
    data: &Dataset,
    extra_headers: &[String],
    extra: impl Fn(usize) -> Vec<String>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let header: Vec<String> = (0..data.dim())
        .map(|j| format!("f{j}"))
        .chain(std::iter::once("label".to_string()))
        .chain(extra_headers.iter().cloned())
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, (x, y)) in data.rows().enumerate() {
        let mut cells: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        cells.push(y.to_string());
        cells.extend(extra(i));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_outliers_csv(path: impl AsRef<Path>, set: &OutlierSet) -> Result<()> {
    let path = path.as_ref();
    let mut out: String = (0..set.dim())
        .map(|j| format!("f{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for i in 0..set.len() {
        let cells: Vec<String> = set.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
