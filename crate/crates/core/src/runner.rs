//! Experiment orchestration: train, calibrate and evaluate after every task, then emit results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OptimizerConfig, OutlierSource, StreamSource};
use crate::data::{
    gen_gaussian_tasks, gen_outlier_set, load_csv, split_class_incremental, write_csv, write_outliers_csv,
    DataRange, Dataset, OutlierMode, OutlierSet, TaskStream,
};
use crate::detect::{CalibrationData, DetectorKind, DetectorState};
use crate::error::{Error, Result};
use crate::metrics::{aca_sequence, af, aia, aupr, auroc, fpr_at_tpr, AccuracyMatrix, ScoreSample};
use crate::model::{Model, Network};
use crate::nn::{expand_head, sgd_step, OptimizerState, ParamSet};
use crate::ood_train::{mix_augment, mixing_source, oe_logit_grad, oe_loss, OodTrainConfig, OodTrainKind};
use crate::rng::{stream_rng, Stream};
use crate::strategies::{strategy_hooks, LossAccumulator, Strategy, TaskContext};

pub const SCHEMA_VERSION: u32 = 1;

/// Builds the task stream for `seed`, together with the labeled samples of withheld classes.
pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<(TaskStream, Dataset)> {
    let s = &cfg.stream;
    let (train, test, reserved) = match s.source {
        StreamSource::Synthetic => {
            let extra = cfg.outliers.reserved_classes;
            let (train, test) =
                gen_gaussian_tasks(s.num_classes + extra, s.dim, s.per_class, s.separation, seed)?;
            let k = s.num_classes;
            let reserved = Dataset::concat(s.dim, [&train, &test]);
            let reserved = reserved.filter(|y| y >= k);
            (train.filter(|y| y < k), test.filter(|y| y < k), reserved)
        }
        StreamSource::Csv => {
            let path = |p: &Option<PathBuf>| {
                p.clone()
                    .ok_or_else(|| Error::config("csv source needs stream.train_path and stream.test_path"))
            };
            let train = load_csv(path(&s.train_path)?)?;
            let test = load_csv(path(&s.test_path)?)?;
            let reserved = match &cfg.outliers.reserved_path {
                Some(p) => load_csv(p)?,
                None => Dataset::empty(train.dim()),
            };
            (train, test, reserved)
        }
    };
    Ok((
        split_class_incremental(&train, &test, s.num_tasks, seed)?,
        reserved,
    ))
}

pub fn build_outliers(
    cfg: &ExperimentConfig,
    reserved: &Dataset,
    dim: usize,
    seed: u64,
) -> Result<OutlierSet> {
    let mode = match cfg.outliers.source {
        OutlierSource::HeldOutClasses => OutlierMode::HeldOutClasses {
            reserved: reserved.clone(),
        },
        OutlierSource::UniformShell => OutlierMode::UniformShell {
            radius: cfg.outliers.shell_factor * cfg.stream.separation,
        },
    };
    gen_outlier_set(dim, cfg.outliers.count, &mode, seed)
}

/// The training-time OOD term added after the strategy's loss.
pub struct OodStage {
    pub cfg: OodTrainConfig,
    pub outliers: OutlierSet,
    pub range: DataRange,
    pub outlier_batch: Option<usize>,
    pub rng: ChaCha8Rng,
}

impl OodStage {
    pub fn logitnorm_tau(&self) -> Option<f64> {
        (self.cfg.kind == OodTrainKind::LogitNorm).then_some(self.cfg.logitnorm_tau)
    }

    /// `replayed` holds the exemplars the strategy replayed alongside `batch`; mix augmentation
    /// covers them too.
    pub fn add_term(
        &mut self,
        params: &ParamSet,
        batch: &Dataset,
        replayed: Option<&Dataset>,
        acc: &mut LossAccumulator,
    ) -> Result<()> {
        match self.cfg.kind {
            OodTrainKind::None | OodTrainKind::LogitNorm => Ok(()),
            OodTrainKind::Oe => {
                let n = self.outlier_batch.unwrap_or(batch.len()).min(self.outliers.len());
                if n == 0 {
                    return Ok(());
                }
                let idx = index::sample(&mut self.rng, self.outliers.len(), n).into_vec();
                let inputs: Vec<&[f64]> = idx.iter().map(|&i| self.outliers.row(i)).collect();
                acc.add_term(params, &inputs, self.cfg.lambda, |_, rec| {
                    Ok((
                        oe_loss(std::slice::from_ref(&rec.probs)),
                        oe_logit_grad(&rec.logits),
                    ))
                })
            }
            OodTrainKind::Mix => {
                let mut mixed = Dataset::empty(batch.dim());
                for (x, y) in batch.rows().chain(replayed.into_iter().flat_map(|r| r.rows())) {
                    let src = mixing_source(&self.range, &mut self.rng);
                    let aug = mix_augment(
                        x,
                        &src,
                        self.cfg.mix_strength,
                        self.cfg.mix_chain_len,
                        &self.range,
                        &mut self.rng,
                    );
                    mixed.push(&aug, y);
                }
                acc.add_ce(params, &mixed, self.cfg.lambda)
            }
        }
    }
}

/// Runs `opt.epochs` epochs of mini-batch SGD over `data`. Per step: strategy loss (plain
/// cross-entropy without a strategy), OOD term, after-backward hook, optimizer step.
/// `observer` sees the parameters after every step.
pub fn train_task(
    params: &mut ParamSet,
    data: &Dataset,
    mut strategy: Option<&mut dyn Strategy>,
    mut ood: Option<&mut OodStage>,
    opt: &OptimizerConfig,
    shuffle: &mut ChaCha8Rng,
    observer: &mut dyn FnMut(&ParamSet),
) -> Result<()> {
    if data.is_empty() {
        return Ok(());
    }
    let mut state = OptimizerState::new(params, opt.lr, opt.momentum, opt.weight_decay, opt.schedule())?;
    let tau = ood.as_ref().and_then(|o| o.logitnorm_tau());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opt.epochs {
        order.shuffle(shuffle);
        for chunk in order.chunks(opt.batch_size) {
            let batch = data.subset(chunk);
            let mut acc = LossAccumulator::new(params, tau);
            match strategy.as_deref_mut() {
                Some(s) => s.assemble_loss(params, &batch, &mut acc)?,
                None => acc.add_ce(params, &batch, 1.0)?,
            }
            if let Some(o) = ood.as_deref_mut() {
                o.add_term(
                    params,
                    &batch,
                    strategy.as_deref().and_then(|s| s.replayed()),
                    &mut acc,
                )?;
            }
            if !acc.loss.is_finite() {
                return Err(Error::numerical(format!("non-finite loss at epoch {epoch}")));
            }
            if let Some(s) = strategy.as_deref_mut() {
                s.after_backward(params, &mut acc.grads)?;
            }
            sgd_step(params, &acc.grads, &mut state, epoch)?;
            observer(params);
        }
    }
    Ok(())
}

/// Scores IND (test sets of tasks `< t`) against OOD (test sets of tasks `≥ t`) for every
/// detector; `t` counts the tasks treated as in-distribution.
pub fn evaluate_ood(
    model: &dyn Model,
    detectors: &[DetectorState],
    stream: &TaskStream,
    t: usize,
) -> Result<Vec<ScoreSample>> {
    let b = stream.num_tasks();
    if t == 0 || t >= b {
        return Err(Error::Undefined(format!(
            "no OOD side for t = {t} with {b} tasks"
        )));
    }
    let ind = stream.test_union(0..t);
    let ood = stream.test_union(t..b);
    detectors
        .iter()
        .map(|d| {
            let score = |set: &Dataset| {
                set.rows()
                    .map(|(x, _)| d.score(model, x))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(ScoreSample::new(score(&ind)?, score(&ood)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodPoint {
    /// Number of tasks treated as in-distribution.
    pub t: usize,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub aupr: Option<f64>,
}

impl OodPoint {
    pub fn from_sample(t: usize, s: &ScoreSample) -> Self {
        OodPoint {
            t,
            auroc: auroc(s),
            fpr95: fpr_at_tpr(s, 0.95),
            aupr: aupr(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub detector: DetectorKind,
    pub per_task: Vec<OodPoint>,
    pub mean_auroc: Option<f64>,
    pub mean_fpr95: Option<f64>,
    pub mean_aupr: Option<f64>,
}

fn mean_some(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl DetectorRecord {
    pub fn new(detector: DetectorKind, per_task: Vec<OodPoint>) -> Self {
        DetectorRecord {
            detector,
            mean_auroc: mean_some(per_task.iter().map(|p| p.auroc)),
            mean_fpr95: mean_some(per_task.iter().map(|p| p.fpr95)),
            mean_aupr: mean_some(per_task.iter().map(|p| p.aupr)),
            per_task,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunError {
    pub stage: String,
    pub task: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub repetition: usize,
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub aca_per_task: Vec<f64>,
    pub aca: Option<f64>,
    pub aia: Option<f64>,
    pub af: Option<f64>,
    pub ood: Vec<DetectorRecord>,
    pub wall_clock_s: f64,
    pub error: Option<RunError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub detector: DetectorKind,
    pub mean_auroc: Option<f64>,
    pub mean_fpr95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_aca: Option<f64>,
    pub mean_aia: Option<f64>,
    pub mean_af: Option<f64>,
    pub detectors: Vec<DetectorSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// How the per-run OOD value is formed from per-task values.
    pub ood_average: String,
    /// `per-task` snapshots or `final-model`.
    pub ood_model: String,
    pub repetitions: Vec<RepetitionRecord>,
    pub summary: Summary,
}

/// Raw detector scores behind one OOD evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDump {
    pub repetition: usize,
    pub detector: DetectorKind,
    pub t: usize,
    pub sample: ScoreSample,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: ResultsRecord,
    pub scores: Vec<ScoreDump>,
}

#[derive(Default)]
struct Progress {
    matrix: AccuracyMatrix,
    class_order: Vec<usize>,
    points: BTreeMap<DetectorKind, Vec<OodPoint>>,
    scores: Vec<ScoreDump>,
    stage: &'static str,
    task: Option<usize>,
}

impl Progress {
    fn record_ood(&mut self, rep: usize, kinds: &[DetectorKind], t: usize, samples: Vec<ScoreSample>) {
        for (&kind, sample) in kinds.iter().zip(samples) {
            self.points
                .entry(kind)
                .or_default()
                .push(OodPoint::from_sample(t, &sample));
            self.scores.push(ScoreDump {
                repetition: rep,
                detector: kind,
                t,
                sample,
            });
        }
    }
}

fn accuracy_on(strategy: &dyn Strategy, params: &ParamSet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("empty test set"));
    }
    let mut correct = 0;
    for (x, y) in data.rows() {
        if strategy.predict(params, x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn execute(cfg: &ExperimentConfig, rep: usize, seed: u64, p: &mut Progress) -> Result<()> {
    p.stage = "data";
    let (stream, reserved) = build_stream(cfg, seed)?;
    p.class_order = stream.class_order.clone();
    let dim = stream.dim();
    let b = stream.num_tasks();

    let mut ood = match cfg.ood_train.kind {
        OodTrainKind::None => None,
        kind => Some(OodStage {
            cfg: cfg.ood_train.clone(),
            outliers: if kind == OodTrainKind::Oe {
                build_outliers(cfg, &reserved, dim, seed)?
            } else {
                OutlierSet::new(dim, Vec::new())
            },
            range: stream.data_range.clone(),
            outlier_batch: cfg.outliers.batch_size,
            rng: stream_rng(seed, Stream::Augment),
        }),
    };

    let mut params = ParamSet::init(dim, &cfg.hidden, 0, &mut stream_rng(seed, Stream::Init));
    let mut strategy = strategy_hooks(&cfg.strategy, dim, &cfg.hidden, seed)?;
    let mut detectors: Vec<DetectorState> = cfg
        .detectors
        .iter()
        .map(|&k| DetectorState::new(k, cfg.detector_params.clone()))
        .collect();
    let mut shuffle = stream_rng(seed, Stream::Shuffle);

    for (i, task) in stream.tasks.iter().enumerate() {
        p.task = Some(i);
        let ctx = TaskContext {
            index: i,
            train: &task.train,
            classes: task.classes.clone(),
        };
        p.stage = "train";
        strategy.before_task(&mut params, &ctx)?;
        expand_head(&mut params, task.classes.len())?;
        let data = strategy.train_set(&ctx);
        train_task(
            &mut params,
            &data,
            Some(strategy.as_mut()),
            ood.as_mut(),
            &cfg.optimizer,
            &mut shuffle,
            &mut |_| {},
        )?;
        strategy.after_task(&mut params, &ctx)?;
        if let Some(retrain) = strategy.retrain_set() {
            params = ParamSet::init(
                dim,
                &cfg.hidden,
                task.classes.end,
                &mut stream_rng(seed, Stream::Init),
            );
            let mut rng = stream_rng(seed, Stream::Shuffle);
            train_task(
                &mut params,
                &retrain,
                None,
                ood.as_mut(),
                &cfg.optimizer,
                &mut rng,
                &mut |_| {},
            )?;
        }

        p.stage = "calibrate";
        let buffer = strategy
            .buffer()
            .filter(|b| !b.is_empty())
            .map(|b| b.as_dataset(dim));
        let model = Network::with_bic(&params, strategy.bic());
        let cal = CalibrationData {
            current: &task.train,
            buffer: buffer.as_ref(),
            refresh_from_buffer: cfg.refresh_from_buffer,
        };
        for d in &mut detectors {
            d.calibrate(&model, &cal)?;
        }

        p.stage = "evaluate";
        let row = (0..=i)
            .map(|j| accuracy_on(strategy.as_ref(), &params, &stream.tasks[j].test))
            .collect::<Result<Vec<_>>>()?;
        p.matrix.push_row(row)?;
        if !cfg.final_model_only && i + 1 < b {
            let samples = evaluate_ood(&model, &detectors, &stream, i + 1)?;
            p.record_ood(rep, &cfg.detectors, i + 1, samples);
        }
    }
    if cfg.final_model_only {
        p.stage = "evaluate";
        p.task = None;
        let model = Network::with_bic(&params, strategy.bic());
        for t in 1..b {
            let samples = evaluate_ood(&model, &detectors, &stream, t)?;
            p.record_ood(rep, &cfg.detectors, t, samples);
        }
    }
    Ok(())
}

/// One repetition; failures are captured in the record rather than propagated.
pub fn run_repetition(cfg: &ExperimentConfig, rep: usize) -> (RepetitionRecord, Vec<ScoreDump>) {
    let seed = cfg.stream.seed.wrapping_add(rep as u64);
    let start = Instant::now();
    let mut p = Progress::default();
    let error = execute(cfg, rep, seed, &mut p).err().map(|e| {
        log::error!("repetition {rep} failed during {}: {e}", p.stage);
        RunError {
            stage: p.stage.to_string(),
            task: p.task,
            message: e.to_string(),
        }
    });
    let m = &p.matrix;
    let complete = m.num_tasks() > 0;
    let record = RepetitionRecord {
        repetition: rep,
        seed,
        class_order: p.class_order,
        aca_per_task: aca_sequence(m),
        aca: aca_sequence(m).last().copied(),
        aia: complete.then(|| aia(m)),
        af: af(m),
        accuracy_matrix: m.rows.clone(),
        ood: cfg
            .detectors
            .iter()
            .map(|&k| DetectorRecord::new(k, p.points.remove(&k).unwrap_or_default()))
            .collect(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        error,
    };
    (record, p.scores)
}

fn summarize(cfg: &ExperimentConfig, reps: &[RepetitionRecord]) -> Summary {
    Summary {
        mean_aca: mean_some(reps.iter().map(|r| r.aca)),
        mean_aia: mean_some(reps.iter().map(|r| r.aia)),
        mean_af: mean_some(reps.iter().map(|r| r.af)),
        detectors: cfg
            .detectors
            .iter()
            .enumerate()
            .map(|(i, &k)| DetectorSummary {
                detector: k,
                mean_auroc: mean_some(reps.iter().map(|r| r.ood.get(i).and_then(|d| d.mean_auroc))),
                mean_fpr95: mean_some(reps.iter().map(|r| r.ood.get(i).and_then(|d| d.mean_fpr95))),
            })
            .collect(),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut reps = Vec::with_capacity(cfg.repetitions);
    let mut scores = Vec::new();
    for rep in 0..cfg.repetitions {
        log::info!(
            "repetition {rep} ({} on {} tasks)",
            cfg.strategy.kind,
            cfg.stream.num_tasks
        );
        let (r, s) = run_repetition(cfg, rep);
        reps.push(r);
        scores.extend(s);
    }
    Ok(RunOutput {
        record: ResultsRecord {
            schema_version: SCHEMA_VERSION,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            ood_average: "mean over t = 1..B-1 IND tasks".into(),
            ood_model: if cfg.final_model_only {
                "final-model"
            } else {
                "per-task"
            }
            .into(),
            summary: summarize(cfg, &reps),
            repetitions: reps,
        },
        scores,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `results.json`, `acc_matrix.csv` and `ood_scores/<detector>_<t>.csv` under `dir`.
pub fn emit_results(out: &RunOutput, dir: &Path) -> Result<()> {
    let score_dir = dir.join("ood_scores");
    fs::create_dir_all(&score_dir).map_err(|e| Error::io(&score_dir, e))?;
    write(
        &dir.join("results.json"),
        &serde_json::to_string_pretty(&out.record)?,
    )?;

    let mut acc = String::from("repetition,row,col,accuracy\n");
    for r in &out.record.repetitions {
        for (i, row) in r.accuracy_matrix.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                acc.push_str(&format!("{},{},{},{}\n", r.repetition, i, j, a));
            }
        }
    }
    write(&dir.join("acc_matrix.csv"), &acc)?;

    let mut files: BTreeMap<(DetectorKind, usize), String> = BTreeMap::new();
    for d in &out.scores {
        let text = files
            .entry((d.detector, d.t))
            .or_insert_with(|| String::from("repetition,side,score\n"));
        for s in &d.sample.ind_scores {
            text.push_str(&format!("{},ind,{}\n", d.repetition, s));
        }
        for s in &d.sample.ood_scores {
            text.push_str(&format!("{},ood,{}\n", d.repetition, s));
        }
    }
    for ((det, t), text) in files {
        write(&score_dir.join(format!("{det}_{t}.csv")), &text)?;
    }
    Ok(())
}

pub fn load_results(dir: &Path) -> Result<ResultsRecord> {
    let path = dir.join("results.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Metrics recomputed from the emitted CSV files.
#[derive(Clone, Debug, PartialEq)]
pub struct Recomputed {
    /// Per repetition: ACA, AIA, AF.
    pub cl: BTreeMap<usize, (f64, f64, Option<f64>)>,
    /// Per (detector, repetition): per-`t` points.
    pub ood: BTreeMap<(String, usize), Vec<OodPoint>>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_lines(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(parse_err(path, 1, format!("expected header `{header}`"))),
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(|c| c.trim().to_string()).collect()))
        .collect())
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, cell: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| parse_err(path, line, format!("bad number `{cell}`")))
}

/// Recomputes accuracy and detection metrics from an emitted results directory.
pub fn recompute_from_dir(dir: &Path) -> Result<Recomputed> {
    let acc_path = dir.join("acc_matrix.csv");
    let mut cells: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    for (line, c) in read_lines(&acc_path, "repetition,row,col,accuracy")? {
        if c.len() != 4 {
            return Err(parse_err(&acc_path, line, "expected 4 cells"));
        }
        cells.entry(num(&acc_path, line, &c[0])?).or_default().insert(
            (num(&acc_path, line, &c[1])?, num(&acc_path, line, &c[2])?),
            num(&acc_path, line, &c[3])?,
        );
    }
    let mut cl = BTreeMap::new();
    for (rep, entries) in cells {
        let n = entries.keys().map(|k| k.0 + 1).max().unwrap_or(0);
        let rows = (0..n)
            .map(|i| {
                (0..=i)
                    .map(|j| {
                        entries.get(&(i, j)).copied().ok_or_else(|| {
                            parse_err(
                                &acc_path,
                                0,
                                format!("missing cell ({i}, {j}) for repetition {rep}"),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let m = AccuracyMatrix::from_rows(rows)?;
        if m.num_tasks() > 0 {
            cl.insert(rep, (*aca_sequence(&m).last().unwrap(), aia(&m), af(&m)));
        }
    }

    let mut ood: BTreeMap<(String, usize), Vec<OodPoint>> = BTreeMap::new();
    let score_dir = dir.join("ood_scores");
    if score_dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&score_dir)
            .map_err(|e| Error::io(&score_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for path in files {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let (det, t) = stem
                .rsplit_once('_')
                .and_then(|(d, t)| Some((d.to_string(), t.parse::<usize>().ok()?)))
                .ok_or_else(|| parse_err(&path, 0, "file name must be <detector>_<t>.csv"))?;
            let mut samples: BTreeMap<usize, ScoreSample> = BTreeMap::new();
            for (line, c) in read_lines(&path, "repetition,side,score")? {
                if c.len() != 3 {
                    return Err(parse_err(&path, line, "expected 3 cells"));
                }
                let s = samples.entry(num(&path, line, &c[0])?).or_default();
                let v: f64 = num(&path, line, &c[2])?;
                match c[1].as_str() {
                    "ind" => s.ind_scores.push(v),
                    "ood" => s.ood_scores.push(v),
                    other => {
                        return Err(parse_err(
                            &path,
                            line,
                            format!("side must be ind or ood, got `{other}`"),
                        ))
                    }
                }
            }
            for (rep, s) in samples {
                ood.entry((det.clone(), rep))
                    .or_default()
                    .push(OodPoint::from_sample(t, &s));
            }
        }
        for points in ood.values_mut() {
            points.sort_by_key(|p| p.t);
        }
    }
    Ok(Recomputed { cl, ood })
}

/// Writes the stream's raw train/test tables, the withheld-class samples and the outlier set.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &cfg.stream;
    if s.source != StreamSource::Synthetic {
        return Err(Error::config("gen-data needs stream.source = synthetic"));
    }
    let seed = s.seed;
    let (train, test) = gen_gaussian_tasks(
        s.num_classes + cfg.outliers.reserved_classes,
        s.dim,
        s.per_class,
        s.separation,
        seed,
    )?;
    let k = s.num_classes;
    let reserved = Dataset::concat(s.dim, [&train, &test]).filter(|y| y >= k);
    let mut written = Vec::new();
    let mut emit = |name: &str, d: &Dataset| -> Result<()> {
        let p = dir.join(name);
        write_csv(&p, d)?;
        written.push(p);
        Ok(())
    };
    emit("train.csv", &train.filter(|y| y < k))?;
    emit("test.csv", &test.filter(|y| y < k))?;
    if !reserved.is_empty() {
        emit("reserved.csv", &reserved)?;
    }
    let outliers = build_outliers(cfg, &reserved, s.dim, seed);
    match outliers {
        Ok(o) => {
            let p = dir.join("outliers.csv");
            write_outliers_csv(&p, &o)?;
            written.push(p);
        }
        Err(e) => log::warn!("no outlier set written: {e}"),
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategies::StrategyKind;

    fn quick() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.stream.per_class = 20;
        cfg.optimizer.epochs = 3;
        cfg.stream.num_tasks = 2;
        cfg.stream.num_classes = 4;
        cfg
    }

    #[test]
    fn naive_two_tasks_shape() {
        let mut cfg = quick();
        cfg.detectors = vec![DetectorKind::Msp];
        let out = run_experiment(&cfg).unwrap();
        let r = &out.record.repetitions[0];
        assert!(r.error.is_none());
        assert_eq!(r.accuracy_matrix.len(), 2);
        assert_eq!(r.ood[0].per_task.len(), 1);
        assert_eq!(r.ood[0].per_task[0].t, 1);
    }

    #[test]
    fn averaged_auroc_is_mean_of_points() {
        let mut cfg = quick();
        cfg.stream.num_tasks = 4;
        cfg.stream.num_classes = 8;
        cfg.detectors = vec![DetectorKind::Energy, DetectorKind::Mahalanobis];
        let out = run_experiment(&cfg).unwrap();
        for d in &out.record.repetitions[0].ood {
            let pts: Vec<f64> = d.per_task.iter().map(|p| p.auroc.unwrap()).collect();
            assert_eq!(pts.len(), 3);
            let hand = pts.iter().sum::<f64>() / 3.0;
            assert!((d.mean_auroc.unwrap() - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_detector_averages_to_one() {
        let samples = [
            ScoreSample::new(vec![0.0, 1.0], vec![2.0, 3.0]),
            ScoreSample::new(vec![-1.0], vec![5.0]),
        ];
        let pts: Vec<OodPoint> = samples
            .iter()
            .enumerate()
            .map(|(t, s)| OodPoint::from_sample(t + 1, s))
            .collect();
        assert_eq!(DetectorRecord::new(DetectorKind::Msp, pts).mean_auroc, Some(1.0));
    }

    #[test]
    fn evaluate_ood_rejects_missing_side() {
        let cfg = quick();
        let (stream, _) = build_stream(&cfg, 0).unwrap();
        let mut rng = stream_rng(0, Stream::Init);
        let mut params = ParamSet::init(cfg.stream.dim, &[4], 0, &mut rng);
        expand_head(&mut params, 4).unwrap();
        let det = vec![DetectorState::new(DetectorKind::Msp, Default::default())];
        let net = Network::new(&params);
        assert!(evaluate_ood(&net, &det, &stream, 2).is_err());
        let s = evaluate_ood(&net, &det, &stream, 1).unwrap();
        assert_eq!(s[0].ind_scores.len(), stream.tasks[0].test.len());
        assert_eq!(s[0].ood_scores.len(), stream.tasks[1].test.len());
    }

    #[test]
    fn failures_are_recorded() {
        let mut cfg = quick();
        cfg.detectors = vec![DetectorKind::Vim];
        cfg.hidden = vec![200];
        let out = run_experiment(&cfg).unwrap();
        let err = out.record.repetitions[0].error.as_ref().unwrap();
        assert_eq!(err.stage, "calibrate");
        assert_eq!(err.task, Some(0));
    }

    #[test]
    fn every_strategy_completes() {
        for kind in StrategyKind::ALL {
            let mut cfg = quick();
            cfg.strategy.kind = kind;
            cfg.strategy.buffer_capacity = 20;
            let out = run_experiment(&cfg).unwrap();
            let r = &out.record.repetitions[0];
            assert!(r.error.is_none(), "{kind}: {:?}", r.error);
            assert_eq!(r.accuracy_matrix.len(), 2);
        }
    }

    #[test]
    fn every_detector_and_ood_objective_completes() {
        for kind in [OodTrainKind::LogitNorm, OodTrainKind::Oe, OodTrainKind::Mix] {
            let mut cfg = quick();
            cfg.strategy.kind = StrategyKind::Replay;
            cfg.ood_train.kind = kind;
            cfg.detectors = DetectorKind::ALL.to_vec();
            cfg.detector_params.knn_k = 5;
            cfg.hidden = vec![8];
            let out = run_experiment(&cfg).unwrap();
            let r = &out.record.repetitions[0];
            assert!(r.error.is_none(), "{kind}: {:?}", r.error);
            assert!(r.ood.iter().all(|d| d.mean_auroc.is_some()));
        }
    }

    #[test]
    fn mix_term_covers_replayed_exemplars() {
        let (stream, _) = build_stream(&quick(), 0).unwrap();
        let data = &stream.tasks[0].train;
        let batch = data.subset(&[0, 1, 2]);
        let replayed = data.subset(&[5, 6]);
        let mut params = ParamSet::init(data.dim(), &[4], 0, &mut stream_rng(0, Stream::Init));
        expand_head(&mut params, 2).unwrap();
        let mut stage = OodStage {
            cfg: OodTrainConfig {
                kind: OodTrainKind::Mix,
                lambda: 0.7,
                mix_strength: 0.0,
                ..OodTrainConfig::default()
            },
            outliers: OutlierSet::new(data.dim(), Vec::new()),
            range: stream.data_range.clone(),
            outlier_batch: None,
            rng: stream_rng(0, Stream::Augment),
        };
        let mut acc = LossAccumulator::new(&params, None);
        stage.add_term(&params, &batch, Some(&replayed), &mut acc).unwrap();
        let mut both = batch.clone();
        both.extend(&replayed);
        let mut want = LossAccumulator::new(&params, None);
        want.add_ce(&params, &both, 0.7).unwrap();
        assert!((acc.loss - want.loss).abs() < 1e-12);
    }
}
