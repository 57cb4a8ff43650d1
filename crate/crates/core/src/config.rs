//! Experiment configuration: flat `section.key = value` files layered over desk defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{DetectorKind, DetectorParams};
use crate::error::{Error, Result};
use crate::nn::Milestone;
use crate::ood_train::{OodTrainConfig, OodTrainKind};
use crate::strategies::{StrategyConfig, StrategyKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub source: StreamSource,
    pub num_classes: usize,
    pub num_tasks: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl OptimizerConfig {
    pub fn schedule(&self) -> Vec<Milestone> {
        self.milestones
            .iter()
            .map(|&epoch| Milestone {
                epoch,
                factor: self.gamma,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierSource {
    HeldOutClasses,
    UniformShell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierConfig {
    pub source: OutlierSource,
    /// Extra synthetic classes generated alongside the stream and withheld from it.
    pub reserved_classes: usize,
    pub count: usize,
    /// Shell radius as a multiple of the class separation.
    pub shell_factor: f64,
    /// Outliers per optimization step; `None` matches the batch size.
    pub batch_size: Option<usize>,
    /// Labeled samples of withheld classes for a CSV stream.
    pub reserved_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub strategy: StrategyConfig,
    pub ood_train: OodTrainConfig,
    pub outliers: OutlierConfig,
    pub detectors: Vec<DetectorKind>,
    pub detector_params: DetectorParams,
    pub refresh_from_buffer: bool,
    pub final_model_only: bool,
    pub repetitions: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: StreamConfig {
                source: StreamSource::Synthetic,
                num_classes: 8,
                num_tasks: 4,
                dim: 16,
                per_class: 100,
                separation: 6.0,
                seed: 0,
                train_path: None,
                test_path: None,
            },
            hidden: vec![64],
            optimizer: OptimizerConfig {
                epochs: 30,
                batch_size: 32,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                milestones: vec![20],
                gamma: 0.1,
            },
            strategy: StrategyConfig::default(),
            ood_train: OodTrainConfig::default(),
            outliers: OutlierConfig {
                source: OutlierSource::UniformShell,
                reserved_classes: 2,
                count: 200,
                shell_factor: 3.0,
                batch_size: None,
                reserved_path: None,
            },
            detectors: vec![DetectorKind::Msp, DetectorKind::Energy],
            detector_params: DetectorParams::default(),
            refresh_from_buffer: false,
            final_model_only: false,
            repetitions: 1,
            out_dir: PathBuf::from("results"),
        }
    }
}

/// A right-hand side as written in the file.
#[derive(Clone, Debug, PartialEq)]
enum Value {
    Scalar(String),
    List(Vec<String>),
}

impl Value {
    fn describe(&self) -> String {
        match self {
            Value::Scalar(s) => format!("`{s}`"),
            Value::List(v) => format!("[{}]", v.join(", ")),
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if let Some(inner) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let items = inner
            .split(',')
            .map(|s| unquote(s.trim()).to_string())
            .filter(|s| !s.is_empty())
            .collect();
        Value::List(items)
    } else {
        Value::Scalar(unquote(raw).to_string())
    }
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(s)
}

fn mismatch(key: &str, expected: &str, got: &Value) -> Error {
    Error::config(format!(
        "type mismatch at `{key}`: expected {expected}, got {}",
        got.describe()
    ))
}

fn scalar<'a>(key: &str, v: &'a Value, expected: &str) -> Result<&'a str> {
    match v {
        Value::Scalar(s) => Ok(s),
        Value::List(_) => Err(mismatch(key, expected, v)),
    }
}

fn real(key: &str, v: &Value) -> Result<f64> {
    scalar(key, v, "a real number")?
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| mismatch(key, "a real number", v))
}

fn int(key: &str, v: &Value) -> Result<usize> {
    scalar(key, v, "a nonnegative integer")?
        .parse()
        .map_err(|_| mismatch(key, "a nonnegative integer", v))
}

fn uint64(key: &str, v: &Value) -> Result<u64> {
    scalar(key, v, "a nonnegative integer")?
        .parse()
        .map_err(|_| mismatch(key, "a nonnegative integer", v))
}

fn boolean(key: &str, v: &Value) -> Result<bool> {
    match scalar(key, v, "true or false")? {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(mismatch(key, "true or false", v)),
    }
}

fn optional_int(key: &str, v: &Value) -> Result<Option<usize>> {
    match scalar(key, v, "an integer or `auto`")? {
        "auto" => Ok(None),
        _ => int(key, v).map(Some),
    }
}

fn int_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::List(items) => items
            .iter()
            .map(|s| s.parse().map_err(|_| mismatch(key, "a list of integers", v)))
            .collect(),
        Value::Scalar(_) => Err(mismatch(key, "a list of integers", v)),
    }
}

fn named<T: std::str::FromStr<Err = Error>>(key: &str, v: &Value) -> Result<T> {
    scalar(key, v, "a name")?
        .parse()
        .map_err(|e: Error| Error::config(format!("`{key}`: {}", e_msg(&e))))
}

fn e_msg(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Reads a config file; absent keys keep their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_at(&text, path)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_at(text, Path::new("<config>"))
    }

    fn parse_at(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut unknown = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected `section.key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !cfg.set(key, &parse_value(raw))? {
                unknown.push(key.to_string());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one assignment. Returns `false` for an unknown key.
    fn set(&mut self, key: &str, v: &Value) -> Result<bool> {
        match key {
            "stream.source" => {
                self.stream.source = match scalar(key, v, "`synthetic` or `csv`")? {
                    "synthetic" => StreamSource::Synthetic,
                    "csv" => StreamSource::Csv,
                    _ => return Err(mismatch(key, "`synthetic` or `csv`", v)),
                }
            }
            "stream.num_classes" => self.stream.num_classes = int(key, v)?,
            "stream.num_tasks" => self.stream.num_tasks = int(key, v)?,
            "stream.dim" => self.stream.dim = int(key, v)?,
            "stream.per_class" => self.stream.per_class = int(key, v)?,
            "stream.separation" => self.stream.separation = real(key, v)?,
            "stream.seed" => self.stream.seed = uint64(key, v)?,
            "stream.train_path" => self.stream.train_path = Some(scalar(key, v, "a path")?.into()),
            "stream.test_path" => self.stream.test_path = Some(scalar(key, v, "a path")?.into()),
            "model.hidden" => self.hidden = int_list(key, v)?,
            "optimizer.epochs" => self.optimizer.epochs = int(key, v)?,
            "optimizer.batch_size" => self.optimizer.batch_size = int(key, v)?,
            "optimizer.lr" => self.optimizer.lr = real(key, v)?,
            "optimizer.momentum" => self.optimizer.momentum = real(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = real(key, v)?,
            "optimizer.milestones" => self.optimizer.milestones = int_list(key, v)?,
            "optimizer.gamma" => self.optimizer.gamma = real(key, v)?,
            "strategy.kind" => self.strategy.kind = named::<StrategyKind>(key, v)?,
            "strategy.alpha" => self.strategy.alpha = real(key, v)?,
            "strategy.kd_weight" => self.strategy.kd_weight = real(key, v)?,
            "strategy.reg_weight" => self.strategy.reg_weight = real(key, v)?,
            "strategy.kd_temperature" => self.strategy.kd_temperature = real(key, v)?,
            "strategy.buffer_capacity" => self.strategy.buffer_capacity = int(key, v)?,
            "strategy.agem_ref_batch" => self.strategy.agem_ref_batch = int(key, v)?,
            "strategy.replay_batch" => self.strategy.replay_batch = optional_int(key, v)?,
            "strategy.fisher_samples" => self.strategy.fisher_samples = int(key, v)?,
            "strategy.branch_widths" => self.strategy.branch_widths = Some(int_list(key, v)?),
            "strategy.bic_holdout" => self.strategy.bic_holdout = real(key, v)?,
            "ood_train.kind" => self.ood_train.kind = named::<OodTrainKind>(key, v)?,
            "ood_train.lambda" => self.ood_train.lambda = real(key, v)?,
            "ood_train.tau" => self.ood_train.logitnorm_tau = real(key, v)?,
            "ood_train.mix_strength" => self.ood_train.mix_strength = real(key, v)?,
            "ood_train.mix_chain_len" => self.ood_train.mix_chain_len = int(key, v)?,
            "outliers.source" => {
                self.outliers.source = match scalar(key, v, "`held-out-classes` or `uniform-shell`")? {
                    "held-out-classes" => OutlierSource::HeldOutClasses,
                    "uniform-shell" => OutlierSource::UniformShell,
                    _ => return Err(mismatch(key, "`held-out-classes` or `uniform-shell`", v)),
                }
            }
            "outliers.reserved_classes" => self.outliers.reserved_classes = int(key, v)?,
            "outliers.count" => self.outliers.count = int(key, v)?,
            "outliers.shell_factor" => self.outliers.shell_factor = real(key, v)?,
            "outliers.batch_size" => self.outliers.batch_size = optional_int(key, v)?,
            "outliers.reserved_path" => self.outliers.reserved_path = Some(scalar(key, v, "a path")?.into()),
            "detectors.list" => {
                self.detectors = match v {
                    Value::List(items) => items
                        .iter()
                        .map(|s| named::<DetectorKind>(key, &Value::Scalar(s.clone())))
                        .collect::<Result<_>>()?,
                    Value::Scalar(_) => return Err(mismatch(key, "a list of detector names", v)),
                }
            }
            "detectors.energy_temperature" => self.detector_params.energy_temperature = real(key, v)?,
            "detectors.odin_temperature" => self.detector_params.odin_temperature = real(key, v)?,
            "detectors.odin_epsilon" => self.detector_params.odin_epsilon = real(key, v)?,
            "detectors.react_percentile" => self.detector_params.react_percentile = real(key, v)?,
            "detectors.dice_keep" => self.detector_params.dice_keep = real(key, v)?,
            "detectors.ash_percentile" => self.detector_params.ash_percentile = real(key, v)?,
            "detectors.scale_percentile" => self.detector_params.scale_percentile = real(key, v)?,
            "detectors.knn_k" => self.detector_params.knn_k = int(key, v)?,
            "calibration.refresh_from_buffer" => self.refresh_from_buffer = boolean(key, v)?,
            "eval.final_model_only" => self.final_model_only = boolean(key, v)?,
            "run.repetitions" => self.repetitions = int(key, v)?,
            "run.out_dir" => self.out_dir = scalar(key, v, "a path")?.into(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stream;
        if s.num_tasks == 0 {
            return Err(Error::config("stream.num_tasks must be >= 1"));
        }
        if s.source == StreamSource::Synthetic {
            if s.dim == 0 || s.num_classes == 0 {
                return Err(Error::config("stream.dim and stream.num_classes must be >= 1"));
            }
            if !s.num_classes.is_multiple_of(s.num_tasks) {
                return Err(Error::config(format!(
                    "stream.num_classes = {} is not divisible by stream.num_tasks = {}",
                    s.num_classes, s.num_tasks
                )));
            }
        } else if s.train_path.is_none() || s.test_path.is_none() {
            return Err(Error::config(
                "csv source needs stream.train_path and stream.test_path",
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden must list positive widths"));
        }
        let o = &self.optimizer;
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::config(
                "optimizer.epochs and optimizer.batch_size must be >= 1",
            ));
        }
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::config(
                "optimizer needs lr > 0, momentum in [0, 1), weight_decay >= 0",
            ));
        }
        if !(o.gamma > 0.0) {
            return Err(Error::config("optimizer.gamma must be > 0"));
        }
        self.strategy.validate()?;
        self.ood_train.validate()?;
        if self.repetitions == 0 {
            return Err(Error::config("run.repetitions must be >= 1"));
        }
        let p = &self.detector_params;
        if !(0.0..=100.0).contains(&p.react_percentile)
            || !(0.0..=100.0).contains(&p.ash_percentile)
            || !(0.0..=100.0).contains(&p.scale_percentile)
        {
            return Err(Error::config("detector percentiles must lie in [0, 100]"));
        }
        if !(0.0..=1.0).contains(&p.dice_keep) {
            return Err(Error::config("detectors.dice_keep must lie in [0, 1]"));
        }
        if !(p.energy_temperature > 0.0) || !(p.odin_temperature > 0.0) {
            return Err(Error::config("detector temperatures must be > 0"));
        }
        if p.knn_k == 0 {
            return Err(Error::config("detectors.knn_k must be >= 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = ExperimentConfig::parse("# only a comment\n\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn parses_all_value_shapes() {
        let text = "\
stream.num_tasks = 2   # two tasks
strategy.kind = replay
strategy.alpha = 0.25
optimizer.milestones = [5, 8]
model.hidden = [32, 16]
detectors.list = [msp, energy, mahalanobis]
eval.final_model_only = true
run.out_dir = \"out dir\"
strategy.replay_batch = auto
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.stream.num_tasks, 2);
        assert_eq!(cfg.strategy.kind, StrategyKind::Replay);
        assert_eq!(cfg.strategy.alpha, 0.25);
        assert_eq!(cfg.optimizer.milestones, vec![5, 8]);
        assert_eq!(cfg.hidden, vec![32, 16]);
        assert_eq!(
            cfg.detectors,
            vec![DetectorKind::Msp, DetectorKind::Energy, DetectorKind::Mahalanobis]
        );
        assert!(cfg.final_model_only);
        assert_eq!(cfg.out_dir, PathBuf::from("out dir"));
        assert_eq!(cfg.strategy.replay_batch, None);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = ExperimentConfig::parse("strtegy.kind = naive\nfoo.bar = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("strtegy.kind") && msg.contains("foo.bar"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn type_mismatch_names_key() {
        let msg = ExperimentConfig::parse("optimizer.lr = fast")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("optimizer.lr"), "{msg}");
        let msg = ExperimentConfig::parse("optimizer.epochs = [1, 2]")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("optimizer.epochs"), "{msg}");
        let msg = ExperimentConfig::parse("detectors.list = [msp, openmax]")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("detectors.list") && msg.contains("openmax"), "{msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("strategy.alpha = 1.5").is_err());
        assert!(ExperimentConfig::parse("run.repetitions = 0").is_err());
        assert!(ExperimentConfig::parse("stream.num_tasks = 3").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.optimizer.lr = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn paper_profile_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles/paper.cfg");
        let cfg = ExperimentConfig::load(path).unwrap();
        assert_eq!(cfg.optimizer.epochs, 200);
        assert_eq!(cfg.optimizer.milestones, vec![60, 120, 170]);
        assert_eq!(cfg.strategy.buffer_capacity, 2000);
    }
}
