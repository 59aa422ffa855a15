//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dst::{DropDecay, DstConfig, DstMethod, RegrowSource};
use crate::error::{LabError, Result};
use crate::nn::Normalization;
use crate::optim::{LrSchedule, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Experiment {
    #[default]
    GradSkew,
    HamSim,
    DstTrain,
    LnCheck,
    ItopReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DatasetKind {
    #[default]
    SyntheticGaussian,
    SyntheticClassification,
    IdxFiles,
}

/// Base optimizer plus whether the HAM metric is layered on top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub ham: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cifar,
    Imagenet,
    Constant,
}

fn parse_err(what: &str, s: &str) -> LabError {
    LabError::Config(format!("unknown {what} '{s}'"))
}

impl FromStr for Experiment {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grad-skew" => Experiment::GradSkew,
            "ham-sim" => Experiment::HamSim,
            "dst-train" => Experiment::DstTrain,
            "ln-check" => Experiment::LnCheck,
            "itop-report" => Experiment::ItopReport,
            _ => return Err(parse_err("experiment", s)),
        })
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::GradSkew => "grad-skew",
            Experiment::HamSim => "ham-sim",
            Experiment::DstTrain => "dst-train",
            Experiment::LnCheck => "ln-check",
            Experiment::ItopReport => "itop-report",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synthetic-gaussian" => DatasetKind::SyntheticGaussian,
            "synthetic-classification" => DatasetKind::SyntheticClassification,
            "idx-files" => DatasetKind::IdxFiles,
            _ => return Err(parse_err("dataset", s)),
        })
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::SyntheticGaussian => "synthetic-gaussian",
            DatasetKind::SyntheticClassification => "synthetic-classification",
            DatasetKind::IdxFiles => "idx-files",
        })
    }
}

impl FromStr for OptimizerSpec {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        let (base, ham) = match s.strip_suffix("+ham") {
            Some(b) => (b, true),
            None => (s, false),
        };
        Ok(OptimizerSpec {
            kind: base.parse().map_err(|_| parse_err("optimizer", s))?,
            ham,
        })
    }
}

impl fmt::Display for OptimizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind, if self.ham { "+ham" } else { "" })
    }
}

impl FromStr for ScheduleKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cifar" => ScheduleKind::Cifar,
            "imagenet" => ScheduleKind::Imagenet,
            "constant" => ScheduleKind::Constant,
            _ => return Err(parse_err("schedule", s)),
        })
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cifar => "cifar",
            ScheduleKind::Imagenet => "imagenet",
            ScheduleKind::Constant => "constant",
        })
    }
}

/// Every knob of every experiment. Keys not used by the selected experiment are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    pub parallel: bool,
    pub svg: bool,
    pub wall_time: bool,

    pub dataset: DatasetKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub samples: usize,
    pub test_samples: usize,
    pub class_std: f64,

    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub normalization: Normalization,
    pub sparsity: f64,
    pub sparsity_grid: Vec<f64>,
    pub mixed_sparsity: Vec<f64>,
    pub batches: usize,

    pub optimizer: OptimizerSpec,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ham_alpha: f64,
    pub ham_h1: f64,
    pub renormalize_grads: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_threshold: f64,

    pub dst_method: DstMethod,
    pub drop_fraction: f64,
    pub update_every: usize,
    pub stop_after: f64,
    pub regrow_source: RegrowSource,
    pub drop_decay: DropDecay,

    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub steps: usize,
    pub multi_neuron: bool,
    pub flow_dim: usize,
    pub flow_samples: usize,
    pub flow_redundant: usize,
    pub flow_eps: f64,
    pub trace_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::GradSkew,
            seed: 0,
            out: PathBuf::from("out"),
            parallel: true,
            svg: false,
            wall_time: false,

            dataset: DatasetKind::SyntheticGaussian,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            samples: 4096,
            test_samples: 1024,
            class_std: 0.5,

            input_dim: 784,
            hidden: vec![64],
            classes: 10,
            normalization: Normalization::BatchNorm,
            sparsity: 0.9,
            sparsity_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
            mixed_sparsity: vec![0.0, 0.75],
            batches: 100,

            optimizer: OptimizerSpec::default(),
            lr: 0.1,
            schedule: ScheduleKind::Cifar,
            warmup_epochs: 5.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            ham_alpha: 4.0,
            ham_h1: 80.0,
            renormalize_grads: false,
            epochs: 50,
            batch_size: 64,
            loss_threshold: 0.5,

            dst_method: DstMethod::Rigl,
            drop_fraction: 0.3,
            update_every: 100,
            stop_after: 0.75,
            regrow_source: RegrowSource::Original,
            drop_decay: DropDecay::Constant,

            eta: vec![0.01],
            alpha: vec![4.0],
            steps: 10_000,
            multi_neuron: false,
            flow_dim: 10,
            flow_samples: 200,
            flow_redundant: 8,
            flow_eps: 1e-8,
            trace_every: 1,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LabError::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_scalar(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Default config for `experiment`, adjusted to its usual scale.
    pub fn for_experiment(experiment: Experiment) -> Self {
        let mut c = ExperimentConfig {
            experiment,
            ..Self::default()
        };
        match experiment {
            Experiment::DstTrain | Experiment::ItopReport => {
                c.dataset = DatasetKind::SyntheticClassification;
                c.input_dim = 32;
                c.hidden = vec![64, 64];
                c.classes = 8;
                c.class_std = 0.3;
                c.samples = 2048;
                c.test_samples = 512;
                c.optimizer.kind = OptimizerKind::SparseOpt;
            }
            Experiment::LnCheck => {
                c.normalization = Normalization::LayerNorm;
                c.input_dim = 256;
                c.sparsity_grid = vec![0.0, 0.25, 0.5, 0.75];
            }
            Experiment::GradSkew | Experiment::HamSim => {}
        }
        c
    }

    /// Parses `key = value` lines on top of the experiment defaults. Blank
    /// lines and `#` comments are skipped.
    pub fn parse(text: &str, experiment: Experiment) -> Result<Self> {
        let mut c = Self::for_experiment(experiment);
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path, experiment: Experiment) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, experiment)
    }

    /// Sets one key; dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "experiment" => self.experiment = value.parse()?,
            "seed" => self.seed = parse_scalar(k, value)?,
            "out" => self.out = PathBuf::from(value),
            "parallel" => self.parallel = parse_scalar(k, value)?,
            "svg" => self.svg = parse_scalar(k, value)?,
            "wall_time" => self.wall_time = parse_scalar(k, value)?,
            "dataset" => self.dataset = value.parse()?,
            "train_images" => self.train_images = parse_path(value),
            "train_labels" => self.train_labels = parse_path(value),
            "test_images" => self.test_images = parse_path(value),
            "test_labels" => self.test_labels = parse_path(value),
            "samples" => self.samples = parse_scalar(k, value)?,
            "test_samples" => self.test_samples = parse_scalar(k, value)?,
            "class_std" => self.class_std = parse_scalar(k, value)?,
            "input_dim" => self.input_dim = parse_scalar(k, value)?,
            "hidden" => self.hidden = parse_list(k, value)?,
            "classes" => self.classes = parse_scalar(k, value)?,
            "normalization" => self.normalization = value.parse()?,
            "sparsity" => self.sparsity = parse_scalar(k, value)?,
            "sparsity_grid" => self.sparsity_grid = parse_list(k, value)?,
            "mixed_sparsity" => self.mixed_sparsity = parse_list(k, value)?,
            "batches" => self.batches = parse_scalar(k, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = parse_scalar(k, value)?,
            "schedule" => self.schedule = value.parse()?,
            "warmup_epochs" => self.warmup_epochs = parse_scalar(k, value)?,
            "momentum" => self.momentum = parse_scalar(k, value)?,
            "weight_decay" => self.weight_decay = parse_scalar(k, value)?,
            "ham_alpha" => self.ham_alpha = parse_scalar(k, value)?,
            "ham_h1" => self.ham_h1 = parse_scalar(k, value)?,
            "renormalize_grads" => self.renormalize_grads = parse_scalar(k, value)?,
            "epochs" => self.epochs = parse_scalar(k, value)?,
            "batch_size" => self.batch_size = parse_scalar(k, value)?,
            "loss_threshold" => self.loss_threshold = parse_scalar(k, value)?,
            "dst_method" => self.dst_method = value.parse()?,
            "drop_fraction" => self.drop_fraction = parse_scalar(k, value)?,
            "update_every" => self.update_every = parse_scalar(k, value)?,
            "stop_after" => self.stop_after = parse_scalar(k, value)?,
            "regrow_source" => self.regrow_source = value.parse()?,
            "drop_decay" => self.drop_decay = value.parse()?,
            "eta" => self.eta = parse_list(k, value)?,
            "alpha" => self.alpha = parse_list(k, value)?,
            "steps" => self.steps = parse_scalar(k, value)?,
            "multi_neuron" => self.multi_neuron = parse_scalar(k, value)?,
            "flow_dim" => self.flow_dim = parse_scalar(k, value)?,
            "flow_samples" => self.flow_samples = parse_scalar(k, value)?,
            "flow_redundant" => self.flow_redundant = parse_scalar(k, value)?,
            "flow_eps" => self.flow_eps = parse_scalar(k, value)?,
            "trace_every" => self.trace_every = parse_scalar(k, value)?,
            _ => return Err(LabError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// All keys in a fixed order, rendered so that [`ExperimentConfig::parse`] reads them back exactly.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("experiment", self.experiment.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("parallel", self.parallel.to_string()),
            ("svg", self.svg.to_string()),
            ("wall_time", self.wall_time.to_string()),
            ("dataset", self.dataset.to_string()),
            ("train_images", show_path(&self.train_images)),
            ("train_labels", show_path(&self.train_labels)),
            ("test_images", show_path(&self.test_images)),
            ("test_labels", show_path(&self.test_labels)),
            ("samples", self.samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("class_std", self.class_std.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("hidden", join(&self.hidden)),
            ("classes", self.classes.to_string()),
            ("normalization", self.normalization.to_string()),
            ("sparsity", self.sparsity.to_string()),
            ("sparsity_grid", join(&self.sparsity_grid)),
            ("mixed_sparsity", join(&self.mixed_sparsity)),
            ("batches", self.batches.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("lr", self.lr.to_string()),
            ("schedule", self.schedule.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("ham_alpha", self.ham_alpha.to_string()),
            ("ham_h1", self.ham_h1.to_string()),
            ("renormalize_grads", self.renormalize_grads.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("loss_threshold", self.loss_threshold.to_string()),
            ("dst_method", self.dst_method.to_string()),
            ("drop_fraction", self.drop_fraction.to_string()),
            ("update_every", self.update_every.to_string()),
            ("stop_after", self.stop_after.to_string()),
            ("regrow_source", self.regrow_source.to_string()),
            ("drop_decay", self.drop_decay.to_string()),
            ("eta", join(&self.eta)),
            ("alpha", join(&self.alpha)),
            ("steps", self.steps.to_string()),
            ("multi_neuron", self.multi_neuron.to_string()),
            ("flow_dim", self.flow_dim.to_string()),
            ("flow_samples", self.flow_samples.to_string()),
            ("flow_redundant", self.flow_redundant.to_string()),
            ("flow_eps", self.flow_eps.to_string()),
            ("trace_every", self.trace_every.to_string()),
        ]
    }

    /// The resolved config as `key = value` lines.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn dst(&self) -> DstConfig {
        DstConfig {
            method: self.dst_method,
            drop_fraction: self.drop_fraction,
            update_every: self.update_every,
            stop_after: self.stop_after,
            regrow_source: self.regrow_source,
            decay: self.drop_decay,
        }
    }

    /// `None` means a constant rate.
    pub fn lr_schedule(&self) -> Result<Option<LrSchedule>> {
        let epochs = self.epochs as f64;
        let s = match self.schedule {
            ScheduleKind::Constant => return Ok(None),
            ScheduleKind::Cifar => LrSchedule::cifar(self.lr, self.warmup_epochs, epochs),
            ScheduleKind::Imagenet => LrSchedule::imagenet(self.lr, self.warmup_epochs, epochs),
        };
        s.map(Some).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        if self.batch_size == 0 || self.batches == 0 {
            return bad("batch_size and batches must be positive".into());
        }
        if self.input_dim == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !in_unit(self.sparsity) || !self.sparsity_grid.iter().all(|&s| in_unit(s)) || !self.mixed_sparsity.iter().all(|&s| in_unit(s)) {
            return bad("sparsities must lie in [0, 1)".into());
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1".into());
        }
        if self.eta.iter().any(|&e| !(e >= 0.0)) || self.alpha.iter().any(|&a| !(a >= 0.0)) {
            return bad("eta and alpha values must be non-negative".into());
        }
        if self.flow_redundant >= self.flow_dim {
            return bad(format!("flow_redundant {} must be below flow_dim {}", self.flow_redundant, self.flow_dim));
        }
        if self.classes > self.input_dim && self.dataset == DatasetKind::SyntheticClassification {
            return bad(format!("{} class means need input_dim ≥ classes", self.classes));
        }
        if matches!(self.experiment, Experiment::DstTrain | Experiment::ItopReport) {
            self.dst().validate()?;
            self.lr_schedule()?;
            if self.epochs == 0 || self.samples == 0 {
                return bad("epochs and samples must be positive".into());
            }
        }
        if self.dataset == DatasetKind::IdxFiles {
            for p in [&self.train_images, &self.train_labels].into_iter().flatten() {
                if !p.exists() {
                    return bad(format!("{} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.echo())
    }
}
