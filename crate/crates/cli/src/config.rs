//! Experiment configuration: one strict JSON document per experiment.

use std::path::{Path, PathBuf};

use ensyth_core::network::PerLayer;
use ensyth_core::pruner::PruneConfig;
use ensyth_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::seeds::child_seed;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub grid: Vec<GridSet>,
    #[serde(default)]
    pub elimination: EliminationSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Classes to keep, relabelled densely in this order.
    #[serde(default)]
    pub keep_classes: Option<Vec<usize>>,
    pub split: SplitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Blobs {
        samples_per_class: usize,
        classes: usize,
        dim: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Input dimension, hidden widths, class count.
    pub layer_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "zero")]
    pub l1: PerLayer,
    #[serde(default = "zero")]
    pub l2: PerLayer,
    #[serde(default = "one")]
    pub dropout_keep: PerLayer,
}

/// One hyperparameter set: a model per epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSet {
    pub set_id: String,
    pub epsilons: Vec<f64>,
    #[serde(default = "zero")]
    pub l1: PerLayer,
    #[serde(default = "zero")]
    pub l2: PerLayer,
    #[serde(default = "one")]
    pub dropout_keep: PerLayer,
    #[serde(default)]
    pub fine_tune_epochs: usize,
    #[serde(default = "fine_tune_lr")]
    pub fine_tune_learning_rate: f64,
    #[serde(default = "fine_tune_batch")]
    pub fine_tune_batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Val,
    Test,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EliminationSection {
    #[serde(default)]
    pub split: EvalSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "repeats")]
    pub repeats: usize,
    #[serde(default = "bench_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sample_seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            repeats: repeats(),
            batch_size: bench_batch(),
            sample_seed: 0,
        }
    }
}

fn zero() -> PerLayer {
    PerLayer::Scalar(0.0)
}

fn one() -> PerLayer {
    PerLayer::Scalar(1.0)
}

fn fine_tune_lr() -> f64 {
    0.01
}

fn fine_tune_batch() -> usize {
    32
}

fn repeats() -> usize {
    9
}

fn bench_batch() -> usize {
    50
}

impl ExperimentConfig {
    /// Parses and validates; relative dataset paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let at = e.path().to_string();
            CliError::Config(format!("at `{at}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset.source {
            DatasetSource::Csv { path, .. } => fix(path),
            DatasetSource::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
            DatasetSource::Blobs { .. } => {}
        }
    }

    fn check_paths(&self) -> Result<(), CliError> {
        let paths: Vec<&PathBuf> = match &self.dataset.source {
            DatasetSource::Csv { path, .. } => vec![path],
            DatasetSource::Idx { images, labels } => vec![images, labels],
            DatasetSource::Blobs { .. } => vec![],
        };
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(CliError::Config(format!(
                "at `dataset.source`: {} does not exist",
                p.display()
            ))),
            None => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |at: &str, msg: String| Err(CliError::Config(format!("at `{at}`: {msg}")));
        if self.grid.is_empty() {
            return bad("grid", "at least one set is required".into());
        }
        for (i, set) in self.grid.iter().enumerate() {
            if set.epsilons.is_empty() {
                return bad(&format!("grid[{i}].epsilons"), "empty".into());
            }
            if let Some(e) = set.epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
                return bad(&format!("grid[{i}].epsilons"), format!("{e} is not a finite value >= 0"));
            }
        }
        if self.network.layer_dims.len() < 2 || self.network.layer_dims.contains(&0) {
            return bad(
                "network.layer_dims",
                format!("{:?} needs an input and an output width, all positive", self.network.layer_dims),
            );
        }
        let s = self.dataset.split;
        let spec = self.split_spec();
        if let Err(e) = spec.validate() {
            return bad("dataset.split", e.to_string());
        }
        let needed = match self.elimination.split {
            EvalSplit::Val => s.val,
            EvalSplit::Test => s.test,
        };
        if needed <= 0.0 {
            return bad(
                "elimination.split",
                format!("the {} split is empty", self.elimination.split.as_str()),
            );
        }
        if self.bench.repeats == 0 || self.bench.batch_size == 0 {
            return bad("bench", "repeats and batch_size must be at least 1".into());
        }
        if let DatasetSource::Blobs { samples_per_class, classes, dim, spread } = self.dataset.source {
            if samples_per_class == 0 || classes == 0 || dim == 0 || !(spread >= 0.0 && spread.is_finite()) {
                return bad("dataset.source", "blob counts must be positive and spread finite".into());
            }
        }
        Ok(())
    }

    pub fn split_spec(&self) -> ensyth_core::SplitSpec {
        let s = self.dataset.split;
        ensyth_core::SplitSpec {
            train: s.train,
            val: s.val,
            test: s.test,
            seed: child_seed(self.seed, "split", 0),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            l1: t.l1.clone(),
            l2: t.l2.clone(),
            dropout_keep: t.dropout_keep.clone(),
            seed: child_seed(self.seed, "train", 0),
        }
    }

    /// Flattened grid in set order, each config with its own fine-tuning seed.
    pub fn prune_grid(&self) -> Vec<PruneConfig> {
        let mut out = Vec::new();
        for set in &self.grid {
            for &eps in &set.epsilons {
                let mut cfg = PruneConfig::new(set.set_id.clone(), eps);
                cfg.l1 = set.l1.clone();
                cfg.l2 = set.l2.clone();
                cfg.dropout_keep = set.dropout_keep.clone();
                cfg.fine_tune_epochs = set.fine_tune_epochs;
                cfg.fine_tune_learning_rate = set.fine_tune_learning_rate;
                cfg.fine_tune_batch_size = set.fine_tune_batch_size;
                cfg.seed = child_seed(self.seed, "pool", out.len() as u64);
                out.push(cfg);
            }
        }
        out
    }
}
