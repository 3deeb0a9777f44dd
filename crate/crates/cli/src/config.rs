//! The TOML run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use gyromix::evaluation::SweepGrid;
use gyromix::training::OptimizerKind;
use gyromix::{BallConfig, EncoderConfig, FeatureFormat, LossConfig, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    File,
}

/// Which part of a dataset a command works on. `train` and `eval` are the
/// two halves of the class split (first half of the labels trains).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Feature file for `source = "file"`; relative to the config file.
    pub path: Option<PathBuf>,
    pub format: FeatureFormat,
    /// Seed of the synthetic generator.
    pub seed: u64,
    /// Split `train` fits on.
    pub train_on: Split,
    pub synthetic: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            format: FeatureFormat::Csv,
            seed: 7,
            train_on: Split::Train,
            synthetic: SynthSpec::default(),
        }
    }
}

/// Optimizer-loop settings; the encoder, loss and ball have their own tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub classes_per_batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            classes_per_batch: t.classes_per_batch,
            steps: t.steps,
            lr: t.lr,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            split: Split::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Hard negatives per anchor in the overlap report.
    pub m: usize,
    /// Classes in the profiled / checked batch; 0 means every pairable class.
    pub classes_per_batch: usize,
    /// Central-difference step for `gradcheck`.
    pub fd_step: f64,
    /// `gradcheck` fails above this relative error.
    pub threshold: f64,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            m: 6,
            classes_per_batch: 0,
            fd_step: 1e-5,
            threshold: 1e-4,
        }
    }
}

/// Which optional artifacts commands write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportToggles {
    pub trace: bool,
    pub metadata: bool,
}

impl Default for ReportToggles {
    fn default() -> Self {
        Self {
            trace: true,
            metadata: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainSection,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub ball: BallConfig,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
    pub reports: ReportToggles,
    pub sweep: Option<SweepGrid>,
}

impl RunConfig {
    /// Parses `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::parse(path, &e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = cfg.data.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.out.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            classes_per_batch: t.classes_per_batch,
            steps: t.steps,
            lr: t.lr,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            seed: t.seed,
            encoder: self.encoder,
            loss: self.loss,
            ball: self.ball,
        }
    }

    /// Everything that can be checked without touching data.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate()?;
        if self.data.source == DataSource::File && self.data.path.is_none() {
            return Err(CliError::field("data.path", "required when data.source = \"file\""));
        }
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        }
        if self.eval.ks.is_empty() {
            return Err(CliError::field("eval.ks", "need at least one K"));
        }
        if let Some(k) = self.eval.ks.iter().find(|&&k| k == 0) {
            return Err(CliError::field("eval.ks", format!("K = {k} must be >= 1")));
        }
        if self.analyze.m == 0 {
            return Err(CliError::field("analyze.m", "must be >= 1"));
        }
        if self.analyze.classes_per_batch == 1 {
            return Err(CliError::field("analyze.classes_per_batch", "must be 0 or >= 2"));
        }
        if !(self.analyze.fd_step.is_finite() && self.analyze.fd_step > 0.0) {
            return Err(CliError::field("analyze.fd_step", "must be > 0"));
        }
        if !(self.analyze.threshold.is_finite() && self.analyze.threshold > 0.0) {
            return Err(CliError::field("analyze.threshold", "must be > 0"));
        }
        if let Some(grid) = &self.sweep {
            grid.validate()?;
        }
        Ok(())
    }
}
