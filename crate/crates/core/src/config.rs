//! Run configuration loaded from TOML. Unknown keys are rejected and every
//! section has defaults, so an empty file is a valid configuration.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{validate_geometric, GeometricConfig, PhotometricConfig};
use crate::data::{Dataset, DomainConfig, Split};
use crate::error::{Error, Result};
use crate::losses::{Discrepancy, Method, SELECTIVE_THRESHOLD};
use crate::model::{BnMode, Head, ModelConfig};
use crate::params::ParamGroup;
use crate::transformer::Tap;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Update head and inference head, written as two letters (`"US"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HeadConfig {
    pub update: Head,
    pub infer: Head,
}

impl HeadConfig {
    pub const ALL: [HeadConfig; 4] = [
        HeadConfig::new(Head::Unsup, Head::Unsup),
        HeadConfig::new(Head::Unsup, Head::Sup),
        HeadConfig::new(Head::Sup, Head::Unsup),
        HeadConfig::new(Head::Sup, Head::Sup),
    ];

    pub const fn new(update: Head, infer: Head) -> Self {
        HeadConfig { update, infer }
    }

    pub fn single_head(self) -> bool {
        self.update == Head::Unsup && self.infer == Head::Unsup
    }

    pub fn parse(s: &str) -> Result<Self> {
        let head = |c| match c {
            'U' | 'u' => Ok(Head::Unsup),
            'S' | 's' => Ok(Head::Sup),
            _ => Err(Error::config(format!("head configuration {s:?} must be two of U/S"))),
        };
        let mut chars = s.chars();
        match (chars.next(), chars.next(), chars.next()) {
            (Some(a), Some(b), None) => Ok(HeadConfig::new(head(a)?, head(b)?)),
            _ => Err(Error::config(format!("head configuration {s:?} must be two of U/S"))),
        }
    }
}

impl fmt::Display for HeadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.update.letter(), self.infer.letter())
    }
}

impl TryFrom<String> for HeadConfig {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        HeadConfig::parse(&s)
    }
}

impl From<HeadConfig> for String {
    fn from(h: HeadConfig) -> String {
        h.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub n_source: usize,
    pub n_source_val: usize,
    pub n_target: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DomainConfig::source(),
            target: DomainConfig::target(),
            n_source: 2000,
            n_source_val: 200,
            n_target: 200,
        }
    }
}

impl DataConfig {
    /// Domain and size of a split.
    pub fn split(&self, split: Split) -> (&DomainConfig, usize) {
        match split {
            Split::SourceTrain => (&self.source, self.n_source),
            Split::SourceVal => (&self.source, self.n_source_val),
            Split::TargetStream => (&self.target, self.n_target),
        }
    }

    /// Generates a split in memory.
    pub fn synthesize(&self, split: Split, master: u64) -> Result<Dataset> {
        let (domain, n) = self.split(split);
        Dataset::synthesize(domain, n, split.seed(master))
    }
}

/// Pretraining schedule and objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub lambda: f64,
    pub unsup: Method,
    pub tau: f64,
    pub k: usize,
    pub metric: Discrepancy,
    /// Train the single-head network without the transfer module.
    pub no_transformer: bool,
    pub photometric: PhotometricConfig,
    pub geometric: GeometricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            momentum: 0.9,
            lr_power: 0.9,
            lambda: 0.1,
            unsup: Method::MaxSquares,
            tau: SELECTIVE_THRESHOLD,
            k: 1,
            metric: Discrepancy::L2Logits,
            no_transformer: false,
            photometric: PhotometricConfig::default(),
            geometric: GeometricConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("lr {} / momentum {} out of range", self.lr, self.momentum)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) || self.k == 0 {
            return Err(Error::config("tau must lie in (0, 1) and k >= 1"));
        }
        if self.unsup == Method::BnStats {
            return Err(Error::config("bn-stats is not a pretraining objective"));
        }
        validate_geometric(&self.geometric, image_size, image_size)
    }

    pub fn model(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        if self.no_transformer {
            m.transformer = None;
        }
        m
    }
}

/// Online adaptation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub groups: Vec<ParamGroup>,
    pub heads: HeadConfig,
    pub continual: bool,
    pub k: usize,
    pub metric: Discrepancy,
    pub tau: f64,
    /// Normalization statistics for the prediction pass after an update.
    pub inference_bn: BnMode,
    /// Visit the stream in a seed-dependent order.
    pub shuffle: bool,
    pub photometric: PhotometricConfig,
    pub geometric: GeometricConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::TransConsistency,
            lr: 1e-4,
            momentum: 0.9,
            iterations: 1,
            groups: vec![ParamGroup::Bn],
            heads: HeadConfig::new(Head::Unsup, Head::Sup),
            continual: true,
            k: 1,
            metric: Discrepancy::L2Logits,
            tau: SELECTIVE_THRESHOLD,
            inference_bn: BnMode::Adapt,
            shuffle: true,
            photometric: PhotometricConfig::default(),
            geometric: GeometricConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("lr {} / momentum {} out of range", self.lr, self.momentum)));
        }
        if self.iterations == 0 || self.k == 0 {
            return Err(Error::config("iterations and k must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.inference_bn == BnMode::Train {
            return Err(Error::config("inference_bn must be adapt or eval"));
        }
        if self.method.steps() && self.groups.is_empty() {
            return Err(Error::config("adaptation needs at least one parameter group"));
        }
        validate_geometric(&self.geometric, image_size, image_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Adaptation seeds each cell is averaged over.
    pub seeds: Vec<u64>,
    pub k_values: Vec<usize>,
    pub k_methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub layers: Vec<usize>,
    pub metrics: Vec<Discrepancy>,
    pub taps: Vec<Tap>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![0, 1, 2],
            k_values: vec![1, 2, 4, 8],
            k_methods: vec![Method::MinEntropy, Method::MaxSquares, Method::TransConsistency],
            lambdas: vec![0.01, 0.1, 1.0, 10.0],
            layers: vec![1, 2, 3, 4],
            metrics: Discrepancy::ALL.to_vec(),
            taps: Tap::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.source.validate()?;
        self.data.target.validate()?;
        self.model.validate()?;
        if self.data.source.size != self.model.image_size || self.data.target.size != self.model.image_size {
            return Err(Error::config(format!(
                "dataset image size {}/{} differs from model image size {}",
                self.data.source.size, self.data.target.size, self.model.image_size
            )));
        }
        if self.data.n_source == 0 || self.data.n_target == 0 {
            return Err(Error::config("dataset sizes must be at least 1"));
        }
        self.pretrain.validate(self.model.image_size)?;
        self.adapt.validate(self.model.image_size)?;
        if self.sweep.seeds.is_empty() || self.sweep.k_values.contains(&0) || self.sweep.layers.contains(&0) {
            return Err(Error::config("sweep needs seeds and positive k/layer values"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
