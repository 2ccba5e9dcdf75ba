//! TOML experiment configuration.
//!
//! Parsing is total: unknown keys are rejected and syntax errors carry the
//! line and column. Semantic errors name the offending field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use shiftrisk::augment::{compose, Augmentation, AugmentationOp, OpKind, ParamSpace};
use shiftrisk::cansample::{ParamPrior, SamplingPolicy};
use shiftrisk::data::{self, Dataset, SplitSpec};
use shiftrisk::model::{Activation, ModelShape};
use shiftrisk::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: impl Into<String>, message: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub experiment: ExperimentBlock,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Rings,
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: Generator,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub split: SplitConfig,
    pub longtail: Option<LongTailConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Rings,
            classes: 3,
            per_class: 200,
            dim: 2,
            separation: 3.0,
            images: None,
            labels: None,
            split: SplitConfig::default(),
            longtail: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train: s.train,
            val: s.val,
            test: s.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailConfig {
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpName {
    Rotation2d,
    Shift,
    Scale,
    Color,
    Flip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorConfig {
    Uniform,
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Points { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpConfig {
    pub kind: OpName,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    /// Shift dimension; defaults to the dataset dimension.
    pub dims: Option<usize>,
    pub channels: Option<usize>,
    pub prior: Option<PriorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub ops: Vec<OpConfig>,
    /// Application order as indices into `ops`; defaults to list order.
    pub order: Option<Vec<usize>>,
    pub max_attempts: usize,
    pub fallback: bool,
    pub copies: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            ops: vec![OpConfig {
                kind: OpName::Rotation2d,
                lower: None,
                upper: None,
                dims: None,
                channels: None,
                prior: None,
            }],
            order: None,
            max_attempts: shiftrisk::cansample::DEFAULT_MAX_ATTEMPTS,
            fallback: true,
            copies: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Initialization seed; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 16],
            activation: Activation::Tanh,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentBlock {
    /// Randomized cases for `check-decomposition`.
    pub checks: usize,
    /// Draws for `bounds-check`.
    pub draws: usize,
    /// Clean samples per variance-scan trial.
    pub n: usize,
    pub m_list: Vec<usize>,
    pub trials: usize,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        Self {
            checks: 50,
            draws: 1000,
            n: 32,
            m_list: vec![1, 2, 4, 8, 16],
            trials: 1000,
            lambdas: vec![0.0001, 0.1, 0.5, 1.0],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Augmentation resolved from the config: a single operator or a composite.
pub struct BuiltAugment {
    pub op: Box<dyn Augmentation>,
    pub prior: ParamPrior,
    pub policy: SamplingPolicy,
    pub copies: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let path = path.into();
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read { path, source })?;
        Self::from_toml(&text)
    }

    /// Canonical TOML rendering, used for snapshots and hashing.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        match d.generator {
            Generator::Rings | Generator::Blobs => {
                if d.classes < 2 {
                    return Err(field_err("dataset.classes", "must be at least 2"));
                }
                if d.per_class == 0 {
                    return Err(field_err("dataset.per_class", "must be at least 1"));
                }
            }
            Generator::Idx => {
                if d.images.is_none() {
                    return Err(field_err("dataset.images", "required for the idx generator"));
                }
                if d.labels.is_none() {
                    return Err(field_err("dataset.labels", "required for the idx generator"));
                }
            }
        }
        if d.generator == Generator::Blobs {
            if d.dim == 0 {
                return Err(field_err("dataset.dim", "must be at least 1"));
            }
            if !(d.separation > 0.0) {
                return Err(field_err("dataset.separation", "must be positive"));
            }
        }
        if let Some(lt) = &d.longtail {
            if !(lt.ratio >= 1.0) || !lt.ratio.is_finite() {
                return Err(field_err("dataset.longtail.ratio", "must be finite and at least 1"));
            }
        }
        let s = &d.split;
        for (name, v) in [("train", s.train), ("val", s.val), ("test", s.test)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field_err(format!("dataset.split.{name}"), "must lie in [0, 1]"));
            }
        }
        if s.train + s.val + s.test > 1.0 + 1e-9 {
            return Err(field_err("dataset.split", "fractions sum to more than 1"));
        }
        if self.augment.ops.is_empty() {
            return Err(field_err("augment.ops", "at least one operator is required"));
        }
        if self.augment.max_attempts == 0 {
            return Err(field_err("augment.max_attempts", "must be at least 1"));
        }
        if self.augment.copies == 0 {
            return Err(field_err("augment.copies", "must be at least 1"));
        }
        self.build_augment(self.input_dim_hint())?;
        self.train.validate().map_err(|e| field_err("train", e))?;
        let e = &self.experiment;
        if e.m_list.contains(&0) {
            return Err(field_err("experiment.m_list", "entries must be at least 1"));
        }
        if e.n == 0 {
            return Err(field_err("experiment.n", "must be at least 1"));
        }
        if let Some(l) = e.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(field_err("experiment.lambdas", format!("{l} is outside [0, 1]")));
        }
        Ok(())
    }

    fn input_dim_hint(&self) -> usize {
        match self.dataset.generator {
            Generator::Rings => 2,
            Generator::Blobs => self.dataset.dim,
            Generator::Idx => 0,
        }
    }

    pub fn build_dataset(&self, seed: u64) -> Result<Dataset, ConfigError> {
        let d = &self.dataset;
        let data = match d.generator {
            Generator::Rings => data::gen_rings(d.classes, d.per_class, seed),
            Generator::Blobs => data::gen_blobs(d.classes, d.dim, d.per_class, d.separation, seed),
            Generator::Idx => data::load_idx(d.images.as_ref().unwrap(), d.labels.as_ref().unwrap()),
        }
        .map_err(|e| field_err("dataset", e))?;
        match &d.longtail {
            Some(lt) => data::longtail_subsample(&data, lt.ratio, seed).map_err(|e| field_err("dataset.longtail", e)),
            None => Ok(data),
        }
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        let s = &self.dataset.split;
        SplitSpec {
            train: s.train,
            val: s.val,
            test: s.test,
            seed,
        }
    }

    pub fn model_shape(&self, input_dim: usize, num_classes: usize) -> ModelShape {
        ModelShape {
            input_dim,
            widths: self.model.widths.clone(),
            num_classes,
            activation: self.model.activation,
        }
    }

    /// Resolve the operator list against a data dimension. A dimension of 0
    /// skips checks that depend on the data.
    pub fn build_augment(&self, input_dim: usize) -> Result<BuiltAugment, ConfigError> {
        let a = &self.augment;
        let mut ops = Vec::with_capacity(a.ops.len());
        let mut priors = Vec::with_capacity(a.ops.len());
        for (i, oc) in a.ops.iter().enumerate() {
            let field = |f: &str| format!("augment.ops[{i}].{f}");
            let (kind, lower, upper) = default_box(oc, input_dim);
            let lower = oc.lower.clone().unwrap_or(lower);
            let upper = oc.upper.clone().unwrap_or(upper);
            if lower.len() != upper.len() {
                return Err(field_err(field("upper"), "length differs from lower"));
            }
            if let Some(k) = lower.iter().zip(&upper).position(|(l, u)| !(l < u)) {
                return Err(field_err(
                    field("lower"),
                    format!("lower[{k}] = {} is not below upper[{k}] = {}", lower[k], upper[k]),
                ));
            }
            let space = ParamSpace::new(lower, upper).map_err(|e| field_err(field("lower"), e))?;
            let op = AugmentationOp::new(kind, space).map_err(|e| field_err(field("kind"), e))?;
            let prior = match &oc.prior {
                None => ParamPrior::default_for(&op),
                Some(PriorConfig::Uniform) => ParamPrior::uniform(op.space().clone()),
                Some(PriorConfig::Gaussian { mean, std }) => {
                    ParamPrior::truncated_gaussian(mean.clone(), std.clone(), op.space().clone())
                        .map_err(|e| field_err(field("prior"), e))?
                }
                Some(PriorConfig::Points { points }) => {
                    ParamPrior::point_masses(points.clone()).map_err(|e| field_err(field("prior"), e))?
                }
            };
            prior.check_support(op.space()).map_err(|e| field_err(field("prior"), e))?;
            ops.push(op);
            priors.push(prior);
        }
        let policy = SamplingPolicy {
            max_attempts: a.max_attempts,
            fallback: a.fallback,
        };
        if ops.len() == 1 && a.order.as_ref().is_none_or(|o| o == &[0]) {
            return Ok(BuiltAugment {
                op: Box::new(ops.pop().unwrap()),
                prior: priors.pop().unwrap(),
                policy,
                copies: a.copies,
            });
        }
        let order = a.order.clone().unwrap_or_else(|| (0..ops.len()).collect());
        let composite = compose(ops, order).map_err(|e| field_err("augment.order", e))?;
        Ok(BuiltAugment {
            op: Box::new(composite),
            prior: ParamPrior::Product(priors),
            policy,
            copies: a.copies,
        })
    }
}

fn default_box(oc: &OpConfig, input_dim: usize) -> (OpKind, Vec<f64>, Vec<f64>) {
    use std::f64::consts::PI;
    match oc.kind {
        OpName::Rotation2d => (OpKind::Rotation2D, vec![-PI], vec![PI]),
        OpName::Shift => {
            let d = oc.dims.unwrap_or(input_dim.max(1));
            (OpKind::AdditiveShift, vec![-0.5; d], vec![0.5; d])
        }
        OpName::Scale => (OpKind::Scale, vec![-0.5], vec![0.5]),
        OpName::Color => {
            let c = oc.channels.unwrap_or(1);
            let lo = (0..c).flat_map(|_| [-0.1, -0.2, 0.8]).collect();
            let hi = (0..c).flat_map(|_| [0.1, 0.2, 1.25]).collect();
            (OpKind::ColorAdjust { channels: c }, lo, hi)
        }
        OpName::Flip => (OpKind::DiscreteFlip, vec![0.0], vec![1.0]),
    }
}
