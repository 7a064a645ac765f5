//! Experiment configuration: JSON on disk, resolved against the engine's
//! enums before anything runs.
//!
//! Unknown keys are rejected everywhere so a typo (or an augmentation knob
//! the engine deliberately does not have, like brightness) fails loudly
//! instead of being ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use spn_core::augment::AugmentPolicy;
use spn_core::models::{ArchName, HeadPooling, ModelOptions, Normalization};
use spn_core::nn::ActivationKind;
use spn_core::optim::{OptimizerKind, Regularizer};
use spn_core::{Error, Result};

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "dspn" | "ddspn" | "tdspn".
    pub arch: String,
    /// "dropout" | "batchnorm" | "globalpool"; defaults to the
    /// architecture's canonical scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<String>,
    /// "max" | "avg"; defaults to max.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_pooling: Option<String>,
    /// "relu" | "leaky_relu" | "elu".
    #[serde(default = "default_activation")]
    pub activation: String,
    /// "sgd" | "adam" | "adadelta".
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
    /// Defaults to the optimizer's own standard rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_regularizer")]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Required: every stochastic choice in a run derives from it.
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum RegularizerConfig {
    None,
    L1 { lambda: f64 },
    L2 { lambda: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_shift")]
    pub shift_max: i64,
    #[serde(default = "default_rotation")]
    pub rotation_max_deg: f64,
    #[serde(default = "default_flip")]
    pub hflip: bool,
    #[serde(default = "default_flip")]
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: false,
            shift_max: default_shift(),
            rotation_max_deg: default_rotation(),
            hflip: default_flip(),
            vflip: default_flip(),
        }
    }
}

fn default_activation() -> String {
    "relu".to_string()
}
fn default_optimizer() -> String {
    "adam".to_string()
}
fn default_regularizer() -> RegularizerConfig {
    RegularizerConfig::L2 { lambda: 0.001 }
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_folds() -> usize {
    10
}
fn default_shift() -> i64 {
    3
}
fn default_rotation() -> f64 {
    30.0
}
fn default_flip() -> bool {
    true
}

/// Everything resolved into engine types; construction implies validity.
#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub arch: ArchName,
    pub options: ModelOptions,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub regularizer: Regularizer,
    pub policy: AugmentPolicy,
    pub augment_enabled: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
}

pub fn parse_activation(s: &str) -> Result<ActivationKind> {
    match s {
        "relu" => Ok(ActivationKind::Relu),
        "leaky_relu" => Ok(ActivationKind::leaky_relu_default()),
        "elu" => Ok(ActivationKind::elu_default()),
        other => Err(Error::invalid(
            "config",
            format!("unknown activation `{other}` (expected relu, leaky_relu, or elu)"),
        )),
    }
}

pub fn activation_name(kind: ActivationKind) -> &'static str {
    match kind {
        ActivationKind::Relu => "relu",
        ActivationKind::LeakyRelu { .. } => "leaky_relu",
        ActivationKind::Elu { .. } => "elu",
    }
}

pub fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        "adadelta" => Ok(OptimizerKind::Adadelta),
        other => Err(Error::invalid(
            "config",
            format!("unknown optimizer `{other}` (expected sgd, adam, or adadelta)"),
        )),
    }
}

pub fn optimizer_name(kind: OptimizerKind) -> &'static str {
    match kind {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
        OptimizerKind::Adadelta => "adadelta",
    }
}

impl RegularizerConfig {
    fn to_engine(&self) -> Regularizer {
        match *self {
            RegularizerConfig::None => Regularizer::None,
            RegularizerConfig::L1 { lambda } => Regularizer::L1 { lambda },
            RegularizerConfig::L2 { lambda } => Regularizer::L2 { lambda },
        }
    }
}

/// Short display form used in results CSVs, e.g. "l2@0.001".
pub fn regularizer_name(reg: &Regularizer) -> String {
    match *reg {
        Regularizer::None => "none".to_string(),
        Regularizer::L1 { lambda } => format!("l1@{lambda}"),
        Regularizer::L2 { lambda } => format!("l2@{lambda}"),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::invalid("config", format!("{}: {e}", path.display()))
        })
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let arch = ArchName::parse(&self.arch).ok_or_else(|| {
            Error::invalid(
                "config",
                format!("unknown arch `{}` (expected dspn, ddspn, or tdspn)", self.arch),
            )
        })?;
        let canonical = ModelOptions::canonical(arch);
        let normalization = match &self.normalization {
            None => canonical.normalization,
            Some(s) => Normalization::parse(s).ok_or_else(|| {
                Error::invalid(
                    "config",
                    format!(
                        "unknown normalization `{s}` (expected dropout, batchnorm, or globalpool)"
                    ),
                )
            })?,
        };
        let head_pooling = match &self.head_pooling {
            None => canonical.head_pooling,
            Some(s) => HeadPooling::parse(s).ok_or_else(|| {
                Error::invalid("config", format!("unknown head_pooling `{s}` (expected max or avg)"))
            })?,
        };
        let options = ModelOptions {
            activation: parse_activation(&self.activation)?,
            normalization,
            head_pooling,
        };
        options.validate(arch)?;
        let optimizer = parse_optimizer(&self.optimizer)?;
        let learning_rate = self.learning_rate.unwrap_or_else(|| optimizer.default_learning_rate());
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::invalid(
                "config",
                format!("learning_rate must be a positive real, got {learning_rate}"),
            ));
        }
        let regularizer = self.regularizer.to_engine();
        regularizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("config", "batch_size must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::invalid("config", "folds must be at least 2"));
        }
        let policy = AugmentPolicy {
            shift_max: self.augment.shift_max,
            rotation_max_deg: self.augment.rotation_max_deg,
            hflip: self.augment.hflip,
            vflip: self.augment.vflip,
        };
        policy.validate()?;
        Ok(ResolvedConfig {
            arch,
            options,
            optimizer,
            learning_rate,
            regularizer,
            policy,
            augment_enabled: self.augment.enabled,
            batch_size: self.batch_size,
            epochs: self.epochs,
            folds: self.folds,
            seed: self.seed,
        })
    }
}
