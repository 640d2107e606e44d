//! Model and training configuration files.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ActivationKind;
use crate::layout::JointLayout;
use crate::recurrent::GateSharing;

use super::SCHEMA;

/// A layout given inline or by name from the config's `layouts` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutRef {
    Name(String),
    Inline(JointLayout),
}

impl LayoutRef {
    pub fn resolve(&self, table: &BTreeMap<String, JointLayout>) -> Result<JointLayout> {
        match self {
            LayoutRef::Inline(l) => Ok(l.clone()),
            LayoutRef::Name(n) => table
                .get(n)
                .cloned()
                .ok_or_else(|| Error::validation(format!("unknown layout name \"{n}\""))),
        }
    }
}

impl From<JointLayout> for LayoutRef {
    fn from(l: JointLayout) -> Self {
        LayoutRef::Inline(l)
    }
}

impl From<&str> for LayoutRef {
    fn from(n: &str) -> Self {
        LayoutRef::Name(n.to_string())
    }
}

fn one() -> usize {
    1
}

fn default_bn_momentum() -> f64 {
    crate::layers::batchnorm::DEFAULT_MOMENTUM
}

fn default_bn_epsilon() -> f64 {
    crate::layers::batchnorm::DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    ChiralLinear {
        in_layout: LayoutRef,
        out_layout: LayoutRef,
    },
    ChiralConv1d {
        in_layout: LayoutRef,
        out_layout: LayoutRef,
        kernel_size: usize,
        #[serde(default = "one")]
        dilation: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    ChiralBatchnorm {
        layout: LayoutRef,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
        #[serde(default = "default_bn_epsilon")]
        epsilon: f64,
    },
    Activation {
        activation: ActivationKind,
    },
    Dropout {
        p: f64,
    },
    ChiralLstm {
        in_layout: LayoutRef,
        hidden_layout: LayoutRef,
        #[serde(default)]
        gate_sharing: GateSharing,
    },
    ChiralGru {
        in_layout: LayoutRef,
        hidden_layout: LayoutRef,
        #[serde(default)]
        gate_sharing: GateSharing,
    },
    InvarianceHead {
        in_layout: LayoutRef,
        out_layout: LayoutRef,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_betas")]
        betas: (f64, f64),
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.9999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            betas: default_betas(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean per-joint Euclidean distance.
    #[default]
    Mpjpe,
    /// Mean squared coordinate error.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: OptimizerConfig,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Batch-norm momentum multiplier applied after every epoch.
    pub bn_momentum_decay: f64,
    pub augmentation_prob: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Training is reported as converged when the final epoch loss is at or below this.
    pub loss_threshold: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            lr_decay: 1.0,
            batch_size: 64,
            epochs: 100,
            bn_momentum_decay: 0.99,
            augmentation_prob: 0.5,
            seed: 0,
            loss: LossKind::Mpjpe,
            loss_threshold: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.augmentation_prob) {
            return Err(Error::validation(format!(
                "augmentation_prob {} outside [0, 1]",
                self.augmentation_prob
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::validation(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if let OptimizerConfig::Adam {
            betas: (b1, b2),
            eps,
            ..
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || eps.is_nan() || eps <= 0.0
            {
                return Err(Error::validation(
                    "adam betas must lie in [0, 1) and eps be positive",
                ));
            }
        }
        if let OptimizerConfig::Sgd { momentum, .. } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::validation("sgd momentum must lie in [0, 1)"));
            }
        }
        for (name, v) in [
            ("lr_decay", self.lr_decay),
            ("bn_momentum_decay", self.bn_momentum_decay),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::validation(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub layouts: BTreeMap<String, JointLayout>,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ModelConfig {
    pub fn new(name: impl Into<String>, layers: Vec<LayerConfig>) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            name: name.into(),
            layouts: BTreeMap::new(),
            layers,
            training: TrainingConfig::default(),
        }
    }

    pub fn with_layout(mut self, name: impl Into<String>, layout: JointLayout) -> Self {
        self.layouts.insert(name.into(), layout);
        self
    }

    pub fn with_training(mut self, training: TrainingConfig) -> Self {
        self.training = training;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        super::parse_versioned(text)
    }

    pub fn to_json(&self) -> Result<String> {
        super::to_json(self)
    }
}
