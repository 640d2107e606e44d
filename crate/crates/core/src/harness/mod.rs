//! Synthetic pose experiments: configs, models, data, training and evaluation.

pub mod baseline;
pub mod config;
pub mod eval;
pub mod model;
pub mod suite;
pub mod task;
pub mod train;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use config::{LayerConfig, LayoutRef, LossKind, ModelConfig, OptimizerConfig, TrainingConfig};
pub use eval::{evaluate, predict, EvalMetrics, EvalMode};
pub use model::{Layer, MatvecMode, Model, ModelRecord, Stream};
pub use task::{augment, mpjpe, Dataset, LayoutFile, SyntheticPoseTask, TaskSpec, TeacherKind};
pub use train::{train, TrainReport, TrainedModel};

/// Version tag carried by every JSON file.
pub const SCHEMA: &str = "chirality-kit/v1";

/// Parses a JSON document after checking its `schema` tag.
pub fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(SCHEMA) => {}
        Some(other) => {
            return Err(Error::validation(format!(
                "unsupported schema \"{other}\", expected \"{SCHEMA}\""
            )))
        }
        None => {
            return Err(Error::validation(format!(
                "missing \"schema\": \"{SCHEMA}\""
            )))
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
