//! JSON snapshot of a trained model and the scaler it was trained under.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Scaler;
use crate::flow::{AnyModel, DensityModel, FlowError, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("parameter `{0}` is non-finite and cannot be saved")]
    NonFinite(String),
    #[error("checkpoint lacks parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("parameter `{id}` has shape {got:?}, model expects {expected:?}")]
    Shape {
        id: String,
        expected: [usize; 2],
        got: [usize; 2],
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub input_dim: usize,
    pub parameters: BTreeMap<String, Tensor>,
    pub scaler: Option<Scaler>,
}

impl Checkpoint {
    pub fn capture(model: &AnyModel, scaler: Option<&Scaler>) -> Result<Self, CheckpointError> {
        let mut parameters = BTreeMap::new();
        for p in model.parameters() {
            if !p.tensor.is_finite() {
                return Err(CheckpointError::NonFinite(p.id.clone()));
            }
            parameters.insert(p.id.clone(), p.tensor.clone());
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            model_config: model.config().clone(),
            input_dim: model.input_dim(),
            parameters,
            scaler: scaler.cloned(),
        })
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn restore(&self) -> Result<AnyModel, CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(self.format_version));
        }
        let mut model = AnyModel::new(self.model_config.clone(), self.input_dim)?;
        let mut seen = 0;
        for p in model.parameters_mut() {
            let saved = self
                .parameters
                .get(&p.id)
                .ok_or_else(|| CheckpointError::MissingParameter(p.id.clone()))?;
            if saved.shape() != p.tensor.shape() {
                return Err(CheckpointError::Shape {
                    id: p.id.clone(),
                    expected: p.tensor.shape(),
                    got: saved.shape(),
                });
            }
            p.tensor = saved.clone();
            seen += 1;
        }
        if seen != self.parameters.len() {
            let known: Vec<String> = model.parameters().iter().map(|p| p.id.clone()).collect();
            let extra = self
                .parameters
                .keys()
                .find(|k| !known.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::UnexpectedParameter(extra));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CheckpointError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}
