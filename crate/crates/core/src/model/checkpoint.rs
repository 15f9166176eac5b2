//! Single-file JSON checkpoints, written atomically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub spec: ModelSpec,
    pub fold: usize,
    /// Epoch (1-based) whose weights are stored.
    pub epoch: usize,
    pub best_val_macro_f1: f64,
    pub config_digest: String,
    pub weights: Vec<f64>,
    pub ema_weights: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.weights.len() != self.ema_weights.len() {
            return Err(Error::Shape("EMA weights differ in size from weights".into()));
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|_| Error::MissingCheckpoint(path.display().to_string()))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "{}: unsupported checkpoint format {}",
                path.display(),
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the network and installs the stored (EMA or raw) weights.
    pub fn to_model(&self, use_ema: bool) -> Result<Model> {
        let mut model = build_model(&self.spec, 0)?;
        let weights = if use_ema { &self.ema_weights } else { &self.weights };
        if weights.len() != model.weights.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} weights, network needs {}",
                weights.len(),
                model.weights.len()
            )));
        }
        model.weights.clone_from(weights);
        Ok(model)
    }
}
