//! JSON parameter checkpoints.
//!
//! Every tensor is stored as `(name, shape, row-major values)`. Floats are
//! written in shortest round-trip form and parsed with correct rounding, so
//! a save/load cycle reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use ria_core::model::WorldModel;
use ria_core::nn::Tensor;
use ria_core::trainer::TrainConfig;
use ria_core::{rng_from_seed, Error};
use serde::{Deserialize, Serialize};

use crate::{Result, RunError};

pub const FORMAT: &str = "ria-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    /// The configuration the parameters were trained with.
    pub config: TrainConfig,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &WorldModel, config: &TrainConfig, epoch: usize) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            epoch,
            config: config.clone(),
            tensors: model.tensors(),
        }
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn to_model(&self) -> Result<WorldModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Load(format!("unsupported checkpoint {} v{}", self.format, self.version)).into());
        }
        let c = &self.config;
        let mut model = WorldModel::new(c.family, &c.network, c.method.uses_context(), &mut rng_from_seed(0))?;
        model.load_tensors(&self.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(RunError::json(path))?;
        fs::write(path, text).map_err(RunError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(RunError::MissingCheckpoint(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(RunError::io(path))?;
        serde_json::from_str(&text).map_err(RunError::json(path))
    }
}
