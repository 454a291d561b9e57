//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so a reloaded model is bit-identical to the saved one.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Param};
use crate::config::Config;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::model::Model;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Config,
    /// Number of completed epochs.
    pub epoch: usize,
    pub time_scale: f64,
    pub horizon_spread: f64,
    pub standardization: Standardization,
    pub params: Vec<Param>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &Config, epoch: usize) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            epoch,
            time_scale: model.time_scale,
            horizon_spread: model.horizon_spread,
            standardization: model.standardization.clone(),
            params: model.params.params().to_vec(),
            adam: model.params.adam_state().clone(),
        }
    }

    /// Rebuilds the model; every stored array must match the layout by name
    /// and shape.
    pub fn restore(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: self.version, expected: CHECKPOINT_VERSION });
        }
        let mut model = Model::new(self.config.model.clone(), self.time_scale, 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                self.params.len()
            )));
        }
        for p in &self.params {
            model.params.load(&p.name, &p.shape, p.data.clone())?;
        }
        model.params.set_adam_state(self.adam.clone())?;
        model.horizon_spread = self.horizon_spread;
        if self.standardization.dim() != model.config.dim {
            return Err(Error::Checkpoint("standardization table has the wrong width".into()));
        }
        model.standardization = self.standardization.clone();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let value: serde_json::Value = serde_json::from_reader(r)?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        Ok(serde_json::from_value(value)?)
    }
}
