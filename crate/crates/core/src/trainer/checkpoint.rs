use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::model::{ClapNp, ModelConfig};
use crate::nn::checkpoint::{read_params, write_params};
use crate::nn::{InitRecord, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Where the derived random streams stand; every stream is keyed by the
/// master seed and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub master_seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub epoch: usize,
    pub best_val_elbo: f64,
    pub seed: u64,
    pub init: InitRecord,
    pub rng: RngState,
    /// Training image count used for the total-correlation estimate.
    pub dataset_size: usize,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<ClapNp<f32>> {
        ClapNp::with_params(self.manifest.model.clone(), self.params.clone())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_params(&self.params, &dir.join("params.bin"))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::CorruptCheckpoint { path: path.clone(), reason: e.to_string() })?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::CorruptCheckpoint { path, reason: format!("format version {}", manifest.format_version) });
        }
        let mut params = ParamStore::new(manifest.init.seed);
        params.init = manifest.init.clone();
        read_params(&dir.join("params.bin"), &mut params)?;
        // Name/shape audit against the configured architecture.
        let model = ClapNp::with_params(manifest.model.clone(), params)
            .map_err(|e| Error::CorruptCheckpoint { path: dir.join("params.bin"), reason: e.to_string() })?;
        Ok(Self { manifest, params: model.params })
    }
}
