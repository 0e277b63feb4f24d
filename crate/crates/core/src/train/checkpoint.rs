use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{read_json, write_json};
use crate::params::ParamStore;

/// Random streams are keyed by `(seed, step, ...)`, so the next step index is
/// the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: usize,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, params: ParamStore) -> Self {
        let optimizer = AdamState::new(&params);
        Self {
            config_hash: config.hash(),
            rng: RngState { seed: config.seed, next_step: 0 },
            config,
            step: 0,
            params,
            optimizer,
        }
    }

    /// Checks that the stored hash and rng state agree with the rest.
    pub fn verify(&self) -> Result<()> {
        if self.config_hash != self.config.hash() {
            return Err(Error::Data("checkpoint config hash does not match its config".into()));
        }
        if self.rng.seed != self.config.seed || self.rng.next_step != self.step as u64 {
            return Err(Error::Data(format!("checkpoint rng state {:?} at step {}", self.rng, self.step)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.verify()?;
        Ok(c)
    }
}
