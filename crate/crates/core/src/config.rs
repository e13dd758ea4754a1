//! One JSON document configuring every stage of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dagen::DaGenParams;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::LossConfig;
use crate::metrics::PointPooling;
use crate::net::NetworkConfig;
use crate::scoring::HqcConfig;
use crate::synth::SynthConfig;
use crate::training::{TrainConfig, TrainSpec};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pooling: PointPooling,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub dagen: DaGenParams,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub hqc: HqcConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_json(&text)
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            network: self.network.clone(),
            dagen: self.dagen.clone(),
            loss: self.loss,
            train: self.train.clone(),
        }
    }

    /// Writes the config to `dir/resolved_config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}
