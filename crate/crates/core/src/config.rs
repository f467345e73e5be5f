//! The TOML run document: network description plus an `[engine]` section.
//!
//! ```toml
//! dt = 0.1
//! seed = 42
//!
//! [engine]
//! workers = 4
//! max_ticks = 10000
//! decimation = 10
//!
//! [[populations]]
//! name = "exc"
//! size = 800
//! model = "lif"
//! params = { v_thresh = -50.0, c_m = 1.0, r_m = 10.0 }
//! input = { kind = "poisson-spikes", rate = 100.0, amplitude = 0.5 }
//!
//! [[connections]]
//! src = "exc"
//! dst = "exc"
//! rule = { kind = "probability", p = 0.05 }
//! weight = { min = 0.0, max = 0.2 }
//! delay = 2
//!
//! [[inputs]]
//! population = "exc"
//! from_tick = 5000
//! input = { kind = "poisson-spikes", rate = 200.0, amplitude = 0.5 }
//! ```
//!
//! `docs/config-reference.md` documents every key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::network::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub workers: usize,
    pub max_ticks: u64,
    pub decimation: u64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            workers: e.workers,
            max_ticks: e.max_ticks,
            decimation: e.telemetry_decimation,
        }
    }
}

impl From<&EngineSection> for EngineConfig {
    fn from(s: &EngineSection) -> Self {
        EngineConfig {
            workers: s.workers,
            max_ticks: s.max_ticks,
            telemetry_decimation: s.decimation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    #[serde(flatten)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub engine: EngineSection,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
}

impl ConfigDocument {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn engine_config(&self) -> EngineConfig {
        (&self.engine).into()
    }

    /// SHA-256 of the canonical JSON form of the parsed network config
    /// (engine overrides excluded, so worker count does not change it).
    pub fn config_hash(&self) -> String {
        config_hash(&self.network)
    }
}

pub fn config_hash(network: &NetworkConfig) -> String {
    let canonical = serde_json::to_vec(network).expect("config serializes");
    hex(&Sha256::digest(canonical))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
