//! Run configuration: one TOML document with a section per subsystem.
//!
//! Every field has a default, unknown keys are rejected, and the canonical
//! re-serialization is hashed to give each run its identity.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::plant::MusclePlantConfig;
use crate::ppo::PpoConfig;
use crate::synergy::SynergyConfig;
use crate::tasks::SuiteConfig;
use crate::workflows::WorkflowConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub plant: MusclePlantConfig,
    pub tasks: SuiteConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub workflow: WorkflowConfig,
    pub synergy: SynergyConfig,
}

impl RunConfig {
    /// Parses and validates. `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let (line, col) = line_col(text, s.start);
                    format!("line {line}, column {col}: ")
                })
                .unwrap_or_default();
            Error::ConfigParse { path: origin.display().to_string(), message: format!("{location}{}", e.message()) }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.env.reward.validate()?;
        self.ppo.validate()?;
        self.workflow.validate()?;
        self.synergy.validate()?;
        if self.synergy.k > self.plant.n_muscles {
            return Err(Error::InvalidConfig(format!(
                "synergy.k = {} exceeds the {} muscles",
                self.synergy.k, self.plant.n_muscles
            )));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// 1-based line and column of byte offset `pos`.
fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let before = &text[..pos.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}
