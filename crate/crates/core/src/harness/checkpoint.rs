//! Versioned JSON checkpoints for the denoiser.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, NamedTensor, NetworkSpec};
use crate::error::{Error, Result};
use crate::schedule::ScheduleSpec;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `pretrain` or `train`.
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub rounds_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schedule: ScheduleSpec,
    pub network: NetworkSpec,
    pub adapter_enabled: bool,
    pub adapter_rank: Option<usize>,
    pub tensors: Vec<NamedTensor>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn capture(params: &DenoiserParams, schedule: ScheduleSpec, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            schedule,
            network: params.spec().clone(),
            adapter_enabled: params.adapter_enabled(),
            adapter_rank: params.adapter_rank(),
            tensors: params.tensors(),
            provenance,
        }
    }

    pub fn params(&self) -> Result<DenoiserParams> {
        if self.network.num_steps != self.schedule.steps {
            return Err(Error::Checkpoint(format!(
                "network expects {} steps, schedule has {}",
                self.network.num_steps, self.schedule.steps
            )));
        }
        let p = DenoiserParams::from_tensors(self.network.clone(), self.adapter_rank, &self.tensors)?;
        if p.adapter_enabled() != self.adapter_enabled && self.adapter_rank.is_some() {
            return Err(Error::Checkpoint("adapter flags disagree".into()));
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch { found: found.min(u32::MAX as u64) as u32, expected: FORMAT_VERSION });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
