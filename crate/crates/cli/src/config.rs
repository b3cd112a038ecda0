//! Run-wide configuration file: one JSON document holding the per-stage
//! parameter blocks, each falling back to its module default when absent.

use cdalign::align::RansacConfig;
use cdalign::cd::FinetuneConfig;
use cdalign::model::EncoderConfig;
use cdalign::pretext::PretextConfig;
use cdalign::scenario::DistortionSpec;
use cdalign::{CdError, CdResult};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pretext: PretextConfig,
    pub ransac: RansacConfig,
    pub finetune: FinetuneConfig,
    pub distortion: DistortionSpec,
    /// Absent means: derive the channel count from the data and keep the
    /// remaining architecture fields at their defaults.
    pub encoder: Option<EncoderConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CdResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CdError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CdResult<()> {
        self.pretext.validate()?;
        self.ransac.validate()?;
        self.finetune.validate()?;
        self.distortion.validate()?;
        if let Some(enc) = &self.encoder {
            enc.validate()?;
        }
        Ok(())
    }
}
