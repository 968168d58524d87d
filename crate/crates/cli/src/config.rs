//! JSON run configuration. Every section is optional; command-line flags
//! override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ulfdti::augment::{AugmentConfig, UlfProtocol};
use ulfdti::bias::CorrectionConfig;
use ulfdti::tensor::FitConfig;
use ulfdti_net::infer::Tiling;
use ulfdti_net::train::TrainConfig;
use ulfdti_net::ModelConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub fit: Option<FitConfig>,
    pub bias: Option<CorrectionConfig>,
    pub protocol: Option<UlfProtocol>,
    pub augment: Option<AugmentConfig>,
    pub train: Option<TrainConfig>,
    pub model: Option<ModelConfig>,
    pub tiling: Option<Tiling>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_are_optional_and_partial() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "protocol": {"voxel_mm": 5.0}}"#).unwrap();
        assert_eq!(c.seed, Some(4));
        let p = c.protocol.unwrap();
        assert_eq!(p.voxel_mm, 5.0);
        assert_eq!(p.n_directions, UlfProtocol::default().n_directions);
        assert!(c.bias.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
    }
}
