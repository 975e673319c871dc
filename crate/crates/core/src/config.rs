//! One TOML file holding every tunable of the pipeline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::features::FrameConfig;
use crate::trainer::TrainConfig;

/// `[train]`, `[features]` and `[synthetic]` sections; missing sections and
/// keys take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub features: FrameConfig,
    pub synthetic: SyntheticConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.features.validate()?;
        self.synthetic.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let cfg = PipelineConfig::from_toml("[train]\nhidden = 8\n[synthetic]\nspeakers = 3\n").unwrap();
        assert_eq!(cfg.train.hidden, 8);
        assert_eq!(cfg.train.decision_interval, TrainConfig::default().decision_interval);
        assert_eq!(cfg.synthetic.speakers, 3);
        assert_eq!(cfg.features, FrameConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            PipelineConfig::from_toml("[train]\ndecision_interval = 0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(PipelineConfig::from_toml("[trian]\n"), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("[train]\nhidden = \"x\"\n"), Err(Error::Config(_))));
    }
}
