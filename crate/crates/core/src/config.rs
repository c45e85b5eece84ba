//! Run configuration, loaded from TOML. Every field has a default, so an
//! empty file is a valid config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{PhysicsParams, ResetSpec, RewardSpec};
use crate::error::{Error, Result};
use crate::impact::ImpactParams;
use crate::qnet::NetConfig;
use crate::replay::TerParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub replay: TerParams,
    pub impact: ImpactParams,
    pub network: NetConfig,
    pub physics: PhysicsParams,
    pub reward: RewardSpec,
    pub reset: ResetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            replay: TerParams::default(),
            impact: ImpactParams::default(),
            network: NetConfig::default(),
            physics: PhysicsParams::default(),
            reward: RewardSpec::default(),
            reset: ResetSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.replay.validate()?;
        self.impact.validate()?;
        self.network.validate()?;
        self.physics.validate()?;
        self.reward.validate()?;
        if !(self.reset.position_range >= 0.0 && self.reset.position_range < self.physics.position_limit) {
            return Err(Error::config(
                "reset.position_range",
                format!("must lie in [0, {}), got {}", self.physics.position_limit, self.reset.position_range),
            ));
        }
        if !(self.reset.angle_range >= 0.0 && self.reset.angle_range < self.physics.angle_limit) {
            return Err(Error::config(
                "reset.angle_range",
                format!("must lie in [0, {}), got {}", self.physics.angle_limit, self.reset.angle_range),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config("toml", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field,
                message: format!("{} ({})", message, path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("toml", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::AgentRole;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.train.episodes, c.train.max_steps, c.train.target_period), (2000, 3000, 4000));
        assert_eq!((c.train.decay, c.train.eps_min, c.train.gamma), (0.999, 0.01, 0.999));
        assert_eq!((c.replay.capacity, c.replay.macro_batch, c.replay.mini_batch), (100_000, 256, 80));
        assert_eq!((c.impact.alpha, c.impact.sigma, c.impact.beta), (5e-4, 2e-4, 5e-5));
        assert_eq!((c.network.hidden_layers, c.network.hidden_units), (3, 64));
        assert_eq!(c.reward.roles, vec![AgentRole::Balance, AgentRole::Position { target: 0.0 }]);
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.train.episodes = 12;
        c.reward.roles = vec![AgentRole::Balance, AgentRole::Position { target: 0.5 }, AgentRole::Balance];
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = RunConfig::from_toml_str("seed = 3\n[train]\nepisodes = 5\n[impact]\nlambda_high = 0.7\n").unwrap();
        assert_eq!((c.seed, c.train.episodes, c.impact.lambda_high), (3, 5, 0.7));
        assert_eq!(c.train.max_steps, 3000);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml_str("[train]\nepisodez = 5\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn invalid_values_name_the_field() {
        for (text, field) in [
            ("[impact]\nlambda_low = 0.9\n", "impact"),
            ("[replay]\nmini_batch = 300\n", "replay"),
            ("[train]\ngamma = 1.0\n", "train.gamma"),
            ("[train]\ndecay = 0.0\n", "train.decay"),
            ("[reset]\nangle_range = 0.3\n", "reset.angle_range"),
            ("[network]\ndropout = 1.0\n", "network"),
        ] {
            match RunConfig::from_toml_str(text) {
                Err(Error::Config { field: f, .. }) => assert!(f.starts_with(field), "{text}: {f}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
