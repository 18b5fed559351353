//! Run configuration: every module's settings in one document, loaded from
//! a JSON file and then overridden from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{RefinementConfig, TrainConfig};
use crate::synth::SceneSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Worker threads; `None` leaves the choice to the thread pool.
    pub threads: Option<usize>,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub refine: RefinementConfig,
}

impl RunConfig {
    /// Reads a config file. Missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        self.scene.validate()?;
        self.train.losses.validate()?;
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.train.learning_rate)));
        }
        self.refine.validate()
    }
}

/// What a command ran with: its name, arguments and the merged config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub crate_version: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"iterations": 7}, "scene": {"object_count": 3}}"#).unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.learning_rate, 5e-4);
        assert_eq!(c.scene.object_count, 3);
        assert_eq!(c.refine, RefinementConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig {
            threads: Some(2),
            ..RunConfig::default()
        };
        c.refine.stride = 4;
        c.scene.noise.boundary_flip = 0.2;
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let c = RunConfig {
            threads: Some(0),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.scene.object_count = 300;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }
}
