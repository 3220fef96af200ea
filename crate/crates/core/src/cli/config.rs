use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GridSpec, Profile, ScenarioConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "PEDFORMER_SEED";

/// Everything a run needs. Missing keys take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Defaults to the profile's weights.
    pub loss: Option<LossWeights>,
    pub grid: GridSpec,
    /// Defaults to the model's observation and prediction lengths.
    pub window: Option<WindowSpec>,
    pub scenario: ScenarioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Pie,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: None,
            grid: GridSpec::default(),
            window: None,
            scenario: ScenarioConfig::default(),
        }
    }
}

fn messages(result: Result<()>, out: &mut Vec<String>) {
    match result {
        Ok(()) => {}
        Err(Error::Config(m)) => out.extend(m.split("; ").map(str::to_string)),
        Err(e) => out.push(e.to_string()),
    }
}

impl RunConfig {
    /// Reads a config file; also reports whether it set `train.seed`.
    pub fn from_file(path: &Path) -> Result<(Self, bool)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let seed_set = raw.pointer("/train/seed").is_some();
        let config = serde_json::from_value(raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok((config, seed_set))
    }

    /// Loads `path` (or the defaults) and fills `train.seed` from the environment when neither the file nor a flag set it.
    pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<Self> {
        let (mut config, seed_set) = match path {
            Some(p) => Self::from_file(p)?,
            None => (Self::default(), false),
        };
        if let Some(seed) = seed_flag {
            config.train.seed = seed;
        } else if !seed_set {
            if let Ok(text) = std::env::var(SEED_ENV) {
                config.train.seed = text
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?;
            }
        }
        Ok(config)
    }

    pub fn window(&self) -> WindowSpec {
        self.window.unwrap_or(WindowSpec {
            obs_len: self.model.obs_len,
            pred_len: self.model.pred_len,
            ..self.scenario.window
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss.clone().unwrap_or_else(|| LossWeights::for_profile(self.profile))
    }

    /// The scenario with its window aligned to the run's window.
    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            window: self.window(),
            ..self.scenario.clone()
        }
    }

    /// Every validation problem of the configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.model.problems();
        out.extend(self.train.problems());
        messages(self.loss_weights().validate(), &mut out);
        messages(self.grid.validate(), &mut out);
        let window = self.window();
        messages(window.validate(), &mut out);
        if window.obs_len != self.model.obs_len || window.pred_len != self.model.pred_len {
            out.push(format!(
                "window {}+{} frames does not match model obs_len {} and pred_len {}",
                window.obs_len, window.pred_len, self.model.obs_len, self.model.pred_len
            ));
        }
        if self.grid.num_cells() != self.model.num_cells {
            out.push(format!(
                "grid has {} cells but model.num_cells is {}",
                self.grid.num_cells(),
                self.model.num_cells
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} problem(s):\n  - {}",
                problems.len(),
                problems.join("\n  - ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert_eq!(RunConfig::default().problems(), Vec::<String>::new());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [r#"{"trian": {}}"#, r#"{"train": {"epoch": 3}}"#, r#"{"model": {"encoder": {"width": 3}}}"#] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn problems_listed_together() {
        let config: RunConfig = serde_json::from_str(
            r#"{"train": {"batch_size": 0, "learning_rate": -1}, "model": {"obs_len": 0}, "loss": {"trajectory": -1}}"#,
        )
        .unwrap();
        let problems = config.problems();
        assert!(problems.len() >= 4, "{problems:?}");
        let joined = problems.join("\n");
        for key in ["batch_size", "learning_rate", "obs_len", "loss.trajectory"] {
            assert!(joined.contains(key), "{key} missing from {joined}");
        }
    }

    #[test]
    fn window_follows_model() {
        let mut config = RunConfig::default();
        config.model.obs_len = 8;
        config.model.pred_len = 8;
        assert_eq!(config.window().window_len(), 16);
        assert_eq!(config.scenario().window.obs_len, 8);
    }
}
