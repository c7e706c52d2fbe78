//! Layered run configuration: defaults, then a TOML file, then `CPP__*`
//! environment variables, then `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coverage::{FovConfig, GeneratorConfig};
use crate::dynamics::BatteryModel;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::observation::ObservationConfig;
use crate::reward::RewardConfig;
use crate::safety::MaskLevel;
use crate::trainer::TrainConfig;

/// Prefix of environment overrides; `__` separates path segments, so
/// `CPP__TRAIN__LR_PI=0.1` sets `train.lr_pi`.
pub const ENV_PREFIX: &str = "CPP__";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    pub mask: MaskLevel,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            mask: MaskLevel::Invariant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Initial battery is drawn from `[ceil(beta * b_max), b_max]`.
    pub beta: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub battery: BatteryModel,
    pub fov: FovConfig,
    pub reward: RewardConfig,
    pub safety: SafetyConfig,
    pub observation: ObservationConfig,
    pub scenario: ScenarioConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Builds the effective configuration. `file` falls back to the
    /// `CPP_CONFIG` variable when absent.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let env: Vec<(String, String)> = env.into_iter().collect();
        let from_env_path = env
            .iter()
            .find(|(k, _)| k == "CPP_CONFIG")
            .map(|(_, v)| std::path::PathBuf::from(v));
        let path = file.map(Path::to_path_buf).or(from_env_path);
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        for (k, v) in &env {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                cfg = cfg.with_override(&key, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg = cfg.with_override(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets the dotted `key` to `value`, read as a TOML value and falling
    /// back to a plain string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad key `{key}`")));
        }
        let (last, path) = parts.split_last().expect("non-empty key");
        let mut table = &mut root;
        for p in path {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
        }
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("override `{key}`: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.battery.b_max < 2 {
            return Err(Error::Config(format!(
                "b_max = {} must be at least 2",
                self.battery.b_max
            )));
        }
        if self.battery.b_c == 0 {
            return Err(Error::Config("b_c must be positive".into()));
        }
        if !(self.scenario.beta > 0.0 && self.scenario.beta <= 1.0) {
            return Err(Error::Config(format!("beta = {} not in (0, 1]", self.scenario.beta)));
        }
        self.reward.validate()?;
        self.observation.validate()?;
        self.generator.validate()?;
        self.train.validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            battery: self.battery,
            reward: self.reward,
            mask: self.safety.mask,
            observation: self.observation,
            objective: self.generator.objective,
        }
    }
}
