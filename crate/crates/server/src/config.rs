//! Service configuration: built-in defaults, overlaid by a TOML file,
//! overlaid by `GUESSWHICH_*` environment variables.

use std::path::{Path, PathBuf};

use guesswhich_core::payout::BonusConfig;
use guesswhich_core::GameConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentSpec;
use crate::hub::{HubConfig, FALLBACK_ANSWER};

pub const ENV_PREFIX: &str = "GUESSWHICH_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid value for {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    pub agent: AgentSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// PoolSpec JSONL; the first `games_per_assignment` pools are played in order.
    pub pools: PathBuf,
    /// Category file; category membership gives image attributes to the
    /// truthful and noisy agents.
    pub categories: Option<PathBuf>,
    /// Embedding file matching `categories`; needed only to validate it.
    pub embeddings: Option<PathBuf>,
    pub log_dir: PathBuf,
    /// Directory of image files named `<id>.<ext>`.
    pub images_dir: Option<PathBuf>,
    /// Serve a generated SVG for images that have no file.
    pub placeholder_images: bool,
    pub games_per_assignment: u32,
    pub resume_window_ms: u64,
    pub agent_deadline_ms: u64,
    pub max_attempts: u32,
    pub inactivity_timeout_ms: u64,
    pub max_active_assignments: usize,
    pub broker_workers: usize,
    pub tick_ms: u64,
    pub fallback_answer: String,
    pub game: GameConfig,
    pub bonus: BonusConfig,
    pub conditions: Vec<ConditionSpec>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let hub = HubConfig::default();
        Self {
            bind: "127.0.0.1:8080".into(),
            pools: PathBuf::from("pools.jsonl"),
            categories: None,
            embeddings: None,
            log_dir: PathBuf::from("logs"),
            images_dir: None,
            placeholder_images: true,
            games_per_assignment: hub.games_per_assignment,
            resume_window_ms: hub.resume_window_ms,
            agent_deadline_ms: hub.agent_deadline_ms,
            max_attempts: hub.max_attempts,
            inactivity_timeout_ms: hub.inactivity_timeout_ms,
            max_active_assignments: hub.max_active_assignments,
            broker_workers: 8,
            tick_ms: 250,
            fallback_answer: FALLBACK_ANSWER.into(),
            game: GameConfig::default(),
            bonus: BonusConfig::default(),
            conditions: vec![ConditionSpec {
                name: "truthful".into(),
                agent: AgentSpec::Truthful,
            }],
        }
    }
}

fn parse_env<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Env {
        var: var.to_owned(),
        message: e.to_string(),
    })
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_owned(),
            source,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Defaults, then `path` if given, then the environment.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Override scalar settings from `GUESSWHICH_<FIELD>` variables, e.g.
    /// `GUESSWHICH_BIND` or `GUESSWHICH_RESUME_WINDOW_MS`. Other variables
    /// are ignored.
    pub fn apply_env(&mut self, env: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (var, value) in env {
            let Some(key) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            match key {
                "BIND" => self.bind = value,
                "POOLS" => self.pools = value.into(),
                "CATEGORIES" => self.categories = Some(value.into()),
                "EMBEDDINGS" => self.embeddings = Some(value.into()),
                "LOG_DIR" => self.log_dir = value.into(),
                "IMAGES_DIR" => self.images_dir = Some(value.into()),
                "PLACEHOLDER_IMAGES" => self.placeholder_images = parse_env(&var, &value)?,
                "GAMES_PER_ASSIGNMENT" => self.games_per_assignment = parse_env(&var, &value)?,
                "RESUME_WINDOW_MS" => self.resume_window_ms = parse_env(&var, &value)?,
                "AGENT_DEADLINE_MS" => self.agent_deadline_ms = parse_env(&var, &value)?,
                "MAX_ATTEMPTS" => self.max_attempts = parse_env(&var, &value)?,
                "INACTIVITY_TIMEOUT_MS" => self.inactivity_timeout_ms = parse_env(&var, &value)?,
                "MAX_ACTIVE_ASSIGNMENTS" => self.max_active_assignments = parse_env(&var, &value)?,
                "BROKER_WORKERS" => self.broker_workers = parse_env(&var, &value)?,
                "TICK_MS" => self.tick_ms = parse_env(&var, &value)?,
                "FALLBACK_ANSWER" => self.fallback_answer = value,
                "DIALOG_ROUNDS" => self.game.dialog_rounds = parse_env(&var, &value)?,
                "POOL_SIZE" => self.game.pool_size = parse_env(&var, &value)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.conditions.is_empty() {
            return Err(ConfigError::Invalid("no conditions configured".into()));
        }
        let mut names: Vec<&str> = self.conditions.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(ConfigError::Invalid("condition names must be unique".into()));
        }
        if self.broker_workers == 0 || self.tick_ms == 0 {
            return Err(ConfigError::Invalid("broker_workers and tick_ms must be positive".into()));
        }
        self.game.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.bonus.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn hub_config(&self) -> HubConfig {
        HubConfig {
            game: self.game,
            bonus: self.bonus,
            games_per_assignment: self.games_per_assignment,
            conditions: self.conditions.iter().map(|c| c.name.clone()).collect(),
            resume_window_ms: self.resume_window_ms,
            agent_deadline_ms: self.agent_deadline_ms,
            max_attempts: self.max_attempts,
            inactivity_timeout_ms: self.inactivity_timeout_ms,
            max_active_assignments: self.max_active_assignments,
            fallback_answer: self.fallback_answer.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_beats_file_beats_defaults() {
        let file = r#"
            bind = "0.0.0.0:9000"
            resume_window_ms = 1000
            [[conditions]]
            name = "sl"
            agent = { kind = "truthful" }
            [[conditions]]
            name = "rl"
            agent = { kind = "noisy", flip_prob = 0.1, seed = 3 }
        "#;
        let mut cfg = ServiceConfig::from_toml_str(file, "test").unwrap();
        assert_eq!(cfg.bind, "0.0.0.0:9000");
        assert_eq!(cfg.resume_window_ms, 1000);
        assert_eq!(cfg.agent_deadline_ms, 10_000);
        assert_eq!(cfg.conditions.len(), 2);
        cfg.apply_env([
            ("GUESSWHICH_RESUME_WINDOW_MS".to_owned(), "2000".to_owned()),
            ("HOME".to_owned(), "/root".to_owned()),
        ])
        .unwrap();
        assert_eq!(cfg.resume_window_ms, 2000);
        assert_eq!(cfg.bind, "0.0.0.0:9000");
        cfg.validate().unwrap();
        assert_eq!(cfg.hub_config().conditions, vec!["sl".to_owned(), "rl".to_owned()]);
    }

    #[test]
    fn bad_values_are_reported() {
        let mut cfg = ServiceConfig::default();
        let err = cfg
            .apply_env([("GUESSWHICH_MAX_ATTEMPTS".to_owned(), "two".to_owned())])
            .unwrap_err();
        assert!(err.to_string().contains("GUESSWHICH_MAX_ATTEMPTS"));
        assert!(ServiceConfig::from_toml_str("no_such_field = 1", "x").is_err());
    }

    #[test]
    fn duplicate_conditions_rejected() {
        let mut cfg = ServiceConfig::default();
        cfg.conditions.push(cfg.conditions[0].clone());
        assert!(cfg.validate().is_err());
    }
}
