//! Run configuration: one TOML file drives every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::AdaptConfig;
use crate::model::ModelConfig;
use crate::synth::{BenchmarkConfig, DataError, EnvSpec, GeneratorConfig};
use crate::train::TrainConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Io { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of generated sequences; defaults to one per environment.
    pub n_sequences: Option<usize>,
    /// Held-out sequence ids. Defaults to the sequences generated from
    /// held-out environments.
    pub held_out: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub generator: GeneratorConfig,
    pub benchmark: BenchmarkConfig,
    /// Explicit environments; replaces the generated benchmark when set.
    pub envs: Option<Vec<EnvSpec>>,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            generator: GeneratorConfig::default(),
            benchmark: BenchmarkConfig::default(),
            envs: None,
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn prefixed(section: &str, r: Result<(), (String, String)>) -> Result<(), ConfigError> {
    r.map_err(|(f, m)| ConfigError::invalid(format!("{section}.{f}"), m))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let msg = e.into_inner().message().trim().to_string();
            ConfigError::invalid(if field == "." { "<root>".into() } else { field }, msg)
        })?;
        cfg.validate()?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(ConfigError::invalid(
                "format_version",
                format!("unsupported version {}, expected {CONFIG_FORMAT_VERSION}", self.format_version),
            ));
        }
        prefixed("model", self.model.validate())?;
        prefixed("train", self.train.validate())?;
        prefixed("adapt", self.adapt.validate())?;
        prefixed("generator", self.generator.validate())?;
        prefixed("benchmark", self.benchmark.validate())?;
        if self.model.input_dim != self.generator.x_dim {
            return Err(ConfigError::invalid(
                "model.input_dim",
                format!("must equal generator.x_dim ({})", self.generator.x_dim),
            ));
        }
        if let Some(envs) = &self.envs {
            if envs.is_empty() {
                return Err(ConfigError::invalid("envs", "at least one environment is required"));
            }
            for (i, e) in envs.iter().enumerate() {
                e.validate(self.generator.latent_dim).map_err(|err| match err {
                    DataError::InvalidSpec { msg, .. } => ConfigError::invalid(format!("envs[{i}]"), msg),
                    other => ConfigError::invalid(format!("envs[{i}]"), other.to_string()),
                })?;
                if envs[..i].iter().any(|o| o.name == e.name) {
                    return Err(ConfigError::invalid(format!("envs[{i}].name"), "duplicate environment name"));
                }
                if let Some(t) = &e.recurrence_target {
                    if !envs.iter().any(|o| &o.name == t) {
                        return Err(ConfigError::invalid(
                            format!("envs[{i}].recurrence_target"),
                            format!("unknown environment `{t}`"),
                        ));
                    }
                }
            }
        }
        if self.data.n_sequences == Some(0) {
            return Err(ConfigError::invalid("data.n_sequences", "must be at least 1"));
        }
        Ok(())
    }

    /// The configured environments, or the generated benchmark.
    pub fn env_specs(&self) -> Vec<EnvSpec> {
        match &self.envs {
            Some(e) => e.clone(),
            None => self.benchmark.specs(self.generator.latent_dim, self.seed),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }
}
