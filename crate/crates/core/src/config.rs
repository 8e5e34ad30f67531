//! Layered pipeline configuration: built-in defaults, then a TOML file,
//! then command-line overrides, then environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::EpisodeConfig;
use crate::buggen::GenerationConfig;
use crate::model_client::LiveConfig;
use crate::solver::{ShortBy, SolveConfig};
use crate::taxonomy::TaxonomyConfig;

/// Environment variables consulted by [`PipelineConfig::apply_env`].
pub const ENV_RUNTIME_SOCKET: &str = "BUGPILOT_RUNTIME_SOCKET";
pub const ENV_BACKEND: &str = "BUGPILOT_BACKEND";
pub const ENV_MODEL: &str = "BUGPILOT_MODEL";
pub const ENV_BASE_URL: &str = "BUGPILOT_BASE_URL";
pub const DEFAULT_API_KEY_ENV: &str = "BUGPILOT_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config{}: {message}", path.as_ref().map(|p| format!(" {}", p.display())).unwrap_or_default())]
    Parse { path: Option<PathBuf>, message: String },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("environment variable {var}={value:?}: {reason}")]
    Env { var: String, value: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeKind {
    Docker,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    pub kind: RuntimeKind,
    /// Docker engine socket.
    pub socket: PathBuf,
    /// Image directory of the local runtime.
    pub images_dir: PathBuf,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            kind: RuntimeKind::Docker,
            socket: PathBuf::from("/var/run/docker.sock"),
            images_dir: PathBuf::from("images"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Replay script, required for the replay backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key
    /// itself never appears in the config.
    pub api_key_env: String,
    pub context_window: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub request_timeout_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Live,
            script: None,
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            context_window: 131_072,
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
            request_timeout_ms: 600_000,
        }
    }
}

impl BackendSection {
    pub fn live_config(&self, api_key: Option<String>) -> LiveConfig {
        LiveConfig {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            api_key,
            context_window: self.context_window,
            max_retries: self.max_retries,
            initial_backoff_ms: self.initial_backoff_ms,
            max_backoff_ms: self.max_backoff_ms,
            request_timeout_ms: self.request_timeout_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuggenSection {
    pub max_rounds: usize,
    pub attempts_per_repo: usize,
    pub describe_output_tokens: usize,
    pub describe_retries: usize,
}

impl Default for BuggenSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            max_rounds: g.max_rounds,
            attempts_per_repo: 1,
            describe_output_tokens: g.describe_output_tokens,
            describe_retries: g.describe_retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub sft_budget: usize,
    pub short_by: ShortBy,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        Self {
            k: s.k,
            seeds: (1..=s.k as u64).collect(),
            sft_budget: s.sft_budget,
            short_by: s.short_by,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for campaigns, validation, solving and labeling.
    pub parallelism: usize,
    pub runtime: RuntimeSection,
    pub backend: BackendSection,
    pub episode: EpisodeConfig,
    pub buggen: BuggenSection,
    pub solver: SolverSection,
    pub taxonomy: TaxonomyConfig,
    pub paths: PathsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallelism: 4,
            runtime: RuntimeSection::default(),
            backend: BackendSection::default(),
            episode: EpisodeConfig::default(),
            buggen: BuggenSection::default(),
            solver: SolverSection::default(),
            taxonomy: TaxonomyConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

fn positive<T: PartialOrd + Default + Copy>(field: &str, v: T) -> Result<(), ConfigError> {
    if v > T::default() {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            field: field.into(),
            reason: "must be positive".into(),
        })
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            field: field.into(),
            reason: "must be a non-negative number".into(),
        })
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: None,
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, overlaid by `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: Some(path.to_path_buf()),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the environment layer; `lookup` is `std::env::var` in
    /// production.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup(ENV_RUNTIME_SOCKET) {
            self.runtime.socket = PathBuf::from(v);
        }
        if let Some(v) = lookup(ENV_BACKEND) {
            self.backend.kind = match v.as_str() {
                "live" => BackendKind::Live,
                "replay" => BackendKind::Replay,
                _ => {
                    return Err(ConfigError::Env {
                        var: ENV_BACKEND.into(),
                        value: v,
                        reason: "expected live or replay".into(),
                    })
                }
            };
        }
        if let Some(v) = lookup(ENV_MODEL) {
            self.backend.model = v;
        }
        if let Some(v) = lookup(ENV_BASE_URL) {
            self.backend.base_url = v;
        }
        Ok(())
    }

    /// Every count, budget and timeout must be positive and temperatures
    /// non-negative. Retry counts and seeds may be zero.
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("parallelism", self.parallelism)?;
        let b = &self.backend;
        positive("backend.context_window", b.context_window)?;
        positive("backend.initial_backoff_ms", b.initial_backoff_ms)?;
        positive("backend.max_backoff_ms", b.max_backoff_ms)?;
        positive("backend.request_timeout_ms", b.request_timeout_ms)?;
        let e = &self.episode;
        positive("episode.max_steps", e.max_steps)?;
        non_negative("episode.temperature", e.temperature)?;
        positive("episode.context_budget", e.context_budget)?;
        positive("episode.max_prompt_tokens", e.max_prompt_tokens)?;
        positive("episode.max_observation_tokens", e.max_observation_tokens)?;
        positive("episode.command_timeout_ms", e.command_timeout_ms)?;
        positive("episode.search_max_results", e.search_max_results)?;
        if e.max_prompt_tokens >= e.context_budget {
            return Err(ConfigError::Invalid {
                field: "episode.max_prompt_tokens".into(),
                reason: "must be below episode.context_budget".into(),
            });
        }
        positive("buggen.max_rounds", self.buggen.max_rounds)?;
        positive("buggen.attempts_per_repo", self.buggen.attempts_per_repo)?;
        positive("buggen.describe_output_tokens", self.buggen.describe_output_tokens)?;
        positive("solver.k", self.solver.k)?;
        positive("solver.sft_budget", self.solver.sft_budget)?;
        self.solve_config().attempt_seeds().map_err(|e| ConfigError::Invalid {
            field: "solver.seeds".into(),
            reason: e.to_string(),
        })?;
        let t = &self.taxonomy;
        positive("taxonomy.patch_tokens", t.patch_tokens)?;
        positive("taxonomy.statement_tokens", t.statement_tokens)?;
        positive("taxonomy.outline_tokens", t.outline_tokens)?;
        non_negative("taxonomy.temperature", t.temperature)?;
        if t.fanout < 2 {
            return Err(ConfigError::Invalid {
                field: "taxonomy.fanout".into(),
                reason: "must be at least 2".into(),
            });
        }
        Ok(())
    }

    /// Hash of the settings that shape outputs. Locations (paths, socket,
    /// script file) and worker count are left out so the same run in two
    /// directories gets the same fingerprint.
    pub fn fingerprint(&self) -> String {
        crate::dataset::fingerprint(&(
            self.seed,
            self.runtime.kind,
            self.backend.kind,
            &self.backend.model,
            self.backend.context_window,
            &self.episode,
            &self.buggen,
            &self.solver,
            &self.taxonomy,
        ))
    }

    pub fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            episode: self.episode.clone(),
            max_rounds: self.buggen.max_rounds,
            describe_output_tokens: self.buggen.describe_output_tokens,
            describe_retries: self.buggen.describe_retries,
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            episode: self.episode.clone(),
            k: self.solver.k,
            seeds: self.solver.seeds.clone(),
            sft_budget: self.solver.sft_budget,
            short_by: self.solver.short_by,
        }
    }
}
