use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::clustering::DEFAULT_CUTOFF;
use crate::evaluation::{check_tau, DEFAULT_TAU};
use crate::providers::HttpConfig;
use crate::similarity::EmbedOptions;
use crate::stage::GenerationSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Deterministic offline providers seeded by `seed`.
    Mock,
    /// OpenAI-compatible HTTP endpoints configured under `[http]`.
    Http,
}

/// Run configuration, read from TOML. Every field has a default, so an
/// empty file is valid.
///
/// ```toml
/// provider = "mock"
/// seed = 7
/// locale = "en"
/// cluster_cutoff = 0.5
/// tau = 0.8
/// workers = 4
///
/// [http]
/// endpoint = "https://api.example.com/v1"
/// model = "gpt-4o"
/// api_key_env = "EMRQ_API_KEY"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub provider: ProviderKind,
    pub seed: u64,
    /// Prompt language for the built-in templates (`en` or `zh`).
    pub locale: String,
    /// Directory with `<stage>.toml` files replacing built-in templates.
    pub template_dir: Option<PathBuf>,
    pub cluster_cutoff: f64,
    pub embed_timing: bool,
    pub normalize_nodes: bool,
    pub tau: f64,
    pub workers: usize,
    pub retries: u32,
    pub temperature: f64,
    pub max_output: u32,
    /// Annotated key facts; the run directory's `keyfacts.jsonl` is used when unset.
    pub keyfacts: Option<PathBuf>,
    /// Expert relevance and understandability scores, copied into reports.
    pub external_scores: Option<PathBuf>,
    pub http: HttpConfig,
}

impl Default for Config {
    fn default() -> Self {
        let gen = GenerationSettings::default();
        let embed = EmbedOptions::default();
        Self {
            provider: ProviderKind::Mock,
            seed: 0,
            locale: "en".into(),
            template_dir: None,
            cluster_cutoff: DEFAULT_CUTOFF,
            embed_timing: embed.embed_timing,
            normalize_nodes: embed.normalize_nodes,
            tau: DEFAULT_TAU,
            workers: 4,
            retries: gen.retries,
            temperature: gen.temperature,
            max_output: gen.max_output,
            keyfacts: None,
            external_scores: None,
            http: HttpConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let config: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=2.0).contains(&self.cluster_cutoff) {
            return bad(format!("cluster_cutoff must be in [0, 2], got {}", self.cluster_cutoff));
        }
        if check_tau(self.tau).is_err() {
            return bad(format!("tau must satisfy 0 < tau <= 1, got {}", self.tau));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!("temperature must be in [0, 2], got {}", self.temperature));
        }
        if self.max_output == 0 {
            return bad("max_output must be positive".into());
        }
        Ok(())
    }

    pub fn generation(&self) -> GenerationSettings {
        GenerationSettings {
            temperature: self.temperature,
            max_output: self.max_output,
            retries: self.retries,
        }
    }

    pub fn embed_options(&self) -> EmbedOptions {
        EmbedOptions {
            embed_timing: self.embed_timing,
            normalize_nodes: self.normalize_nodes,
        }
    }
}
