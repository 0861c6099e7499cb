//! Stage-wise orchestration over a run directory.
//!
//! Each command reads the artifacts of the previous stage, skips subjects
//! whose output already exists unless forced, and writes its own artifacts
//! atomically. Per-subject work runs on a bounded thread pool.

mod commands;
mod config;
mod store;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

pub use commands::{EvaluationRun, GenerateTarget, SynthesizeTarget};
pub use config::{Config, ProviderKind};
pub use store::{file_stem, read_json, read_jsonl, write_atomic, AssertionRecord, RunDir, Timings};

use crate::evaluation::EvalError;
use crate::prompt::{PromptTemplate, TemplateError};
use crate::providers::{
    CachedEmbedder, Embedder, HttpEmbedder, HttpGenerator, MockEmbedder, MockGenerator, ProviderError, TextGenerator,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error("missing {} (run `{produced_by}` first)", path.display())]
    MissingArtifact { path: PathBuf, produced_by: String },
    #[error("unknown {what} {id:?}")]
    UnknownSubject { what: &'static str, id: String },
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A subject whose stage output could not be produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub subject: String,
    pub reason: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.reason)
    }
}

/// What one command did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    /// Subjects computed in this run.
    pub produced: usize,
    /// Subjects whose existing artifact was reused.
    pub cached: usize,
    pub failures: Vec<Failure>,
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, subject: impl Into<String>, reason: impl fmt::Display) {
        let failure = Failure {
            subject: subject.into(),
            reason: reason.to_string(),
        };
        log::warn!("{failure}");
        self.failures.push(failure);
    }
}

/// How generation time is recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clock {
    /// Measured wall-clock seconds.
    Wall,
    /// A constant, for byte-reproducible artifacts.
    Fixed(f64),
}

pub struct Pipeline {
    config: Config,
    run: RunDir,
    generator: Arc<dyn TextGenerator>,
    embedder: CachedEmbedder<Arc<dyn Embedder>>,
    force: bool,
    clock: Clock,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Builds the providers named by the configuration.
    pub fn new(config: Config, run_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let (generator, embedder): (Arc<dyn TextGenerator>, Arc<dyn Embedder>) = match config.provider {
            ProviderKind::Mock => (
                Arc::new(MockGenerator::new(config.seed)),
                Arc::new(MockEmbedder::new(config.seed)),
            ),
            ProviderKind::Http => (
                Arc::new(HttpGenerator::new(config.http.clone())?),
                Arc::new(HttpEmbedder::new(config.http.clone())?),
            ),
        };
        Self::with_providers(config, run_dir, generator, embedder)
    }

    pub fn with_providers(
        config: Config,
        run_dir: impl Into<PathBuf>,
        generator: Arc<dyn TextGenerator>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PipelineError::Config(format!("cannot start {} workers: {e}", config.workers)))?;
        Ok(Self {
            config,
            run: RunDir::new(run_dir),
            generator,
            embedder: CachedEmbedder::new(embedder),
            force: false,
            clock: Clock::Wall,
            pool,
        })
    }

    /// Recompute artifacts even when they already exist.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn run_dir(&self) -> &RunDir {
        &self.run
    }

    /// Template for a stage: `<template_dir>/<stage>.toml` when configured
    /// and present, otherwise the built-in one for the configured locale.
    pub fn template(&self, stage: &str) -> Result<PromptTemplate, PipelineError> {
        if let Some(dir) = &self.config.template_dir {
            let path = dir.join(format!("{stage}.toml"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
                return Ok(PromptTemplate::from_toml_str(&text)?);
            }
        }
        Ok(PromptTemplate::builtin(stage, &self.config.locale)?)
    }
}
