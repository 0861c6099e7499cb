//! Text-generation and text-embedding capabilities.
//!
//! Two independent traits so each backend can be swapped or mocked on its
//! own. Implementations must be `Send + Sync`: pipeline workers share them.

mod cache;
mod http;
mod mock;
mod retry;

pub use cache::CachedEmbedder;
pub use http::{HttpConfig, HttpEmbedder, HttpGenerator, DEFAULT_API_KEY_ENV};
pub use mock::{MockEmbedder, MockGenerator, RecordingGenerator, ScriptedGenerator, MOCK_EMBEDDING_DIM};
pub use retry::{retry_with_backoff, RetryPolicy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("credential rejected: {0}")]
    Auth(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl ProviderError {
    /// Only availability failures are worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Unavailable { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequences: Option<Vec<String>>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_output: 4096,
            stop_sequences: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_output(mut self, max_output: u32) -> Self {
        self.max_output = max_output;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.prompt.trim().is_empty() {
            return Err(ProviderError::BadRequest("prompt is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProviderError::BadRequest(format!(
                "invalid temperature {}",
                self.temperature
            )));
        }
        if self.max_output == 0 {
            return Err(ProviderError::BadRequest("max_output must be positive".into()));
        }
        Ok(())
    }
}

/// A fixed-length embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::BadRequest("embedding has zero dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::BadRequest("embedding has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-norm copy. A zero vector is returned unchanged.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Self {
            values: self.values.iter().map(|v| v / n).collect(),
        }
    }
}

pub trait TextGenerator: Send + Sync {
    /// Returns raw model text for the request.
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;

    /// Embeds every text in order. All texts are checked before any is
    /// embedded, so an empty string fails the batch up front.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_batch(texts)?;
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

pub(crate) fn check_text(text: &str) -> Result<(), ProviderError> {
    if text.is_empty() {
        Err(ProviderError::BadRequest("cannot embed empty text".into()))
    } else {
        Ok(())
    }
}

pub(crate) fn check_batch(texts: &[String]) -> Result<(), ProviderError> {
    match texts.iter().position(|t| t.is_empty()) {
        Some(i) => Err(ProviderError::BadRequest(format!("batch entry {i} is empty"))),
        None => Ok(()),
    }
}

impl<T: TextGenerator + ?Sized> TextGenerator for &T {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        (**self).generate(req)
    }
}

impl<T: TextGenerator + ?Sized> TextGenerator for std::sync::Arc<T> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        (**self).generate(req)
    }
}

impl<T: Embedder + ?Sized> Embedder for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed_batch(texts)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        (**self).embed_batch(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::new("hi").validate().is_ok());
        assert!(matches!(
            GenerationRequest::new("").validate(),
            Err(ProviderError::BadRequest(_))
        ));
        assert!(GenerationRequest::new("hi").with_temperature(-1.0).validate().is_err());
        assert!(GenerationRequest::new("hi").with_max_output(0).validate().is_err());
    }

    #[test]
    fn embedding_vector_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        let v = EmbeddingVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.normalized().values(), &[0.6, 0.8]);
    }
}
