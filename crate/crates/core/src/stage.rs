//! Generate-parse-repair loop shared by the three LLM stages.

use serde::{Deserialize, Serialize};

use crate::providers::{GenerationRequest, ProviderError, TextGenerator};

/// Decoding settings and repair budget for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub temperature: f64,
    pub max_output: u32,
    /// Extra attempts after the first, each with a repair instruction appended.
    pub retries: u32,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output: 4096,
            retries: 2,
        }
    }
}

impl GenerationSettings {
    pub fn with_retries(retries: u32) -> Self {
        Self {
            retries,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
pub(crate) enum StageFailure {
    Provider(ProviderError),
    Exhausted { attempts: u32, reason: String },
}

/// Calls the generator until `parse` accepts the output. Attempt `k > 1`
/// sends `prompt` followed by `repair`. Provider errors end the loop at once.
pub(crate) fn generate_with_repair<G, T, F>(
    gen: &G,
    prompt: &str,
    repair: &str,
    settings: &GenerationSettings,
    mut parse: F,
) -> Result<T, StageFailure>
where
    G: TextGenerator + ?Sized,
    F: FnMut(&str) -> Result<T, String>,
{
    let attempts = settings.retries.saturating_add(1);
    let mut reason = String::new();
    for attempt in 1..=attempts {
        let text = if attempt == 1 {
            prompt.to_string()
        } else {
            format!("{prompt}\n{repair}\n")
        };
        let req = GenerationRequest {
            prompt: text,
            temperature: settings.temperature,
            max_output: settings.max_output,
            stop_sequences: None,
        };
        let raw = gen.generate(&req).map_err(StageFailure::Provider)?;
        match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(why) => {
                log::warn!("attempt {attempt}/{attempts} rejected: {why}");
                reason = why;
            }
        }
    }
    Err(StageFailure::Exhausted { attempts, reason })
}
