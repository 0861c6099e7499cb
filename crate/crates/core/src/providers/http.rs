//! Clients for OpenAI-compatible `/chat/completions` and `/embeddings` endpoints.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_batch, check_text, retry_with_backoff, Embedder, EmbeddingVector, GenerationRequest, ProviderError,
    RetryPolicy, TextGenerator,
};

pub const DEFAULT_API_KEY_ENV: &str = "EMRQ_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.example.com/v1`.
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    /// Embedding dimension reported by the model.
    pub embedding_dim: usize,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: "gpt-4o".into(),
            embedding_model: "bce-embedding-base_v1".into(),
            embedding_dim: 768,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

struct Transport {
    client: Client,
    config: HttpConfig,
    api_key: Option<String>,
}

impl Transport {
    fn new(config: HttpConfig) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| ProviderError::BadRequest(format!("cannot build HTTP client: {e}")))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::debug!(
                "{} is not set; sending requests without a bearer token",
                config.api_key_env
            );
        }
        Ok(Self {
            client,
            config,
            api_key,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Unavailable {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        classify(status, &text)?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Unavailable {
            attempts: 1,
            message: format!("malformed response body: {e}"),
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        retry_with_backoff(&self.config.retry, std::thread::sleep, |_| self.post_once(path, body))
    }
}

fn classify(status: StatusCode, body: &str) -> Result<(), ProviderError> {
    if status.is_success() {
        return Ok(());
    }
    let snippet: String = body.chars().take(200).collect();
    let message = format!("HTTP {status}: {snippet}");
    Err(match status {
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => ProviderError::Auth(message),
        StatusCode::TOO_MANY_REQUESTS | StatusCode::REQUEST_TIMEOUT => {
            ProviderError::Unavailable { attempts: 1, message }
        }
        s if s.is_server_error() => ProviderError::Unavailable { attempts: 1, message },
        _ => ProviderError::BadRequest(message),
    })
}

/// Chat-completions text generator.
pub struct HttpGenerator {
    transport: Transport,
}

impl HttpGenerator {
    pub fn new(config: HttpConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        req.validate()?;
        let mut body = json!({
            "model": self.transport.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output,
        });
        if let Some(stop) = &req.stop_sequences {
            body["stop"] = json!(stop);
        }
        let resp = self.transport.post("chat/completions", &body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Unavailable {
                attempts: 1,
                message: "response has no choices[0].message.content".into(),
            })
    }
}

/// Embeddings-endpoint client.
pub struct HttpEmbedder {
    transport: Transport,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: Transport::new(config)?,
        })
    }

    fn request(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let body = json!({"model": self.transport.config.embedding_model, "input": texts});
        let resp = self.transport.post("embeddings", &body)?;
        let data = resp["data"].as_array().ok_or_else(|| ProviderError::Unavailable {
            attempts: 1,
            message: "response has no data array".into(),
        })?;
        if data.len() != texts.len() {
            return Err(ProviderError::Unavailable {
                attempts: 1,
                message: format!("expected {} embeddings, got {}", texts.len(), data.len()),
            });
        }
        let mut out = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let values: Vec<f64> = item["embedding"]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .unwrap_or_default();
            let v = EmbeddingVector::new(values)?;
            if v.dim() != self.dim() {
                return Err(ProviderError::BadRequest(format!(
                    "embedding dim {} differs from configured {}",
                    v.dim(),
                    self.dim()
                )));
            }
            if let Some(slot) = out.get_mut(index) {
                *slot = Some(v);
            }
        }
        out.into_iter()
            .map(|v| {
                v.ok_or_else(|| ProviderError::Unavailable {
                    attempts: 1,
                    message: "embedding response is missing an index".into(),
                })
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.transport.config.embedding_dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        check_text(text)?;
        Ok(self.request(&[text.to_string()])?.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        check_batch(texts)?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.request(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn unreachable_config(attempts: u32) -> HttpConfig {
        // Bind then drop a listener to get a port nothing is listening on.
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        HttpConfig {
            endpoint: format!("http://127.0.0.1:{port}/v1"),
            timeout_secs: 2,
            retry: RetryPolicy::no_delay(attempts),
            ..HttpConfig::default()
        }
    }

    /// Serves `responses` in order, one per connection, and returns the port.
    fn serve(responses: Vec<(u16, String)>) -> u16 {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let mut seen = Vec::new();
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    seen.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&seen);
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let len = text[..head_end]
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if seen.len() >= head_end + 4 + len {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        port
    }

    fn local(port: u16, attempts: u32) -> HttpConfig {
        HttpConfig {
            endpoint: format!("http://127.0.0.1:{port}/v1"),
            timeout_secs: 5,
            retry: RetryPolicy::no_delay(attempts),
            embedding_dim: 2,
            ..HttpConfig::default()
        }
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        let g = HttpGenerator::new(unreachable_config(3)).unwrap();
        let err = g.generate(&GenerationRequest::new("hello")).unwrap_err();
        assert!(matches!(err, ProviderError::Unavailable { attempts: 3, .. }), "{err:?}");
    }

    #[test]
    fn empty_prompt_is_rejected_before_sending() {
        let g = HttpGenerator::new(unreachable_config(3)).unwrap();
        assert!(matches!(
            g.generate(&GenerationRequest::new("")),
            Err(ProviderError::BadRequest(_))
        ));
    }

    #[test]
    fn server_error_is_retried_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"done"}}]}"#.to_string();
        let port = serve(vec![(503, "{}".into()), (200, ok)]);
        let g = HttpGenerator::new(local(port, 3)).unwrap();
        assert_eq!(g.generate(&GenerationRequest::new("hi")).unwrap(), "done");
    }

    #[test]
    fn auth_and_bad_request_are_not_retried() {
        let port = serve(vec![(401, "{}".into())]);
        let g = HttpGenerator::new(local(port, 3)).unwrap();
        assert!(matches!(
            g.generate(&GenerationRequest::new("hi")),
            Err(ProviderError::Auth(_))
        ));

        let port = serve(vec![(400, "{}".into())]);
        let g = HttpGenerator::new(local(port, 3)).unwrap();
        assert!(matches!(
            g.generate(&GenerationRequest::new("hi")),
            Err(ProviderError::BadRequest(_))
        ));
    }

    #[test]
    fn embeddings_are_reordered_by_index() {
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
        let port = serve(vec![(200, body.into())]);
        let e = HttpEmbedder::new(local(port, 1)).unwrap();
        let out = e.embed_batch(&["a".into(), "b".into()]).unwrap();
        assert_eq!(out[0].values(), &[1.0, 0.0]);
        assert_eq!(out[1].values(), &[0.0, 1.0]);
    }
}
