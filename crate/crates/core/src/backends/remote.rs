//! HTTP client for the wire protocol, with bounded exponential-backoff
//! retries on rate limits and transient failures.

use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::wire::{
    self, ChatBody, ChatReply, DetectBody, DetectionBody, EmbedImageBody, EmbedTextBody,
    EmbeddingsBody, ErrorEnvelope, GenerateBody, HealthBody, ImageInputBody, ImagesBody,
};
use super::{
    BackendError, CallLog, CallRecord, ChatMessage, Detection, Detector, GenerateRequest,
    GeneratedImage, Generator, ImageEmbedder, ImageInput, Reasoner, TextEmbedder,
};

pub const ENV_BASE_URL: &str = "FAIRCOT_BASE_URL";
pub const ENV_GENERATE_URL: &str = "FAIRCOT_GENERATE_URL";
pub const ENV_CHAT_URL: &str = "FAIRCOT_CHAT_URL";
pub const ENV_EMBED_URL: &str = "FAIRCOT_EMBED_URL";
pub const ENV_DETECT_URL: &str = "FAIRCOT_DETECT_URL";
pub const ENV_API_KEY: &str = "FAIRCOT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `initial · 2^retry`,
    /// capped at `max_backoff_ms`.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

/// Endpoint base URLs per port. The API key is never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSettings {
    pub generate_url: Option<String>,
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub detect_url: Option<String>,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            generate_url: None,
            chat_url: None,
            embed_url: None,
            detect_url: None,
            api_key: None,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

impl RemoteSettings {
    /// Reads `FAIRCOT_*` variables; per-port URLs override `FAIRCOT_BASE_URL`.
    pub fn from_env() -> Self {
        Self::from_lookup(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Self {
        let base = lookup(ENV_BASE_URL);
        let pick = |key: &str| lookup(key).or_else(|| base.clone());
        Self {
            generate_url: pick(ENV_GENERATE_URL),
            chat_url: pick(ENV_CHAT_URL),
            embed_url: pick(ENV_EMBED_URL),
            detect_url: pick(ENV_DETECT_URL),
            api_key: lookup(ENV_API_KEY),
            ..Self::default()
        }
    }

    /// All ports pointed at one server.
    pub fn single(base: impl Into<String>) -> Self {
        let base = base.into();
        Self {
            generate_url: Some(base.clone()),
            chat_url: Some(base.clone()),
            embed_url: Some(base.clone()),
            detect_url: Some(base),
            ..Self::default()
        }
    }
}

/// One server base URL. Implements every port; [`super::Backends`] decides
/// which ports it serves.
pub struct HttpEndpoint {
    base: String,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    calls: CallLog,
}

impl HttpEndpoint {
    pub fn new(
        base: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        calls: CallLog,
    ) -> Result<Self, BackendError> {
        let base = base.into().trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            // reusing idle keep-alive connections stalled requests against
            // tiny_http for the full idle timeout; one connection per call
            .pool_max_idle_per_host(0)
            .build()
            .map_err(|e| BackendError::Transient {
                port: base.clone(),
                message: e.to_string(),
            })?;
        Ok(Self {
            base,
            client,
            api_key,
            retry,
            calls,
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
        idempotency_key: Option<&str>,
    ) -> Result<R, BackendError> {
        let bytes = serde_json::to_vec(body).expect("request bodies serialize");
        self.call(path, Some(bytes), idempotency_key)
    }

    fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R, BackendError> {
        self.call(path, None, None)
    }

    fn call<R: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<Vec<u8>>,
        idempotency_key: Option<&str>,
    ) -> Result<R, BackendError> {
        let started = Instant::now();
        let digest = hex::encode(Sha256::digest(body.as_deref().unwrap_or_default()));
        let mut retries = 0;
        let result = loop {
            match self.attempt(path, body.as_deref(), idempotency_key) {
                Ok(bytes) => break Ok(bytes),
                Err(err) if err.is_retryable() && retries < self.retry.max_retries => {
                    let mut delay = self.retry.delay(retries);
                    if let BackendError::RateLimited {
                        retry_after: Some(after),
                        ..
                    } = &err
                    {
                        delay = delay
                            .max(*after)
                            .min(Duration::from_millis(self.retry.max_backoff_ms));
                    }
                    log::warn!("{}{path}: {err}; retrying in {delay:?}", self.base);
                    std::thread::sleep(delay);
                    retries += 1;
                }
                Err(err) if err.is_retryable() => {
                    break Err(BackendError::RetriesExhausted {
                        port: self.port_name(path),
                        attempts: retries + 1,
                        last: Box::new(err),
                    })
                }
                Err(err) => break Err(err),
            }
        };
        self.calls.push(CallRecord {
            endpoint: path.to_string(),
            request_digest: digest,
            idempotency_key: idempotency_key.map(str::to_string),
            retries,
            latency_ms: started.elapsed().as_millis() as u64,
            outcome: match &result {
                Ok(_) => "ok".to_string(),
                Err(e) => e.code().to_string(),
            },
        });
        let bytes = result?;
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Malformed {
            port: self.port_name(path),
            message: e.to_string(),
        })
    }

    fn attempt(
        &self,
        path: &str,
        body: Option<&[u8]>,
        idempotency_key: Option<&str>,
    ) -> Result<Vec<u8>, BackendError> {
        let url = format!("{}{path}", self.base);
        let mut request = match body {
            Some(bytes) => self
                .client
                .post(&url)
                .header("Content-Type", "application/json")
                .body(bytes.to_vec()),
            None => self.client.get(&url),
        };
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        if let Some(key) = idempotency_key {
            request = request.header(wire::IDEMPOTENCY_HEADER, key);
        }
        let port = self.port_name(path);
        let response = request.send().map_err(|e| BackendError::Transient {
            port: port.clone(),
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("Retry-After")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let bytes = response
            .bytes()
            .map_err(|e| BackendError::Transient {
                port: port.clone(),
                message: e.to_string(),
            })?
            .to_vec();
        if (200..300).contains(&status) {
            return Ok(bytes);
        }
        let envelope = serde_json::from_slice::<ErrorEnvelope>(&bytes).ok();
        let message = envelope
            .as_ref()
            .map(|e| e.error.message.clone())
            .unwrap_or_else(|| format!("HTTP {status}"));
        Err(match status {
            401 | 403 => BackendError::Auth { port, message },
            429 => BackendError::RateLimited {
                port,
                message,
                retry_after,
            },
            // 501 means the server lacks the capability; retrying cannot help
            500 | 502..=599 => BackendError::Transient { port, message },
            _ => BackendError::Rejected {
                port,
                code: envelope
                    .map(|e| e.error.code)
                    .unwrap_or_else(|| format!("http_{status}")),
                message,
            },
        })
    }

    fn port_name(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check_health(&self) -> Result<HealthBody, BackendError> {
        let health: HealthBody = self.get(wire::PATH_HEALTH)?;
        if health.status != "ok" {
            return Err(BackendError::Transient {
                port: self.port_name(wire::PATH_HEALTH),
                message: format!("server reports status '{}'", health.status),
            });
        }
        Ok(health)
    }

    fn check_embeddings(&self, path: &str, body: EmbeddingsBody) -> Result<Vec<Vec<f64>>, BackendError> {
        if let Some(bad) = body.vectors.iter().find(|v| v.len() != body.dim) {
            return Err(BackendError::Malformed {
                port: self.port_name(path),
                message: format!("advertised dim {} but got a vector of {}", body.dim, bad.len()),
            });
        }
        Ok(body.vectors)
    }
}

impl Generator for HttpEndpoint {
    fn identity(&self) -> String {
        format!("remote:{}", self.base)
    }

    fn generate(&self, request: &GenerateRequest) -> Result<Vec<GeneratedImage>, BackendError> {
        let body = GenerateBody {
            prompt: request.prompt.clone(),
            context: request.context.clone(),
            count: request.count,
            seed: request.seed,
        };
        let reply: ImagesBody =
            self.post(wire::PATH_GENERATE, &body, Some(&request.idempotency_key))?;
        reply
            .images
            .iter()
            .map(|img| {
                let bytes = img.decode().map_err(|e| BackendError::Malformed {
                    port: self.port_name(wire::PATH_GENERATE),
                    message: format!("bad base64 image: {e}"),
                })?;
                Ok(GeneratedImage {
                    bytes,
                    media_type: img.media_type.clone(),
                })
            })
            .collect()
    }

    fn health(&self) -> Result<(), BackendError> {
        self.check_health().map(|_| ())
    }
}

impl Reasoner for HttpEndpoint {
    fn identity(&self) -> String {
        format!("remote:{}", self.base)
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = ChatBody {
            messages: messages.to_vec(),
        };
        let reply: ChatReply = self.post(wire::PATH_CHAT, &body, None)?;
        Ok(reply.text)
    }

    fn health(&self) -> Result<(), BackendError> {
        self.check_health().map(|_| ())
    }
}

impl TextEmbedder for HttpEndpoint {
    fn identity(&self) -> String {
        format!("remote:{}", self.base)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = EmbedTextBody {
            texts: texts.to_vec(),
        };
        let reply: EmbeddingsBody = self.post(wire::PATH_EMBED_TEXT, &body, None)?;
        self.check_embeddings(wire::PATH_EMBED_TEXT, reply)
    }

    fn health(&self) -> Result<(), BackendError> {
        self.check_health().map(|_| ())
    }
}

impl ImageEmbedder for HttpEndpoint {
    fn identity(&self) -> String {
        format!("remote:{}", self.base)
    }

    fn embed_images(&self, inputs: &[ImageInput<'_>]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = EmbedImageBody {
            images: inputs
                .iter()
                .map(|i| ImageInputBody {
                    data_b64: wire::encode_b64(i.bytes),
                    crop: i.crop,
                })
                .collect(),
        };
        let reply: EmbeddingsBody = self.post(wire::PATH_EMBED_IMAGE, &body, None)?;
        self.check_embeddings(wire::PATH_EMBED_IMAGE, reply)
    }

    fn health(&self) -> Result<(), BackendError> {
        self.check_health().map(|_| ())
    }
}

impl Detector for HttpEndpoint {
    fn identity(&self) -> String {
        format!("remote:{}", self.base)
    }

    fn detect(&self, image: &[u8]) -> Result<Detection, BackendError> {
        let body = DetectBody {
            data_b64: wire::encode_b64(image),
        };
        let reply: DetectionBody = self.post(wire::PATH_DETECT, &body, None)?;
        Ok(Detection {
            width: reply.width,
            height: reply.height,
            boxes: reply.boxes,
        })
    }

    fn health(&self) -> Result<(), BackendError> {
        self.check_health().map(|_| ())
    }
}
