//! Model backends behind narrow ports.
//!
//! The engine talks to five ports: image generator, reasoner (chat model),
//! text embedder, image embedder and face detector. [`Backends`] bundles
//! whichever ports are configured together with the run's image store and
//! call log, and enforces the embedding contract (unit norm, one dimension
//! per run) on everything that comes back.
//!
//! Implementations:
//! * [`remote`]: HTTP client for the JSON wire protocol in [`wire`].
//! * [`sim`]: deterministic simulated models with planted ground truth.
//! * [`stub`]: an in-process HTTP server speaking the same protocol.

pub mod remote;
pub mod sim;
pub mod store;
pub mod stub;
pub mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingVector};
use crate::multiface::FaceBox;

pub use store::{ImageRef, ImageStore};

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("{port}: authentication failed: {message}")]
    Auth { port: String, message: String },
    #[error("{port}: rate limited: {message}")]
    RateLimited {
        port: String,
        message: String,
        retry_after: Option<Duration>,
    },
    #[error("{port}: transient failure: {message}")]
    Transient { port: String, message: String },
    #[error("{port}: malformed response: {message}")]
    Malformed { port: String, message: String },
    #[error("{port}: request rejected ({code}): {message}")]
    Rejected {
        port: String,
        code: String,
        message: String,
    },
    #[error("no {0} backend is configured")]
    Capability(String),
    #[error("{port}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        port: String,
        attempts: u32,
        last: Box<BackendError>,
    },
    #[error("{port}: embedding {index} violates the port contract: {source}")]
    InvalidEmbedding {
        port: String,
        index: usize,
        #[source]
        source: EmbeddingError,
    },
    #[error("image store: {0}")]
    Store(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::RateLimited { .. } | Self::Transient { .. })
    }

    /// Machine-readable code, shared with the wire protocol's error envelope.
    pub fn code(&self) -> &str {
        match self {
            Self::Auth { .. } => "unauthorized",
            Self::RateLimited { .. } => "rate_limited",
            Self::Transient { .. } => "unavailable",
            Self::Malformed { .. } => "malformed_response",
            Self::Rejected { code, .. } => code,
            Self::Capability(_) => "unsupported",
            Self::RetriesExhausted { .. } => "retries_exhausted",
            Self::InvalidEmbedding { .. } => "invalid_embedding",
            Self::Store(_) => "store",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    /// Chain-of-thought guidance sent alongside the prompt.
    pub context: Option<String>,
    pub count: u32,
    pub seed: u64,
    /// `<run id>/<prompt index>`; identical keys must yield identical images.
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub bytes: &'a [u8],
    pub crop: Option<FaceBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<FaceBox>,
}

pub trait Generator: Send + Sync {
    fn identity(&self) -> String;
    fn generate(&self, request: &GenerateRequest) -> Result<Vec<GeneratedImage>, BackendError>;
    fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

pub trait Reasoner: Send + Sync {
    fn identity(&self) -> String;
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
    fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Raw vectors; [`Backends::embed_texts`] validates them.
pub trait TextEmbedder: Send + Sync {
    fn identity(&self) -> String;
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Raw vectors; [`Backends::embed_images`] validates them.
pub trait ImageEmbedder: Send + Sync {
    fn identity(&self) -> String;
    fn embed_images(&self, inputs: &[ImageInput<'_>]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

pub trait Detector: Send + Sync {
    fn identity(&self) -> String;
    fn detect(&self, image: &[u8]) -> Result<Detection, BackendError>;
    fn health(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// One remote request as recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub endpoint: String,
    pub request_digest: String,
    pub idempotency_key: Option<String>,
    pub retries: u32,
    pub latency_ms: u64,
    pub outcome: String,
}

#[derive(Debug, Clone, Default)]
pub struct CallLog(Arc<Mutex<Vec<CallRecord>>>);

impl CallLog {
    pub fn push(&self, record: CallRecord) {
        self.0.lock().expect("call log poisoned").push(record);
    }

    pub fn drain(&self) -> Vec<CallRecord> {
        std::mem::take(&mut *self.0.lock().expect("call log poisoned"))
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.0.lock().expect("call log poisoned").clone()
    }
}

/// Which implementation sits behind each port.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub generator: Option<String>,
    pub reasoner: Option<String>,
    pub text_embedder: Option<String>,
    pub image_embedder: Option<String>,
    pub detector: Option<String>,
}

const EMBED_BATCH: usize = 64;

#[derive(Clone)]
pub struct Backends {
    generator: Option<Arc<dyn Generator>>,
    reasoner: Option<Arc<dyn Reasoner>>,
    text_embedder: Option<Arc<dyn TextEmbedder>>,
    image_embedder: Option<Arc<dyn ImageEmbedder>>,
    detector: Option<Arc<dyn Detector>>,
    store: Arc<ImageStore>,
    calls: CallLog,
    dim: Arc<OnceLock<usize>>,
    concurrency: usize,
}

impl Backends {
    pub fn new(store: ImageStore) -> Self {
        Self {
            generator: None,
            reasoner: None,
            text_embedder: None,
            image_embedder: None,
            detector: None,
            store: Arc::new(store),
            calls: CallLog::default(),
            dim: Arc::new(OnceLock::new()),
            concurrency: 4,
        }
    }

    pub fn with_generator(mut self, port: Arc<dyn Generator>) -> Self {
        self.generator = Some(port);
        self
    }

    pub fn with_reasoner(mut self, port: Arc<dyn Reasoner>) -> Self {
        self.reasoner = Some(port);
        self
    }

    pub fn with_text_embedder(mut self, port: Arc<dyn TextEmbedder>) -> Self {
        self.text_embedder = Some(port);
        self
    }

    pub fn with_image_embedder(mut self, port: Arc<dyn ImageEmbedder>) -> Self {
        self.image_embedder = Some(port);
        self
    }

    pub fn with_detector(mut self, port: Arc<dyn Detector>) -> Self {
        self.detector = Some(port);
        self
    }

    /// Replaces the image store; configured ports are kept.
    pub fn with_store(mut self, store: ImageStore) -> Self {
        self.store = Arc::new(store);
        self
    }

    pub fn with_call_log(mut self, calls: CallLog) -> Self {
        self.calls = calls;
        self
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    pub fn store(&self) -> &ImageStore {
        &self.store
    }

    pub fn calls(&self) -> &CallLog {
        &self.calls
    }

    pub fn concurrency(&self) -> usize {
        self.concurrency
    }

    pub fn has_text_embedder(&self) -> bool {
        self.text_embedder.is_some()
    }

    pub fn has_reasoner(&self) -> bool {
        self.reasoner.is_some()
    }

    pub fn has_detector(&self) -> bool {
        self.detector.is_some()
    }

    pub fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            generator: self.generator.as_ref().map(|p| p.identity()),
            reasoner: self.reasoner.as_ref().map(|p| p.identity()),
            text_embedder: self.text_embedder.as_ref().map(|p| p.identity()),
            image_embedder: self.image_embedder.as_ref().map(|p| p.identity()),
            detector: self.detector.as_ref().map(|p| p.identity()),
        }
    }

    /// Runs every configured port's health check.
    pub fn health(&self) -> Result<(), BackendError> {
        if let Some(p) = &self.generator {
            p.health()?;
        }
        if let Some(p) = &self.reasoner {
            p.health()?;
        }
        if let Some(p) = &self.text_embedder {
            p.health()?;
        }
        if let Some(p) = &self.image_embedder {
            p.health()?;
        }
        if let Some(p) = &self.detector {
            p.health()?;
        }
        Ok(())
    }

    pub fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let port = self
            .reasoner
            .as_ref()
            .ok_or_else(|| BackendError::Capability("reasoner".into()))?;
        port.chat(messages)
    }

    /// Generates and stores images. A key that already has stored images is
    /// answered from the store without calling the generator.
    pub fn generate(&self, request: &GenerateRequest) -> Result<Vec<ImageRef>, BackendError> {
        if let Some(refs) = self.store.cached(&request.idempotency_key) {
            return Ok(refs);
        }
        let port = self
            .generator
            .as_ref()
            .ok_or_else(|| BackendError::Capability("generator".into()))?;
        let images = port.generate(request)?;
        if images.len() != request.count as usize {
            return Err(BackendError::Malformed {
                port: port.identity(),
                message: format!(
                    "requested {} images, received {}",
                    request.count,
                    images.len()
                ),
            });
        }
        let refs = images
            .iter()
            .map(|img| self.store.put(&img.bytes, &img.media_type))
            .collect::<Result<Vec<_>, _>>()?;
        self.store.remember(&request.idempotency_key, &refs)?;
        Ok(refs)
    }

    /// Issues the requests concurrently (bounded) and returns the results in
    /// request order.
    pub fn generate_all(
        &self,
        requests: &[GenerateRequest],
    ) -> Result<Vec<Vec<ImageRef>>, BackendError> {
        fan_out(requests, self.concurrency, |_, r| self.generate(r))
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let port = self
            .text_embedder
            .as_ref()
            .ok_or_else(|| BackendError::Capability("text embedder".into()))?;
        let chunks: Vec<&[String]> = texts.chunks(EMBED_BATCH).collect();
        let raw = fan_out(&chunks, self.concurrency, |_, chunk| {
            let vectors = port.embed_texts(chunk)?;
            self.check_count(&port.identity(), chunk.len(), vectors.len())?;
            Ok(vectors)
        })?;
        self.validate(&port.identity(), raw.into_iter().flatten())
    }

    pub fn embed_images(
        &self,
        inputs: &[ImageInput<'_>],
    ) -> Result<Vec<EmbeddingVector>, BackendError> {
        let port = self
            .image_embedder
            .as_ref()
            .ok_or_else(|| BackendError::Capability("image embedder".into()))?;
        let chunks: Vec<&[ImageInput<'_>]> = inputs.chunks(EMBED_BATCH).collect();
        let raw = fan_out(&chunks, self.concurrency, |_, chunk| {
            let vectors = port.embed_images(chunk)?;
            self.check_count(&port.identity(), chunk.len(), vectors.len())?;
            Ok(vectors)
        })?;
        self.validate(&port.identity(), raw.into_iter().flatten())
    }

    pub fn detect(&self, image: &[u8]) -> Result<Detection, BackendError> {
        let port = self
            .detector
            .as_ref()
            .ok_or_else(|| BackendError::Capability("detector".into()))?;
        port.detect(image)
    }

    fn check_count(&self, port: &str, expected: usize, got: usize) -> Result<(), BackendError> {
        if expected == got {
            Ok(())
        } else {
            Err(BackendError::Malformed {
                port: port.to_string(),
                message: format!("expected {expected} embeddings, received {got}"),
            })
        }
    }

    fn validate(
        &self,
        port: &str,
        raw: impl Iterator<Item = Vec<f64>>,
    ) -> Result<Vec<EmbeddingVector>, BackendError> {
        raw.enumerate()
            .map(|(index, values)| {
                let dim = values.len();
                let expected = *self.dim.get_or_init(|| dim);
                if dim != expected {
                    return Err(BackendError::InvalidEmbedding {
                        port: port.to_string(),
                        index,
                        source: EmbeddingError::DimensionMismatch(expected, dim),
                    });
                }
                EmbeddingVector::new(values).map_err(|source| BackendError::InvalidEmbedding {
                    port: port.to_string(),
                    index,
                    source,
                })
            })
            .collect()
    }
}

/// Applies `f` to every item with at most `limit` in flight. Output order
/// matches input order; the first error by index wins.
pub fn fan_out<T, R, E, F>(items: &[T], limit: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R, E>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(i, &items[i]);
                *slots[i].lock().expect("slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("slot poisoned")
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedEmbedder(Vec<f64>);

    impl TextEmbedder for FixedEmbedder {
        fn identity(&self) -> String {
            "fixed".into()
        }
        fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            Ok(texts.iter().map(|_| self.0.clone()).collect())
        }
    }

    #[test]
    fn fan_out_preserves_order() {
        let items: Vec<u32> = (0..50).collect();
        let out: Result<Vec<u32>, ()> = fan_out(&items, 7, |_, v| Ok(v * 2));
        assert_eq!(out.unwrap(), items.iter().map(|v| v * 2).collect::<Vec<_>>());
    }

    #[test]
    fn fan_out_reports_first_error_by_index() {
        let items: Vec<u32> = (0..20).collect();
        let out: Result<Vec<u32>, u32> =
            fan_out(&items, 4, |_, &v| if v % 5 == 3 { Err(v) } else { Ok(v) });
        assert_eq!(out, Err(3));
    }

    #[test]
    fn non_unit_embeddings_are_rejected_at_the_port() {
        let backends = Backends::new(ImageStore::in_memory())
            .with_text_embedder(Arc::new(FixedEmbedder(vec![1.0, 1.0])));
        let err = backends.embed_texts(&["a".into()]).unwrap_err();
        assert!(matches!(err, BackendError::InvalidEmbedding { index: 0, .. }));
    }

    #[test]
    fn embedding_dimension_is_pinned_per_run() {
        let backends = Backends::new(ImageStore::in_memory())
            .with_text_embedder(Arc::new(FixedEmbedder(vec![1.0, 0.0])));
        backends.embed_texts(&["a".into()]).unwrap();
        let other = Backends {
            text_embedder: Some(Arc::new(FixedEmbedder(vec![1.0, 0.0, 0.0]))),
            ..backends.clone()
        };
        assert!(matches!(
            other.embed_texts(&["a".into()]),
            Err(BackendError::InvalidEmbedding { .. })
        ));
    }

    #[test]
    fn missing_ports_are_capability_errors() {
        let backends = Backends::new(ImageStore::in_memory());
        assert!(matches!(
            backends.embed_texts(&["a".into()]),
            Err(BackendError::Capability(_))
        ));
        assert!(matches!(backends.chat(&[]), Err(BackendError::Capability(_))));
    }
}
