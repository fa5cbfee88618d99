//! In-process HTTP server speaking the wire protocol, for contract tests and
//! offline demos. Binds to an ephemeral localhost port and shuts down on drop.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::sim::SimBackend;
use super::store::SIM_MEDIA_TYPE;
use super::wire::{
    self, ChatBody, ChatReply, DetectBody, DetectionBody, EmbedImageBody, EmbedTextBody,
    EmbeddingsBody, ErrorEnvelope, GenerateBody, HealthBody, ImagesBody, WireImage,
};
use super::{
    BackendError, Detector, GenerateRequest, Generator, ImageEmbedder, ImageInput, Reasoner,
    TextEmbedder,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl StubRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl StubResponse {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            headers: Vec::new(),
            body: serde_json::to_vec(value).expect("response bodies serialize"),
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Self::json(wire::status_for_code(code), &ErrorEnvelope::new(code, message))
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

pub type Handler = dyn Fn(&StubRequest) -> StubResponse + Send + Sync;

/// Canned failures served before the real handler, matched by path.
#[derive(Debug, Clone, Default)]
pub struct Faults(Arc<Mutex<VecDeque<(String, StubResponse)>>>);

impl Faults {
    pub fn push(&self, path: &str, response: StubResponse) {
        self.0
            .lock()
            .expect("faults poisoned")
            .push_back((path.into(), response));
    }

    fn take(&self, path: &str) -> Option<StubResponse> {
        let mut queue = self.0.lock().expect("faults poisoned");
        let i = queue.iter().position(|(p, _)| p == path)?;
        queue.remove(i).map(|(_, r)| r)
    }
}

pub struct StubServer {
    url: String,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
    log: Arc<Mutex<Vec<StubRequest>>>,
    faults: Faults,
}

impl StubServer {
    pub fn start(
        handler: impl Fn(&StubRequest) -> StubResponse + Send + Sync + 'static,
    ) -> std::io::Result<Self> {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map(Arc::new)
            .map_err(std::io::Error::other)?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| std::io::Error::other("stub server has no IP address"))?;
        let log: Arc<Mutex<Vec<StubRequest>>> = Arc::default();
        let faults = Faults::default();
        let thread = {
            let server = server.clone();
            let log = log.clone();
            let faults = faults.clone();
            std::thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let mut body = Vec::new();
                    if request.as_reader().read_to_end(&mut body).is_err() {
                        continue;
                    }
                    let req = StubRequest {
                        method: request.method().as_str().to_uppercase(),
                        path: request.url().split('?').next().unwrap_or("").to_string(),
                        headers: request
                            .headers()
                            .iter()
                            .map(|h| (h.field.to_string(), h.value.to_string()))
                            .collect(),
                        body,
                    };
                    log.lock().expect("log poisoned").push(req.clone());
                    let reply = faults.take(&req.path).unwrap_or_else(|| handler(&req));
                    let mut response = tiny_http::Response::from_data(reply.body)
                        .with_status_code(reply.status);
                    let content_type = tiny_http::Header::from_bytes("Content-Type", "application/json")
                        .expect("static header");
                    response.add_header(content_type);
                    // keep-alive connections to this single-threaded loop
                    // can stall pooled clients; one request per connection
                    response.add_header(
                        tiny_http::Header::from_bytes("Connection", "close").expect("static header"),
                    );
                    for (k, v) in &reply.headers {
                        if let Ok(h) = tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()) {
                            response.add_header(h);
                        }
                    }
                    let _ = request.respond(response);
                }
            })
        };
        Ok(Self {
            url: format!("http://127.0.0.1:{port}"),
            server,
            thread: Some(thread),
            log,
            faults,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.log.lock().expect("log poisoned").clone()
    }

    pub fn faults(&self) -> &Faults {
        &self.faults
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

#[derive(Clone, Default)]
pub struct SimHandlerOptions {
    /// When set, requests must carry `Authorization: Bearer <key>`.
    pub api_key: Option<String>,
    pub reasoner: Option<Arc<dyn Reasoner>>,
}

fn parse<T: DeserializeOwned>(req: &StubRequest) -> Result<T, StubResponse> {
    serde_json::from_slice(&req.body)
        .map_err(|e| StubResponse::error("bad_request", format!("invalid body: {e}")))
}

fn backend_failure(e: BackendError) -> StubResponse {
    let code = match &e {
        BackendError::Rejected { code, .. } => code.clone(),
        other => other.code().to_string(),
    };
    StubResponse::error(&code, e.to_string())
}

fn decode(data: &str) -> Result<Vec<u8>, StubResponse> {
    wire::decode_b64(data).map_err(|e| StubResponse::error("bad_request", format!("bad base64: {e}")))
}

/// Protocol handler backed by a [`SimBackend`].
pub fn sim_handler(
    sim: Arc<SimBackend>,
    options: SimHandlerOptions,
) -> impl Fn(&StubRequest) -> StubResponse + Send + Sync + 'static {
    move |req| {
        if let Some(key) = &options.api_key {
            if req.header("Authorization") != Some(format!("Bearer {key}").as_str()) {
                return StubResponse::error("unauthorized", "missing or invalid API key");
            }
        }
        let result = match (req.method.as_str(), req.path.as_str()) {
            ("GET", wire::PATH_HEALTH) => {
                let id = Generator::identity(sim.as_ref());
                let mut models = indexmap::IndexMap::new();
                for port in ["generate", "embed_text", "embed_image", "detect"] {
                    models.insert(port.to_string(), id.clone());
                }
                if let Some(r) = &options.reasoner {
                    models.insert("chat".into(), r.identity());
                }
                Ok(StubResponse::json(
                    200,
                    &HealthBody {
                        status: "ok".into(),
                        models,
                        embedding_dim: Some(sim.dim()),
                    },
                ))
            }
            ("POST", wire::PATH_GENERATE) => parse::<GenerateBody>(req).and_then(|body| {
                let request = GenerateRequest {
                    prompt: body.prompt,
                    context: body.context,
                    count: body.count,
                    seed: body.seed,
                    idempotency_key: req.header(wire::IDEMPOTENCY_HEADER).unwrap_or("").into(),
                };
                let images = sim.generate(&request).map_err(backend_failure)?;
                Ok(StubResponse::json(
                    200,
                    &ImagesBody {
                        images: images
                            .iter()
                            .map(|i| WireImage::encode(&i.bytes, SIM_MEDIA_TYPE))
                            .collect(),
                    },
                ))
            }),
            ("POST", wire::PATH_CHAT) => parse::<ChatBody>(req).and_then(|body| {
                let reasoner = options
                    .reasoner
                    .as_ref()
                    .ok_or_else(|| StubResponse::error("unsupported", "no chat model loaded"))?;
                let text = reasoner.chat(&body.messages).map_err(backend_failure)?;
                Ok(StubResponse::json(200, &ChatReply { text }))
            }),
            ("POST", wire::PATH_EMBED_TEXT) => parse::<EmbedTextBody>(req).and_then(|body| {
                let vectors = sim.embed_texts(&body.texts).map_err(backend_failure)?;
                Ok(StubResponse::json(
                    200,
                    &EmbeddingsBody {
                        dim: sim.dim(),
                        vectors,
                    },
                ))
            }),
            ("POST", wire::PATH_EMBED_IMAGE) => parse::<EmbedImageBody>(req).and_then(|body| {
                let decoded = body
                    .images
                    .iter()
                    .map(|i| decode(&i.data_b64))
                    .collect::<Result<Vec<_>, _>>()?;
                let inputs: Vec<ImageInput<'_>> = decoded
                    .iter()
                    .zip(&body.images)
                    .map(|(bytes, i)| ImageInput { bytes, crop: i.crop })
                    .collect();
                let vectors = sim.embed_images(&inputs).map_err(backend_failure)?;
                Ok(StubResponse::json(
                    200,
                    &EmbeddingsBody {
                        dim: sim.dim(),
                        vectors,
                    },
                ))
            }),
            ("POST", wire::PATH_DETECT) => parse::<DetectBody>(req).and_then(|body| {
                let bytes = decode(&body.data_b64)?;
                let d = sim.detect(&bytes).map_err(backend_failure)?;
                Ok(StubResponse::json(
                    200,
                    &DetectionBody {
                        width: d.width,
                        height: d.height,
                        boxes: d.boxes,
                    },
                ))
            }),
            _ => Err(StubResponse::error(
                "not_found",
                format!("no route for {} {}", req.method, req.path),
            )),
        };
        result.unwrap_or_else(|e| e)
    }
}
