//! JSON wire protocol shared by the remote client, the stub server and any
//! external model server.
//!
//! | Method | Path           | Request             | Response           |
//! |--------|----------------|---------------------|--------------------|
//! | POST   | `/generate`    | [`GenerateBody`]    | [`ImagesBody`]     |
//! | POST   | `/chat`        | [`ChatBody`]        | [`ChatReply`]      |
//! | POST   | `/embed/text`  | [`EmbedTextBody`]   | [`EmbeddingsBody`] |
//! | POST   | `/embed/image` | [`EmbedImageBody`]  | [`EmbeddingsBody`] |
//! | POST   | `/detect`      | [`DetectBody`]      | [`DetectionBody`]  |
//! | GET    | `/health`      | none                | [`HealthBody`]     |
//!
//! Image bytes travel as standard base64 with padding. Failures use HTTP
//! status codes plus an [`ErrorEnvelope`] body. Requests to `/generate` carry
//! an `Idempotency-Key` header; servers must answer repeated keys with the
//! same images. Credentials, when required, go in `Authorization: Bearer`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::ChatMessage;
use crate::multiface::FaceBox;

pub const PATH_GENERATE: &str = "/generate";
pub const PATH_CHAT: &str = "/chat";
pub const PATH_EMBED_TEXT: &str = "/embed/text";
pub const PATH_EMBED_IMAGE: &str = "/embed/image";
pub const PATH_DETECT: &str = "/detect";
pub const PATH_HEALTH: &str = "/health";
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateBody {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub count: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub data_b64: String,
    pub media_type: String,
}

impl WireImage {
    pub fn encode(bytes: &[u8], media_type: &str) -> Self {
        Self {
            data_b64: STANDARD.encode(bytes),
            media_type: media_type.to_string(),
        }
    }

    pub fn decode(&self) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(&self.data_b64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagesBody {
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatBody {
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextBody {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInputBody {
    pub data_b64: String,
    /// Pixel rectangle to crop before encoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<FaceBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImageBody {
    pub images: Vec<ImageInputBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsBody {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectBody {
    pub data_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBody {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<FaceBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthBody {
    pub status: String,
    /// Port name → model identifier.
    pub models: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// One of `bad_request`, `unauthorized`, `not_found`, `rate_limited`,
    /// `internal`, `unavailable`, `unsupported`.
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub error: ErrorBody,
}

impl ErrorEnvelope {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

pub fn encode_b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn decode_b64(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    STANDARD.decode(text)
}

/// HTTP status paired with each error code.
pub fn status_for_code(code: &str) -> u16 {
    match code {
        "bad_request" => 400,
        "unauthorized" => 401,
        "not_found" => 404,
        "rate_limited" => 429,
        "unavailable" => 503,
        "unsupported" => 501,
        _ => 500,
    }
}
