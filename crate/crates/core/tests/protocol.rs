//! Wire-protocol contract, checked against the in-process stub server. The
//! `contract_*` functions only speak HTTP, so they apply to any server that
//! implements the protocol.

use std::sync::Arc;

use faircot_core::backends::remote::{RemoteSettings, RetryPolicy};
use faircot_core::backends::sim::{BiasProfile, SimBackend, SimReasoner};
use faircot_core::backends::stub::{sim_handler, SimHandlerOptions, StubResponse, StubServer};
use faircot_core::backends::wire::{
    decode_b64, encode_b64, DetectionBody, EmbeddingsBody, ErrorEnvelope, HealthBody, ImagesBody,
};
use faircot_core::backends::{BackendError, CallLog};
use faircot_core::runner::{run_cot_gen, BackendSpec, Settings, Workspace};
use faircot_core::schema::{AttributeSchema, RunConfig};
use serde_json::{json, Value};

fn stub(api_key: Option<&str>, with_reasoner: bool) -> StubServer {
    let schema = AttributeSchema::default();
    let profile = BiasProfile::default();
    let reasoner = with_reasoner
        .then(|| Arc::new(SimReasoner::new(&profile)) as Arc<dyn faircot_core::backends::Reasoner>);
    let sim = Arc::new(SimBackend::new(&schema, profile).unwrap());
    StubServer::start(sim_handler(
        sim,
        SimHandlerOptions {
            api_key: api_key.map(str::to_string),
            reasoner,
        },
    ))
    .unwrap()
}

fn post(base: &str, path: &str, body: &Value) -> (u16, Vec<u8>) {
    let r = reqwest::blocking::Client::new()
        .post(format!("{base}{path}"))
        .json(body)
        .send()
        .unwrap();
    (r.status().as_u16(), r.bytes().unwrap().to_vec())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fixture_image(base: &str) -> String {
    let (status, body) = post(
        base,
        "/generate",
        &json!({"prompt": "a photo of a nurse", "count": 1, "seed": 3}),
    );
    assert_eq!(status, 200);
    let images: ImagesBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(images.images.len(), 1);
    images.images[0].data_b64.clone()
}

fn contract_health(base: &str) {
    let r = reqwest::blocking::get(format!("{base}/health")).unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let h: HealthBody = r.json().unwrap();
    assert_eq!(h.status, "ok");
    assert!(h.embedding_dim.unwrap() > 0);
}

fn contract_text_embeddings_are_unit_norm(base: &str) {
    let (status, body) = post(base, "/embed/text", &json!({"texts": ["a nurse", "a doctor"]}));
    assert_eq!(status, 200);
    let e: EmbeddingsBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.vectors.len(), 2);
    for v in &e.vectors {
        assert_eq!(v.len(), e.dim);
        assert!((norm(v) - 1.0).abs() <= 1e-4);
    }
}

fn contract_crop_changes_image_embedding(base: &str) {
    let data = fixture_image(base);
    let (status, body) = post(
        base,
        "/embed/image",
        &json!({"images": [
            {"data_b64": data},
            {"data_b64": data, "crop": {"x": 50, "y": 50, "w": 150, "h": 150}},
        ]}),
    );
    assert_eq!(status, 200);
    let e: EmbeddingsBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.vectors.len(), 2);
    for v in &e.vectors {
        assert!((norm(v) - 1.0).abs() <= 1e-4);
    }
    let diff: f64 = e.vectors[0]
        .iter()
        .zip(&e.vectors[1])
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "crop had no effect");
}

fn contract_detection_boxes_are_inside(base: &str) {
    let data = fixture_image(base);
    let (status, body) = post(base, "/detect", &json!({"data_b64": data}));
    assert_eq!(status, 200);
    let d: DetectionBody = serde_json::from_slice(&body).unwrap();
    assert!(!d.boxes.is_empty());
    for b in &d.boxes {
        assert!(b.w > 0 && b.h > 0);
        assert!(b.x + b.w <= d.width && b.y + b.h <= d.height, "{b:?}");
    }
}

fn contract_error_envelopes(base: &str) {
    let (status, body) = post(base, "/no/such/route", &json!({}));
    assert_eq!(status, 404);
    let e: ErrorEnvelope = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error.code, "not_found");

    let (status, body) = post(base, "/embed/text", &json!({"wrong": 1}));
    assert_eq!(status, 400);
    let e: ErrorEnvelope = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error.code, "bad_request");
    assert!(!e.error.message.is_empty());

    let (status, body) = post(base, "/detect", &json!({"data_b64": encode_b64(b"not an image")}));
    assert!((400..500).contains(&status), "{status}");
    serde_json::from_slice::<ErrorEnvelope>(&body).unwrap();
}

#[test]
fn stub_server_satisfies_the_contract() {
    let server = stub(None, false);
    let base = server.url();
    contract_health(base);
    contract_text_embeddings_are_unit_norm(base);
    contract_crop_changes_image_embedding(base);
    contract_detection_boxes_are_inside(base);
    contract_error_envelopes(base);
}

#[test]
fn wire_images_round_trip() {
    let server = stub(None, false);
    let data = fixture_image(server.url());
    let bytes = decode_b64(&data).unwrap();
    assert_eq!(encode_b64(&bytes), data);
}

fn fast_remote(base: &str) -> RemoteSettings {
    RemoteSettings {
        retry: RetryPolicy {
            max_retries: 3,
            initial_backoff_ms: 1,
            max_backoff_ms: 20,
        },
        ..RemoteSettings::single(base)
    }
}

fn remote_settings(remote: RemoteSettings) -> Settings {
    Settings {
        backend: BackendSpec::Remote(remote),
        ..Settings::sim(RunConfig::default())
    }
}

#[test]
fn transient_failures_are_retried_and_recorded() {
    let server = stub(None, false);
    for _ in 0..2 {
        server
            .faults()
            .push("/embed/text", StubResponse::error("unavailable", "warming up"));
    }
    let calls = CallLog::default();
    let backends = remote_settings(fast_remote(server.url())).backends(&calls).unwrap();
    let v = backends.embed_texts(&["a nurse".to_string()]).unwrap();
    assert_eq!(v.len(), 1);
    let records = calls.snapshot();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].endpoint, "/embed/text");
    assert_eq!(records[0].retries, 2);
    assert_eq!(records[0].outcome, "ok");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn exhausted_retries_surface_the_last_error() {
    let server = stub(None, false);
    for _ in 0..4 {
        server
            .faults()
            .push("/embed/text", StubResponse::error("rate_limited", "slow down").with_header("Retry-After", "0"));
    }
    let calls = CallLog::default();
    let backends = remote_settings(fast_remote(server.url())).backends(&calls).unwrap();
    match backends.embed_texts(&["x".to_string()]) {
        Err(BackendError::RetriesExhausted { attempts, last, .. }) => {
            assert_eq!(attempts, 4);
            assert!(matches!(*last, BackendError::RateLimited { .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(calls.snapshot()[0].outcome, "retries_exhausted");
}

#[test]
fn auth_failures_are_not_retried() {
    let server = stub(Some("secret"), false);
    let calls = CallLog::default();
    let mut remote = fast_remote(server.url());
    remote.api_key = Some("wrong".into());
    let backends = remote_settings(remote).backends(&calls).unwrap();
    let err = backends.embed_texts(&["x".to_string()]).unwrap_err();
    assert!(matches!(err, BackendError::Auth { .. }), "{err:?}");
    assert_eq!(server.requests().len(), 1);
    assert_eq!(calls.snapshot()[0].retries, 0);

    let mut remote = fast_remote(server.url());
    remote.api_key = Some("secret".into());
    let backends = remote_settings(remote).backends(&calls).unwrap();
    backends.embed_texts(&["x".to_string()]).unwrap();
}

#[test]
fn api_key_is_never_serialized() {
    let mut remote = RemoteSettings::single("http://127.0.0.1:1");
    remote.api_key = Some("secret".into());
    let text = serde_json::to_string(&remote).unwrap();
    assert!(!text.contains("secret"));
}

#[test]
fn missing_chat_model_is_a_rejection() {
    let server = stub(None, false);
    let calls = CallLog::default();
    let backends = remote_settings(fast_remote(server.url())).backends(&calls).unwrap();
    let err = backends
        .chat(&[faircot_core::backends::ChatMessage::user("hello")])
        .unwrap_err();
    assert_eq!(err.code(), "unsupported");
}

/// The remote path over the stub must compute exactly what the in-process
/// simulation computes: JSON floats round-trip and image bytes are identical.
#[test]
fn remote_run_over_stub_matches_in_process_simulation() {
    let server = stub(None, true);
    let config = RunConfig {
        n_prompts: 4,
        images_per_prompt: 5,
        rng_seed: 7,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ws = |name: &str| Workspace {
        out_dir: dir.path().join(name),
        pool_path: dir.path().join(name).join("pool.jsonl"),
        created_at: "2024-01-01T00:00:00Z".into(),
        overwrite: false,
    };
    let local = run_cot_gen(&Settings::sim(config.clone()), &ws("sim"), "Nurse").unwrap();
    let remote = run_cot_gen(
        &Settings {
            backend: BackendSpec::Remote(fast_remote(server.url())),
            ..Settings::sim(config)
        },
        &ws("remote"),
        "Nurse",
    )
    .unwrap();
    assert_eq!(local.final_record.snapshot, remote.final_record.snapshot);
    assert_eq!(local.final_record.decision, remote.final_record.decision);
    assert_eq!(
        local.final_record.selected_iteration,
        remote.final_record.selected_iteration
    );
    let manifest = std::fs::read_to_string(&remote.manifest).unwrap();
    assert!(manifest.contains(r#""kind":"call""#));
    assert!(manifest.contains(r#""idempotency_key":""#));
}
