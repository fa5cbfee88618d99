//! Run manifests: one JSON object per line, tagged by `kind`, appended and
//! flushed to disk as the run progresses.
//!
//! A manifest starts with a `header` (everything needed to replay the run)
//! and ends with a `final` record. In between: `iteration` records from the
//! refinement loop, `selection`/`adaptation` at inference, `evaluation`
//! results, `call` records for every remote request and `warning`s.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AgreementReport;
use crate::backends::remote::RemoteSettings;
use crate::backends::sim::BiasProfile;
use crate::backends::{BackendIdentity, CallRecord};
use crate::metrics::MetricSnapshot;
use crate::pipeline::BatchResult;
use crate::pool::Adaptation;
use crate::refine::{Decision, IterationRecord};
use crate::schema::{AttributeSchema, ProfessionAreaMap, RunConfig};

pub const MANIFEST_FORMAT: &str = "faircot-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: manifest has no header record")]
    MissingHeader(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub run_id: String,
    pub command: String,
    pub created_at: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub schema: AttributeSchema,
    pub schema_digest: String,
    pub areas: ProfessionAreaMap,
    pub backend_kind: BackendKind,
    pub backend: BackendIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_profile: Option<BiasProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profession: Option<String>,
    /// Command-specific inputs (strategy, pool snapshot, image source...).
    #[serde(default)]
    pub inputs: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub strategy: String,
    pub method: String,
    pub record_id: String,
    pub source_profession: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_iteration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<MetricSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_record_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    Header(ManifestHeader),
    Iteration(IterationRecord),
    Selection(SelectionRecord),
    Adaptation(Adaptation),
    Evaluation(EvaluationRecord),
    Agreement(AgreementReport),
    Call(CallRecord),
    Warning { message: String },
    Final(FinalRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// Prompt of each image, aligned with `images`; empty when the images
    /// came without prompts.
    pub prompts: Vec<String>,
    pub images: Vec<crate::backends::ImageRef>,
    pub result: BatchResult,
}

/// Append-only writer. Every record is flushed and synced before `append`
/// returns.
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
}

impl ManifestWriter {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|source| ManifestError::Io {
                path: path.clone(),
                source,
            })?;
        Ok(Self { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &ManifestRecord) -> Result<(), ManifestError> {
        let mut line = serde_json::to_string(record).expect("manifest records serialize");
        line.push('\n');
        let io = |source| ManifestError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(|source| ManifestError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn header_of(records: &[ManifestRecord]) -> Option<&ManifestHeader> {
    match records.first() {
        Some(ManifestRecord::Header(h)) => Some(h),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_tagged_by_kind() {
        let rec = ManifestRecord::Warning {
            message: "padded".into(),
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"kind":"warning","message":"padded"}"#
        );
        let call = ManifestRecord::Call(CallRecord {
            endpoint: "/generate".into(),
            request_digest: "ab".into(),
            idempotency_key: Some("run/t0/p0".into()),
            retries: 2,
            latency_ms: 5,
            outcome: "ok".into(),
        });
        let text = serde_json::to_string(&call).unwrap();
        assert!(text.starts_with(r#"{"kind":"call","endpoint":"/generate""#));
        assert_eq!(serde_json::from_str::<ManifestRecord>(&text).unwrap(), call);
    }

    #[test]
    fn writer_and_reader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs/x/manifest.jsonl");
        let records = vec![
            ManifestRecord::Warning { message: "a".into() },
            ManifestRecord::Final(FinalRecord {
                status: "ok".into(),
                decision: Some(Decision::StoppedNoImprovement),
                selected_iteration: Some(3),
                snapshot: None,
                pool_record_id: Some("cot-000001".into()),
                error: None,
            }),
        ];
        let mut writer = ManifestWriter::create(&path).unwrap();
        for r in &records {
            writer.append(r).unwrap();
        }
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"kind\":\"warning\",\"message\":\"a\"}\n{oops\n").unwrap();
        match read_manifest(&path) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
