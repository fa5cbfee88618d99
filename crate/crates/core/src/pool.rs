//! Demonstration pool: converged CoTs archived for reuse, the three
//! inference-time selection strategies, and adaptation of a stored CoT to a
//! new profession.
//!
//! The pool file is JSON Lines, one [`CotRecord`] per line, each carrying its
//! format version in `v`. Every archive rewrites the file through a temporary
//! sibling and a rename, so readers never observe a half-written pool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, ChatMessage};
use crate::metrics::MetricSnapshot;
use crate::predictor::argmax_first;
use crate::refine::RefinementResult;
use crate::schema::ProfessionAreaMap;

pub const POOL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PoolError {
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
    #[error("the demonstration pool is empty")]
    Empty,
    #[error("cosine selection needs a text embedder")]
    NoEmbedder,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("the reasoner returned an empty response to the {0} request")]
    EmptyResponse(&'static str),
    #[error("could not find any prompts in the reasoner response")]
    Unparseable { raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub v: u32,
    pub id: String,
    pub cot_text: String,
    pub profession: String,
    pub area: Option<String>,
    pub prompts: Vec<String>,
    pub snapshot: MetricSnapshot,
    pub provenance: Provenance,
    pub created_at: String,
}

/// A record before the pool assigns its id.
#[derive(Debug, Clone, PartialEq)]
pub struct CotDraft {
    pub cot_text: String,
    pub profession: String,
    pub area: Option<String>,
    pub prompts: Vec<String>,
    pub snapshot: MetricSnapshot,
    pub provenance: Provenance,
    pub created_at: String,
}

impl CotDraft {
    /// Draft for the selected iteration of a refinement run.
    pub fn from_result(
        result: &RefinementResult,
        profession: &str,
        areas: &ProfessionAreaMap,
        run_id: &str,
        created_at: &str,
    ) -> Self {
        let chosen = result.selected_record();
        Self {
            cot_text: chosen.cot_text.clone(),
            profession: profession.to_string(),
            area: areas.area_of(profession).map(str::to_string),
            prompts: chosen.prompts.clone(),
            snapshot: chosen.snapshot.clone(),
            provenance: Provenance {
                run_id: run_id.to_string(),
                iteration: chosen.index,
            },
            created_at: created_at.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemonstrationPool {
    path: Option<PathBuf>,
    records: Vec<CotRecord>,
}

impl DemonstrationPool {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Pool over `records`, written to `path` on the next save or archive.
    pub fn from_records(path: Option<PathBuf>, records: Vec<CotRecord>) -> Self {
        Self { path, records }
    }

    /// Loads the pool at `path`; a missing file is an empty pool.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PoolError> {
        let path = path.into();
        let records = if path.exists() {
            Self::read_records(&path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    fn read_records(path: &Path) -> Result<Vec<CotRecord>, PoolError> {
        let text = fs::read_to_string(path).map_err(|source| PoolError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records: Vec<CotRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| PoolError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let record: CotRecord =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            if record.v != POOL_FORMAT_VERSION {
                return Err(parse_err(format!("unsupported record version {}", record.v)));
            }
            if records.iter().any(|r| r.id == record.id) {
                return Err(parse_err(format!("duplicate id {}", record.id)));
            }
            records.push(record);
        }
        Ok(records)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[CotRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CotRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn next_id(&self) -> String {
        let max = self
            .records
            .iter()
            .filter_map(|r| r.id.strip_prefix("cot-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0);
        format!("cot-{:06}", max + 1)
    }

    pub fn archive(&mut self, draft: CotDraft) -> Result<CotRecord, PoolError> {
        self.archive_with_hook(draft, |_| Ok(()))
    }

    /// Like [`archive`](Self::archive), calling `hook` with the temporary
    /// file after it is written and before it replaces the pool. A hook error
    /// aborts the archive and leaves both the file and `self` unchanged.
    pub fn archive_with_hook(
        &mut self,
        draft: CotDraft,
        hook: impl FnOnce(&Path) -> std::io::Result<()>,
    ) -> Result<CotRecord, PoolError> {
        let record = CotRecord {
            v: POOL_FORMAT_VERSION,
            id: self.next_id(),
            cot_text: draft.cot_text,
            profession: draft.profession,
            area: draft.area,
            prompts: draft.prompts,
            snapshot: draft.snapshot,
            provenance: draft.provenance,
            created_at: draft.created_at,
        };
        if let Some(path) = &self.path {
            let mut all = self.records.clone();
            all.push(record.clone());
            write_atomic(path, &all, hook)?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Writes the whole pool to its file.
    pub fn save(&self) -> Result<(), PoolError> {
        match &self.path {
            Some(path) => write_atomic(path, &self.records, |_| Ok(())),
            None => Ok(()),
        }
    }

    pub fn select(
        &self,
        new_profession: &str,
        strategy: SelectionStrategy,
        areas: &ProfessionAreaMap,
        embedder: Option<&Backends>,
    ) -> Result<Selection<'_>, PoolError> {
        if self.records.is_empty() {
            return Err(PoolError::Empty);
        }
        match strategy {
            SelectionStrategy::Random { seed } => {
                let i = ChaCha8Rng::seed_from_u64(seed).gen_range(0..self.records.len());
                Ok(Selection {
                    record: &self.records[i],
                    method: "random".into(),
                })
            }
            SelectionStrategy::Cosine => Ok(Selection {
                record: self.nearest(new_profession, embedder)?,
                method: "cosine".into(),
            }),
            SelectionStrategy::Area => {
                let area = areas.area_of(new_profession);
                let mut best: Option<&CotRecord> = None;
                if let Some(area) = area {
                    for r in self.records.iter().filter(|r| r.area.as_deref() == Some(area)) {
                        if best.is_none_or(|b| r.snapshot.fairness_score > b.snapshot.fairness_score) {
                            best = Some(r);
                        }
                    }
                }
                match best {
                    Some(record) => Ok(Selection {
                        record,
                        method: "area".into(),
                    }),
                    None => {
                        let why = if area.is_some() {
                            "area has no pool record"
                        } else {
                            "profession not in the area map"
                        };
                        log::info!("area selection for '{new_profession}' falls back to cosine: {why}");
                        Ok(Selection {
                            record: self.nearest(new_profession, embedder)?,
                            method: format!("cosine (area fallback: {why})"),
                        })
                    }
                }
            }
        }
    }

    fn nearest(&self, profession: &str, embedder: Option<&Backends>) -> Result<&CotRecord, PoolError> {
        let backends = embedder
            .filter(|b| b.has_text_embedder())
            .ok_or(PoolError::NoEmbedder)?;
        let mut texts = vec![profession.to_string()];
        texts.extend(self.records.iter().map(|r| r.profession.clone()));
        let vectors = backends.embed_texts(&texts)?;
        let query = &vectors[0];
        let scores = vectors[1..]
            .iter()
            .map(|v| query.cosine(v).map_err(|e| BackendError::InvalidEmbedding {
                port: "text embedder".into(),
                index: 0,
                source: e,
            }))
            .collect::<Result<Vec<f64>, _>>()?;
        let best = argmax_first(&scores).ok_or(PoolError::Empty)?;
        Ok(&self.records[best])
    }
}

fn write_atomic(
    path: &Path,
    records: &[CotRecord],
    hook: impl FnOnce(&Path) -> std::io::Result<()>,
) -> Result<(), PoolError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| PoolError::Io { path: p, source }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pool".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let result = (|| {
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        for record in records {
            let line = serde_json::to_string(record).expect("records serialize");
            writeln!(file, "{line}").map_err(io_err(&tmp))?;
        }
        file.sync_all().map_err(io_err(&tmp))?;
        hook(&tmp).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectionStrategy {
    Random { seed: u64 },
    Cosine,
    Area,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<'a> {
    pub record: &'a CotRecord,
    /// Strategy that actually decided, including any fallback.
    pub method: String,
}

/// Lower-case English plural of a profession label ("Nurse" → "nurses").
pub fn pluralize(profession: &str) -> String {
    let lower = profession.trim().to_lowercase();
    if let Some(stem) = lower.strip_suffix("man") {
        return format!("{stem}men");
    }
    if lower.ends_with('y')
        && !lower
            .chars()
            .rev()
            .nth(1)
            .is_some_and(|c| "aeiou".contains(c))
    {
        return format!("{}ies", &lower[..lower.len() - 1]);
    }
    if ["s", "x", "z", "ch", "sh"].iter().any(|s| lower.ends_with(s)) {
        return format!("{lower}es");
    }
    format!("{lower}s")
}

pub fn adaptation_request(old_profession: &str, cot: &str, new_profession: &str) -> String {
    format!(
        "consider this chain of thought for {} \"{}\" Can you inspired by this generate a similar chain of thought for {}",
        pluralize(old_profession),
        cot,
        pluralize(new_profession)
    )
}

pub fn prompts_request(n: usize) -> String {
    format!(
        "can you use it to generate {n} prompts that will be used to generate {n} images in stable diffusion(1 image per prompt) following these guidelines\n\
         Return exactly {n} prompts as a numbered list (1. ... {n}. ...) inside a ``` fenced block, one prompt per line."
    )
}

/// Extracts prompts from a reasoner reply. Tries, in order: the lines of the
/// first fenced block, lines with a numeric prefix ("1." or "1)"), and
/// blank-line separated paragraphs.
pub fn parse_numbered_prompts(text: &str) -> Vec<String> {
    let enumerator = Regex::new(r"^\s*(?:\d+\s*[.):]|[-*•])\s*").expect("static regex");
    let numbered = Regex::new(r"^\s*\d+\s*[.)]\s+(.+?)\s*$").expect("static regex");

    let mut fences = text.match_indices("```").map(|(i, _)| i);
    if let (Some(open), Some(close)) = (fences.next(), fences.next()) {
        let inner = &text[open + 3..close];
        // drop an info string such as ```text
        let inner = inner.split_once('\n').map_or("", |(_, rest)| rest);
        let lines: Vec<String> = inner
            .lines()
            .map(|l| enumerator.replace(l, "").trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if !lines.is_empty() {
            return lines;
        }
    }
    let lines: Vec<String> = text
        .lines()
        .filter_map(|l| numbered.captures(l).map(|c| c[1].to_string()))
        .collect();
    if !lines.is_empty() {
        return lines;
    }
    text.split("\n\n")
        .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|p| !p.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub cot_text: String,
    pub prompts: Vec<String>,
    pub warnings: Vec<String>,
    /// Reasoner replies, verbatim.
    pub raw_responses: Vec<String>,
}

/// Adapts `record` to `new_profession` with the two-turn template and
/// returns exactly `n` prompts.
pub fn adapt(
    record: &CotRecord,
    new_profession: &str,
    n: usize,
    backends: &Backends,
) -> Result<Adaptation, PoolError> {
    let mut messages = vec![ChatMessage::user(adaptation_request(
        &record.profession,
        &record.cot_text,
        new_profession,
    ))];
    let cot_text = backends.chat(&messages)?;
    if cot_text.trim().is_empty() {
        return Err(PoolError::EmptyResponse("adaptation"));
    }
    messages.push(ChatMessage::assistant(cot_text.clone()));
    messages.push(ChatMessage::user(prompts_request(n)));
    let reply = backends.chat(&messages)?;
    if reply.trim().is_empty() {
        return Err(PoolError::EmptyResponse("prompt list"));
    }
    let mut prompts = parse_numbered_prompts(&reply);
    if prompts.is_empty() {
        return Err(PoolError::Unparseable { raw: reply });
    }
    let mut warnings = Vec::new();
    if prompts.len() != n {
        warnings.push(format!(
            "reasoner returned {} prompts, expected {n}; {}",
            prompts.len(),
            if prompts.len() < n {
                "padded by repeating the last prompt"
            } else {
                "truncated"
            }
        ));
        let last = prompts.last().cloned().expect("non-empty");
        prompts.resize(n, last);
    }
    Ok(Adaptation {
        cot_text,
        prompts,
        warnings,
        raw_responses: vec![messages[1].content.clone(), reply],
    })
}
