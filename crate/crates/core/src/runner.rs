//! Command orchestration: resolves backends, runs a phase, streams the
//! manifest and writes reports under `<out>/runs/<run-id>/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    self, agreement_reports, render_agreement, render_runs, summarize_manifest, AgreementReport,
    AnalysisError, LabelRow, ReportFormat, RunSummary,
};
use crate::backends::remote::{HttpEndpoint, RemoteSettings};
use crate::backends::sim::{BiasProfile, SimBackend, SimError, SimReasoner};
use crate::backends::{BackendError, Backends, CallLog, ImageRef, ImageStore};
use crate::manifest::{
    header_of, read_manifest, BackendKind, EvaluationRecord, FinalRecord, ManifestError,
    ManifestHeader, ManifestRecord, ManifestWriter, SelectionRecord, MANIFEST_FILE,
    MANIFEST_FORMAT,
};
use crate::multiface::MultifaceError;
use crate::pipeline::{
    generate_and_evaluate, generation_requests, CotGenDriver, EvalItem, Evaluator, PipelineError,
};
use crate::pool::{adapt, CotDraft, CotRecord, DemonstrationPool, PoolError, SelectionStrategy};
use crate::refine::{run_refinement_loop, Evaluation, RefinementDriver};
use crate::schema::{AttributeSchema, ProfessionAreaMap, RunConfig, SchemaError};
use crate::seeds::substream;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const BACKEND: i32 = 4;
    pub const CONVERGENCE: i32 = 5;
    pub const CAPABILITY: i32 = 6;
    pub const REPLAY_MISMATCH: i32 = 7;
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(#[from] SchemaError),
    #[error("simulation profile error: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory {0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),
    #[error("refinement aborted: {0}")]
    Convergence(String),
    #[error("replay of {path} diverged at line {line}")]
    ReplayMismatch { path: PathBuf, line: usize },
}

fn backend_exit(e: &BackendError) -> i32 {
    match e {
        BackendError::Capability(_) => exit::CAPABILITY,
        BackendError::Store(_) => exit::INTERNAL,
        _ => exit::BACKEND,
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Exists(_) => exit::USAGE,
            Self::Config(_) | Self::Sim(_) | Self::Analysis(_) => exit::CONFIG,
            Self::Backend(e) => backend_exit(e),
            Self::Pipeline(e) => match e {
                PipelineError::Backend(e) => backend_exit(e),
                PipelineError::Multiface(MultifaceError::Backend { source, .. }) => {
                    backend_exit(source)
                }
                PipelineError::NoFaces(_) => exit::CONVERGENCE,
                PipelineError::NoImages => exit::USAGE,
                _ => exit::INTERNAL,
            },
            Self::Pool(e) => match e {
                PoolError::NoEmbedder => exit::CAPABILITY,
                PoolError::Backend(e) => backend_exit(e),
                PoolError::Empty | PoolError::Parse { .. } => exit::CONFIG,
                PoolError::EmptyResponse(_) | PoolError::Unparseable { .. } => exit::BACKEND,
                PoolError::Io { .. } => exit::INTERNAL,
            },
            Self::Manifest(e) => match e {
                ManifestError::Io { .. } => exit::INTERNAL,
                _ => exit::CONFIG,
            },
            Self::Io { .. } => exit::INTERNAL,
            Self::Convergence(_) => exit::CONVERGENCE,
            Self::ReplayMismatch { .. } => exit::REPLAY_MISMATCH,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Sim(BiasProfile),
    Remote(RemoteSettings),
}

/// Everything that determines what a run computes.
#[derive(Debug, Clone)]
pub struct Settings {
    pub config: RunConfig,
    pub schema: AttributeSchema,
    pub areas: ProfessionAreaMap,
    pub backend: BackendSpec,
}

impl Settings {
    pub fn sim(config: RunConfig) -> Self {
        Self {
            config,
            schema: AttributeSchema::default(),
            areas: ProfessionAreaMap::default(),
            backend: BackendSpec::Sim(BiasProfile::default()),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.config.validate()?;
        self.schema.validate()?;
        self.areas.validate()?;
        if let BackendSpec::Sim(profile) = &self.backend {
            profile.validate(&self.schema)?;
        }
        Ok(())
    }

    /// Ports for this backend, with an in-memory image store.
    pub fn backends(&self, calls: &CallLog) -> Result<Backends, RunError> {
        let mut b = Backends::new(ImageStore::in_memory())
            .with_call_log(calls.clone())
            .with_concurrency(self.config.concurrency as usize);
        match &self.backend {
            BackendSpec::Sim(profile) => {
                let sim = Arc::new(SimBackend::new(&self.schema, profile.clone())?);
                b = b
                    .with_generator(sim.clone())
                    .with_text_embedder(sim.clone())
                    .with_image_embedder(sim.clone())
                    .with_detector(sim)
                    .with_reasoner(Arc::new(SimReasoner::new(profile)));
            }
            BackendSpec::Remote(remote) => {
                let endpoint = |url: &str| -> Result<Arc<HttpEndpoint>, RunError> {
                    Ok(Arc::new(HttpEndpoint::new(
                        url,
                        remote.api_key.clone(),
                        Duration::from_secs(remote.timeout_secs),
                        remote.retry.clone(),
                        calls.clone(),
                    )?))
                };
                if let Some(url) = &remote.generate_url {
                    b = b.with_generator(endpoint(url)?);
                }
                if let Some(url) = &remote.chat_url {
                    b = b.with_reasoner(endpoint(url)?);
                }
                if let Some(url) = &remote.embed_url {
                    let e = endpoint(url)?;
                    b = b.with_text_embedder(e.clone()).with_image_embedder(e);
                }
                if let Some(url) = &remote.detect_url {
                    b = b.with_detector(endpoint(url)?);
                }
            }
        }
        Ok(b)
    }

    fn kind(&self) -> BackendKind {
        match self.backend {
            BackendSpec::Sim(_) => BackendKind::Sim,
            BackendSpec::Remote(_) => BackendKind::Remote,
        }
    }
}

/// Where a command writes, and the wall-clock facts it records.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub out_dir: PathBuf,
    pub pool_path: PathBuf,
    pub created_at: String,
    pub overwrite: bool,
}

impl Workspace {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        let out_dir = out_dir.into();
        Self {
            pool_path: out_dir.join("pool.jsonl"),
            out_dir,
            created_at: timestamp_now(),
            overwrite: false,
        }
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.out_dir.join("runs").join(run_id)
    }
}

/// RFC 3339 UTC timestamp; `SOURCE_DATE_EPOCH` pins it for reproducible runs.
pub fn timestamp_now() -> String {
    let time = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .unwrap_or_else(chrono::Utc::now);
    time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn slug(text: &str) -> String {
    let mut out = String::new();
    for c in text.trim().chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    Area,
    Cosine,
    Random,
}

impl StrategyChoice {
    pub fn resolve(self, rng_seed: u64) -> SelectionStrategy {
        match self {
            Self::Area => SelectionStrategy::Area,
            Self::Cosine => SelectionStrategy::Cosine,
            Self::Random => SelectionStrategy::Random {
                seed: substream(rng_seed, "selection"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundledLabels {
    /// Attire-based religion predictions.
    Attire,
    Vanilla,
}

/// Images (or labels) an `evaluate` run reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    Images(PathBuf),
    Manifest(PathBuf),
    Predictions(PathBuf),
    Bundled(BundledLabels),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvaluateInputs {
    source: EvalSource,
    gold: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolInputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strategy: Option<StrategyChoice>,
    pool: Vec<CotRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub final_record: FinalRecord,
    pub summary: Option<RunSummary>,
    pub agreement: Vec<AgreementReport>,
}

fn header(
    command: &str,
    settings: &Settings,
    backends: &Backends,
    profession: Option<&str>,
    inputs: serde_json::Value,
    created_at: &str,
) -> ManifestHeader {
    let (sim_profile, remote) = match &settings.backend {
        BackendSpec::Sim(p) => (Some(p.clone()), None),
        BackendSpec::Remote(r) => (None, Some(r.clone())),
    };
    let mut h = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        run_id: String::new(),
        command: command.into(),
        created_at: String::new(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: settings.config.clone(),
        schema: settings.schema.clone(),
        schema_digest: settings.schema.digest(),
        areas: settings.areas.clone(),
        backend_kind: settings.kind(),
        backend: backends.identity(),
        sim_profile,
        remote,
        profession: profession.map(str::to_string),
        inputs,
    };
    let digest = Sha256::digest(serde_json::to_vec(&h).expect("headers serialize"));
    let short = &hex::encode(digest)[..8];
    h.run_id = match profession.map(slug).filter(|s| !s.is_empty()) {
        Some(s) => format!("{command}-{s}-{short}"),
        None => format!("{command}-{short}"),
    };
    h.created_at = created_at.into();
    h
}

/// Manifest writer that flushes pending call records before each record.
struct Recorder {
    writer: ManifestWriter,
    calls: CallLog,
}

impl Recorder {
    fn append(&mut self, record: ManifestRecord) -> Result<(), RunError> {
        for call in self.calls.drain() {
            self.writer.append(&ManifestRecord::Call(call))?;
        }
        self.writer.append(&record)?;
        Ok(())
    }
}

/// Creates the run directory, writes the header and runs `body`. A failing
/// body still gets a `final` record with status `error`.
fn execute(
    ws: &Workspace,
    header: ManifestHeader,
    backends: Backends,
    schema: &AttributeSchema,
    body: impl FnOnce(&mut Recorder, &Backends) -> Result<(FinalRecord, Vec<AgreementReport>), RunError>,
) -> Result<RunOutcome, RunError> {
    let run_id = header.run_id.clone();
    let run_dir = ws.run_dir(&run_id);
    if run_dir.exists() {
        if !ws.overwrite {
            return Err(RunError::Exists(run_dir));
        }
        fs::remove_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    }
    let backends = backends.with_store(ImageStore::open(run_dir.join("images"))?);
    let manifest = run_dir.join(MANIFEST_FILE);
    let mut rec = Recorder {
        writer: ManifestWriter::create(&manifest)?,
        calls: backends.calls().clone(),
    };
    rec.append(ManifestRecord::Header(header))?;
    let (final_record, agreement) = match body(&mut rec, &backends) {
        Ok(done) => done,
        Err(e) => {
            let failed = FinalRecord {
                status: "error".into(),
                decision: None,
                selected_iteration: None,
                snapshot: None,
                pool_record_id: None,
                error: Some(e.to_string()),
            };
            let _ = rec.append(ManifestRecord::Final(failed));
            return Err(e);
        }
    };
    rec.append(ManifestRecord::Final(final_record.clone()))?;

    let records = read_manifest(&manifest)?;
    let summary = summarize_manifest(&records);
    let attributes: Vec<String> = schema.attribute_names().map(str::to_string).collect();
    let reports = run_dir.join("reports");
    fs::create_dir_all(&reports).map_err(io_err(&reports))?;
    for format in ReportFormat::ALL {
        let rows: Vec<RunSummary> = summary.iter().cloned().collect();
        write_file(
            &reports.join(format!("summary.{}", format.extension())),
            &render_runs(&rows, &attributes, format),
        )?;
        if !agreement.is_empty() {
            write_file(
                &reports.join(format!("agreement.{}", format.extension())),
                &render_agreement(&agreement, format),
            )?;
        }
    }
    Ok(RunOutcome {
        run_id,
        run_dir,
        manifest,
        final_record,
        summary,
        agreement,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn require_profession(profession: &str) -> Result<(), RunError> {
    if profession.trim().is_empty() {
        return Err(RunError::Usage("profession must not be empty".into()));
    }
    Ok(())
}

/// Rejects an empty t0 CoT and converts pipeline errors.
struct CheckedDriver<'a>(CotGenDriver<'a>);

impl RefinementDriver for CheckedDriver<'_> {
    type Error = RunError;

    fn initial_cot(&mut self) -> Result<String, RunError> {
        let cot = self.0.initial_cot()?;
        if cot.trim().is_empty() {
            return Err(RunError::Convergence(
                "the reasoner returned an empty initial chain of thought".into(),
            ));
        }
        Ok(cot)
    }

    fn evaluate(&mut self, t: u32, cot: &str) -> Result<Evaluation, RunError> {
        Ok(self.0.evaluate(t, cot)?)
    }

    fn rethink(&mut self, t: u32) -> Result<String, RunError> {
        Ok(self.0.rethink(t)?)
    }
}

/// CoT generation: refine for `profession`, archive the selected CoT.
pub fn run_cot_gen(
    settings: &Settings,
    ws: &Workspace,
    profession: &str,
) -> Result<RunOutcome, RunError> {
    require_profession(profession)?;
    settings.validate()?;
    let pool = DemonstrationPool::open(&ws.pool_path)?;
    cot_gen_with_pool(settings, ws, profession, pool)
}

fn cot_gen_with_pool(
    settings: &Settings,
    ws: &Workspace,
    profession: &str,
    mut pool: DemonstrationPool,
) -> Result<RunOutcome, RunError> {
    let calls = CallLog::default();
    let backends = settings.backends(&calls)?;
    if !backends.has_reasoner() {
        return Err(BackendError::Capability("reasoner".into()).into());
    }
    let inputs = PoolInputs {
        strategy: None,
        pool: pool.records().to_vec(),
    };
    let h = header(
        "cot-gen",
        settings,
        &backends,
        Some(profession),
        serde_json::to_value(inputs).expect("inputs serialize"),
        &ws.created_at,
    );
    let run_id = h.run_id.clone();
    let config = &settings.config;
    execute(ws, h, backends, &settings.schema, |rec, backends| {
        let evaluator = Evaluator::new(backends, &settings.schema, config)?;
        let driver = CotGenDriver::new(
            backends,
            &evaluator,
            config,
            profession,
            &run_id,
            substream(config.rng_seed, "generation"),
        );
        let mut driver = CheckedDriver(driver);
        let result = run_refinement_loop(&mut driver, config.tau, config.max_iterations, |r| {
            rec.append(ManifestRecord::Iteration(r.clone()))
        })?;
        let draft = CotDraft::from_result(&result, profession, &settings.areas, &run_id, &ws.created_at);
        let archived = pool.archive(draft)?;
        let chosen = result.selected_record();
        Ok((
            FinalRecord {
                status: "ok".into(),
                decision: Some(result.terminal_decision()),
                selected_iteration: Some(chosen.index),
                snapshot: Some(chosen.snapshot.clone()),
                pool_record_id: Some(archived.id),
                error: None,
            },
            Vec::new(),
        ))
    })
}

/// Inference: select and adapt a pooled CoT, generate and evaluate.
pub fn run_infer(
    settings: &Settings,
    ws: &Workspace,
    profession: &str,
    strategy: StrategyChoice,
) -> Result<RunOutcome, RunError> {
    require_profession(profession)?;
    settings.validate()?;
    let pool = DemonstrationPool::open(&ws.pool_path)?;
    infer_with_pool(settings, ws, profession, strategy, pool)
}

fn infer_with_pool(
    settings: &Settings,
    ws: &Workspace,
    profession: &str,
    strategy: StrategyChoice,
    pool: DemonstrationPool,
) -> Result<RunOutcome, RunError> {
    let calls = CallLog::default();
    let backends = settings.backends(&calls)?;
    if strategy == StrategyChoice::Cosine && !backends.has_text_embedder() {
        return Err(PoolError::NoEmbedder.into());
    }
    if !backends.has_reasoner() {
        return Err(BackendError::Capability("reasoner".into()).into());
    }
    if pool.is_empty() {
        return Err(PoolError::Empty.into());
    }
    let inputs = PoolInputs {
        strategy: Some(strategy),
        pool: pool.records().to_vec(),
    };
    let h = header(
        "infer",
        settings,
        &backends,
        Some(profession),
        serde_json::to_value(inputs).expect("inputs serialize"),
        &ws.created_at,
    );
    let run_id = h.run_id.clone();
    let config = &settings.config;
    execute(ws, h, backends, &settings.schema, |rec, backends| {
        let resolved = strategy.resolve(config.rng_seed);
        let selection = pool.select(profession, resolved, &settings.areas, Some(backends))?;
        let record = selection.record.clone();
        rec.append(ManifestRecord::Selection(SelectionRecord {
            strategy: serde_json::to_value(strategy)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            method: selection.method.clone(),
            record_id: record.id.clone(),
            source_profession: record.profession.clone(),
            seed: match resolved {
                SelectionStrategy::Random { seed } => Some(seed),
                _ => None,
            },
        }))?;
        let adaptation = adapt(&record, profession, config.n_prompts as usize, backends)?;
        for w in &adaptation.warnings {
            rec.append(ManifestRecord::Warning { message: w.clone() })?;
        }
        rec.append(ManifestRecord::Adaptation(adaptation.clone()))?;

        let evaluator = Evaluator::new(backends, &settings.schema, config)?;
        let requests = generation_requests(
            &adaptation.prompts,
            Some(&adaptation.cot_text),
            config.images_per_prompt,
            substream(config.rng_seed, "generation"),
            &format!("{run_id}/infer"),
        );
        let (images, prompts, result) = generate_and_evaluate(backends, &evaluator, &requests)?;
        let snapshot = result.snapshot();
        rec.append(ManifestRecord::Evaluation(EvaluationRecord {
            prompts,
            images,
            result,
        }))?;
        Ok((
            FinalRecord {
                status: "ok".into(),
                decision: None,
                selected_iteration: None,
                snapshot,
                pool_record_id: Some(record.id),
                error: None,
            },
            Vec::new(),
        ))
    })
}

fn bundled_labels(which: BundledLabels) -> Result<(Vec<LabelRow>, Vec<LabelRow>), RunError> {
    use analysis::fixtures;
    let preds = match which {
        BundledLabels::Attire => fixtures::OURS,
        BundledLabels::Vanilla => fixtures::VANILLA,
    };
    Ok((
        analysis::parse_labels(preds, "bundled predictions")?,
        analysis::parse_labels(fixtures::GOLD, "bundled gold labels")?,
    ))
}

/// Images and prompts recorded in a finished manifest: the evaluation
/// batch, or the selected refinement iteration.
fn items_from_manifest(path: &Path) -> Result<Vec<EvalItem>, RunError> {
    let records = read_manifest(path)?;
    if header_of(&records).is_none() {
        return Err(ManifestError::MissingHeader(path.to_path_buf()).into());
    }
    let evaluation = records.iter().rev().find_map(|r| match r {
        ManifestRecord::Evaluation(e) => Some(e),
        _ => None,
    });
    if let Some(e) = evaluation {
        return Ok(e
            .images
            .iter()
            .enumerate()
            .map(|(i, image)| EvalItem {
                image: image.clone(),
                prompt: e.prompts.get(i).cloned(),
            })
            .collect());
    }
    let selected = records.iter().rev().find_map(|r| match r {
        ManifestRecord::Final(f) => f.selected_iteration,
        _ => None,
    });
    let iteration = records.iter().find_map(|r| match r {
        ManifestRecord::Iteration(it) if Some(it.index) == selected => Some(it),
        _ => None,
    });
    let it = iteration.ok_or_else(|| {
        RunError::Usage(format!("{} records no evaluated images", path.display()))
    })?;
    let per_prompt = (it.images.len() / it.prompts.len().max(1)).max(1);
    Ok(it
        .images
        .iter()
        .enumerate()
        .map(|(i, image)| EvalItem {
            image: image.clone(),
            prompt: it.prompts.get(i / per_prompt).cloned(),
        })
        .collect())
}

fn prediction_rows(result: &crate::pipeline::BatchResult) -> Vec<LabelRow> {
    let mut rows = Vec::new();
    for p in &result.predictions {
        if let Some(profile) = p.profiles.first() {
            for (attribute, prediction) in &profile.predictions {
                rows.push(LabelRow {
                    image_id: p.image_id.clone(),
                    attribute: attribute.clone(),
                    category: prediction.category.clone(),
                });
            }
        }
    }
    rows
}

/// Evaluation of existing images or labels, with agreement against gold
/// labels when available.
pub fn run_evaluate(
    settings: &Settings,
    ws: &Workspace,
    source: EvalSource,
    gold: Option<&Path>,
) -> Result<RunOutcome, RunError> {
    settings.validate()?;
    if gold.is_some() && settings.config.multiface {
        return Err(RunError::Usage(
            "gold labels are per image; they cannot be combined with multiface evaluation".into(),
        ));
    }
    if matches!(source, EvalSource::Predictions(_)) && gold.is_none() {
        return Err(RunError::Usage("--predictions needs --gold".into()));
    }
    let calls = CallLog::default();
    let backends = settings.backends(&calls)?;
    let inputs = EvaluateInputs {
        source: source.clone(),
        gold: gold.map(Path::to_path_buf),
    };
    let h = header(
        "evaluate",
        settings,
        &backends,
        None,
        serde_json::to_value(inputs).expect("inputs serialize"),
        &ws.created_at,
    );
    let categories: Vec<(String, Vec<String>)> = settings
        .schema
        .attributes
        .iter()
        .map(|a| (a.name.clone(), a.categories.clone()))
        .collect();
    let config = &settings.config;
    execute(ws, h, backends, &settings.schema, |rec, backends| {
        let gold_rows = gold.map(analysis::read_labels).transpose()?;
        let (predicted, gold_rows, snapshot) = match &source {
            EvalSource::Bundled(which) => {
                let (p, g) = bundled_labels(*which)?;
                (p, Some(gold_rows.unwrap_or(g)), None)
            }
            EvalSource::Predictions(path) => (analysis::read_labels(path)?, gold_rows, None),
            EvalSource::Images(_) | EvalSource::Manifest(_) => {
                let (store, items) = match &source {
                    EvalSource::Images(dir) => {
                        let found = ImageStore::scan_dir(dir)?;
                        let items = found
                            .into_iter()
                            .map(|(image, _)| EvalItem { image, prompt: None })
                            .collect::<Vec<_>>();
                        (ImageStore::open(dir)?, items)
                    }
                    EvalSource::Manifest(path) => {
                        let dir = path.parent().unwrap_or(Path::new(".")).join("images");
                        (ImageStore::open(dir)?, items_from_manifest(path)?)
                    }
                    _ => unreachable!(),
                };
                let reading = backends.clone().with_store(store);
                let evaluator = Evaluator::new(&reading, &settings.schema, config)?;
                let result = evaluator.evaluate(&items)?;
                let rows = prediction_rows(&result);
                let snapshot = result.snapshot();
                rec.append(ManifestRecord::Evaluation(EvaluationRecord {
                    prompts: items.iter().filter_map(|i| i.prompt.clone()).collect(),
                    images: items.iter().map(|i| i.image.clone()).collect::<Vec<ImageRef>>(),
                    result,
                }))?;
                (rows, gold_rows, snapshot)
            }
        };
        let agreement = match gold_rows {
            Some(g) => agreement_reports(&g, &predicted, &categories)?,
            None => Vec::new(),
        };
        for report in &agreement {
            for w in &report.warnings {
                rec.append(ManifestRecord::Warning { message: w.clone() })?;
            }
            rec.append(ManifestRecord::Agreement(report.clone()))?;
        }
        Ok((
            FinalRecord {
                status: "ok".into(),
                decision: None,
                selected_iteration: None,
                snapshot,
                pool_record_id: None,
                error: None,
            },
            agreement,
        ))
    })
}

#[derive(Debug, Clone)]
pub struct AnalysisOutcome {
    pub manifests: Vec<PathBuf>,
    pub runs: Vec<RunSummary>,
    pub reports: Vec<PathBuf>,
}

/// Aggregates finished runs into `<out>/reports/runs.{txt,csv,jsonl}`.
/// Manifests without final metrics are skipped.
pub fn run_analyze(
    patterns: &[String],
    out_dir: &Path,
    schema: &AttributeSchema,
) -> Result<AnalysisOutcome, RunError> {
    let mut manifests = Vec::new();
    for pattern in patterns {
        let paths = glob::glob(pattern)
            .map_err(|e| RunError::Usage(format!("invalid pattern '{pattern}': {e}")))?;
        for entry in paths {
            let path = entry.map_err(|e| RunError::Io {
                path: e.path().to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            })?;
            if path.is_dir() {
                let inner = path.join(MANIFEST_FILE);
                if inner.is_file() {
                    manifests.push(inner);
                }
            } else {
                manifests.push(path);
            }
        }
    }
    manifests.sort();
    manifests.dedup();
    let mut runs = Vec::new();
    for path in &manifests {
        if let Some(summary) = summarize_manifest(&read_manifest(path)?) {
            runs.push(summary);
        }
    }
    analysis::sort_runs(&mut runs);
    let attributes: Vec<String> = schema.attribute_names().map(str::to_string).collect();
    let dir = out_dir.join("reports");
    let mut reports = Vec::new();
    for format in ReportFormat::ALL {
        let path = dir.join(format!("runs.{}", format.extension()));
        write_file(&path, &render_runs(&runs, &attributes, format))?;
        reports.push(path);
    }
    Ok(AnalysisOutcome {
        manifests,
        runs,
        reports,
    })
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub original: PathBuf,
    pub replayed: PathBuf,
    /// Manifest lines compared (call records excluded for remote runs).
    pub lines: usize,
}

fn comparable_lines(text: &str, kind: BackendKind) -> Vec<&str> {
    text.lines()
        .filter(|l| kind == BackendKind::Sim || !l.starts_with(r#"{"kind":"call""#))
        .collect()
}

/// Re-runs the command recorded in `manifest` under `<out>/replay/` and
/// compares the new manifest with the original byte for byte. Call records
/// of remote runs carry latencies and are left out of the comparison.
pub fn run_replay(manifest: &Path, out_dir: &Path) -> Result<ReplayOutcome, RunError> {
    let records = read_manifest(manifest)?;
    let h = header_of(&records)
        .ok_or_else(|| ManifestError::MissingHeader(manifest.to_path_buf()))?
        .clone();
    let backend = match (&h.backend_kind, &h.sim_profile, &h.remote) {
        (BackendKind::Sim, Some(p), _) => BackendSpec::Sim(p.clone()),
        (BackendKind::Remote, _, Some(r)) => BackendSpec::Remote(RemoteSettings {
            api_key: RemoteSettings::from_env().api_key,
            ..r.clone()
        }),
        _ => {
            return Err(RunError::Usage(format!(
                "{}: header does not describe its backend",
                manifest.display()
            )))
        }
    };
    let settings = Settings {
        config: h.config.clone(),
        schema: h.schema.clone(),
        areas: h.areas.clone(),
        backend,
    };
    let root = out_dir.join("replay");
    let ws = Workspace {
        pool_path: root.join("pools").join(format!("{}.jsonl", h.run_id)),
        out_dir: root,
        created_at: h.created_at.clone(),
        overwrite: true,
    };
    if ws.pool_path.exists() {
        fs::remove_file(&ws.pool_path).map_err(io_err(&ws.pool_path))?;
    }
    let seeded_pool = || -> Result<DemonstrationPool, RunError> {
        let inputs: PoolInputs = serde_json::from_value(h.inputs.clone())
            .map_err(|e| RunError::Usage(format!("unreadable run inputs: {e}")))?;
        let pool = DemonstrationPool::from_records(Some(ws.pool_path.clone()), inputs.pool);
        pool.save()?;
        Ok(pool)
    };
    let profession = h.profession.clone().unwrap_or_default();
    let outcome = match h.command.as_str() {
        "cot-gen" => cot_gen_with_pool(&settings, &ws, &profession, seeded_pool()?)?,
        "infer" => {
            let inputs: PoolInputs = serde_json::from_value(h.inputs.clone())
                .map_err(|e| RunError::Usage(format!("unreadable run inputs: {e}")))?;
            let strategy = inputs
                .strategy
                .ok_or_else(|| RunError::Usage("infer manifest records no strategy".into()))?;
            infer_with_pool(&settings, &ws, &profession, strategy, seeded_pool()?)?
        }
        "evaluate" => {
            let inputs: EvaluateInputs = serde_json::from_value(h.inputs.clone())
                .map_err(|e| RunError::Usage(format!("unreadable run inputs: {e}")))?;
            run_evaluate(&settings, &ws, inputs.source, inputs.gold.as_deref())?
        }
        other => return Err(RunError::Usage(format!("cannot replay command '{other}'"))),
    };
    let original = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let replayed = fs::read_to_string(&outcome.manifest).map_err(io_err(&outcome.manifest))?;
    let a = comparable_lines(&original, h.backend_kind);
    let b = comparable_lines(&replayed, h.backend_kind);
    if let Some(i) = (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i)) {
        return Err(RunError::ReplayMismatch {
            path: manifest.to_path_buf(),
            line: i + 1,
        });
    }
    if h.backend_kind == BackendKind::Sim && !original.ends_with('\n') {
        return Err(RunError::ReplayMismatch {
            path: manifest.to_path_buf(),
            line: a.len(),
        });
    }
    Ok(ReplayOutcome {
        original: manifest.to_path_buf(),
        replayed: outcome.manifest,
        lines: a.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Police Officer"), "police-officer");
        assert_eq!(slug("  Nurse!"), "nurse");
        assert_eq!(slug("AI/ML engineer"), "ai-ml-engineer");
    }

    #[test]
    fn source_date_epoch_pins_the_timestamp() {
        // the only test in this crate touching the variable
        std::env::set_var("SOURCE_DATE_EPOCH", "86400");
        assert_eq!(timestamp_now(), "1970-01-02T00:00:00Z");
        std::env::remove_var("SOURCE_DATE_EPOCH");
    }

    #[test]
    fn exit_codes_are_distinct_per_failure_class() {
        assert_eq!(RunError::Usage("x".into()).exit_code(), exit::USAGE);
        assert_eq!(
            RunError::Backend(BackendError::Capability("reasoner".into())).exit_code(),
            exit::CAPABILITY
        );
        assert_eq!(
            RunError::Pool(PoolError::NoEmbedder).exit_code(),
            exit::CAPABILITY
        );
        assert_eq!(
            RunError::Backend(BackendError::Transient {
                port: "p".into(),
                message: "m".into()
            })
            .exit_code(),
            exit::BACKEND
        );
        assert_eq!(
            RunError::Convergence("x".into()).exit_code(),
            exit::CONVERGENCE
        );
    }
}
