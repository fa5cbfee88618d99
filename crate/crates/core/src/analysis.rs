//! Agreement with gold labels, confusion matrices and report rendering.
//!
//! Label files are CSV with the header `image_id,attribute,category`.
//! Reports come in three formats: an aligned text table (values to two
//! decimals), CSV with full-precision values, and JSON Lines that reload to
//! the exact in-memory values.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{header_of, ManifestRecord};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0} predictions but {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("label '{0}' is not one of the declared categories")]
    UnknownLabel(String),
    #[error("gold label for image '{image_id}' ({attribute}) has no matching prediction")]
    UnknownImage { image_id: String, attribute: String },
    #[error("duplicate {which} label for image '{image_id}' ({attribute})")]
    Duplicate {
        which: &'static str,
        image_id: String,
        attribute: String,
    },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("invalid report line {line}: {message}")]
    Report { line: usize, message: String },
}

/// Counts indexed `[gold][predicted]` over an ordered category list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts<S: AsRef<str>>(categories: &[S], counts: Vec<Vec<u64>>) -> Self {
        assert_eq!(counts.len(), categories.len(), "square matrix");
        assert!(counts.iter().all(|r| r.len() == categories.len()), "square matrix");
        Self {
            categories: categories.iter().map(|c| c.as_ref().to_string()).collect(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }
}

pub fn confusion<S: AsRef<str>>(
    predicted: &[S],
    gold: &[S],
    categories: &[S],
) -> Result<ConfusionMatrix, AnalysisError> {
    if predicted.len() != gold.len() {
        return Err(AnalysisError::LengthMismatch(predicted.len(), gold.len()));
    }
    let index: HashMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_ref(), i))
        .collect();
    let lookup = |label: &S| {
        index
            .get(label.as_ref())
            .copied()
            .ok_or_else(|| AnalysisError::UnknownLabel(label.as_ref().to_string()))
    };
    let k = categories.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (p, g) in predicted.iter().zip(gold) {
        counts[lookup(g)?][lookup(p)?] += 1;
    }
    Ok(ConfusionMatrix::from_counts(categories, counts))
}

/// `100 · trace / total`; `None` for an empty matrix.
pub fn overall_agreement(cm: &ConfusionMatrix) -> Option<f64> {
    let total = cm.total();
    (total > 0).then(|| 100.0 * cm.trace() as f64 / total as f64)
}

/// `100 · diag / row total` per gold class; `None` for classes with no gold
/// samples.
pub fn per_class_agreement(cm: &ConfusionMatrix) -> IndexMap<String, Option<f64>> {
    cm.categories
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let row = cm.row_total(i);
            let value = (row > 0).then(|| 100.0 * cm.counts[i][i] as f64 / row as f64);
            (c.clone(), value)
        })
        .collect()
}

pub fn misclassification(cm: &ConfusionMatrix) -> IndexMap<String, Option<f64>> {
    per_class_agreement(cm)
        .into_iter()
        .map(|(c, a)| (c, a.map(|a| 100.0 - a)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_id: String,
    pub attribute: String,
    pub category: String,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnalysisError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_labels(&text, &path.display().to_string())
}

pub fn parse_labels(text: &str, source: &str) -> Result<Vec<LabelRow>, AnalysisError> {
    let err = |message: String| AnalysisError::Csv {
        path: source.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "attribute", "category"] {
        return Err(err(format!(
            "expected header 'image_id,attribute,category', found '{}'",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(|e| err(e.to_string())))
        .collect()
}

pub fn write_labels(rows: &[LabelRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).expect("in-memory csv");
    }
    String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf-8 input")
}

/// Pairs gold and predicted labels for one attribute, in gold order. Every
/// gold image must have a prediction; predictions without gold are ignored.
pub fn join_labels(
    gold: &[LabelRow],
    predicted: &[LabelRow],
    attribute: &str,
) -> Result<(Vec<String>, Vec<String>), AnalysisError> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for row in predicted.iter().filter(|r| r.attribute == attribute) {
        if by_id.insert(&row.image_id, &row.category).is_some() {
            return Err(AnalysisError::Duplicate {
                which: "predicted",
                image_id: row.image_id.clone(),
                attribute: attribute.into(),
            });
        }
    }
    let mut seen = HashSet::new();
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for row in gold.iter().filter(|r| r.attribute == attribute) {
        if !seen.insert(row.image_id.as_str()) {
            return Err(AnalysisError::Duplicate {
                which: "gold",
                image_id: row.image_id.clone(),
                attribute: attribute.into(),
            });
        }
        let p = by_id
            .get(row.image_id.as_str())
            .ok_or_else(|| AnalysisError::UnknownImage {
                image_id: row.image_id.clone(),
                attribute: attribute.into(),
            })?;
        preds.push(p.to_string());
        golds.push(row.category.clone());
    }
    Ok((preds, golds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub attribute: String,
    pub matrix: ConfusionMatrix,
    pub total: u64,
    pub overall: Option<f64>,
    pub per_class: IndexMap<String, Option<f64>>,
    pub misclassification: IndexMap<String, Option<f64>>,
    pub warnings: Vec<String>,
}

impl AgreementReport {
    pub fn from_matrix(attribute: &str, matrix: ConfusionMatrix) -> Self {
        let per_class = per_class_agreement(&matrix);
        let warnings = per_class
            .iter()
            .filter(|(_, v)| v.is_none())
            .map(|(c, _)| format!("{attribute}: class '{c}' has no gold samples; agreement undefined"))
            .collect();
        Self {
            attribute: attribute.into(),
            total: matrix.total(),
            overall: overall_agreement(&matrix),
            misclassification: misclassification(&matrix),
            per_class,
            matrix,
            warnings,
        }
    }
}

/// One report per attribute that appears in `gold`, in `attribute_order`.
pub fn agreement_reports(
    gold: &[LabelRow],
    predicted: &[LabelRow],
    attribute_order: &[(String, Vec<String>)],
) -> Result<Vec<AgreementReport>, AnalysisError> {
    let present: HashSet<&str> = gold.iter().map(|r| r.attribute.as_str()).collect();
    if let Some(unknown) = present
        .iter()
        .find(|a| !attribute_order.iter().any(|(n, _)| n == *a))
    {
        return Err(AnalysisError::UnknownLabel(format!("attribute '{unknown}'")));
    }
    let mut out = Vec::new();
    for (attribute, categories) in attribute_order {
        if !present.contains(attribute.as_str()) {
            continue;
        }
        let (preds, golds) = join_labels(gold, predicted, attribute)?;
        let cm = confusion(&preds, &golds, categories)?;
        out.push(AgreementReport::from_matrix(attribute, cm));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    TableText,
    DelimitedValues,
    StructuredRecords,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::TableText => "txt",
            Self::DelimitedValues => "csv",
            Self::StructuredRecords => "jsonl",
        }
    }

    pub const ALL: [ReportFormat; 3] = [
        Self::TableText,
        Self::DelimitedValues,
        Self::StructuredRecords,
    ];
}

fn fixed2(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn raw(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn align(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows.first().map_or(0, Vec::len))
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv_string(rows: &[Vec<String>]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("utf-8 input")
}

pub fn render_agreement(reports: &[AgreementReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::TableText => {
            let mut out = String::new();
            for r in reports {
                let _ = writeln!(out, "attribute: {} (n={})", r.attribute, r.total);
                let _ = writeln!(out, "overall agreement: {}%", fixed2(r.overall));
                let mut rows = vec![vec![
                    "class".to_string(),
                    "agreement".into(),
                    "misclassification".into(),
                ]];
                for (c, a) in &r.per_class {
                    rows.push(vec![c.clone(), fixed2(*a), fixed2(r.misclassification[c])]);
                }
                out.push_str(&align(&rows));
                out.push_str("confusion (rows: gold, columns: predicted)\n");
                let mut rows = vec![std::iter::once(String::new())
                    .chain(r.matrix.categories.iter().cloned())
                    .collect::<Vec<_>>()];
                for (c, counts) in r.matrix.categories.iter().zip(&r.matrix.counts) {
                    rows.push(
                        std::iter::once(c.clone())
                            .chain(counts.iter().map(u64::to_string))
                            .collect(),
                    );
                }
                out.push_str(&align(&rows));
                for w in &r.warnings {
                    let _ = writeln!(out, "warning: {w}");
                }
                out.push('\n');
            }
            out
        }
        ReportFormat::DelimitedValues => {
            let mut rows = vec![vec![
                "attribute".to_string(),
                "kind".into(),
                "gold".into(),
                "predicted".into(),
                "value".into(),
            ]];
            for r in reports {
                let row = |kind: &str, gold: &str, pred: &str, value: String| {
                    vec![r.attribute.clone(), kind.into(), gold.into(), pred.into(), value]
                };
                rows.push(row("overall_agreement", "", "", raw(r.overall)));
                for (c, a) in &r.per_class {
                    rows.push(row("agreement", c, "", raw(*a)));
                    rows.push(row("misclassification", c, "", raw(r.misclassification[c])));
                }
                for (g, counts) in r.matrix.categories.iter().zip(&r.matrix.counts) {
                    for (p, n) in r.matrix.categories.iter().zip(counts) {
                        rows.push(row("count", g, p, n.to_string()));
                    }
                }
            }
            csv_string(&rows)
        }
        ReportFormat::StructuredRecords => reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("reports serialize") + "\n")
            .collect(),
    }
}

/// One row of the run table: the metrics a run ended with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub command: String,
    pub profession: Option<String>,
    /// Iteration whose metrics are reported (CoT generation only).
    pub iteration: Option<u32>,
    pub per_attribute_entropy: IndexMap<String, f64>,
    pub fairness_score: f64,
    pub clip_t: Option<f64>,
}

/// Summary of a finished run, or `None` if the manifest has no final metrics.
pub fn summarize_manifest(records: &[ManifestRecord]) -> Option<RunSummary> {
    let header = header_of(records)?;
    let base = |entropy: IndexMap<String, f64>, fairness, clip_t, iteration| RunSummary {
        run_id: header.run_id.clone(),
        command: header.command.clone(),
        profession: header.profession.clone(),
        iteration,
        per_attribute_entropy: entropy,
        fairness_score: fairness,
        clip_t,
    };
    let final_record = records.iter().rev().find_map(|r| match r {
        ManifestRecord::Final(f) if f.status == "ok" => Some(f),
        _ => None,
    })?;
    if let Some(s) = &final_record.snapshot {
        return Some(base(
            s.per_attribute_entropy.clone(),
            s.fairness_score,
            Some(s.clip_t),
            final_record.selected_iteration,
        ));
    }
    records.iter().rev().find_map(|r| match r {
        ManifestRecord::Evaluation(e) => Some(base(
            e.result.per_attribute_entropy.clone(),
            e.result.fairness_score,
            e.result.clip_t,
            None,
        )),
        _ => None,
    })
}

/// Orders runs by profession, command, then run id.
pub fn sort_runs(runs: &mut [RunSummary]) {
    runs.sort_by(|a, b| {
        (&a.profession, &a.command, &a.run_id).cmp(&(&b.profession, &b.command, &b.run_id))
    });
}

/// Renders run summaries (sorted by profession, command, run id).
pub fn render_runs(runs: &[RunSummary], attributes: &[String], format: ReportFormat) -> String {
    let mut runs = runs.to_vec();
    sort_runs(&mut runs);
    let header: Vec<String> = ["run_id", "command", "profession"]
        .iter()
        .map(|s| s.to_string())
        .chain(attributes.iter().cloned())
        .chain(["fairness".to_string(), "clip_t".to_string()])
        .collect();
    let cells = |r: &RunSummary, fmt: fn(Option<f64>) -> String| -> Vec<String> {
        [
            r.run_id.clone(),
            r.command.clone(),
            r.profession.clone().unwrap_or_default(),
        ]
        .into_iter()
        .chain(
            attributes
                .iter()
                .map(|a| fmt(r.per_attribute_entropy.get(a).copied())),
        )
        .chain([fmt(Some(r.fairness_score)), fmt(r.clip_t)])
        .collect()
    };
    match format {
        ReportFormat::TableText => {
            let mut rows = vec![header];
            rows.extend(runs.iter().map(|r| cells(r, fixed2)));
            align(&rows)
        }
        ReportFormat::DelimitedValues => {
            let mut rows = vec![header];
            rows.extend(runs.iter().map(|r| cells(r, raw)));
            csv_string(&rows)
        }
        ReportFormat::StructuredRecords => runs
            .iter()
            .map(|r| serde_json::to_string(r).expect("summaries serialize") + "\n")
            .collect(),
    }
}

pub fn parse_runs_jsonl(text: &str) -> Result<Vec<RunSummary>, AnalysisError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AnalysisError::Report {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Gold and prediction labels reproducing the two religion confusion
/// matrices of the published agreement study (484 images, 4 classes).
pub mod fixtures {
    pub const GOLD: &str = include_str!("../fixtures/religion_gold.csv");
    pub const OURS: &str = include_str!("../fixtures/religion_pred_attire.csv");
    pub const VANILLA: &str = include_str!("../fixtures/religion_pred_vanilla.csv");

    /// Matrix order of the published tables.
    pub const CATEGORIES: [&str; 4] = ["Christianity", "Hinduism", "Islam", "Neutral"];

    pub const OURS_MATRIX: [[u64; 4]; 4] = [
        [26, 0, 0, 16],
        [1, 50, 1, 39],
        [1, 0, 57, 2],
        [36, 9, 16, 230],
    ];

    pub const VANILLA_MATRIX: [[u64; 4]; 4] = [
        [32, 3, 1, 6],
        [4, 65, 21, 1],
        [0, 0, 60, 0],
        [110, 45, 62, 74],
    ];
}
