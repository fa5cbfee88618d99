//! Brute-force oracles and fixtures shared by the integration tests. Nothing
//! here calls into the library code it checks.
#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use faircot_core::embedding::EmbeddingVector;
use faircot_core::metrics::MetricSnapshot;
use faircot_core::refine::{Evaluation, RefinementDriver};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// H′(18, 2) from `tests/oracles/entropy_oracle.py` at 50 digits.
pub const ENTROPY_18_2: f64 = 0.468_995_593_589_281_2;

/// Runs the committed mpmath oracle; `None` when python or mpmath is missing.
pub fn python_entropy(counts: &[u64]) -> Option<f64> {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/oracles/entropy_oracle.py");
    let out = Command::new("python3")
        .arg(script)
        .args(counts.iter().map(u64::to_string))
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    String::from_utf8(out.stdout).ok()?.trim().parse().ok()
}

/// Textbook −Σ p ln p / ln k.
pub fn entropy_oracle(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h / (counts.len() as f64).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    EmbeddingVector::normalize(v).unwrap()
}

pub fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<EmbeddingVector> {
    (0..n).map(|_| random_unit(rng, dim)).collect()
}

fn rbf(a: &[f64], b: &[f64], bw: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / (2.0 * bw * bw)).exp()
}

fn cubic(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / a.len() as f64 + 1.0).powi(3)
}

/// Direct O(n²) unbiased MMD² from the definition.
pub fn brute_mmd2(
    x: &[EmbeddingVector],
    y: &[EmbeddingVector],
    k: impl Fn(&[f64], &[f64]) -> f64,
) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                xx += k(x[i].as_slice(), x[j].as_slice());
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                yy += k(y[i].as_slice(), y[j].as_slice());
            }
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a.as_slice(), b.as_slice());
        }
    }
    xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (m * n)
}

pub fn brute_mmd2_rbf(x: &[EmbeddingVector], y: &[EmbeddingVector], bw: f64) -> f64 {
    brute_mmd2(x, y, |a, b| rbf(a, b, bw))
}

pub fn brute_kid(x: &[EmbeddingVector], y: &[EmbeddingVector]) -> f64 {
    brute_mmd2(x, y, cubic)
}

/// Category with the largest per-category best prompt score; scanning in
/// order with strict `>` makes the first category win ties.
pub fn brute_classify(
    image: &[f64],
    categories: &[(String, Vec<Vec<f64>>)],
) -> String {
    let mut best: Option<(&str, f64)> = None;
    for (name, prompts) in categories {
        let score = prompts
            .iter()
            .map(|p| dot(image, p))
            .fold(f64::NEG_INFINITY, f64::max);
        if best.is_none() || score > best.unwrap().1 {
            best = Some((name, score));
        }
    }
    best.unwrap().0.to_string()
}

pub fn snapshot(fairness: f64, clip_t: f64) -> MetricSnapshot {
    let mut e = IndexMap::new();
    e.insert("gender".to_string(), fairness);
    MetricSnapshot {
        per_attribute_entropy: e,
        clip_t,
        fairness_score: fairness,
    }
}

/// Plays back fixed (fairness, CLIP-T) pairs; CoT `t` is "cot-t".
pub struct ScriptedDriver {
    pub trajectory: Vec<(f64, f64)>,
    pub rethinks: u32,
}

impl ScriptedDriver {
    pub fn new(trajectory: &[(f64, f64)]) -> Self {
        Self {
            trajectory: trajectory.to_vec(),
            rethinks: 0,
        }
    }
}

impl RefinementDriver for ScriptedDriver {
    type Error = String;

    fn initial_cot(&mut self) -> Result<String, String> {
        Ok("cot-0".into())
    }

    fn evaluate(&mut self, t: u32, _cot: &str) -> Result<Evaluation, String> {
        let (f, c) = *self
            .trajectory
            .get(t as usize)
            .ok_or_else(|| format!("no scripted value for t{t}"))?;
        Ok(Evaluation {
            prompts: vec![format!("p{t}")],
            images: Vec::new(),
            counts: IndexMap::new(),
            snapshot: snapshot(f, c),
        })
    }

    fn rethink(&mut self, t: u32) -> Result<String, String> {
        self.rethinks += 1;
        Ok(format!("cot-{}", t + 1))
    }
}
