//! The refinement loop: generate with the current CoT, measure, and ask the
//! reasoner to think again while fairness strictly improves and alignment
//! stays strictly above `τ · CLIP-T(t0)`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backends::ImageRef;
use crate::metrics::{CategoricalDistribution, MetricSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Refined,
    StoppedNoImprovement,
    StoppedAlignment,
    StoppedMaxIter,
    /// The reasoner answered the refine request with an empty CoT.
    StoppedEmptyCot,
}

impl Decision {
    pub fn is_terminal(self) -> bool {
        self != Decision::Refined
    }
}

/// Outcome of the continuation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Continue,
    NoImprovement,
    Alignment,
}

impl Verdict {
    pub fn proceed(self) -> bool {
        self == Verdict::Continue
    }
}

/// `curr.fairness > prev.fairness && curr.clip_t > tau · baseline`, both
/// strict. Fairness is tested first, so a run failing both reports
/// [`Verdict::NoImprovement`].
// Negated comparisons so a NaN metric stops the loop.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn should_continue(
    curr: &MetricSnapshot,
    prev: &MetricSnapshot,
    baseline_clip_t: f64,
    tau: f64,
) -> Verdict {
    if !(curr.fairness_score > prev.fairness_score) {
        Verdict::NoImprovement
    } else if !(curr.clip_t > tau * baseline_clip_t) {
        Verdict::Alignment
    } else {
        Verdict::Continue
    }
}

/// What one iteration produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub prompts: Vec<String>,
    pub images: Vec<ImageRef>,
    pub counts: IndexMap<String, CategoricalDistribution>,
    pub snapshot: MetricSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub cot_text: String,
    pub prompts: Vec<String>,
    pub images: Vec<ImageRef>,
    pub counts: IndexMap<String, CategoricalDistribution>,
    pub snapshot: MetricSnapshot,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub iterations: Vec<IterationRecord>,
    /// Index into `iterations` of the chosen CoT.
    pub selected: usize,
    pub baseline: MetricSnapshot,
}

impl RefinementResult {
    pub fn selected_record(&self) -> &IterationRecord {
        &self.iterations[self.selected]
    }

    pub fn terminal_decision(&self) -> Decision {
        self.iterations
            .last()
            .map(|r| r.decision)
            .unwrap_or(Decision::StoppedMaxIter)
    }
}

/// Supplies CoTs and measurements to [`run_refinement_loop`].
pub trait RefinementDriver {
    type Error;

    /// CoT for t0.
    fn initial_cot(&mut self) -> Result<String, Self::Error>;
    /// Generates and measures images for iteration `t`.
    fn evaluate(&mut self, t: u32, cot: &str) -> Result<Evaluation, Self::Error>;
    /// Sends the refine prompt after iteration `t` and returns CoT for `t + 1`.
    fn rethink(&mut self, t: u32) -> Result<String, Self::Error>;
}

/// Highest fairness among iterations whose CLIP-T is at least
/// `tau · baseline`; ties go to the earliest. t0 is always admissible.
pub fn select_iteration(records: &[IterationRecord], tau: f64) -> usize {
    let Some(first) = records.first() else {
        return 0;
    };
    let floor = tau * first.snapshot.clip_t;
    let mut best = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        if r.snapshot.clip_t >= floor && r.snapshot.fairness_score > records[best].snapshot.fairness_score {
            best = i;
        }
    }
    best
}

/// Runs iterations t0, t1, ... up to `max_iterations` refinements. Each record
/// is passed to `on_record` before the next iteration starts, so a crash
/// leaves every finished iteration persisted.
pub fn run_refinement_loop<D, F>(
    driver: &mut D,
    tau: f64,
    max_iterations: u32,
    mut on_record: F,
) -> Result<RefinementResult, D::Error>
where
    D: RefinementDriver,
    F: FnMut(&IterationRecord) -> Result<(), D::Error>,
{
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut cot = driver.initial_cot()?;
    let mut t = 0u32;
    loop {
        let eval = driver.evaluate(t, &cot)?;
        let verdict = match records.last() {
            None => Verdict::Continue,
            Some(prev) => should_continue(
                &eval.snapshot,
                &prev.snapshot,
                records[0].snapshot.clip_t,
                tau,
            ),
        };
        let mut next = None;
        let decision = match verdict {
            Verdict::NoImprovement => Decision::StoppedNoImprovement,
            Verdict::Alignment => Decision::StoppedAlignment,
            Verdict::Continue if t >= max_iterations => Decision::StoppedMaxIter,
            Verdict::Continue => {
                let text = driver.rethink(t)?;
                if text.trim().is_empty() {
                    Decision::StoppedEmptyCot
                } else {
                    next = Some(text);
                    Decision::Refined
                }
            }
        };
        let record = IterationRecord {
            index: t,
            cot_text: std::mem::take(&mut cot),
            prompts: eval.prompts,
            images: eval.images,
            counts: eval.counts,
            snapshot: eval.snapshot,
            decision,
        };
        on_record(&record)?;
        records.push(record);
        match next {
            Some(text) => {
                cot = text;
                t += 1;
            }
            None => break,
        }
    }
    let selected = select_iteration(&records, tau);
    let baseline = records[0].snapshot.clone();
    Ok(RefinementResult {
        iterations: records,
        selected,
        baseline,
    })
}
