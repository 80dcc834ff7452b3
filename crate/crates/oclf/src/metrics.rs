//! Evaluation metrics: confusion matrices with REAL as the positive
//! class, macro-averaged precision/recall/F, occlusion statistics, and
//! weight sweeps over recorded pipeline results.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::datasets::DatasetManifest;
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, FusionResult};
use crate::types::{BinaryLabel, PatchKey, PatchWeights, Split};

/// Binary confusion counts laid out with the positive class (REAL)
/// first: `[[TP, FN], [FP, TN]]`. Rows are the true class, columns the
/// predicted class. This display layout is independent of the training
/// class indices (fake = 0, real = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        ConfusionMatrix {
            counts: [[tp, fn_], [fp, tn]],
        }
    }

    /// REAL faces called REAL.
    pub fn true_positives(&self) -> u64 {
        self.counts[0][0]
    }

    /// REAL faces called FAKE.
    pub fn false_negatives(&self) -> u64 {
        self.counts[0][1]
    }

    /// FAKE faces called REAL.
    pub fn false_positives(&self) -> u64 {
        self.counts[1][0]
    }

    /// FAKE faces called FAKE.
    pub fn true_negatives(&self) -> u64 {
        self.counts[1][1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Add one (truth, prediction) observation.
    pub fn record(&mut self, truth: BinaryLabel, pred: BinaryLabel) {
        let row = if truth == BinaryLabel::Real { 0 } else { 1 };
        let col = if pred == BinaryLabel::Real { 0 } else { 1 };
        self.counts[row][col] += 1;
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "              pred real   pred fake")?;
        writeln!(
            f,
            "  true real  {:>10}  {:>10}",
            self.counts[0][0], self.counts[0][1]
        )?;
        write!(
            f,
            "  true fake  {:>10}  {:>10}",
            self.counts[1][0], self.counts[1][1]
        )
    }
}

/// Build a confusion matrix from parallel truth/prediction slices.
pub fn confusion_from_predictions(
    truth: &[BinaryLabel],
    pred: &[BinaryLabel],
) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidInput(format!(
            "{} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("no predictions to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        cm.record(t, p);
    }
    Ok(cm)
}

/// Precision, recall, and F-score for one class. Fractions in [0, 1];
/// any zero denominator yields 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Full metric set for a binary evaluation. Macro values are the
/// unweighted mean of the two per-class values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// Mean of the two per-class F-scores. Note that computing an
    /// F-score from the macro precision and macro recall instead gives
    /// a different number; published tables are not always explicit
    /// about which convention they use.
    pub macro_f: f64,
    pub real: ClassMetrics,
    pub fake: ClassMetrics,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Derive the full metric set from confusion counts.
pub fn metrics_from_confusion(cm: ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let (tp, fn_, fp, tn) = (
        cm.true_positives(),
        cm.false_negatives(),
        cm.false_positives(),
        cm.true_negatives(),
    );
    let real = ClassMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f_score: f_score(ratio(tp, tp + fp), ratio(tp, tp + fn_)),
    };
    let fake = ClassMetrics {
        precision: ratio(tn, tn + fn_),
        recall: ratio(tn, tn + fp),
        f_score: f_score(ratio(tn, tn + fn_), ratio(tn, tn + fp)),
    };
    Ok(Metrics {
        accuracy: ratio(tp + tn, cm.total()),
        macro_precision: (real.precision + fake.precision) / 2.0,
        macro_recall: (real.recall + fake.recall) / 2.0,
        macro_f: (real.f_score + fake.f_score) / 2.0,
        real,
        fake,
        confusion: cm,
    })
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "accuracy {:.2}%  precision {:.2}%  recall {:.2}%  F {:.2}%",
            self.accuracy * 100.0,
            self.macro_precision * 100.0,
            self.macro_recall * 100.0,
            self.macro_f * 100.0
        )
    }
}

/// Fraction of records whose face is occluded, over one split or the
/// whole manifest. A record counts as occluded when its `occluded`
/// flag is true, or — with no flag — when it carries a mask path.
pub fn occlusion_ratio(manifest: &DatasetManifest, split: Option<Split>) -> Result<f64> {
    let mut total = 0u64;
    let mut occluded = 0u64;
    for rec in &manifest.records {
        if let Some(s) = split {
            if rec.split != s {
                continue;
            }
        }
        total += 1;
        let is_occluded = match rec.occluded {
            Some(flag) => flag,
            None => rec.occlusion_mask.is_some(),
        };
        if is_occluded {
            occluded += 1;
        }
    }
    if total == 0 {
        return Err(Error::DegenerateDataset(match split {
            Some(s) => format!("no records in split {s:?}"),
            None => "empty manifest".into(),
        }));
    }
    Ok(occluded as f64 / total as f64)
}

/// Which decision to score from recorded pipeline results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSelector {
    WholeFace,
    PatchVote,
    Concat,
    Fused,
}

/// Score one decision path over recorded results. Records without
/// ground truth are skipped; for the whole-face path, records where
/// the early exit skipped that pass are skipped too.
pub fn metrics_for_path(results: &[FusionResult], path: PathSelector) -> Result<Metrics> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for r in results {
        let Some(t) = r.truth else { continue };
        let p = match path {
            PathSelector::WholeFace => match &r.whole_face {
                Some(d) => d.label,
                None => continue,
            },
            PathSelector::PatchVote => r.patch_vote.label,
            PathSelector::Concat => r.concat.label,
            PathSelector::Fused => r.fused,
        };
        truth.push(t);
        pred.push(p);
    }
    if truth.is_empty() {
        return Err(Error::DegenerateDataset(format!(
            "no scorable records for {path:?}"
        )));
    }
    metrics_from_confusion(confusion_from_predictions(&truth, &pred)?)
}

/// Correct/total counts for one patch position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PatchAccuracy {
    pub correct: u64,
    pub total: u64,
}

impl PatchAccuracy {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.total)
    }
}

/// Per-patch accuracy of the individual patch classifiers, keyed by
/// the patch's display name.
pub fn per_patch_accuracy(results: &[FusionResult]) -> Result<BTreeMap<String, PatchAccuracy>> {
    let mut map: BTreeMap<String, PatchAccuracy> = BTreeMap::new();
    let mut scored_any = false;
    for r in results {
        let Some(t) = r.truth else { continue };
        for pd in &r.per_patch {
            let entry = map.entry(pd.patch.clone()).or_default();
            entry.total += 1;
            if pd.label == t {
                entry.correct += 1;
            }
            scored_any = true;
        }
    }
    if !scored_any {
        return Err(Error::DegenerateDataset(
            "no per-patch decisions with ground truth".into(),
        ));
    }
    Ok(map)
}

/// One weight configuration's score in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub weights: PatchWeights,
    pub metrics: Metrics,
}

/// Re-vote recorded per-patch decisions under each candidate weight
/// configuration and score the resulting labels. Entries come back
/// sorted by accuracy, best first; ties keep candidate order.
pub fn weight_sweep(
    results: &[FusionResult],
    candidates: &[PatchWeights],
    tie_fallback: BinaryLabel,
) -> Result<Vec<SweepEntry>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no weight candidates".into()));
    }
    // Parse patch keys once.
    let mut parsed: Vec<(BinaryLabel, Vec<(PatchKey, BinaryLabel)>)> = Vec::new();
    for r in results {
        let Some(t) = r.truth else { continue };
        let votes = r
            .per_patch
            .iter()
            .map(|pd| {
                PatchKey::parse(&pd.patch)
                    .map(|k| (k, pd.label))
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("unknown patch key {:?}", pd.patch))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        if !votes.is_empty() {
            parsed.push((t, votes));
        }
    }
    if parsed.is_empty() {
        return Err(Error::DegenerateDataset(
            "no per-patch decisions with ground truth".into(),
        ));
    }
    let mut entries = Vec::with_capacity(candidates.len());
    for weights in candidates {
        let mut cm = ConfusionMatrix::default();
        for (truth, votes) in &parsed {
            let outcome = majority_vote(votes, weights, tie_fallback)?;
            cm.record(*truth, outcome.label);
        }
        entries.push(SweepEntry {
            weights: weights.clone(),
            metrics: metrics_from_confusion(cm)?,
        });
    }
    entries.sort_by(|a, b| {
        b.metrics
            .accuracy
            .partial_cmp(&a.metrics.accuracy)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(entries)
}

/// A small default candidate grid: uniform weights, then each named
/// patch upweighted to 2 and to 3.
pub fn default_weight_candidates() -> Vec<PatchWeights> {
    use crate::types::PatchName;
    let mut out = vec![PatchWeights::uniform()];
    for w in [2u32, 3] {
        for name in PatchName::ALL {
            out.push(PatchWeights::uniform().with(name, w).expect("w >= 1"));
        }
    }
    out
}
