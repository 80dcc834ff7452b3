//! Decision fusion: weighted per-patch voting, the two-of-three path
//! rule, and the end-to-end detection pipeline with an optional
//! early-exit mode that skips the whole-face forward pass when the two
//! patch-based paths already agree.

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::facepatch::{apply_occlusion, resize_bilinear, semantic_patches, DEFAULT_PAD};
use crate::gramnet::{
    classify_concat, forward_features_batch, load_checkpoint, prob_real_from_logits,
    ClassifierHead, GramNet, HeadKind,
};
use crate::types::{BinaryLabel, ImageSample, PatchKey, PatchWeights};

/// Outcome of one weighted vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub label: BinaryLabel,
    pub real_weight: u64,
    pub fake_weight: u64,
    /// True when the weighted sums were exactly equal and the fallback
    /// label decided.
    pub tie_broken: bool,
}

/// Weighted majority vote over per-patch decisions.
///
/// The face is called FAKE when the summed weight of FAKE votes
/// strictly exceeds the summed weight of REAL votes, REAL in the
/// opposite case, and `tie_fallback` on an exact tie. Named patches
/// vote with their configured weight; block patches always vote with
/// weight 1.
pub fn majority_vote(
    votes: &[(PatchKey, BinaryLabel)],
    weights: &PatchWeights,
    tie_fallback: BinaryLabel,
) -> Result<VoteOutcome> {
    if votes.is_empty() {
        return Err(Error::NoVoters);
    }
    let mut real_weight = 0u64;
    let mut fake_weight = 0u64;
    for &(key, label) in votes {
        let w = weights.weight_of_key(key) as u64;
        match label {
            BinaryLabel::Real => real_weight += w,
            BinaryLabel::Fake => fake_weight += w,
        }
    }
    let (label, tie_broken) = match fake_weight.cmp(&real_weight) {
        std::cmp::Ordering::Greater => (BinaryLabel::Fake, false),
        std::cmp::Ordering::Less => (BinaryLabel::Real, false),
        std::cmp::Ordering::Equal => (tie_fallback, true),
    };
    Ok(VoteOutcome {
        label,
        real_weight,
        fake_weight,
        tie_broken,
    })
}

/// Two-of-three rule over the whole-face, patch-vote, and concat
/// paths: the face is REAL exactly when at least two paths say REAL.
pub fn fuse_three(
    whole_face: BinaryLabel,
    patch_vote: BinaryLabel,
    concat: BinaryLabel,
) -> BinaryLabel {
    let reals = [whole_face, patch_vote, concat]
        .iter()
        .filter(|&&l| l == BinaryLabel::Real)
        .count();
    if reals >= 2 {
        BinaryLabel::Real
    } else {
        BinaryLabel::Fake
    }
}

/// Pipeline settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Padding fraction around each semantic patch box.
    pub pad: f64,
    /// Per-patch vote weights.
    pub weights: PatchWeights,
    /// Label used when the weighted vote ties.
    pub tie_fallback: BinaryLabel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pad: DEFAULT_PAD,
            weights: PatchWeights::uniform(),
            tie_fallback: BinaryLabel::Real,
        }
    }
}

/// The three trained components of the detector. Inference borrows the
/// models immutably, so one `PipelineModels` can serve many threads.
pub struct PipelineModels {
    pub whole_model: GramNet,
    pub whole_head: ClassifierHead,
    pub patch_model: GramNet,
    pub patch_head: ClassifierHead,
    pub concat_head: ClassifierHead,
    whole_face_forwards: AtomicU64,
}

impl PipelineModels {
    pub fn new(
        whole_model: GramNet,
        whole_head: ClassifierHead,
        patch_model: GramNet,
        patch_head: ClassifierHead,
        concat_head: ClassifierHead,
    ) -> Result<Self> {
        if whole_head.kind != HeadKind::WholeFace
            || patch_head.kind != HeadKind::PerPatch
            || concat_head.kind != HeadKind::Concat
        {
            return Err(Error::InvalidInput(
                "heads must be whole_face, per_patch, concat in that order".into(),
            ));
        }
        if whole_head.input_dim() != whole_model.feature_dim() {
            return Err(Error::DimensionError(format!(
                "whole-face head expects {} features, model produces {}",
                whole_head.input_dim(),
                whole_model.feature_dim()
            )));
        }
        if patch_head.input_dim() != patch_model.feature_dim() {
            return Err(Error::DimensionError(format!(
                "patch head expects {} features, model produces {}",
                patch_head.input_dim(),
                patch_model.feature_dim()
            )));
        }
        if concat_head.input_dim() != 7 * patch_model.feature_dim() {
            return Err(Error::DimensionError(format!(
                "concat head expects {} inputs, 7 patches produce {}",
                concat_head.input_dim(),
                7 * patch_model.feature_dim()
            )));
        }
        Ok(PipelineModels {
            whole_model,
            whole_head,
            patch_model,
            patch_head,
            concat_head,
            whole_face_forwards: AtomicU64::new(0),
        })
    }

    /// Load the three checkpoints written by training: the whole-face
    /// model, the patch model, and the concat head (stored with its
    /// frozen copy of the patch model).
    pub fn from_checkpoints(
        whole: impl AsRef<Path>,
        patch: impl AsRef<Path>,
        concat: impl AsRef<Path>,
    ) -> Result<Self> {
        let (whole_model, mut whole_heads, _) = load_checkpoint(whole)?;
        let (patch_model, mut patch_heads, _) = load_checkpoint(patch)?;
        let (_, mut concat_heads, _) = load_checkpoint(concat)?;
        let whole_head = take_head(&mut whole_heads, HeadKind::WholeFace)?;
        let patch_head = take_head(&mut patch_heads, HeadKind::PerPatch)?;
        let concat_head = take_head(&mut concat_heads, HeadKind::Concat)?;
        PipelineModels::new(whole_model, whole_head, patch_model, patch_head, concat_head)
    }

    /// How many whole-face forward passes have run so far.
    pub fn whole_face_forward_count(&self) -> u64 {
        self.whole_face_forwards.load(Ordering::Relaxed)
    }

    pub fn reset_whole_face_counter(&self) {
        self.whole_face_forwards.store(0, Ordering::Relaxed);
    }
}

fn take_head(heads: &mut Vec<ClassifierHead>, kind: HeadKind) -> Result<ClassifierHead> {
    let idx = heads
        .iter()
        .position(|h| h.kind == kind)
        .ok_or_else(|| Error::InvalidInput(format!("checkpoint has no {kind:?} head")))?;
    Ok(heads.swap_remove(idx))
}

/// One path's decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDecision {
    pub label: BinaryLabel,
    pub prob_real: f64,
}

/// One patch's individual decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDecision {
    pub patch: String,
    pub label: BinaryLabel,
    pub prob_real: f64,
}

/// Full record of one face through the pipeline; serializes to one
/// JSON line in evaluation reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<BinaryLabel>,
    /// Absent when the early-exit rule skipped the whole-face pass.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub whole_face: Option<PathDecision>,
    pub patch_vote: PathDecision,
    pub concat: PathDecision,
    pub fused: BinaryLabel,
    pub vote_tie_broken: bool,
    pub early_exited: bool,
    pub per_patch: Vec<PatchDecision>,
}

/// Run all three decision paths and fuse them.
pub fn run_pipeline(
    models: &PipelineModels,
    config: &PipelineConfig,
    sample: &ImageSample,
) -> Result<FusionResult> {
    run_internal(models, config, sample, false)
}

/// Like [`run_pipeline`], but when the patch-vote and concat paths
/// agree — and the vote was not a broken tie — their shared label is
/// final and the whole-face forward pass is skipped. The fused label
/// is always identical to [`run_pipeline`]'s: under the two-of-three
/// rule, two agreeing paths decide regardless of the third.
pub fn run_pipeline_early_exit(
    models: &PipelineModels,
    config: &PipelineConfig,
    sample: &ImageSample,
) -> Result<FusionResult> {
    run_internal(models, config, sample, true)
}

fn run_internal(
    models: &PipelineModels,
    config: &PipelineConfig,
    sample: &ImageSample,
    early_exit: bool,
) -> Result<FusionResult> {
    let occluded;
    let face: &ImageSample = match &sample.occlusion {
        Some(mask) => {
            occluded = apply_occlusion(sample, mask)?;
            &occluded
        }
        None => sample,
    };
    let landmarks = face
        .landmarks
        .as_ref()
        .ok_or_else(|| Error::MissingAnnotation(format!("sample {}: no landmarks", face.id)))?;

    // Patch paths: seven semantic patches, one batched feature pass.
    let patch_side = models.patch_model.config.input_side;
    let patches = semantic_patches(face, landmarks, config.pad, patch_side)?;
    let views: Vec<&Array3<u8>> = patches.patches.iter().map(|p| &p.pixels).collect();
    let features = forward_features_batch(&models.patch_model, &views)?;

    let logits = models.patch_head.logits(&features);
    let probs = prob_real_from_logits(&logits);
    let per_patch: Vec<PatchDecision> = patches
        .patches
        .iter()
        .zip(&probs)
        .map(|(p, &prob)| PatchDecision {
            patch: p.key.to_string(),
            label: BinaryLabel::from_prob_real(prob),
            prob_real: prob,
        })
        .collect();
    let votes: Vec<(PatchKey, BinaryLabel)> = patches
        .patches
        .iter()
        .zip(&per_patch)
        .map(|(p, d)| (p.key, d.label))
        .collect();
    let vote = majority_vote(&votes, &config.weights, config.tie_fallback)?;
    let total_weight = (vote.real_weight + vote.fake_weight) as f64;
    let patch_vote = PathDecision {
        label: vote.label,
        prob_real: vote.real_weight as f64 / total_weight,
    };

    let feature_rows: Vec<crate::gramnet::FeatureVector> =
        features.rows().into_iter().map(|r| r.to_owned()).collect();
    let (concat_label, concat_prob) = classify_concat(&models.concat_head, &feature_rows)?;
    let concat = PathDecision {
        label: concat_label,
        prob_real: concat_prob,
    };

    // Whole-face path, skipped when the patch paths already decide.
    let decisive_agreement = patch_vote.label == concat.label && !vote.tie_broken;
    let whole_face = if early_exit && decisive_agreement {
        None
    } else {
        let side = models.whole_model.config.input_side;
        let resized = resize_bilinear(&face.pixels, side, side);
        let f = crate::gramnet::forward_features(&models.whole_model, &resized)?;
        models.whole_face_forwards.fetch_add(1, Ordering::Relaxed);
        let logits = models
            .whole_head
            .logits(&f.insert_axis(ndarray::Axis(0)));
        let p = prob_real_from_logits(&logits)[0];
        Some(PathDecision {
            label: BinaryLabel::from_prob_real(p),
            prob_real: p,
        })
    };

    let fused = match &whole_face {
        Some(w) => fuse_three(w.label, patch_vote.label, concat.label),
        None => patch_vote.label,
    };

    Ok(FusionResult {
        id: face.id.clone(),
        truth: face.label,
        early_exited: whole_face.is_none(),
        whole_face,
        patch_vote,
        concat,
        fused,
        vote_tie_broken: vote.tie_broken,
        per_patch,
    })
}

/// Write fusion results as JSON lines.
pub fn write_results_jsonl(results: &[FusionResult], path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Read fusion results back from JSON lines.
pub fn read_results_jsonl(path: impl AsRef<Path>) -> Result<Vec<FusionResult>> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|_| Error::NotFound(path.as_ref().to_path_buf()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ManifestInvalid {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PatchName;

    fn named_votes(labels: [BinaryLabel; 7]) -> Vec<(PatchKey, BinaryLabel)> {
        PatchName::ALL
            .iter()
            .zip(labels)
            .map(|(&n, l)| (PatchKey::Name(n), l))
            .collect()
    }

    /// Independent oracle: linear scan summing weights per side.
    fn oracle_vote(
        votes: &[(PatchKey, BinaryLabel)],
        weights: &PatchWeights,
        tie_fallback: BinaryLabel,
    ) -> BinaryLabel {
        let mut real = 0u64;
        let mut fake = 0u64;
        for &(k, l) in votes {
            if l == BinaryLabel::Real {
                real += weights.weight_of_key(k) as u64;
            } else {
                fake += weights.weight_of_key(k) as u64;
            }
        }
        if fake > real {
            BinaryLabel::Fake
        } else if real > fake {
            BinaryLabel::Real
        } else {
            tie_fallback
        }
    }

    #[test]
    fn empty_vote_is_rejected() {
        assert!(matches!(
            majority_vote(&[], &PatchWeights::uniform(), BinaryLabel::Real),
            Err(Error::NoVoters)
        ));
    }

    #[test]
    fn vote_matches_oracle_for_all_assignments_and_weights() {
        let weight_configs = vec![
            PatchWeights::uniform(),
            PatchWeights::uniform()
                .with(PatchName::Mouth, 3)
                .unwrap()
                .with(PatchName::Nose, 2)
                .unwrap(),
            PatchWeights::uniform().with(PatchName::RightEye, 5).unwrap(),
            PatchWeights::uniform()
                .with(PatchName::RightCheek, 2)
                .unwrap()
                .with(PatchName::LeftCheek, 2)
                .unwrap()
                .with(PatchName::Chin, 4)
                .unwrap(),
        ];
        for weights in &weight_configs {
            for bits in 0u32..128 {
                let labels: [BinaryLabel; 7] = std::array::from_fn(|i| {
                    if bits >> i & 1 == 1 {
                        BinaryLabel::Real
                    } else {
                        BinaryLabel::Fake
                    }
                });
                let votes = named_votes(labels);
                for fallback in [BinaryLabel::Real, BinaryLabel::Fake] {
                    let got = majority_vote(&votes, weights, fallback).unwrap();
                    let want = oracle_vote(&votes, weights, fallback);
                    assert_eq!(got.label, want, "bits {bits:#09b}, fallback {fallback:?}");
                    assert_eq!(
                        got.tie_broken,
                        got.real_weight == got.fake_weight,
                        "tie flag wrong at bits {bits:#09b}"
                    );
                }
            }
        }
    }

    #[test]
    fn uniform_weight_scaling_never_changes_the_outcome() {
        for k in [2u32, 3] {
            let mut scaled = PatchWeights::uniform();
            for name in PatchName::ALL {
                scaled = scaled.with(name, k).unwrap();
            }
            for bits in 0u32..128 {
                let labels: [BinaryLabel; 7] = std::array::from_fn(|i| {
                    if bits >> i & 1 == 1 {
                        BinaryLabel::Real
                    } else {
                        BinaryLabel::Fake
                    }
                });
                let votes = named_votes(labels);
                let base = majority_vote(&votes, &PatchWeights::uniform(), BinaryLabel::Real)
                    .unwrap();
                let big = majority_vote(&votes, &scaled, BinaryLabel::Real).unwrap();
                assert_eq!(base.label, big.label, "scale {k}, bits {bits:#09b}");
                assert_eq!(base.tie_broken, big.tie_broken);
            }
        }
    }

    #[test]
    fn block_votes_always_count_once() {
        let weights = PatchWeights::uniform().with(PatchName::Mouth, 9).unwrap();
        let votes = vec![
            (PatchKey::Block { row: 0, col: 0 }, BinaryLabel::Fake),
            (PatchKey::Block { row: 0, col: 1 }, BinaryLabel::Fake),
            (PatchKey::Block { row: 1, col: 0 }, BinaryLabel::Real),
        ];
        let out = majority_vote(&votes, &weights, BinaryLabel::Real).unwrap();
        assert_eq!(out.fake_weight, 2);
        assert_eq!(out.real_weight, 1);
        assert_eq!(out.label, BinaryLabel::Fake);
    }

    #[test]
    fn two_of_three_truth_table() {
        use BinaryLabel::*;
        let cases = [
            ((Real, Real, Real), Real),
            ((Real, Real, Fake), Real),
            ((Real, Fake, Real), Real),
            ((Fake, Real, Real), Real),
            ((Real, Fake, Fake), Fake),
            ((Fake, Real, Fake), Fake),
            ((Fake, Fake, Real), Fake),
            ((Fake, Fake, Fake), Fake),
        ];
        for ((w, p, c), want) in cases {
            assert_eq!(fuse_three(w, p, c), want, "({w:?}, {p:?}, {c:?})");
        }
    }

    #[test]
    fn results_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let results = vec![FusionResult {
            id: "a".into(),
            truth: Some(BinaryLabel::Fake),
            whole_face: Some(PathDecision {
                label: BinaryLabel::Fake,
                prob_real: 0.1,
            }),
            patch_vote: PathDecision {
                label: BinaryLabel::Fake,
                prob_real: 0.2,
            },
            concat: PathDecision {
                label: BinaryLabel::Real,
                prob_real: 0.6,
            },
            fused: BinaryLabel::Fake,
            vote_tie_broken: false,
            early_exited: false,
            per_patch: vec![PatchDecision {
                patch: "mouth".into(),
                label: BinaryLabel::Fake,
                prob_real: 0.2,
            }],
        }];
        write_results_jsonl(&results, &path).unwrap();
        let back = read_results_jsonl(&path).unwrap();
        assert_eq!(back, results);
    }
}
