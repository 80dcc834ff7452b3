//! Training loops for the three classifiers: whole-face, shared patch
//! model, and the concat head over frozen patch features. All loops
//! are bit-reproducible for a fixed seed.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::facepatch::{apply_occlusion, resize_bilinear, semantic_patches};
use crate::gramnet::{to_input_batch, ClassifierHead, GramNet};
use crate::nn::{softmax_cross_entropy, softmax_rows, Jointly, Parameterized, Sgd};
use crate::types::{BinaryLabel, ImageSample};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            momentum: 0.0,
            epochs: 30,
            batch_size: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::ConfigError(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::ConfigError(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::ConfigError(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch's record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Whole training run: per-epoch stats plus which epoch's weights were
/// kept (highest validation accuracy, earliest on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainHistory {
    /// Write `epoch,train_loss,train_acc,val_acc` rows. Floats use the
    /// shortest exact decimal form, so identical runs produce
    /// byte-identical files.
    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::InvalidInput(format!("history csv: {e}")))?;
        for e in &self.epochs {
            w.serialize(e)
                .map_err(|e| Error::InvalidInput(format!("history csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        if !path.as_ref().is_file() {
            return Err(Error::NotFound(path.as_ref().to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path.as_ref())
            .map_err(|e| Error::InvalidInput(format!("history csv: {e}")))?;
        let want = ["epoch", "train_loss", "train_acc", "val_acc"];
        let headers = r
            .headers()
            .map_err(|e| Error::InvalidInput(format!("history csv: {e}")))?;
        if headers.iter().collect::<Vec<_>>() != want {
            return Err(Error::InvalidInput(format!(
                "history csv: bad header {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let epochs: Vec<EpochStats> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidInput(format!("history csv: {e}")))?;
        if epochs.is_empty() {
            return Err(Error::InvalidInput("history csv: no epochs".into()));
        }
        let best_epoch = pick_best(&epochs.iter().map(|e| e.val_acc).collect::<Vec<_>>());
        Ok(TrainHistory {
            best_val_acc: epochs[best_epoch].val_acc,
            best_epoch,
            epochs,
        })
    }
}

/// Index of the highest value; the earliest wins ties.
pub fn pick_best(val_accs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in val_accs.iter().enumerate() {
        if v > val_accs[best] {
            best = i;
        }
    }
    best
}

/// Images plus labels, all the same square side.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<Array3<u8>>,
    pub labels: Vec<BinaryLabel>,
}

/// Flattened patch training set: `images[i*7 + j]` is patch `j` of
/// sample `i` in canonical patch order, and every patch inherits its
/// sample's label.
#[derive(Debug, Clone, Default)]
pub struct PatchTrainingSet {
    pub images: Vec<Array3<u8>>,
    pub labels: Vec<BinaryLabel>,
    pub sample_labels: Vec<BinaryLabel>,
}

impl PatchTrainingSet {
    pub fn n_samples(&self) -> usize {
        self.sample_labels.len()
    }
}

fn occluded_pixels(sample: &ImageSample) -> Result<std::borrow::Cow<'_, ImageSample>> {
    Ok(match &sample.occlusion {
        Some(mask) => std::borrow::Cow::Owned(apply_occlusion(sample, mask)?),
        None => std::borrow::Cow::Borrowed(sample),
    })
}

/// Resize every sample (after occlusion zeroing) to the model input
/// side for whole-face training.
pub fn prepare_whole_face(samples: &[ImageSample], side: usize) -> Result<LabeledImages> {
    let mut out = LabeledImages::default();
    for sample in samples {
        let label = sample.label.ok_or_else(|| {
            Error::MissingAnnotation(format!("sample {} has no label", sample.id))
        })?;
        let face = occluded_pixels(sample)?;
        out.images.push(resize_bilinear(&face.pixels, side, side));
        out.labels.push(label);
    }
    Ok(out)
}

/// Cut the seven semantic patches (after occlusion zeroing) from every
/// sample for patch-model and concat-head training.
pub fn prepare_patches(samples: &[ImageSample], side: usize, pad: f64) -> Result<PatchTrainingSet> {
    let mut out = PatchTrainingSet::default();
    for sample in samples {
        let label = sample.label.ok_or_else(|| {
            Error::MissingAnnotation(format!("sample {} has no label", sample.id))
        })?;
        let face = occluded_pixels(sample)?;
        let landmarks = face.landmarks.as_ref().ok_or_else(|| {
            Error::MissingAnnotation(format!("sample {} has no landmarks", sample.id))
        })?;
        let patches = semantic_patches(&face, landmarks, pad, side)?;
        for p in &patches.patches {
            out.images.push(p.pixels.clone());
            out.labels.push(label);
        }
        out.sample_labels.push(label);
    }
    Ok(out)
}

fn check_two_classes(labels: &[BinaryLabel], what: &str) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::DegenerateDataset(format!("{what} set is empty")));
    }
    let reals = labels.iter().filter(|&&l| l == BinaryLabel::Real).count();
    if reals == 0 || reals == labels.len() {
        return Err(Error::DegenerateDataset(format!(
            "{what} set has a single class"
        )));
    }
    Ok(())
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss treated as divergence even while still finite.
const DIVERGENCE_LOSS: f64 = 1e9;

fn snapshot(target: &mut dyn Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    target.for_each_state(&mut |_, view| out.extend(view.iter().copied()));
    out
}

fn restore(target: &mut dyn Parameterized, snap: &[f64]) {
    let mut cursor = 0;
    target.for_each_state(&mut |_, mut view| {
        for v in view.iter_mut() {
            *v = snap[cursor];
            cursor += 1;
        }
    });
    debug_assert_eq!(cursor, snap.len());
}

const EVAL_BATCH: usize = 32;

/// Evaluation-mode REAL probabilities for a set of images.
pub fn eval_probs(
    model: &GramNet,
    head: &ClassifierHead,
    images: &[Array3<u8>],
) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&Array3<u8>> = chunk.iter().collect();
        let x = to_input_batch(&refs, model.config.input_side)?;
        let f = model.features(&x);
        let logits = head.logits(&f);
        probs.extend(crate::gramnet::prob_real_from_logits(&logits));
    }
    Ok(probs)
}

/// Evaluation-mode accuracy of a model + head over labeled images.
pub fn evaluate_classifier(
    model: &GramNet,
    head: &ClassifierHead,
    images: &[Array3<u8>],
    labels: &[BinaryLabel],
) -> Result<f64> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let probs = eval_probs(model, head, images)?;
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| BinaryLabel::from_prob_real(p) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Train a model and head jointly with SGD and cross-entropy.
///
/// Each epoch shuffles deterministically from `(seed, epoch)`, so the
/// whole run is reproducible bit for bit. After the last epoch the
/// weights roll back to the epoch with the highest validation
/// accuracy (earliest on ties).
pub fn train_classifier(
    model: &mut GramNet,
    head: &mut ClassifierHead,
    train_images: &[Array3<u8>],
    train_labels: &[BinaryLabel],
    val_images: &[Array3<u8>],
    val_labels: &[BinaryLabel],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_two_classes(train_labels, "train")?;
    if val_images.is_empty() || val_images.len() != val_labels.len() {
        return Err(Error::DegenerateDataset("val set is empty".into()));
    }
    if train_images.len() != train_labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} train images vs {} labels",
            train_images.len(),
            train_labels.len()
        )));
    }
    let side = model.config.input_side;
    if head.input_dim() != model.feature_dim() {
        return Err(Error::DimensionError(format!(
            "head expects {} features, model produces {}",
            head.input_dim(),
            model.feature_dim()
        )));
    }

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let n = train_images.len();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
    };
    let mut best_state: Option<Vec<f64>> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Array3<u8>> = batch.iter().map(|&i| &train_images[i]).collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| train_labels[i].class_index())
                .collect();
            let x = to_input_batch(&refs, side)?;

            model.zero_grads();
            head.zero_grads();
            let features = model.forward_train(&x);
            let logits = head.logits_train(&features);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::DivergenceError(format!(
                    "loss {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let probs = softmax_rows(&logits);
            for (row, &want) in probs.rows().into_iter().zip(&labels) {
                let real_idx = BinaryLabel::Real.class_index();
                let got = BinaryLabel::from_prob_real(row[real_idx]).class_index();
                if got == want {
                    correct += 1;
                }
            }
            let dfeat = head.backward(&dlogits);
            model.backward(&dfeat);
            sgd.step(&mut Jointly(&mut *model, &mut *head));
        }

        let val_acc = evaluate_classifier(model, head, val_images, val_labels)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
        };
        history.epochs.push(stats);
        if val_acc > history.best_val_acc {
            history.best_val_acc = val_acc;
            history.best_epoch = epoch;
            best_state = Some(snapshot(&mut Jointly(&mut *model, &mut *head)));
        }
    }

    if let Some(state) = &best_state {
        if history.best_epoch + 1 != cfg.epochs {
            restore(&mut Jointly(&mut *model, &mut *head), state);
        }
    }
    Ok(history)
}

/// Train the shared patch model on the flattened patch set. Validation
/// accuracy is per patch, not per face.
pub fn train_patch_model(
    model: &mut GramNet,
    head: &mut ClassifierHead,
    train: &PatchTrainingSet,
    val: &PatchTrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_classifier(
        model,
        head,
        &train.images,
        &train.labels,
        &val.images,
        &val.labels,
        cfg,
    )
}

/// Concatenated per-sample feature matrix (rows: samples, columns:
/// 7 x feature_dim in canonical patch order), evaluation mode.
pub fn concat_features(model: &GramNet, set: &PatchTrainingSet) -> Result<Array2<f64>> {
    let n = set.n_samples();
    if n == 0 {
        return Err(Error::DegenerateDataset("empty patch set".into()));
    }
    if set.images.len() != 7 * n {
        return Err(Error::DimensionError(format!(
            "{} patch images for {} samples; expected {}",
            set.images.len(),
            n,
            7 * n
        )));
    }
    let fd = model.feature_dim();
    let mut out = Array2::<f64>::zeros((n, 7 * fd));
    for start in (0..set.images.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(set.images.len());
        let refs: Vec<&Array3<u8>> = set.images[start..end].iter().collect();
        let x = to_input_batch(&refs, model.config.input_side)?;
        let f = model.features(&x);
        for (k, row) in f.rows().into_iter().enumerate() {
            let flat = start + k;
            let (sample, patch) = (flat / 7, flat % 7);
            out.slice_mut(s![sample, patch * fd..(patch + 1) * fd])
                .assign(&row);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalError("non-finite patch features".into()));
    }
    Ok(out)
}

/// Train the concat head on frozen patch-model features. The patch
/// model itself is immutable here; only the head learns.
pub fn train_concat_head(
    patch_model: &GramNet,
    head: &mut ClassifierHead,
    train: &PatchTrainingSet,
    val: &PatchTrainingSet,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_two_classes(&train.sample_labels, "train")?;
    if val.n_samples() == 0 {
        return Err(Error::DegenerateDataset("val set is empty".into()));
    }
    let train_x = concat_features(patch_model, train)?;
    let val_x = concat_features(patch_model, val)?;
    if head.input_dim() != train_x.ncols() {
        return Err(Error::DimensionError(format!(
            "concat head expects {} inputs, features have {}",
            head.input_dim(),
            train_x.ncols()
        )));
    }

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let n = train.n_samples();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_acc: f64::NEG_INFINITY,
    };
    let mut best_state: Option<Vec<f64>> = None;
    let real_idx = BinaryLabel::Real.class_index();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Array2::<f64>::zeros((batch.len(), train_x.ncols()));
            for (k, &i) in batch.iter().enumerate() {
                x.row_mut(k).assign(&train_x.row(i));
            }
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| train.sample_labels[i].class_index())
                .collect();

            head.zero_grads();
            let logits = head.logits_train(&x);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::DivergenceError(format!(
                    "loss {loss} at epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let probs = softmax_rows(&logits);
            for (row, &want) in probs.rows().into_iter().zip(&labels) {
                if BinaryLabel::from_prob_real(row[real_idx]).class_index() == want {
                    correct += 1;
                }
            }
            head.backward(&dlogits);
            sgd.step(head);
        }

        // Validation: frozen features through the current head.
        let logits = head.logits(&val_x);
        let probs = softmax_rows(&logits);
        let val_correct = probs
            .rows()
            .into_iter()
            .zip(&val.sample_labels)
            .filter(|(row, &l)| BinaryLabel::from_prob_real(row[real_idx]) == l)
            .count();
        let val_acc = val_correct as f64 / val.n_samples() as f64;

        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
        });
        if val_acc > history.best_val_acc {
            history.best_val_acc = val_acc;
            history.best_epoch = epoch;
            best_state = Some(snapshot(head));
        }
    }

    if let Some(state) = &best_state {
        if history.best_epoch + 1 != cfg.epochs {
            restore(head, state);
        }
    }
    Ok(history)
}

/// Stable digest tying a checkpoint to its dataset and settings.
pub fn training_fingerprint(dataset_fingerprint: &str, cfg: &TrainConfig) -> String {
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(dataset_fingerprint.as_bytes());
    hasher.update(b"|");
    hasher.update(cfg_json.as_bytes());
    format!("{:x}", hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gramnet::{build_gramnet, GramNetConfig, GramTap};
    use rand::Rng;

    fn tiny_config() -> GramNetConfig {
        GramNetConfig {
            input_side: 16,
            base_channels: 4,
            stage_blocks: [1, 1, 1, 1],
            stem_kernel: 3,
            gram_taps: GramTap::ALL.to_vec(),
            gram_channels: 4,
            gram_out_dim: 2,
            backbone_out_dim: 8,
        }
    }

    /// Two visually distinct classes: smooth gradients vs checkered
    /// noise, separable by a texture model.
    fn toy_data(n: usize, seed: u64) -> (Vec<Array3<u8>>, Vec<BinaryLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = if i % 2 == 0 {
                BinaryLabel::Real
            } else {
                BinaryLabel::Fake
            };
            let base: u8 = rng.gen_range(80..160);
            let img = Array3::from_shape_fn((16, 16, 3), |(y, x, _)| {
                let smooth = base.saturating_add((y * 3 + x) as u8);
                match label {
                    BinaryLabel::Real => smooth,
                    BinaryLabel::Fake => {
                        if (x + y) % 2 == 0 {
                            smooth.saturating_add(60)
                        } else {
                            smooth.saturating_sub(60)
                        }
                    }
                }
            });
            images.push(img);
            labels.push(label);
        }
        (images, labels)
    }

    #[test]
    fn initial_loss_is_near_coin_flip() {
        let cfg = tiny_config();
        let mut model = build_gramnet(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
        let (images, labels) = toy_data(12, 3);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let hist = train_classifier(
            &mut model,
            &mut head,
            &images,
            &labels,
            &images[..4],
            &labels[..4],
            &tc,
        )
        .unwrap();
        let loss0 = hist.epochs[0].train_loss;
        assert!(
            (loss0 - std::f64::consts::LN_2).abs() < 0.2,
            "epoch-0 loss {loss0} should be close to ln 2"
        );
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = tiny_config();
        let (images, labels) = toy_data(10, 4);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 5,
            seed: 7,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = build_gramnet(&cfg, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut head =
                crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
            let hist = train_classifier(
                &mut model,
                &mut head,
                &images,
                &labels,
                &images[..4],
                &labels[..4],
                &tc,
            )
            .unwrap();
            (hist, snapshot(&mut Jointly(&mut model, &mut head)))
        };
        let (h1, s1) = run();
        let (h2, s2) = run();
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);

        let mut model = build_gramnet(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut head = crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
        let other = TrainConfig { seed: 8, ..tc };
        let h3 = train_classifier(
            &mut model,
            &mut head,
            &images,
            &labels,
            &images[..4],
            &labels[..4],
            &other,
        )
        .unwrap();
        assert_ne!(h1, h3);
    }

    #[test]
    fn memorizes_a_tiny_set() {
        let cfg = tiny_config();
        let mut model = build_gramnet(&cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut head = crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
        let (images, labels) = toy_data(8, 12);
        let tc = TrainConfig {
            lr: 0.02,
            epochs: 30,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train_classifier(
            &mut model,
            &mut head,
            &images,
            &labels,
            &images,
            &labels,
            &tc,
        )
        .unwrap();
        let acc = evaluate_classifier(&model, &head, &images, &labels).unwrap();
        assert_eq!(acc, 1.0, "failed to memorize 8 samples");
    }

    #[test]
    fn degenerate_sets_are_rejected() {
        let cfg = tiny_config();
        let mut model = build_gramnet(&cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut head = crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
        let (images, _) = toy_data(4, 15);
        let single = vec![BinaryLabel::Real; 4];
        let err = train_classifier(
            &mut model,
            &mut head,
            &images,
            &single,
            &images,
            &single,
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(Error::DegenerateDataset(_))));

        let err = train_classifier(
            &mut model,
            &mut head,
            &[],
            &[],
            &images,
            &single,
            &TrainConfig::default(),
        );
        assert!(matches!(err, Err(Error::DegenerateDataset(_))));
    }

    #[test]
    fn absurd_learning_rate_diverges() {
        let cfg = tiny_config();
        let mut model = build_gramnet(&cfg, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut head = crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
        let (images, labels) = toy_data(8, 18);
        let tc = TrainConfig {
            lr: 1e12,
            epochs: 10,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train_classifier(
            &mut model,
            &mut head,
            &images,
            &labels,
            &images[..4],
            &labels[..4],
            &tc,
        );
        assert!(
            matches!(err, Err(Error::DivergenceError(_))),
            "expected divergence, got {err:?}"
        );
    }

    #[test]
    fn history_csv_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let hist = TrainHistory {
            epochs: vec![
                EpochStats {
                    epoch: 0,
                    train_loss: 0.693147,
                    train_acc: 0.5,
                    val_acc: 0.55,
                },
                EpochStats {
                    epoch: 1,
                    train_loss: 0.42,
                    train_acc: 0.8125,
                    val_acc: 0.75,
                },
            ],
            best_epoch: 1,
            best_val_acc: 0.75,
        };
        hist.to_csv(&path).unwrap();
        let back = TrainHistory::from_csv(&path).unwrap();
        assert_eq!(back, hist);

        std::fs::write(&path, "epoch,oops\n1,2\n").unwrap();
        assert!(matches!(
            TrainHistory::from_csv(&path),
            Err(Error::InvalidInput(_))
        ));
        std::fs::write(
            &path,
            "epoch,train_loss,train_acc,val_acc\n0,not_a_number,0.5,0.5\n",
        )
        .unwrap();
        assert!(TrainHistory::from_csv(&path).is_err());
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        assert_eq!(pick_best(&[0.5, 0.9, 0.9, 0.7]), 1);
        assert_eq!(pick_best(&[0.9, 0.1]), 0);
        assert_eq!(pick_best(&[0.2, 0.3, 0.4]), 2);
    }

    fn patch_set_from(images: Vec<Array3<u8>>, labels: Vec<BinaryLabel>) -> PatchTrainingSet {
        // Each "sample" contributes 7 copies standing in for patches.
        let mut set = PatchTrainingSet::default();
        for (img, label) in images.into_iter().zip(labels) {
            for _ in 0..7 {
                set.images.push(img.clone());
                set.labels.push(label);
            }
            set.sample_labels.push(label);
        }
        set
    }

    #[test]
    fn concat_head_trains_without_touching_the_model() {
        let cfg = tiny_config();
        let mut model = build_gramnet(&cfg, 19).unwrap();
        let before = snapshot(&mut model);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut head = crate::gramnet::ClassifierHead::concat(cfg.feature_dim(), 7, &mut rng);
        let (images, labels) = toy_data(8, 21);
        let train = patch_set_from(images.clone(), labels.clone());
        let val = patch_set_from(images[..4].to_vec(), labels[..4].to_vec());
        let tc = TrainConfig {
            lr: 0.05,
            epochs: 20,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let hist = train_concat_head(&model, &mut head, &train, &val, &tc).unwrap();
        assert_eq!(hist.epochs.len(), 20);
        let last_acc = hist.epochs.last().unwrap().train_acc;
        assert!(
            hist.best_val_acc >= 0.75 || last_acc >= 0.75,
            "concat head failed to learn separable features: best val {}, last train {last_acc}",
            hist.best_val_acc
        );
        let after = snapshot(&mut model);
        assert_eq!(before, after, "patch model must stay frozen");
    }

    #[test]
    fn best_epoch_weights_are_kept() {
        // Train long enough that late epochs can be worse on val; after
        // training, re-evaluating val must reproduce best_val_acc.
        let cfg = tiny_config();
        let mut model = build_gramnet(&cfg, 22).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut head = crate::gramnet::ClassifierHead::whole_face(cfg.feature_dim(), &mut rng);
        let (images, labels) = toy_data(12, 24);
        let (val_images, val_labels) = toy_data(6, 25);
        let tc = TrainConfig {
            lr: 0.02,
            epochs: 8,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let hist = train_classifier(
            &mut model,
            &mut head,
            &images,
            &labels,
            &val_images,
            &val_labels,
            &tc,
        )
        .unwrap();
        let val_now = evaluate_classifier(&model, &head, &val_images, &val_labels).unwrap();
        assert_eq!(
            val_now, hist.best_val_acc,
            "restored weights should reproduce the best validation accuracy"
        );
        let reported_best = hist.epochs[hist.best_epoch].val_acc;
        assert_eq!(reported_best, hist.best_val_acc);
    }

    #[test]
    fn fingerprint_changes_with_config_and_data() {
        let a = training_fingerprint("data1", &TrainConfig::default());
        let b = training_fingerprint("data2", &TrainConfig::default());
        let c = training_fingerprint(
            "data1",
            &TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
        );
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, training_fingerprint("data1", &TrainConfig::default()));
    }
}
