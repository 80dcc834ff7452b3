//! The texture CNN: a residual backbone with six Gram blocks tapped at
//! fixed depths, three classifier heads, and binary checkpointing.
//!
//! A feature vector is the concatenation of the globally pooled
//! backbone embedding (`backbone_out_dim` numbers) and one
//! `gram_out_dim`-wide embedding per Gram block, giving
//! `backbone_out_dim + 6 * gram_out_dim` dimensions: 704 at the default
//! configuration.

use ndarray::{s, Array1, Array2, Array3, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, softmax_rows, Act, BatchNorm2d, Conv2d, GramLayer,
    Linear, ParamPair, Parameterized, Relu, Relu2,
};
use crate::types::BinaryLabel;

pub use crate::nn::gram_matrix;

/// A feature vector of length [`GramNetConfig::feature_dim`].
pub type FeatureVector = Array1<f64>;

/// Where a Gram block taps the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramTap {
    Stem,
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    /// The final activation again, just before global pooling.
    PrePool,
}

impl GramTap {
    /// The six canonical taps, one per backbone depth.
    pub const ALL: [GramTap; 6] = [
        GramTap::Stem,
        GramTap::Stage1,
        GramTap::Stage2,
        GramTap::Stage3,
        GramTap::Stage4,
        GramTap::PrePool,
    ];

    fn index(self) -> usize {
        match self {
            GramTap::Stem => 0,
            GramTap::Stage1 => 1,
            GramTap::Stage2 => 2,
            GramTap::Stage3 => 3,
            GramTap::Stage4 => 4,
            GramTap::PrePool => 5,
        }
    }
}

/// Architecture hyperparameters. `feature_dim` is always derived as
/// `backbone_out_dim + gram_taps.len() * gram_out_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GramNetConfig {
    /// Square input edge in pixels.
    pub input_side: usize,
    /// Channel width of the first stage; later stages double it.
    pub base_channels: usize,
    /// Residual block count per stage.
    pub stage_blocks: [usize; 4],
    /// Stem convolution kernel (odd).
    pub stem_kernel: usize,
    /// Exactly six tap positions, one Gram block each.
    pub gram_taps: Vec<GramTap>,
    /// Convolution width inside each Gram block.
    pub gram_channels: usize,
    /// Embedding width contributed by each Gram block.
    pub gram_out_dim: usize,
    /// Embedding width contributed by the pooled backbone.
    pub backbone_out_dim: usize,
}

impl Default for GramNetConfig {
    fn default() -> Self {
        GramNetConfig {
            input_side: 64,
            base_channels: 64,
            stage_blocks: [2, 2, 2, 2],
            stem_kernel: 7,
            gram_taps: GramTap::ALL.to_vec(),
            gram_channels: 8,
            gram_out_dim: 32,
            backbone_out_dim: 512,
        }
    }
}

impl GramNetConfig {
    /// Small preset for CPU tests: feature_dim 56, on the order of
    /// 100k parameters.
    pub fn toy() -> Self {
        GramNetConfig {
            input_side: 64,
            base_channels: 8,
            stage_blocks: [1, 1, 1, 1],
            stem_kernel: 3,
            gram_taps: GramTap::ALL.to_vec(),
            gram_channels: 8,
            gram_out_dim: 4,
            backbone_out_dim: 32,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_out_dim + self.gram_taps.len() * self.gram_out_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.gram_taps.len() != 6 {
            return Err(Error::ConfigError(format!(
                "exactly 6 gram taps required, got {}",
                self.gram_taps.len()
            )));
        }
        if self.input_side < 16 || self.input_side % 16 != 0 {
            return Err(Error::ConfigError(format!(
                "input_side must be a positive multiple of 16, got {}",
                self.input_side
            )));
        }
        if self.base_channels < 4 {
            return Err(Error::ConfigError(
                "base_channels must be >= 4".into(),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::ConfigError("stage_blocks must all be >= 1".into()));
        }
        if self.stem_kernel % 2 == 0 || self.stem_kernel < 3 {
            return Err(Error::ConfigError(format!(
                "stem_kernel must be odd and >= 3, got {}",
                self.stem_kernel
            )));
        }
        if self.gram_channels == 0 || self.gram_out_dim == 0 || self.backbone_out_dim == 0 {
            return Err(Error::ConfigError(
                "gram_channels, gram_out_dim, backbone_out_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel count of the activation at a tap.
    fn tap_channels(&self, tap: GramTap) -> usize {
        match tap {
            GramTap::Stem | GramTap::Stage1 => self.base_channels,
            GramTap::Stage2 => 2 * self.base_channels,
            GramTap::Stage3 => 4 * self.base_channels,
            GramTap::Stage4 | GramTap::PrePool => 8 * self.base_channels,
        }
    }
}

/// Stem: convolution (stride 2), batch norm, ReLU.
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
}

impl Stem {
    fn new(cfg: &GramNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = cfg.stem_kernel;
        Stem {
            conv: Conv2d::new(3, cfg.base_channels, k, 2, k / 2, false, rng),
            bn: BatchNorm2d::new(cfg.base_channels),
            relu: Relu::default(),
        }
    }

    fn infer(&self, x: &Act) -> Act {
        self.relu.infer(&self.bn.infer(&self.conv.infer(x)))
    }

    fn forward(&mut self, x: &Act, train: bool) -> Act {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        self.relu.forward(&y, train)
    }

    fn backward(&mut self, dout: &Act) -> Act {
        let d = self.relu.backward(dout);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamPair<'_>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.conv.visit_state(&format!("{prefix}.conv"), f);
        self.bn.visit_state(&format!("{prefix}.bn"), f);
    }
}

/// Standard two-convolution residual block with an optional projection
/// shortcut when shape changes.
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(cin, cout, 1, stride, 0, false, rng),
                BatchNorm2d::new(cout),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(cout),
            relu1: Relu::default(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            proj,
            relu_out: Relu::default(),
        }
    }

    fn infer(&self, x: &Act) -> Act {
        let main = self.bn1.infer(&self.conv1.infer(x));
        let main = self.relu1.infer(&main);
        let main = self.bn2.infer(&self.conv2.infer(&main));
        let skip = match &self.proj {
            Some((c, b)) => b.infer(&c.infer(x)),
            None => x.clone(),
        };
        self.relu_out.infer(&(main + skip))
    }

    fn forward(&mut self, x: &Act, train: bool) -> Act {
        let main = self.conv1.forward(x, train);
        let main = self.bn1.forward(&main, train);
        let main = self.relu1.forward(&main, train);
        let main = self.conv2.forward(&main, train);
        let main = self.bn2.forward(&main, train);
        let skip = match &mut self.proj {
            Some((c, b)) => {
                let s = c.forward(x, train);
                b.forward(&s, train)
            }
            None => x.clone(),
        };
        self.relu_out.forward(&(main + skip), train)
    }

    fn backward(&mut self, dout: &Act) -> Act {
        let dsum = self.relu_out.backward(dout);
        let dmain = self.bn2.backward(&dsum);
        let dmain = self.conv2.backward(&dmain);
        let dmain = self.relu1.backward(&dmain);
        let dmain = self.bn1.backward(&dmain);
        let dx_main = self.conv1.backward(&dmain);
        let dx_skip = match &mut self.proj {
            Some((c, b)) => {
                let d = b.backward(&dsum);
                c.backward(&d)
            }
            None => dsum,
        };
        dx_main + dx_skip
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamPair<'_>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((c, b)) = &mut self.proj {
            c.visit(&format!("{prefix}.proj.conv"), f);
            b.visit(&format!("{prefix}.proj.bn"), f);
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.conv1.visit_state(&format!("{prefix}.conv1"), f);
        self.bn1.visit_state(&format!("{prefix}.bn1"), f);
        self.conv2.visit_state(&format!("{prefix}.conv2"), f);
        self.bn2.visit_state(&format!("{prefix}.bn2"), f);
        if let Some((c, b)) = &mut self.proj {
            c.visit_state(&format!("{prefix}.proj.conv"), f);
            b.visit_state(&format!("{prefix}.proj.bn"), f);
        }
    }
}

/// One Gram block: a 1x1 convolution, the Gram layer, two stride-2
/// convolutions with batch norm and ReLU over the Gram map, global
/// average pooling, and a linear projection to `gram_out_dim`.
struct GramBlock {
    pre: Conv2d,
    gram: GramLayer,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    embed: Linear,
    pooled_hw: (usize, usize),
}

impl GramBlock {
    fn new(tap_channels: usize, cfg: &GramNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = cfg.gram_channels;
        GramBlock {
            pre: Conv2d::new(tap_channels, tap_channels, 1, 1, 0, true, rng),
            gram: GramLayer::default(),
            conv1: Conv2d::new(1, g, 3, 2, 1, false, rng),
            bn1: BatchNorm2d::new(g),
            relu1: Relu::default(),
            conv2: Conv2d::new(g, g, 3, 2, 1, false, rng),
            bn2: BatchNorm2d::new(g),
            relu2: Relu::default(),
            embed: Linear::new(g, cfg.gram_out_dim, rng),
            pooled_hw: (0, 0),
        }
    }

    fn infer(&self, x: &Act) -> Array2<f64> {
        let y = self.gram.infer(&self.pre.infer(x));
        let y = self.relu1.infer(&self.bn1.infer(&self.conv1.infer(&y)));
        let y = self.relu2.infer(&self.bn2.infer(&self.conv2.infer(&y)));
        self.embed.infer(&global_avg_pool(&y))
    }

    fn forward(&mut self, x: &Act, train: bool) -> Array2<f64> {
        let y = self.pre.forward(x, train);
        let y = self.gram.forward(&y, train);
        let y = self.conv1.forward(&y, train);
        let y = self.bn1.forward(&y, train);
        let y = self.relu1.forward(&y, train);
        let y = self.conv2.forward(&y, train);
        let y = self.bn2.forward(&y, train);
        let y = self.relu2.forward(&y, train);
        let (_, _, h, w) = y.dim();
        self.pooled_hw = (h, w);
        self.embed.forward(&global_avg_pool(&y), train)
    }

    fn backward(&mut self, dout: &Array2<f64>) -> Act {
        let dpool = self.embed.backward(dout);
        let (h, w) = self.pooled_hw;
        let d = global_avg_pool_backward(&dpool, h, w);
        let d = self.relu2.backward(&d);
        let d = self.bn2.backward(&d);
        let d = self.conv2.backward(&d);
        let d = self.relu1.backward(&d);
        let d = self.bn1.backward(&d);
        let d = self.conv1.backward(&d);
        let d = self.gram.backward(&d);
        self.pre.backward(&d)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(ParamPair<'_>)) {
        self.pre.visit(&format!("{prefix}.pre"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        self.embed.visit(&format!("{prefix}.embed"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.pre.visit_state(&format!("{prefix}.pre"), f);
        self.conv1.visit_state(&format!("{prefix}.conv1"), f);
        self.bn1.visit_state(&format!("{prefix}.bn1"), f);
        self.conv2.visit_state(&format!("{prefix}.conv2"), f);
        self.bn2.visit_state(&format!("{prefix}.bn2"), f);
        self.embed.visit_state(&format!("{prefix}.embed"), f);
    }
}

/// The full texture network.
pub struct GramNet {
    pub config: GramNetConfig,
    stem: Stem,
    stages: [Vec<BasicBlock>; 4],
    embed: Linear,
    grams: Vec<GramBlock>,
    final_hw: (usize, usize),
}

/// Build a network with deterministic, seeded initialization.
pub fn build_gramnet(config: &GramNetConfig, seed: u64) -> Result<GramNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = config.base_channels;
    let stem = Stem::new(config, &mut rng);
    let widths = [(b, b, 1), (b, 2 * b, 2), (2 * b, 4 * b, 2), (4 * b, 8 * b, 2)];
    let stages: [Vec<BasicBlock>; 4] = std::array::from_fn(|si| {
        let (cin, cout, stride) = widths[si];
        (0..config.stage_blocks[si])
            .map(|bi| {
                if bi == 0 {
                    BasicBlock::new(cin, cout, stride, &mut rng)
                } else {
                    BasicBlock::new(cout, cout, 1, &mut rng)
                }
            })
            .collect()
    });
    let embed = Linear::new(8 * b, config.backbone_out_dim, &mut rng);
    let grams = config
        .gram_taps
        .iter()
        .map(|&tap| GramBlock::new(config.tap_channels(tap), config, &mut rng))
        .collect();
    Ok(GramNet {
        config: config.clone(),
        stem,
        stages,
        embed,
        grams,
        final_hw: (0, 0),
    })
}

/// Convert (H, W, 3) u8 images into a normalized (N, 3, H, W) batch in
/// [-1, 1]. Every image must match the model input side.
pub fn to_input_batch(images: &[&Array3<u8>], side: usize) -> Result<Act> {
    if images.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut x = Act::zeros((images.len(), 3, side, side));
    for (ni, img) in images.iter().enumerate() {
        let (h, w, c) = img.dim();
        if (h, w, c) != (side, side, 3) {
            return Err(Error::InputShapeError(format!(
                "expected {side}x{side}x3 input, got {h}x{w}x{c}"
            )));
        }
        for y in 0..side {
            for xx in 0..side {
                for ci in 0..3 {
                    x[[ni, ci, y, xx]] = (img[[y, xx, ci]] as f64 / 255.0 - 0.5) * 2.0;
                }
            }
        }
    }
    Ok(x)
}

impl GramNet {
    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Evaluation-mode features for a normalized batch; pure, so a
    /// shared model can serve concurrent callers.
    pub fn features(&self, x: &Act) -> Array2<f64> {
        let a0 = self.stem.infer(x);
        let mut acts = Vec::with_capacity(5);
        let mut cur = a0;
        acts.push(cur.clone());
        for stage in &self.stages {
            for block in stage {
                cur = block.infer(&cur);
            }
            acts.push(cur.clone());
        }
        let pooled = global_avg_pool(&cur);
        let f_backbone = self.embed.infer(&pooled);
        let mut parts = vec![f_backbone];
        for (gb, &tap) in self.grams.iter().zip(&self.config.gram_taps) {
            let act = &acts[tap.index().min(4)];
            parts.push(gb.infer(act));
        }
        concat_cols(&parts)
    }

    /// Training-mode features; caches every layer for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Act) -> Array2<f64> {
        let a0 = self.stem.forward(x, true);
        let mut acts = Vec::with_capacity(5);
        let mut cur = a0;
        acts.push(cur.clone());
        for stage in &mut self.stages {
            for block in stage {
                cur = block.forward(&cur, true);
            }
            acts.push(cur.clone());
        }
        let (_, _, h, w) = cur.dim();
        self.final_hw = (h, w);
        let pooled = global_avg_pool(&cur);
        let f_backbone = self.embed.forward(&pooled, true);
        let mut parts = vec![f_backbone];
        for (gb, &tap) in self.grams.iter_mut().zip(&self.config.gram_taps) {
            let act = &acts[tap.index().min(4)];
            parts.push(gb.forward(act, true));
        }
        concat_cols(&parts)
    }

    /// Backpropagate a feature gradient, accumulating parameter grads.
    pub fn backward(&mut self, dfeatures: &Array2<f64>) {
        let bod = self.config.backbone_out_dim;
        let god = self.config.gram_out_dim;

        // Gram blocks first: collect their gradients at each tap depth.
        let mut tap_grads: [Option<Act>; 5] = [None, None, None, None, None];
        for (i, (gb, &tap)) in self
            .grams
            .iter_mut()
            .zip(&self.config.gram_taps)
            .enumerate()
        {
            let dg = dfeatures
                .slice(s![.., bod + i * god..bod + (i + 1) * god])
                .to_owned();
            let dact = gb.backward(&dg);
            let slot = tap.index().min(4);
            match &mut tap_grads[slot] {
                Some(acc) => *acc += &dact,
                none => *none = Some(dact),
            }
        }

        // Backbone sweep from the embedding back to the stem.
        let dpool = self
            .embed
            .backward(&dfeatures.slice(s![.., ..bod]).to_owned());
        let (h, w) = self.final_hw;
        let mut dcur = global_avg_pool_backward(&dpool, h, w);
        for si in (0..4).rev() {
            if let Some(g) = tap_grads[si + 1].take() {
                dcur += &g;
            }
            for block in self.stages[si].iter_mut().rev() {
                dcur = block.backward(&dcur);
            }
        }
        if let Some(g) = tap_grads[0].take() {
            dcur += &g;
        }
        let _ = self.stem.backward(&dcur);
    }
}

fn concat_cols(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("row counts match")
}

impl Parameterized for GramNet {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamPair<'_>)) {
        self.stem.visit("stem", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit(&format!("stage{}.{bi}", si + 1), f);
            }
        }
        self.embed.visit("embed", f);
        for (gi, gb) in self.grams.iter_mut().enumerate() {
            gb.visit(&format!("gram{gi}"), f);
        }
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.stem.visit_state("stem", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_state(&format!("stage{}.{bi}", si + 1), f);
            }
        }
        self.embed.visit_state("embed", f);
        for (gi, gb) in self.grams.iter_mut().enumerate() {
            gb.visit_state(&format!("gram{gi}"), f);
        }
    }
}

/// Extract the feature vector of one image in evaluation mode.
pub fn forward_features(model: &GramNet, image: &Array3<u8>) -> Result<FeatureVector> {
    let x = to_input_batch(&[image], model.config.input_side)?;
    let f = model.features(&x);
    let v = f.row(0).to_owned();
    if v.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalError(
            "non-finite feature vector".into(),
        ));
    }
    Ok(v)
}

/// Evaluation-mode features for many images at once.
pub fn forward_features_batch(model: &GramNet, images: &[&Array3<u8>]) -> Result<Array2<f64>> {
    let x = to_input_batch(images, model.config.input_side)?;
    let f = model.features(&x);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalError(
            "non-finite feature vector".into(),
        ));
    }
    Ok(f)
}

/// Which decision path a head serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    WholeFace,
    PerPatch,
    Concat,
}

/// A 2-class classifier head. Whole-face and per-patch heads are a
/// single linear layer; the concat head adds one hidden ReLU layer.
pub struct ClassifierHead {
    pub kind: HeadKind,
    hidden: Option<(Linear, Relu2)>,
    out: Linear,
}

impl ClassifierHead {
    pub fn whole_face(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            kind: HeadKind::WholeFace,
            hidden: None,
            out: Linear::new(feature_dim, 2, rng),
        }
    }

    pub fn per_patch(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            kind: HeadKind::PerPatch,
            hidden: None,
            out: Linear::new(feature_dim, 2, rng),
        }
    }

    /// Head over `n_patches` concatenated feature vectors.
    pub fn concat(feature_dim: usize, n_patches: usize, rng: &mut ChaCha8Rng) -> Self {
        const HIDDEN: usize = 256;
        ClassifierHead {
            kind: HeadKind::Concat,
            hidden: Some((
                Linear::new(n_patches * feature_dim, HIDDEN, rng),
                Relu2::default(),
            )),
            out: Linear::new(HIDDEN, 2, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.hidden {
            Some((h, _)) => h.in_dim(),
            None => self.out.in_dim(),
        }
    }

    fn hidden_dim(&self) -> Option<usize> {
        self.hidden.as_ref().map(|(h, _)| h.out_dim())
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, features: &Array2<f64>) -> Array2<f64> {
        match &self.hidden {
            Some((h, r)) => self.out.infer(&r.infer(&h.infer(features))),
            None => self.out.infer(features),
        }
    }

    pub fn logits_train(&mut self, features: &Array2<f64>) -> Array2<f64> {
        match &mut self.hidden {
            Some((h, r)) => {
                let y = h.forward(features, true);
                let y = r.forward(&y, true);
                self.out.forward(&y, true)
            }
            None => self.out.forward(features, true),
        }
    }

    pub fn backward(&mut self, dlogits: &Array2<f64>) -> Array2<f64> {
        let d = self.out.backward(dlogits);
        match &mut self.hidden {
            Some((h, r)) => {
                let d = r.backward(&d);
                h.backward(&d)
            }
            None => d,
        }
    }
}

impl Parameterized for ClassifierHead {
    fn for_each_param(&mut self, f: &mut dyn FnMut(ParamPair<'_>)) {
        if let Some((h, _)) = &mut self.hidden {
            h.visit("hidden", f);
        }
        self.out.visit("out", f);
    }

    fn for_each_state(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        if let Some((h, _)) = &mut self.hidden {
            h.visit_state("hidden", f);
        }
        self.out.visit_state("out", f);
    }
}

/// Probability of the REAL class from 2-class logits.
pub fn prob_real_from_logits(logits: &Array2<f64>) -> Vec<f64> {
    let probs = softmax_rows(logits);
    probs
        .rows()
        .into_iter()
        .map(|r| r[BinaryLabel::Real.class_index()])
        .collect()
}

/// Classify one image through the model and a whole-face or per-patch
/// head.
pub fn classify(
    model: &GramNet,
    head: &ClassifierHead,
    image: &Array3<u8>,
) -> Result<(BinaryLabel, f64)> {
    if head.kind == HeadKind::Concat {
        return Err(Error::InvalidInput(
            "classify requires a whole_face or per_patch head; use classify_concat".into(),
        ));
    }
    if head.input_dim() != model.feature_dim() {
        return Err(Error::DimensionError(format!(
            "head expects {} features, model produces {}",
            head.input_dim(),
            model.feature_dim()
        )));
    }
    let f = forward_features(model, image)?;
    let logits = head.logits(&f.insert_axis(Axis(0)));
    let p = prob_real_from_logits(&logits)[0];
    Ok((BinaryLabel::from_prob_real(p), p))
}

/// Classify from an ordered list of patch feature vectors through the
/// concat head. The order must be the canonical PatchName order.
pub fn classify_concat(
    head: &ClassifierHead,
    features: &[FeatureVector],
) -> Result<(BinaryLabel, f64)> {
    if head.kind != HeadKind::Concat {
        return Err(Error::InvalidInput(
            "classify_concat requires a concat head".into(),
        ));
    }
    let n = features.len();
    if n == 0 || head.input_dim() % n != 0 {
        return Err(Error::DimensionError(format!(
            "{} feature vectors do not divide head input {}",
            n,
            head.input_dim()
        )));
    }
    let each = head.input_dim() / n;
    let mut flat = Array2::<f64>::zeros((1, head.input_dim()));
    for (i, f) in features.iter().enumerate() {
        if f.len() != each {
            return Err(Error::DimensionError(format!(
                "feature {} has length {}, expected {}",
                i,
                f.len(),
                each
            )));
        }
        flat.slice_mut(s![0, i * each..(i + 1) * each]).assign(f);
    }
    let logits = head.logits(&flat);
    let p = prob_real_from_logits(&logits)[0];
    Ok((BinaryLabel::from_prob_real(p), p))
}

/// Checkpoint metadata stored alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct CheckpointMeta {
    pub rng_seed: u64,
    /// Dataset fingerprint plus train-config digest.
    pub training_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    kind: HeadKind,
    input_dim: usize,
    hidden_dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: GramNetConfig,
    heads: Vec<HeadMeta>,
    meta: CheckpointMeta,
    tensors: Vec<TensorMeta>,
}

const MAGIC: &[u8; 4] = b"OCLF";
/// Bump on any incompatible layout change.
pub const CHECKPOINT_VERSION: u32 = 1;

fn collect_state(
    model: &mut GramNet,
    heads: &mut [ClassifierHead],
) -> (Vec<TensorMeta>, Vec<f64>) {
    let mut metas = Vec::new();
    let mut data = Vec::new();
    {
        let mut take = |name: &str, view: ArrayViewMutD<'_, f64>| {
            metas.push(TensorMeta {
                name: name.to_string(),
                dims: view.shape().to_vec(),
            });
            data.extend(view.iter().copied());
        };
        model.for_each_state(&mut |name, view| take(&format!("model.{name}"), view));
        for (i, head) in heads.iter_mut().enumerate() {
            head.for_each_state(&mut |name, view| take(&format!("head{i}.{name}"), view));
        }
    }
    (metas, data)
}

/// Serialize model, heads, and metadata to a single binary file.
///
/// Layout: magic "OCLF", u32 LE version, u64 LE header length, header
/// JSON, tensor payload (f64 LE in header order), and a trailing
/// SHA-256 over everything before it.
pub fn save_checkpoint(
    model: &mut GramNet,
    heads: &mut [ClassifierHead],
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (tensors, data) = collect_state(model, heads);
    let header = CheckpointHeader {
        config: model.config.clone(),
        heads: heads
            .iter()
            .map(|h| HeadMeta {
                kind: h.kind,
                input_dim: h.input_dim(),
                hidden_dim: h.hidden_dim(),
            })
            .collect(),
        meta: meta.clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::ConfigError(e.to_string()))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + data.len() * 8 + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

/// Load a checkpoint, verifying magic, version, and content hash.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(GramNet, Vec<ClassifierHead>, CheckpointMeta)> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(Error::CheckpointCorrupt("file too short".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::CheckpointCorrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionError {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let body_len = bytes.len() - 32;
    let stored = &bytes[body_len..];
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != stored {
        return Err(Error::CheckpointCorrupt("content hash mismatch".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body_len)
        .ok_or_else(|| Error::CheckpointCorrupt("header length out of range".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::CheckpointCorrupt(format!("bad header: {e}")))?;

    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.dims.iter().product::<usize>())
        .sum();
    if body_len - header_end != expected * 8 {
        return Err(Error::CheckpointCorrupt(format!(
            "payload holds {} bytes, header declares {}",
            body_len - header_end,
            expected * 8
        )));
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in bytes[header_end..body_len].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    let mut model = build_gramnet(&header.config, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut heads: Vec<ClassifierHead> = header
        .heads
        .iter()
        .map(|hm| match hm.kind {
            HeadKind::WholeFace => ClassifierHead::whole_face(hm.input_dim, &mut rng),
            HeadKind::PerPatch => ClassifierHead::per_patch(hm.input_dim, &mut rng),
            HeadKind::Concat => {
                let hidden_dim = hm.hidden_dim.unwrap_or(256);
                ClassifierHead {
                    kind: HeadKind::Concat,
                    hidden: Some((
                        Linear::new(hm.input_dim, hidden_dim, &mut rng),
                        Relu2::default(),
                    )),
                    out: Linear::new(hidden_dim, 2, &mut rng),
                }
            }
        })
        .collect();

    let mut cursor = 0usize;
    let mut tensor_idx = 0usize;
    let mut failure: Option<Error> = None;
    {
        let tensors = &header.tensors;
        let mut restore = |name: &str, mut view: ArrayViewMutD<'_, f64>| {
            if failure.is_some() {
                return;
            }
            let Some(meta) = tensors.get(tensor_idx) else {
                failure = Some(Error::CheckpointCorrupt(format!(
                    "missing tensor record for {name}"
                )));
                return;
            };
            if meta.name != name || meta.dims != view.shape() {
                failure = Some(Error::CheckpointCorrupt(format!(
                    "tensor mismatch: file has {} {:?}, model expects {} {:?}",
                    meta.name,
                    meta.dims,
                    name,
                    view.shape()
                )));
                return;
            }
            let n = view.len();
            for (dst, &src) in view.iter_mut().zip(&values[cursor..cursor + n]) {
                *dst = src;
            }
            cursor += n;
            tensor_idx += 1;
        };
        model.for_each_state(&mut |name, view| restore(&format!("model.{name}"), view));
        for (i, head) in heads.iter_mut().enumerate() {
            head.for_each_state(&mut |name, view| restore(&format!("head{i}.{name}"), view));
        }
    }
    if let Some(err) = failure {
        return Err(err);
    }
    if tensor_idx != header.tensors.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "file declares {} tensors, model consumed {tensor_idx}",
            header.tensors.len()
        )));
    }
    Ok((model, heads, header.meta))
}
