//! Domain types shared across the crate.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary class label. `Real` is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Real,
    Fake,
}

impl BinaryLabel {
    /// Class index used by the network heads: fake = 0, real = 1.
    pub fn class_index(self) -> usize {
        match self {
            BinaryLabel::Fake => 0,
            BinaryLabel::Real => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Self {
        if idx == 1 {
            BinaryLabel::Real
        } else {
            BinaryLabel::Fake
        }
    }

    /// Label rule shared by every classifier head: real iff prob_real >= 0.5.
    pub fn from_prob_real(prob_real: f64) -> Self {
        if prob_real >= 0.5 {
            BinaryLabel::Real
        } else {
            BinaryLabel::Fake
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinaryLabel::Real => write!(f, "real"),
            BinaryLabel::Fake => write!(f, "fake"),
        }
    }
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// The seven named semantic face patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchName {
    RightCheek,
    LeftCheek,
    Mouth,
    Nose,
    Chin,
    RightEye,
    LeftEye,
}

impl PatchName {
    /// Canonical ordering used everywhere patches are enumerated or
    /// feature vectors are concatenated.
    pub const ALL: [PatchName; 7] = [
        PatchName::RightCheek,
        PatchName::LeftCheek,
        PatchName::Mouth,
        PatchName::Nose,
        PatchName::Chin,
        PatchName::RightEye,
        PatchName::LeftEye,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatchName::RightCheek => "right_cheek",
            PatchName::LeftCheek => "left_cheek",
            PatchName::Mouth => "mouth",
            PatchName::Nose => "nose",
            PatchName::Chin => "chin",
            PatchName::RightEye => "right_eye",
            PatchName::LeftEye => "left_eye",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for PatchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one patch: a named semantic region or a grid block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKey {
    Name(PatchName),
    Block { row: usize, col: usize },
}

impl PatchKey {
    /// Inverse of `Display`: "mouth" or "block_2_1".
    pub fn parse(s: &str) -> Option<PatchKey> {
        if let Some(name) = PatchName::from_str_opt(s) {
            return Some(PatchKey::Name(name));
        }
        let rest = s.strip_prefix("block_")?;
        let (row, col) = rest.split_once('_')?;
        Some(PatchKey::Block {
            row: row.parse().ok()?,
            col: col.parse().ok()?,
        })
    }
}

impl fmt::Display for PatchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchKey::Name(n) => write!(f, "{n}"),
            PatchKey::Block { row, col } => write!(f, "block_{row}_{col}"),
        }
    }
}

/// 68-point facial landmarks, iBUG indexing: jaw 0-16, brows 17-26,
/// nose 27-35, eyes 36-47, mouth 48-67. Coordinates are (x, y) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLandmarks {
    points: Vec<[f64; 2]>,
}

impl FaceLandmarks {
    pub const NUM_POINTS: usize = 68;

    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != Self::NUM_POINTS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {} points, got {}",
                Self::NUM_POINTS,
                points.len()
            )));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidLandmarks("non-finite coordinate".into()));
        }
        Ok(FaceLandmarks { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> [f64; 2] {
        self.points[idx]
    }

    /// Rescale all coordinates by independent x/y factors.
    pub fn scaled(&self, sx: f64, sy: f64) -> FaceLandmarks {
        FaceLandmarks {
            points: self.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect(),
        }
    }

    /// Translate all coordinates (used when cropping).
    pub fn translated(&self, dx: f64, dy: f64) -> FaceLandmarks {
        FaceLandmarks {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }

    /// True when every point lies inside a w x h pixel grid.
    pub fn within(&self, w: usize, h: usize) -> bool {
        self.points
            .iter()
            .all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64)
    }
}

/// Binary occlusion mask; 1 marks an occluded pixel. Shape (H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    mask: Array2<u8>,
}

impl OcclusionMask {
    pub fn new(mask: Array2<u8>) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput(
                "occlusion mask values must be 0 or 1".into(),
            ));
        }
        Ok(OcclusionMask { mask })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        OcclusionMask {
            mask: Array2::zeros((h, w)),
        }
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn occluded_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    pub fn any_occluded(&self) -> bool {
        self.mask.iter().any(|&v| v == 1)
    }
}

/// Axis-aligned pixel box in canonical-image coordinates.
/// Half-open: covers x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl SourceBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// One labeled face image plus optional annotations.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// (H, W, 3) intensities in [0, 255].
    pub pixels: Array3<u8>,
    /// None encodes an unknown label (prediction-only input).
    pub label: Option<BinaryLabel>,
    pub split: Split,
    pub landmarks: Option<FaceLandmarks>,
    pub occlusion: Option<OcclusionMask>,
    pub occluded_flag: Option<bool>,
    /// Optional face crop box [x0, y0, x1, y1] from the manifest.
    pub face_box: Option<SourceBox>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<u8>, label: Option<BinaryLabel>, split: Split) -> Self {
        ImageSample {
            id: id.into(),
            pixels,
            label,
            split,
            landmarks: None,
            occlusion: None,
            occluded_flag: None,
            face_box: None,
        }
    }

    /// (height, width) of the pixel grid.
    pub fn dims(&self) -> (usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1)
    }

    pub fn is_empty(&self) -> bool {
        let (h, w) = self.dims();
        h == 0 || w == 0
    }
}

/// One extracted patch.
#[derive(Debug, Clone)]
pub struct Patch {
    pub key: PatchKey,
    /// (h, w, 3) pixels. Semantic patches are resized to the model input
    /// side; block patches keep their native block size.
    pub pixels: Array3<u8>,
    /// Where the patch came from, in canonical-image coordinates.
    pub source_box: SourceBox,
}

/// The patch division mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    Semantic,
    Block,
}

/// Ordered set of patches cut from one face.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub mode: PatchMode,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, key: PatchKey) -> Option<&Patch> {
        self.patches.iter().find(|p| p.key == key)
    }
}

/// Per-patch vote weights for the third diagnostic path. Missing entries
/// count as 1; block patches always vote with weight 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWeights {
    weights: BTreeMap<PatchName, u32>,
}

impl Default for PatchWeights {
    fn default() -> Self {
        PatchWeights {
            weights: BTreeMap::new(),
        }
    }
}

impl PatchWeights {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn new(weights: BTreeMap<PatchName, u32>) -> Result<Self> {
        if weights.values().any(|&w| w == 0) {
            return Err(Error::InvalidInput("patch weights must be >= 1".into()));
        }
        Ok(PatchWeights { weights })
    }

    pub fn with(mut self, name: PatchName, weight: u32) -> Result<Self> {
        if weight == 0 {
            return Err(Error::InvalidInput("patch weights must be >= 1".into()));
        }
        self.weights.insert(name, weight);
        Ok(self)
    }

    pub fn weight_of(&self, name: PatchName) -> u32 {
        self.weights.get(&name).copied().unwrap_or(1)
    }

    pub fn weight_of_key(&self, key: PatchKey) -> u32 {
        match key {
            PatchKey::Name(n) => self.weight_of(n),
            PatchKey::Block { .. } => 1,
        }
    }

    pub fn entries(&self) -> &BTreeMap<PatchName, u32> {
        &self.weights
    }
}
