//! Face preprocessing: canonical resize, semantic and block patch
//! extraction, occlusion zeroing, and pluggable face/occlusion providers.
//!
//! All functions here are pure over their inputs; nothing holds shared
//! mutable state.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::types::{
    FaceLandmarks, ImageSample, OcclusionMask, Patch, PatchKey, PatchMode, PatchName, PatchSet,
    SourceBox,
};

/// Default padding fraction applied around semantic landmark boxes.
pub const DEFAULT_PAD: f64 = 0.15;

/// Bilinear resize of an (H, W, 3) u8 image, half-pixel-center mapping
/// (corner-aligned = false). Pinned so resized outputs are bit-stable.
pub fn resize_bilinear(pixels: &Array3<u8>, out_h: usize, out_w: usize) -> Array3<u8> {
    let (in_h, in_w, ch) = pixels.dim();
    debug_assert!(in_h > 0 && in_w > 0);
    if in_h == out_h && in_w == out_w {
        return pixels.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut out = Array3::<u8>::zeros((out_h, out_w, ch));
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            for c in 0..ch {
                let p00 = pixels[[y0, x0, c]] as f64;
                let p01 = pixels[[y0, x1, c]] as f64;
                let p10 = pixels[[y1, x0, c]] as f64;
                let p11 = pixels[[y1, x1, c]] as f64;
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                let v = top + (bot - top) * wy;
                out[[oy, ox, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Nearest-neighbor resize for binary masks; keeps values in {0, 1}.
fn resize_mask_nearest(mask: &Array2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (in_h, in_w) = mask.dim();
    if in_h == out_h && in_w == out_w {
        return mask.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let iy = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(in_h - 1);
        let ix = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(in_w - 1);
        mask[[iy, ix]]
    })
}

/// Resize a sample to side x side, rescaling landmarks and the occlusion
/// mask by the same factors. Label and split are preserved.
pub fn resize_to_canonical(image: &ImageSample, side: usize) -> Result<ImageSample> {
    if image.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if side < 8 {
        return Err(Error::InvalidInput(format!(
            "canonical side must be >= 8, got {side}"
        )));
    }
    let (h, w) = image.dims();
    let pixels = resize_bilinear(&image.pixels, side, side);
    let sx = side as f64 / w as f64;
    let sy = side as f64 / h as f64;
    let landmarks = image.landmarks.as_ref().map(|lm| lm.scaled(sx, sy));
    let occlusion = match &image.occlusion {
        Some(m) => Some(OcclusionMask::new(resize_mask_nearest(m.grid(), side, side))?),
        None => None,
    };
    Ok(ImageSample {
        id: image.id.clone(),
        pixels,
        label: image.label,
        split: image.split,
        landmarks,
        occlusion,
        occluded_flag: image.occluded_flag,
        face_box: None,
    })
}

/// Cut a canonical square image into disjoint block_h x block_w blocks,
/// row-major. The side must be divisible by both block dimensions.
pub fn block_patches(image: &ImageSample, block_h: usize, block_w: usize) -> Result<PatchSet> {
    let (h, w) = image.dims();
    if h != w {
        return Err(Error::InvalidBlockGeometry(format!(
            "image must be canonical square, got {h}x{w}"
        )));
    }
    if block_h == 0 || block_w == 0 || h % block_h != 0 || w % block_w != 0 {
        return Err(Error::InvalidBlockGeometry(format!(
            "side {h} not divisible by block {block_h}x{block_w}"
        )));
    }
    let rows = h / block_h;
    let cols = w / block_w;
    let mut patches = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let y0 = row * block_h;
            let x0 = col * block_w;
            let pixels = image
                .pixels
                .slice(ndarray::s![y0..y0 + block_h, x0..x0 + block_w, ..])
                .to_owned();
            patches.push(Patch {
                key: PatchKey::Block { row, col },
                pixels,
                source_box: SourceBox {
                    x0,
                    y0,
                    x1: x0 + block_w,
                    y1: y0 + block_h,
                },
            });
        }
    }
    Ok(PatchSet {
        mode: PatchMode::Block,
        patches,
    })
}

/// Landmark index groups behind each semantic patch box.
mod groups {
    pub const RIGHT_EYE: std::ops::Range<usize> = 36..42;
    pub const LEFT_EYE: std::ops::Range<usize> = 42..48;
    pub const NOSE: std::ops::Range<usize> = 27..36;
    pub const MOUTH: std::ops::Range<usize> = 48..68;
    pub const CHIN_JAW: std::ops::Range<usize> = 6..11;
    pub const RIGHT_JAW: std::ops::Range<usize> = 1..6;
    pub const LEFT_JAW: std::ops::Range<usize> = 11..16;
}

#[derive(Debug, Clone, Copy)]
struct RawBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

fn bbox_of(points: &[[f64; 2]], idx: impl Iterator<Item = usize>) -> RawBox {
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for i in idx {
        let [x, y] = points[i];
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    RawBox { x0, y0, x1, y1 }
}

/// The fixed landmark-group-to-box mapping for the seven semantic patches.
/// Returns unpadded boxes in image coordinates.
fn semantic_boxes(lm: &FaceLandmarks) -> Vec<(PatchName, RawBox)> {
    let pts = lm.points();
    let right_eye = bbox_of(pts, groups::RIGHT_EYE);
    let left_eye = bbox_of(pts, groups::LEFT_EYE);
    let nose = bbox_of(pts, groups::NOSE);
    let mouth = bbox_of(pts, groups::MOUTH);

    // Chin: jaw points 6-10 plus the lowest mouth point.
    let lowest_mouth = groups::MOUTH
        .map(|i| pts[i][1])
        .fold(f64::NEG_INFINITY, f64::max);
    let jaw = bbox_of(pts, groups::CHIN_JAW);
    let chin = RawBox {
        x0: jaw.x0,
        y0: jaw.y0.min(lowest_mouth),
        x1: jaw.x1,
        y1: jaw.y1.max(lowest_mouth),
    };

    // Cheeks span from the jaw line to the nose edge, vertically from the
    // eye bottom to the mouth top.
    let right_jaw = bbox_of(pts, groups::RIGHT_JAW);
    let left_jaw = bbox_of(pts, groups::LEFT_JAW);
    let right_cheek = RawBox {
        x0: right_jaw.x0,
        y0: right_eye.y1,
        x1: nose.x0,
        y1: mouth.y0,
    };
    let left_cheek = RawBox {
        x0: nose.x1,
        y0: left_eye.y1,
        x1: left_jaw.x1,
        y1: mouth.y0,
    };

    vec![
        (PatchName::RightCheek, right_cheek),
        (PatchName::LeftCheek, left_cheek),
        (PatchName::Mouth, mouth),
        (PatchName::Nose, nose),
        (PatchName::Chin, chin),
        (PatchName::RightEye, right_eye),
        (PatchName::LeftEye, left_eye),
    ]
}

/// Compute the padded, clamped integer source box for one patch.
fn finalize_box(raw: RawBox, pad: f64, w: usize, h: usize, name: PatchName) -> Result<SourceBox> {
    if !(raw.x1 > raw.x0 && raw.y1 > raw.y0) {
        return Err(Error::DegenerateLandmarks(format!(
            "{name} box has zero area"
        )));
    }
    let bw = raw.x1 - raw.x0;
    let bh = raw.y1 - raw.y0;
    let x0 = (raw.x0 - pad * bw).floor().max(0.0) as usize;
    let y0 = (raw.y0 - pad * bh).floor().max(0.0) as usize;
    let x1 = ((raw.x1 + pad * bw).ceil() as usize).min(w).max(x0 + 1);
    let y1 = ((raw.y1 + pad * bh).ceil() as usize).min(h).max(y0 + 1);
    let x0 = x0.min(w - 1);
    let y0 = y0.min(h - 1);
    Ok(SourceBox { x0, y0, x1, y1 })
}

/// Extract the seven semantic patches from a canonical image.
///
/// Each patch is the bounding box of its landmark group, expanded by
/// `pad` on every side, clamped to image bounds, then resized to
/// `out_side` (the model input size).
pub fn semantic_patches(
    image: &ImageSample,
    landmarks: &FaceLandmarks,
    pad: f64,
    out_side: usize,
) -> Result<PatchSet> {
    if !(0.0..=0.5).contains(&pad) {
        return Err(Error::InvalidInput(format!(
            "pad must be in [0, 0.5], got {pad}"
        )));
    }
    let (h, w) = image.dims();
    if !landmarks.within(w, h) {
        return Err(Error::InvalidLandmarks(
            "landmark outside image bounds".into(),
        ));
    }
    let mut patches = Vec::with_capacity(7);
    for (name, raw) in semantic_boxes(landmarks) {
        let sb = finalize_box(raw, pad, w, h, name)?;
        let crop = image
            .pixels
            .slice(ndarray::s![sb.y0..sb.y1, sb.x0..sb.x1, ..])
            .to_owned();
        let pixels = resize_bilinear(&crop, out_side, out_side);
        patches.push(Patch {
            key: PatchKey::Name(name),
            pixels,
            source_box: sb,
        });
    }
    Ok(PatchSet {
        mode: PatchMode::Semantic,
        patches,
    })
}

/// Unpadded semantic boxes (no resize); used by tests checking the
/// monotone-expansion property of `pad`.
pub fn semantic_boxes_raw(
    image: &ImageSample,
    landmarks: &FaceLandmarks,
    pad: f64,
) -> Result<Vec<(PatchName, SourceBox)>> {
    let (h, w) = image.dims();
    semantic_boxes(landmarks)
        .into_iter()
        .map(|(name, raw)| finalize_box(raw, pad, w, h, name).map(|b| (name, b)))
        .collect()
}

/// Zero out every pixel where the mask is 1. Pixels with mask 0 are
/// bit-identical before and after.
pub fn apply_occlusion(image: &ImageSample, mask: &OcclusionMask) -> Result<ImageSample> {
    let (h, w) = image.dims();
    let (mh, mw) = mask.dims();
    if (mh, mw) != (h, w) {
        return Err(Error::MaskShapeMismatch {
            mask_h: mh,
            mask_w: mw,
            img_h: h,
            img_w: w,
        });
    }
    let mut out = image.clone();
    for ((y, x), &m) in mask.grid().indexed_iter() {
        if m == 1 {
            for c in 0..3 {
                out.pixels[[y, x, c]] = 0;
            }
        }
    }
    Ok(out)
}

/// Fraction of pixels inside the patch source box that the mask marks
/// occluded.
pub fn patch_occlusion_fraction(patch: &Patch, mask: &OcclusionMask) -> Result<f64> {
    let (mh, mw) = mask.dims();
    let sb = patch.source_box;
    if sb.x1 > mw || sb.y1 > mh || sb.area() == 0 {
        return Err(Error::InvalidInput(format!(
            "patch box ({},{})-({},{}) outside {}x{} mask",
            sb.x0, sb.y0, sb.x1, sb.y1, mh, mw
        )));
    }
    let sub = mask.grid().slice(ndarray::s![sb.y0..sb.y1, sb.x0..sb.x1]);
    let occluded = sub.iter().filter(|&&v| v == 1).count();
    Ok(occluded as f64 / sb.area() as f64)
}

/// A face crop plus its 68 landmarks, as returned by a provider.
#[derive(Debug, Clone)]
pub struct FaceDetection {
    pub crop: ImageSample,
    pub landmarks: FaceLandmarks,
}

/// Pluggable source of face crops and landmarks. The built-in
/// [`ManifestProvider`] reads annotations stored on the sample; external
/// detectors plug in by implementing this trait.
pub trait FaceProvider: Send + Sync {
    fn detect(&self, image: &ImageSample) -> Result<FaceDetection>;
}

/// Pluggable source of occlusion masks.
pub trait OcclusionProvider: Send + Sync {
    fn mask(&self, image: &ImageSample) -> Result<Option<OcclusionMask>>;
}

/// Reads face box, landmarks, and occlusion mask from the sample's
/// manifest annotations.
#[derive(Debug, Default, Clone, Copy)]
pub struct ManifestProvider;

impl FaceProvider for ManifestProvider {
    fn detect(&self, image: &ImageSample) -> Result<FaceDetection> {
        let landmarks = image.landmarks.clone().ok_or_else(|| {
            Error::MissingAnnotation(format!("sample {} has no landmarks", image.id))
        })?;
        match image.face_box {
            Some(sb) => {
                let (h, w) = image.dims();
                if sb.x1 > w || sb.y1 > h || sb.area() == 0 {
                    return Err(Error::FaceNotFound(image.id.clone()));
                }
                let pixels = image
                    .pixels
                    .slice(ndarray::s![sb.y0..sb.y1, sb.x0..sb.x1, ..])
                    .to_owned();
                let occlusion = match &image.occlusion {
                    Some(m) => {
                        let sub = m.grid().slice(ndarray::s![sb.y0..sb.y1, sb.x0..sb.x1]);
                        Some(OcclusionMask::new(sub.to_owned())?)
                    }
                    None => None,
                };
                let mut crop = ImageSample::new(image.id.clone(), pixels, image.label, image.split);
                crop.occlusion = occlusion;
                crop.occluded_flag = image.occluded_flag;
                Ok(FaceDetection {
                    crop,
                    landmarks: landmarks.translated(-(sb.x0 as f64), -(sb.y0 as f64)),
                })
            }
            None => {
                let mut crop = image.clone();
                crop.face_box = None;
                Ok(FaceDetection {
                    crop,
                    landmarks,
                })
            }
        }
    }
}

impl OcclusionProvider for ManifestProvider {
    fn mask(&self, image: &ImageSample) -> Result<Option<OcclusionMask>> {
        Ok(image.occlusion.clone())
    }
}

/// Run the provider on a sample.
pub fn detect_face(image: &ImageSample, provider: &dyn FaceProvider) -> Result<FaceDetection> {
    if image.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    provider.detect(image)
}

/// Mean over channels, used by diagnostics that need a single plane.
pub fn luma(pixels: &Array3<u8>) -> Array2<f64> {
    pixels
        .map(|&v| v as f64)
        .mean_axis(Axis(2))
        .expect("3-channel image")
}
