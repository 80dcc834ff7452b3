//! Dataset manifests, image loading, and a deterministic synthetic
//! face generator for desk-scale experiments.
//!
//! A manifest is a JSON-lines file: the first line is a header
//! `{"manifest_version": 1, "root": "<dir>"}`, every following line one
//! [`ManifestRecord`]. Images are PNG or JPEG; occlusion masks are
//! 1-channel PNGs with values {0, 255}, mapped to {0, 1} on load.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{BinaryLabel, FaceLandmarks, ImageSample, OcclusionMask, SourceBox, Split};

/// Manifest format version this build reads and writes.
pub const MANIFEST_VERSION: u32 = 1;

/// One dataset entry as stored in the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    /// Image path relative to the manifest root.
    pub path: String,
    pub label: BinaryLabel,
    pub split: Split,
    /// 68 [x, y] landmark pairs, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<[f64; 2]>>,
    /// Path to a 1-channel {0,255} mask PNG, relative to root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion_mask: Option<String>,
    /// Whether the face is (partially) occluded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluded: Option<bool>,
    /// Face crop box [x0, y0, x1, y1], half-open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<[usize; 4]>,
}

/// A validated dataset manifest with a content fingerprint.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub version: u32,
    /// Absolute directory that record paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Hex SHA-256 over the canonicalized records.
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    manifest_version: u32,
    root: String,
}

/// Canonical JSON for one record: serde_json object keys are sorted, so
/// serializing through `Value` yields a stable byte string.
fn canonical_record_json(rec: &ManifestRecord) -> String {
    let value = serde_json::to_value(rec).expect("record serializes");
    serde_json::to_string(&value).expect("value serializes")
}

/// Fingerprint over all records in order.
pub fn manifest_fingerprint(records: &[ManifestRecord]) -> String {
    let mut hasher = Sha256::new();
    for rec in records {
        hasher.update(canonical_record_json(rec).as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn validate_record(rec: &ManifestRecord, root: &Path, line: usize) -> Result<()> {
    if rec.path.is_empty() {
        return Err(Error::ManifestInvalid {
            line,
            msg: "empty path".into(),
        });
    }
    if let Some(lm) = &rec.landmarks {
        if lm.len() != FaceLandmarks::NUM_POINTS {
            return Err(Error::ManifestInvalid {
                line,
                msg: format!(
                    "expected {} landmark pairs, got {}",
                    FaceLandmarks::NUM_POINTS,
                    lm.len()
                ),
            });
        }
        if lm.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::ManifestInvalid {
                line,
                msg: "non-finite landmark coordinate".into(),
            });
        }
    }
    if let Some([x0, y0, x1, y1]) = rec.face_box {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::ManifestInvalid {
                line,
                msg: format!("degenerate face_box [{x0},{y0},{x1},{y1}]"),
            });
        }
    }
    if !root.join(&rec.path).is_file() {
        return Err(Error::ManifestInvalid {
            line,
            msg: format!("image file not found: {}", rec.path),
        });
    }
    if let Some(mask) = &rec.occlusion_mask {
        if !root.join(mask).is_file() {
            return Err(Error::ManifestInvalid {
                line,
                msg: format!("mask file not found: {mask}"),
            });
        }
    }
    Ok(())
}

/// Load and validate a manifest file.
///
/// Record paths are checked for existence and uniqueness; landmark
/// arrays must hold exactly 68 pairs. Errors carry the 1-based line
/// number of the offending record.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();

    let header_line = lines
        .next()
        .ok_or_else(|| Error::ManifestInvalid {
            line: 1,
            msg: "empty file, expected header".into(),
        })??;
    let header: ManifestHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::ManifestInvalid {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.manifest_version != MANIFEST_VERSION {
        return Err(Error::ManifestInvalid {
            line: 1,
            msg: format!(
                "manifest_version {} unsupported (expected {MANIFEST_VERSION})",
                header.manifest_version
            ),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let root = if Path::new(&header.root).is_absolute() {
        PathBuf::from(&header.root)
    } else {
        base.join(&header.root)
    };

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::ManifestInvalid {
                line: line_no,
                msg: format!("bad record: {e}"),
            })?;
        validate_record(&rec, &root, line_no)?;
        if !seen.insert(rec.path.clone()) {
            return Err(Error::ManifestInvalid {
                line: line_no,
                msg: format!("duplicate path: {}", rec.path),
            });
        }
        records.push(rec);
    }
    let fingerprint = manifest_fingerprint(&records);
    Ok(DatasetManifest {
        version: header.manifest_version,
        root,
        records,
        fingerprint,
    })
}

/// Write a manifest file with a relative root of ".".
///
/// The file lands next to the images it describes, so record paths stay
/// valid when the directory moves.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        manifest_version: manifest.version,
        root: ".".into(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::ConfigError(e.to_string()))?;
    writeln!(w)?;
    for rec in &manifest.records {
        w.write_all(canonical_record_json(rec).as_bytes())?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Records of one split, in manifest order. Absent or empty splits are
/// an error so callers can't silently train on nothing.
pub fn split_view(manifest: &DatasetManifest, split: Split) -> Result<Vec<&ManifestRecord>> {
    let view: Vec<&ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == split)
        .collect();
    if view.is_empty() {
        return Err(Error::SplitMissing(split));
    }
    Ok(view)
}

/// Decode an image to (H, W, 3) u8, consulting the `OCLF_CACHE_DIR`
/// cache when that environment variable is set.
pub fn decode_image(path: &Path) -> Result<Array3<u8>> {
    if let Some(cache_dir) = std::env::var_os("OCLF_CACHE_DIR") {
        let cache_dir = PathBuf::from(cache_dir);
        if let Some(key) = cache_key(path) {
            let cache_path = cache_dir.join(format!("oclf-img-{key}.bin"));
            if let Ok(pixels) = read_cached(&cache_path) {
                return Ok(pixels);
            }
            let pixels = decode_image_uncached(path)?;
            std::fs::create_dir_all(&cache_dir)?;
            write_cached(&cache_path, &pixels)?;
            return Ok(pixels);
        }
    }
    decode_image_uncached(path)
}

fn decode_image_uncached(path: &Path) -> Result<Array3<u8>> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Array3::from_shape_vec((h as usize, w as usize, 3), raw)
        .map_err(|e| Error::Image(e.to_string()))
}

/// Cache key from path, file length, and mtime so edits invalidate it.
fn cache_key(path: &Path) -> Option<String> {
    let meta = std::fs::metadata(path).ok()?;
    let mtime = meta.modified().ok()?;
    let nanos = mtime
        .duration_since(std::time::UNIX_EPOCH)
        .ok()?
        .as_nanos();
    let mut hasher = Sha256::new();
    hasher.update(path.to_string_lossy().as_bytes());
    hasher.update(meta.len().to_le_bytes());
    hasher.update(nanos.to_le_bytes());
    Some(hex_string(&hasher.finalize())[..32].to_string())
}

fn read_cached(path: &Path) -> Result<Array3<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Image("truncated cache entry".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + h * w * 3 {
        return Err(Error::Image("cache entry size mismatch".into()));
    }
    Array3::from_shape_vec((h, w, 3), bytes[8..].to_vec())
        .map_err(|e| Error::Image(e.to_string()))
}

fn write_cached(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let mut bytes = Vec::with_capacity(8 + h * w * 3);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(pixels.as_slice().expect("contiguous"));
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a 1-channel {0, 255} PNG as an occlusion mask (mapped to
/// {0, 1}) and check it against the image dimensions.
pub fn load_mask(path: &Path, img_h: usize, img_w: usize) -> Result<OcclusionMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != (img_h, img_w) {
        return Err(Error::MaskShapeMismatch {
            mask_h: h as usize,
            mask_w: w as usize,
            img_h,
            img_w,
        });
    }
    let mut grid = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        grid[[y as usize, x as usize]] = match p.0[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::InvalidInput(format!(
                    "mask {} has value {other}, expected 0 or 255",
                    path.display()
                )))
            }
        };
    }
    OcclusionMask::new(grid)
}

/// Materialize one record as an [`ImageSample`], decoding image and
/// mask and attaching annotations.
pub fn load_sample(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<ImageSample> {
    let pixels = decode_image(&manifest.root.join(&record.path))?;
    let (h, w, _) = pixels.dim();
    let landmarks = match &record.landmarks {
        Some(pts) => Some(FaceLandmarks::new(pts.clone())?),
        None => None,
    };
    let occlusion = match &record.occlusion_mask {
        Some(rel) => Some(load_mask(&manifest.root.join(rel), h, w)?),
        None => None,
    };
    let face_box = record.face_box.map(|[x0, y0, x1, y1]| SourceBox { x0, y0, x1, y1 });
    Ok(ImageSample {
        id: record.path.clone(),
        pixels,
        label: Some(record.label),
        split: record.split,
        landmarks,
        occlusion,
        occluded_flag: record.occluded,
        face_box,
    })
}

/// Load every sample of a split, in manifest order. Decoding runs in
/// parallel; the returned order matches the manifest.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<ImageSample>> {
    use rayon::prelude::*;
    let view = split_view(manifest, split)?;
    view.par_iter()
        .map(|rec| load_sample(manifest, rec))
        .collect()
}

/// Per-class sample counts for each split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// High-frequency artifact stamped onto synthetic fakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    /// Product of sinusoids in x and y, two frequencies.
    Checkerboard,
    /// Concentric rings: a radial sinusoid.
    RingSpectrum,
}

/// Configuration for [`generate_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    /// Images per class (real and fake each) per split.
    pub n_per_class_per_split: SplitCounts,
    pub image_side: usize,
    pub artifact_kind: ArtifactKind,
    /// Probability that an image gets a rectangular occluder.
    pub occlusion_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class_per_split: SplitCounts {
                train: 200,
                val: 50,
                test: 50,
            },
            image_side: 256,
            artifact_kind: ArtifactKind::Checkerboard,
            occlusion_probability: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.n_per_class_per_split;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(Error::ConfigError(
                "n_per_class_per_split counts must be >= 1".into(),
            ));
        }
        if self.image_side < 32 {
            return Err(Error::ConfigError(format!(
                "image_side must be >= 32, got {}",
                self.image_side
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err(Error::ConfigError(format!(
                "occlusion_probability must be in [0,1], got {}",
                self.occlusion_probability
            )));
        }
        Ok(())
    }
}

/// Schematic face geometry for one synthetic image, in pixel units.
struct FaceGeometry {
    cx: f64,
    cy: f64,
    /// Horizontal semi-axis of the face ellipse.
    a: f64,
    /// Vertical semi-axis.
    b: f64,
}

impl FaceGeometry {
    fn sample(rng: &mut ChaCha8Rng, side: f64) -> Self {
        FaceGeometry {
            cx: side * (0.5 + rng.gen_range(-0.02..0.02)),
            cy: side * (0.5 + rng.gen_range(-0.02..0.02)),
            a: side * (0.30 + rng.gen_range(-0.02..0.02)),
            b: side * (0.38 + rng.gen_range(-0.02..0.02)),
        }
    }

    fn eye_centers(&self) -> ([f64; 2], [f64; 2]) {
        let y = self.cy - 0.30 * self.b;
        (
            [self.cx - 0.45 * self.a, y],
            [self.cx + 0.45 * self.a, y],
        )
    }

    fn mouth_center(&self) -> [f64; 2] {
        [self.cx, self.cy + 0.55 * self.b]
    }
}

/// Analytic 68-point landmarks matching the drawn schematic layout.
fn synthetic_landmarks(geo: &FaceGeometry) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(68);
    // Jaw 0-16: lower half of the face ellipse, image-left to image-right.
    for i in 0..17 {
        let t = std::f64::consts::PI - i as f64 * std::f64::consts::PI / 16.0;
        pts.push([geo.cx + geo.a * t.cos(), geo.cy + geo.b * t.sin()]);
    }
    let ((rex, rey), (lex, ley)) = {
        let (r, l) = geo.eye_centers();
        ((r[0], r[1]), (l[0], l[1]))
    };
    let brow_y = rey - 0.20 * geo.b;
    // Right eyebrow 17-21, then left 22-26.
    for i in 0..5 {
        let x = rex + (i as f64 - 2.0) * 0.09 * geo.a;
        pts.push([x, brow_y - 0.03 * geo.b * (1.0 - (i as f64 - 2.0).abs() / 2.0)]);
    }
    for i in 0..5 {
        let x = lex + (i as f64 - 2.0) * 0.09 * geo.a;
        pts.push([x, brow_y - 0.03 * geo.b * (1.0 - (i as f64 - 2.0).abs() / 2.0)]);
    }
    // Nose bridge 27-30 and nostril line 31-35.
    for i in 0..4 {
        pts.push([geo.cx, geo.cy - 0.28 * geo.b + i as f64 * 0.13 * geo.b]);
    }
    for i in 0..5 {
        pts.push([
            geo.cx + (i as f64 - 2.0) * 0.06 * geo.a,
            geo.cy + 0.16 * geo.b,
        ]);
    }
    // Eyes 36-41 (right) and 42-47 (left): 6-point lid hexagons.
    let eye_hex = |ex: f64, ey: f64, rx: f64, ry: f64| {
        vec![
            [ex - rx, ey],
            [ex - rx / 2.0, ey - ry],
            [ex + rx / 2.0, ey - ry],
            [ex + rx, ey],
            [ex + rx / 2.0, ey + ry],
            [ex - rx / 2.0, ey + ry],
        ]
    };
    let rx = 0.14 * geo.a;
    let ry = 0.07 * geo.b;
    pts.extend(eye_hex(rex, rey, rx, ry));
    pts.extend(eye_hex(lex, ley, rx, ry));
    // Mouth: outer lip 48-59 (12 points), inner lip 60-67 (8 points).
    let [mx, my] = geo.mouth_center();
    let (mrx, mry) = (0.34 * geo.a, 0.08 * geo.b);
    for i in 0..12 {
        let t = std::f64::consts::PI + i as f64 * std::f64::consts::TAU / 12.0;
        pts.push([mx + mrx * t.cos(), my + mry * t.sin()]);
    }
    for i in 0..8 {
        let t = std::f64::consts::PI + i as f64 * std::f64::consts::TAU / 8.0;
        pts.push([mx + 0.7 * mrx * t.cos(), my + 0.5 * mry * t.sin()]);
    }
    pts
}

/// Paint the smooth background plus the schematic face.
fn draw_face(rng: &mut ChaCha8Rng, side: usize, geo: &FaceGeometry) -> Array3<f64> {
    let s = side as f64;
    let base: [f64; 3] = [
        rng.gen_range(120.0..160.0),
        rng.gen_range(100.0..140.0),
        rng.gen_range(90.0..130.0),
    ];
    let skin: [f64; 3] = [
        rng.gen_range(185.0..215.0),
        rng.gen_range(150.0..180.0),
        rng.gen_range(125.0..155.0),
    ];
    // Low-frequency background waves; periods are a sizable fraction of
    // the image so downsampling keeps them smooth.
    let (p1x, p1y) = (rng.gen_range(0.9..1.4), rng.gen_range(0.9..1.4));
    let (ph1, ph2) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let ((rex, rey), (lex, ley)) = {
        let (r, l) = geo.eye_centers();
        ((r[0], r[1]), (l[0], l[1]))
    };
    let eye_r = 0.13 * geo.a;
    let [mx, my] = geo.mouth_center();
    let (mrx, mry) = (0.34 * geo.a, 0.08 * geo.b);
    let nose_top = geo.cy - 0.28 * geo.b;
    let nose_bot = geo.cy + 0.16 * geo.b;
    let nose_w = 0.07 * geo.a;

    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let xf = x as f64;
        let yf = y as f64;
        let wave = 18.0
            * ((std::f64::consts::TAU * p1x * xf / s + ph1).sin()
                + (std::f64::consts::TAU * p1y * yf / s + ph2).sin());
        let mut v = base[c] + wave;
        let fx = (xf - geo.cx) / geo.a;
        let fy = (yf - geo.cy) / geo.b;
        if fx * fx + fy * fy <= 1.0 {
            // Face ellipse with gentle vertical shading.
            v = skin[c] - 12.0 * fy + 0.4 * wave;
            let in_eye = |ex: f64, ey: f64| {
                let dx = xf - ex;
                let dy = (yf - ey) * 1.8;
                dx * dx + dy * dy <= eye_r * eye_r
            };
            if in_eye(rex, rey) || in_eye(lex, ley) {
                v = 52.0 + 6.0 * fy;
            }
            if (xf - geo.cx).abs() <= nose_w && yf >= nose_top && yf <= nose_bot {
                v -= 26.0;
            }
            let dmx = (xf - mx) / mrx;
            let dmy = (yf - my) / mry;
            if dmx * dmx + dmy * dmy <= 1.0 {
                v = if c == 0 { 140.0 } else { 60.0 };
            }
        }
        v
    })
}

/// Two passes of a separable 5-tap binomial blur (sigma about 1.4).
/// Run after drawing so the schematic's step edges become gentle ramps
/// and real images stay genuinely low-frequency.
fn blur5(img: &Array3<f64>) -> Array3<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w, ch) = img.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let pass = |src: &Array3<f64>, horiz: bool| {
        Array3::from_shape_fn((h, w, ch), |(y, x, c)| {
            let mut acc = 0.0;
            for (k, &kv) in K.iter().enumerate() {
                let off = k as isize - 2;
                let (sy, sx) = if horiz {
                    (y, clamp(x as isize + off, w))
                } else {
                    (clamp(y as isize + off, h), x)
                };
                acc += kv * src[[sy, sx, c]];
            }
            acc
        })
    };
    let once_h = pass(img, true);
    let once = pass(&once_h, false);
    let twice_h = pass(&once, true);
    pass(&twice_h, false)
}

/// Additive high-frequency artifact for fake images. Periods (16 and 6,
/// or 5.5 radially) sit well above the background frequencies and
/// survive a 4x downsample.
fn add_artifact(img: &mut Array3<f64>, kind: ArtifactKind, rng: &mut ChaCha8Rng, side: usize) {
    let amp = rng.gen_range(14.0..18.0);
    let s = side as f64;
    match kind {
        ArtifactKind::Checkerboard => {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for ((y, x, _), v) in img.indexed_iter_mut() {
                let xf = x as f64;
                let yf = y as f64;
                let a = (std::f64::consts::TAU * xf / 16.0 + phase).sin()
                    * (std::f64::consts::TAU * yf / 16.0 + phase).sin();
                let b = (std::f64::consts::TAU * xf / 6.0).sin()
                    * (std::f64::consts::TAU * yf / 6.0).sin();
                *v += amp * a + 0.5 * amp * b;
            }
        }
        ArtifactKind::RingSpectrum => {
            let cx = s / 2.0 + rng.gen_range(-8.0..8.0);
            let cy = s / 2.0 + rng.gen_range(-8.0..8.0);
            for ((y, x, _), v) in img.indexed_iter_mut() {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                *v += amp * (std::f64::consts::TAU * r / 5.5).sin();
            }
        }
    }
}

/// Stamp a flat rectangle over the image and return its mask. Drawn
/// after the artifact so occluded pixels carry no class signal.
fn add_occluder(img: &mut Array3<f64>, rng: &mut ChaCha8Rng, side: usize) -> Array2<u8> {
    let s = side as f64;
    let w = (s * rng.gen_range(0.20..0.45)) as usize;
    let h = (s * rng.gen_range(0.20..0.45)) as usize;
    let x0 = rng.gen_range(0..=(side - w));
    let y0 = rng.gen_range(0..=(side - h));
    let tone: [f64; 3] = [
        rng.gen_range(30.0..225.0),
        rng.gen_range(30.0..225.0),
        rng.gen_range(30.0..225.0),
    ];
    let mut mask = Array2::<u8>::zeros((side, side));
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            mask[[y, x]] = 1;
            for c in 0..3 {
                img[[y, x, c]] = tone[c];
            }
        }
    }
    mask
}

fn quantize(img: &Array3<f64>) -> Array3<u8> {
    img.map(|&v| v.round().clamp(0.0, 255.0) as u8)
}

fn save_png_rgb(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf = image::RgbImage::from_raw(
        w as u32,
        h as u32,
        pixels.as_slice().expect("contiguous").to_vec(),
    )
    .expect("buffer sized to dims");
    buf.save(path)?;
    Ok(())
}

fn save_png_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to dims");
    buf.save(path)?;
    Ok(())
}

/// Stable per-image seed so each image's content is independent of how
/// many others were generated.
fn image_seed(base: u64, split: Split, label: BinaryLabel, idx: usize) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for part in [
        split as u64 + 1,
        label.class_index() as u64 + 11,
        idx as u64 + 101,
    ] {
        h ^= part;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h
}

/// Generate a synthetic dataset under `out_dir` and write its manifest
/// to `out_dir/manifest.jsonl`.
///
/// Real images are smooth low-frequency textures with a schematic face
/// (ellipse, eye blobs, nose ridge, mouth bar); fakes add a global
/// high-frequency artifact. Every image gets analytic 68-point
/// landmarks; with probability `occlusion_probability` a rectangular
/// occluder is drawn on top and its mask PNG referenced. Bit-identical
/// under the same seed.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let side = config.image_side;
    let mut records = Vec::new();

    for split in [Split::Train, Split::Val, Split::Test] {
        let split_dir = out_dir.join(split.to_string());
        std::fs::create_dir_all(&split_dir)?;
        let n = match split {
            Split::Train => config.n_per_class_per_split.train,
            Split::Val => config.n_per_class_per_split.val,
            Split::Test => config.n_per_class_per_split.test,
        };
        for label in [BinaryLabel::Real, BinaryLabel::Fake] {
            for idx in 0..n {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(image_seed(config.seed, split, label, idx));
                let geo = FaceGeometry::sample(&mut rng, side as f64);
                let mut img = blur5(&draw_face(&mut rng, side, &geo));
                if label == BinaryLabel::Fake {
                    add_artifact(&mut img, config.artifact_kind, &mut rng, side);
                }
                let occluded = rng.gen::<f64>() < config.occlusion_probability;
                let mask = if occluded {
                    Some(add_occluder(&mut img, &mut rng, side))
                } else {
                    None
                };
                let landmarks = synthetic_landmarks(&geo);

                let stem = format!("{label}_{idx:04}");
                let rel_img = format!("{split}/{stem}.png");
                save_png_rgb(&split_dir.join(format!("{stem}.png")), &quantize(&img))?;
                let rel_mask = match &mask {
                    Some(m) => {
                        let rel = format!("{split}/{stem}_mask.png");
                        save_png_mask(&split_dir.join(format!("{stem}_mask.png")), m)?;
                        Some(rel)
                    }
                    None => None,
                };
                records.push(ManifestRecord {
                    path: rel_img,
                    label,
                    split,
                    landmarks: Some(landmarks),
                    occlusion_mask: rel_mask,
                    occluded: Some(occluded),
                    face_box: None,
                });
            }
        }
    }

    let fingerprint = manifest_fingerprint(&records);
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        root: out_dir.to_path_buf(),
        records,
        fingerprint,
    };
    save_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Mean squared 4-neighbor Laplacian over non-occluded pixels of the
/// channel-mean plane. Fakes carry far more of this high-pass energy
/// than reals, which is what makes the synthetic task learnable.
pub fn highpass_energy(pixels: &Array3<u8>, mask: Option<&OcclusionMask>) -> f64 {
    let (h, w, _) = pixels.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let luma = crate::facepatch::luma(pixels);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if let Some(m) = mask {
                let g = m.grid();
                // Skip any pixel whose Laplacian stencil touches the
                // occluder; its edges are occluder artifacts.
                if g[[y, x]] == 1
                    || g[[y - 1, x]] == 1
                    || g[[y + 1, x]] == 1
                    || g[[y, x - 1]] == 1
                    || g[[y, x + 1]] == 1
                {
                    continue;
                }
            }
            let lap = 4.0 * luma[[y, x]]
                - luma[[y - 1, x]]
                - luma[[y + 1, x]]
                - luma[[y, x - 1]]
                - luma[[y, x + 1]];
            sum += lap * lap;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest_dir() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]));
        for i in 0..10 {
            img.save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        let mut lines = vec![r#"{"manifest_version": 1, "root": "."}"#.to_string()];
        for i in 0..10 {
            let split = if i < 6 {
                "train"
            } else if i < 8 {
                "val"
            } else {
                "test"
            };
            let label = if i % 2 == 0 { "real" } else { "fake" };
            lines.push(format!(
                r#"{{"path": "img{i}.png", "label": "{label}", "split": "{split}"}}"#
            ));
        }
        let path = dir.path().join("manifest.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "{}", lines.join("\n")).unwrap();
        (dir, path)
    }

    #[test]
    fn well_formed_manifest_loads() {
        let (_dir, path) = tiny_manifest_dir();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 10);
        assert_eq!(m.version, 1);
        let again = load_manifest(&path).unwrap();
        assert_eq!(m.fingerprint, again.fingerprint);
    }

    #[test]
    fn bad_landmark_count_reports_line() {
        let (dir, path) = tiny_manifest_dir();
        let lm: Vec<String> = (0..67).map(|_| "[1.0, 2.0]".to_string()).collect();
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(
            f,
            r#"{{"path": "img0.png", "label": "real", "split": "train", "landmarks": [{}]}}"#,
            lm.join(",")
        )
        .unwrap();
        drop(f);
        // img0.png is now duplicated too, but the landmark error fires
        // first during validation of line 12.
        match load_manifest(&path) {
            Err(Error::ManifestInvalid { line, msg }) => {
                assert_eq!(line, 12);
                assert!(msg.contains("68"), "{msg}");
            }
            other => panic!("expected ManifestInvalid, got {other:?}"),
        }
        drop(dir);
    }

    #[test]
    fn duplicate_path_rejected() {
        let (dir, path) = tiny_manifest_dir();
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(
            f,
            r#"{{"path": "img3.png", "label": "fake", "split": "train"}}"#
        )
        .unwrap();
        drop(f);
        match load_manifest(&path) {
            Err(Error::ManifestInvalid { line, msg }) => {
                assert_eq!(line, 12);
                assert!(msg.contains("duplicate"), "{msg}");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        drop(dir);
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            load_manifest("/nonexistent/manifest.jsonl"),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn split_views_and_missing_split() {
        let (_dir, path) = tiny_manifest_dir();
        let m = load_manifest(&path).unwrap();
        assert_eq!(split_view(&m, Split::Train).unwrap().len(), 6);
        assert_eq!(split_view(&m, Split::Val).unwrap().len(), 2);
        assert_eq!(split_view(&m, Split::Test).unwrap().len(), 2);

        let mut no_val = m.clone();
        no_val.records.retain(|r| r.split != Split::Val);
        assert!(matches!(
            split_view(&no_val, Split::Val),
            Err(Error::SplitMissing(Split::Val))
        ));
    }

    #[test]
    fn dataset4_style_counts() {
        // 148 real + 139 fake training records.
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(4, 4, image::Rgb([0, 0, 0]));
        let mut records = Vec::new();
        for i in 0..148 {
            let p = format!("r{i}.png");
            img.save(dir.path().join(&p)).unwrap();
            records.push(ManifestRecord {
                path: p,
                label: BinaryLabel::Real,
                split: Split::Train,
                landmarks: None,
                occlusion_mask: None,
                occluded: None,
                face_box: None,
            });
        }
        for i in 0..139 {
            let p = format!("f{i}.png");
            img.save(dir.path().join(&p)).unwrap();
            records.push(ManifestRecord {
                path: p,
                label: BinaryLabel::Fake,
                split: Split::Train,
                landmarks: None,
                occlusion_mask: None,
                occluded: None,
                face_box: None,
            });
        }
        let fingerprint = manifest_fingerprint(&records);
        let m = DatasetManifest {
            version: 1,
            root: dir.path().to_path_buf(),
            records,
            fingerprint,
        };
        assert_eq!(split_view(&m, Split::Train).unwrap().len(), 287);
    }

    #[test]
    fn save_load_round_trip_keeps_fingerprint() {
        let (_dir, path) = tiny_manifest_dir();
        let m = load_manifest(&path).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        // Copy referenced images so validation passes at the new root.
        for rec in &m.records {
            std::fs::copy(m.root.join(&rec.path), dir2.path().join(&rec.path)).unwrap();
        }
        let p2 = dir2.path().join("manifest.jsonl");
        save_manifest(&m, &p2).unwrap();
        let m2 = load_manifest(&p2).unwrap();
        assert_eq!(m.fingerprint, m2.fingerprint);
        assert_eq!(m.records, m2.records);
    }

    fn small_synth(seed: u64, occ: f64) -> SynthConfig {
        SynthConfig {
            n_per_class_per_split: SplitCounts {
                train: 3,
                val: 2,
                test: 2,
            },
            image_side: 64,
            artifact_kind: ArtifactKind::Checkerboard,
            occlusion_probability: occ,
            seed,
        }
    }

    #[test]
    fn synth_layout_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small_synth(7, 0.0), dir.path()).unwrap();
        assert_eq!(m.records.len(), 14);
        assert_eq!(split_view(&m, Split::Train).unwrap().len(), 6);
        assert!(m.records.iter().all(|r| r.occlusion_mask.is_none()));
        assert!(m.records.iter().all(|r| r.occluded == Some(false)));
        assert!(dir.path().join("manifest.jsonl").is_file());
        // Reload from disk and compare fingerprints.
        let loaded = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.fingerprint, m.fingerprint);
    }

    #[test]
    fn synth_deterministic_under_seed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&small_synth(42, 0.5), d1.path()).unwrap();
        let m2 = generate_synthetic(&small_synth(42, 0.5), d2.path()).unwrap();
        assert_eq!(m1.fingerprint, m2.fingerprint);
        for rec in &m1.records {
            let b1 = std::fs::read(d1.path().join(&rec.path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&rec.path)).unwrap();
            assert_eq!(b1, b2, "image bytes differ for {}", rec.path);
        }
        let d3 = tempfile::tempdir().unwrap();
        let m3 = generate_synthetic(&small_synth(43, 0.5), d3.path()).unwrap();
        assert_ne!(m1.fingerprint, m3.fingerprint);
    }

    #[test]
    fn synth_samples_load_with_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&small_synth(3, 1.0), dir.path()).unwrap();
        assert!(m.records.iter().all(|r| r.occlusion_mask.is_some()));
        let samples = load_split(&m, Split::Train).unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            assert_eq!(s.dims(), (64, 64));
            let lm = s.landmarks.as_ref().expect("landmarks present");
            assert!(lm.within(64, 64), "landmarks inside image");
            let occ = s.occlusion.as_ref().expect("mask present");
            assert!(occ.any_occluded());
        }
    }

    #[test]
    fn synth_fakes_carry_highpass_energy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_per_class_per_split: SplitCounts {
                train: 8,
                val: 1,
                test: 1,
            },
            image_side: 64,
            artifact_kind: ArtifactKind::RingSpectrum,
            occlusion_probability: 0.0,
            seed: 11,
        };
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        let samples = load_split(&m, Split::Train).unwrap();
        let real_max = samples
            .iter()
            .filter(|s| s.label == Some(BinaryLabel::Real))
            .map(|s| highpass_energy(&s.pixels, None))
            .fold(f64::NEG_INFINITY, f64::max);
        let fake_min = samples
            .iter()
            .filter(|s| s.label == Some(BinaryLabel::Fake))
            .map(|s| highpass_energy(&s.pixels, None))
            .fold(f64::INFINITY, f64::min);
        assert!(
            fake_min > real_max,
            "fake min {fake_min} should exceed real max {real_max}"
        );
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("x.png");
        let img = image::RgbImage::from_fn(16, 12, |x, y| {
            image::Rgb([(x * 3) as u8, (y * 5) as u8, 7])
        });
        img.save(&img_path).unwrap();
        let direct = decode_image_uncached(&img_path).unwrap();

        let cache_dir = dir.path().join("cache");
        let key = cache_key(&img_path).unwrap();
        std::fs::create_dir_all(&cache_dir).unwrap();
        let cache_path = cache_dir.join(format!("oclf-img-{key}.bin"));
        write_cached(&cache_path, &direct).unwrap();
        let cached = read_cached(&cache_path).unwrap();
        assert_eq!(direct, cached);
        assert_eq!(direct.dim(), (12, 16, 3));
    }

    #[test]
    fn mask_values_validated() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_pixel(8, 8, image::Rgb([1, 2, 3]));
        img.save(dir.path().join("a.png")).unwrap();
        let bad_mask = image::GrayImage::from_pixel(8, 8, image::Luma([7]));
        bad_mask.save(dir.path().join("a_mask.png")).unwrap();
        let rec = ManifestRecord {
            path: "a.png".into(),
            label: BinaryLabel::Real,
            split: Split::Test,
            landmarks: None,
            occlusion_mask: Some("a_mask.png".into()),
            occluded: Some(true),
            face_box: None,
        };
        let m = DatasetManifest {
            version: 1,
            root: dir.path().to_path_buf(),
            records: vec![rec.clone()],
            fingerprint: manifest_fingerprint(std::slice::from_ref(&rec)),
        };
        assert!(matches!(
            load_sample(&m, &rec),
            Err(Error::InvalidInput(_))
        ));
        // A well-formed mask with wrong dims is a shape mismatch.
        let small = image::GrayImage::from_pixel(4, 4, image::Luma([0]));
        small.save(dir.path().join("a_mask.png")).unwrap();
        assert!(matches!(
            load_sample(&m, &rec),
            Err(Error::MaskShapeMismatch { .. })
        ));
    }

    #[test]
    fn occlusion_probability_concentrates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_per_class_per_split: SplitCounts {
                train: 250,
                val: 1,
                test: 1,
            },
            image_side: 32,
            artifact_kind: ArtifactKind::Checkerboard,
            occlusion_probability: 0.3,
            seed: 5,
        };
        let m = generate_synthetic(&cfg, dir.path()).unwrap();
        let train = split_view(&m, Split::Train).unwrap();
        let occluded = train.iter().filter(|r| r.occluded == Some(true)).count();
        let ratio = occluded as f64 / train.len() as f64;
        assert!(
            (ratio - 0.3).abs() < 0.05,
            "occlusion ratio {ratio} not within 0.05 of 0.3"
        );
    }
}
