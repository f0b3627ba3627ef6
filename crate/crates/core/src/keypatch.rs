//! Keypoint detection on vein probability maps and fixed-size patch
//! extraction around the detected points.
//!
//! Detection runs entirely on the map: blur, threshold, skeletonize, then
//! thin the skeleton pixels out with a greedy windowed reduction so the
//! surviving points are spread across the vein network. Patches are square
//! windows around each point, zero-padded at the borders and rescaled to a
//! fixed side for the descriptor stage.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{binarize, gaussian_blur, skeletonize, BinaryImage, ProbMap};
use crate::scalar::Scalar;

/// Side of the patches handed to the descriptor stage, in pixels.
pub const PATCH_SIZE: usize = 32;

/// Fewer raw candidates than this is treated as a failed detection.
pub const MIN_CANDIDATES: usize = 20;

/// A detected point on the vein skeleton.
///
/// Coordinates are integer pixel positions in the map the point was
/// detected on. The detector does not estimate orientation; the field is
/// fixed at the -1 sentinel so downstream consumers can tell an estimated
/// angle from an absent one. `scale` is the side of the square window the
/// descriptor patch is cut from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: u32,
    pub y: u32,
    pub orientation: f64,
    pub scale: f64,
}

impl Keypoint {
    /// A point with the fixed no-orientation sentinel.
    pub fn new(x: u32, y: u32, scale: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            orientation: -1.0,
            scale,
        }
    }
}

/// Detector settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectConfig {
    /// Half-side of the suppression window; a kept point masks the
    /// inclusive square of side `2 * suppression_radius + 1` around it.
    pub suppression_radius: usize,
    /// Side of the square patch window stamped into each keypoint.
    pub patch_scale: usize,
    /// Gaussian blur applied to the map before thresholding.
    pub blur_sigma: f64,
    /// Gray level a blurred pixel must strictly exceed, on the 0..=255
    /// scale. The same level drives the skeleton binarization.
    pub candidate_threshold: u8,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            suppression_radius: 4,
            patch_scale: 11,
            blur_sigma: 1.0,
            candidate_threshold: 20,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.suppression_radius == 0 {
            return Err(Error::InvalidParameter(
                "suppression radius must be at least 1".into(),
            ));
        }
        if self.patch_scale < 2 || self.patch_scale > 255 {
            return Err(Error::InvalidParameter(format!(
                "patch scale {} must be in 2..=255",
                self.patch_scale
            )));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "blur sigma {} must be positive and finite",
                self.blur_sigma
            )));
        }
        if self.candidate_threshold == u8::MAX {
            return Err(Error::InvalidParameter(
                "candidate threshold 255 rejects every pixel".into(),
            ));
        }
        Ok(())
    }
}

/// Skeleton pixels whose blurred response strictly exceeds the threshold,
/// in row-major scan order.
pub fn candidate_pixels<S: Scalar>(
    blurred: &ProbMap<S>,
    skeleton: &BinaryImage,
    threshold: u8,
) -> Result<Vec<(u32, u32)>> {
    if blurred.width() != skeleton.width() || blurred.height() != skeleton.height() {
        return Err(Error::ShapeMismatch(format!(
            "map is {}x{} but skeleton is {}x{}",
            blurred.width(),
            blurred.height(),
            skeleton.width(),
            skeleton.height()
        )));
    }
    let level = threshold as f64;
    let mut out = Vec::new();
    for y in 0..skeleton.height() {
        for x in 0..skeleton.width() {
            if skeleton.get(x, y) && blurred.get(x, y).to_f64_lossy() * 255.0 > level {
                out.push((x as u32, y as u32));
            }
        }
    }
    Ok(out)
}

/// Greedy windowed reduction over an ordered candidate list.
///
/// Walks the candidates in order over a mask that starts all-set. A
/// candidate landing on a set mask pixel is kept and clears the inclusive
/// square of side `2 * radius + 1` around itself, clipped to the bounds.
/// Returns the indices of the kept candidates; any two kept points are
/// strictly more than `radius` apart in Chebyshev distance.
pub fn reduce_candidates(
    candidates: &[(u32, u32)],
    width: usize,
    height: usize,
    radius: usize,
) -> Vec<usize> {
    let mut mask = vec![true; width * height];
    let mut kept = Vec::new();
    for (idx, &(x, y)) in candidates.iter().enumerate() {
        let (x, y) = (x as usize, y as usize);
        debug_assert!(x < width && y < height);
        if !mask[y * width + x] {
            continue;
        }
        kept.push(idx);
        let x0 = x.saturating_sub(radius);
        let y0 = y.saturating_sub(radius);
        let x1 = (x + radius).min(width - 1);
        let y1 = (y + radius).min(height - 1);
        for my in y0..=y1 {
            for mx in x0..=x1 {
                mask[my * width + mx] = false;
            }
        }
    }
    kept
}

/// Detects keypoints on a vein probability map.
///
/// The map is blurred, binarized at `candidate_threshold / 255`, and
/// skeletonized; skeleton pixels above the threshold become candidates in
/// row-major order, and the greedy reduction spaces them out. Fails with
/// [`Error::InsufficientMinutiae`] when fewer than [`MIN_CANDIDATES`]
/// candidates exist before reduction.
pub fn detect_keypoints<S: Scalar>(
    map: &ProbMap<S>,
    cfg: &DetectConfig,
) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let blurred = gaussian_blur(map, cfg.blur_sigma)?;
    let binary = binarize(&blurred, cfg.candidate_threshold as f64 / 255.0)?;
    let skeleton = skeletonize(&binary);
    let candidates = candidate_pixels(&blurred, &skeleton, cfg.candidate_threshold)?;
    if candidates.len() < MIN_CANDIDATES {
        return Err(Error::InsufficientMinutiae {
            found: candidates.len(),
            required: MIN_CANDIDATES,
        });
    }
    let kept = reduce_candidates(
        &candidates,
        map.width(),
        map.height(),
        cfg.suppression_radius,
    );
    Ok(kept
        .into_iter()
        .map(|i| {
            let (x, y) = candidates[i];
            Keypoint::new(x, y, cfg.patch_scale as f64)
        })
        .collect())
}

/// Cuts the square window of side `kp.scale` centered at the keypoint,
/// zero-padding outside the map, and rescales it bilinearly to
/// [`PATCH_SIZE`] by [`PATCH_SIZE`].
///
/// The window center sits at the keypoint pixel; for an even side the
/// window extends one pixel further toward positive coordinates. Values
/// stay inside the input range because bilinear samples are convex
/// combinations and the padding is zero.
pub fn extract_patch<S: Scalar>(map: &ProbMap<S>, kp: &Keypoint) -> Result<ProbMap<S>> {
    let side = kp.scale.round();
    if !(side >= 2.0) || (side - kp.scale).abs() > 1e-9 || side > 255.0 {
        return Err(Error::InvalidParameter(format!(
            "patch scale {} must be an integer pixel count in 2..=255",
            kp.scale
        )));
    }
    let side = side as usize;
    let half = (side / 2) as i64;
    let start_x = kp.x as i64 - half;
    let start_y = kp.y as i64 - half;
    let mut window = ProbMap::new(side, side)?;
    for wy in 0..side {
        let sy = start_y + wy as i64;
        if sy < 0 || sy >= map.height() as i64 {
            continue;
        }
        for wx in 0..side {
            let sx = start_x + wx as i64;
            if sx < 0 || sx >= map.width() as i64 {
                continue;
            }
            window.set(wx, wy, map.get(sx as usize, sy as usize));
        }
    }
    crate::imaging::resize_bilinear(&window, PATCH_SIZE, PATCH_SIZE)
}

/// Patches for every keypoint in order.
pub fn extract_patches<S: Scalar>(
    map: &ProbMap<S>,
    keypoints: &[Keypoint],
) -> Result<Vec<ProbMap<S>>> {
    keypoints.iter().map(|kp| extract_patch(map, kp)).collect()
}

// ---------------------------------------------------------------------------
// Keypoint list serialization
// ---------------------------------------------------------------------------

/// Encodes keypoints as `x,y,scale` CSV lines with a comment header.
pub fn encode_keypoints(keypoints: &[Keypoint]) -> String {
    let mut out = String::from("# x,y,scale\n");
    for kp in keypoints {
        let _ = writeln!(out, "{},{},{}", kp.x, kp.y, kp.scale);
    }
    out
}

/// Parses the CSV produced by [`encode_keypoints`]. Blank lines and lines
/// starting with `#` are skipped; orientation comes back as the -1
/// sentinel.
pub fn decode_keypoints(text: &str) -> Result<Vec<Keypoint>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "keypoint line {} has {} fields, expected x,y,scale",
                ln + 1,
                fields.len()
            )));
        }
        let x: u32 = fields[0].trim().parse().map_err(|_| {
            Error::Format(format!("keypoint line {}: bad x '{}'", ln + 1, fields[0]))
        })?;
        let y: u32 = fields[1].trim().parse().map_err(|_| {
            Error::Format(format!("keypoint line {}: bad y '{}'", ln + 1, fields[1]))
        })?;
        let scale: f64 = fields[2].trim().parse().map_err(|_| {
            Error::Format(format!(
                "keypoint line {}: bad scale '{}'",
                ln + 1,
                fields[2]
            ))
        })?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Format(format!(
                "keypoint line {}: scale {} must be positive",
                ln + 1,
                scale
            )));
        }
        out.push(Keypoint::new(x, y, scale));
    }
    Ok(out)
}

/// Writes keypoints to a CSV file.
pub fn write_keypoints(path: &Path, keypoints: &[Keypoint]) -> Result<()> {
    std::fs::write(path, encode_keypoints(keypoints)).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads keypoints from a CSV file.
pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_keypoints(&text)
}
