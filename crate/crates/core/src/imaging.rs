//! Raster types and the classical image operations the pipeline is built on:
//! PGM I/O, Gaussian smoothing, thresholding, morphological thinning,
//! bilinear resampling, and rotation.
//!
//! Images use row-major storage with `x` as the column index and `y` as the
//! row index, so `(x, y)` addresses `data[y * width + x]`. Floating-point
//! rasters hold values in `[0, 1]` unless a function documents otherwise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest width or height accepted from external raster files.
///
/// Keypoint coordinates are serialized as 16-bit integers, so images beyond
/// this bound cannot round-trip through the pipeline's file formats.
pub const MAX_DIM: usize = u16::MAX as usize;

// ---------------------------------------------------------------------------
// Raster types
// ---------------------------------------------------------------------------

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    /// Black image of the given size. Dimensions must be nonzero.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(GrayImage {
            width,
            height,
            data: vec![0; width * height],
        })
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds {} bytes but a {}x{} image needs {}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Converts gray levels to probabilities by dividing by 255.
    pub fn to_prob<S: Scalar>(&self) -> ProbMap<S> {
        let scale = S::from_f64_lossy(1.0 / 255.0);
        ProbMap {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&g| S::from_usize_lossy(g as usize) * scale)
                .collect(),
        }
    }
}

/// Floating-point raster with values nominally in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<S: Scalar> {
    width: usize,
    height: usize,
    data: Vec<S>,
}

impl<S: Scalar> ProbMap<S> {
    /// All-zero map of the given size. Dimensions must be nonzero.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(ProbMap {
            width,
            height,
            data: vec![S::zero(); width * height],
        })
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<S>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds {} values but a {}x{} map needs {}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(ProbMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> S {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: S) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Converts to 8-bit gray by clamping to `[0, 1]` and rounding `v * 255`.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let c = v.to_f64_lossy().clamp(0.0, 1.0);
                (c * 255.0).round() as u8
            })
            .collect();
        GrayImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Smallest and largest stored value.
    pub fn min_max(&self) -> (S, S) {
        let mut lo = self.data[0];
        let mut hi = self.data[0];
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Copies into another scalar type through `f64`.
    pub fn cast<T: Scalar>(&self) -> ProbMap<T> {
        ProbMap {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Bilinear sample at continuous coordinates, clamping to the border.
    ///
    /// Integer coordinates address pixel centers, so `(0, 0)` returns the
    /// top-left pixel exactly.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> S {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = S::from_f64_lossy(xc - x0 as f64);
        let fy = S::from_f64_lossy(yc - y0 as f64);
        let one = S::one();
        let top = self.get(x0, y0) * (one - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (one - fx) + self.get(x1, y1) * fx;
        top * (one - fy) + bot * fy
    }
}

/// Boolean raster. `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryImage {
    /// All-background image of the given size. Dimensions must be nonzero.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        check_dims(width, height)?;
        Ok(BinaryImage {
            width,
            height,
            data: vec![false; width * height],
        })
    }

    /// Wraps an existing row-major buffer.
    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "buffer holds {} values but a {}x{} image needs {}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(BinaryImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!(
            "image dimensions must be nonzero, got {}x{}",
            width, height
        )));
    }
    if width > MAX_DIM || height > MAX_DIM {
        return Err(Error::InvalidParameter(format!(
            "image dimensions must be at most {}, got {}x{}",
            MAX_DIM, width, height
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PGM I/O
// ---------------------------------------------------------------------------

/// Parses a binary PGM ("P5") image with maxval 255.
///
/// Header comments (`#` to end of line) are allowed between tokens. Any
/// other maxval, a truncated pixel section, or trailing bytes after the
/// pixel section are rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;

    fn skip_separators(bytes: &[u8], pos: &mut usize) {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
        skip_separators(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated pgm header".to_string()));
        }
        Ok(&bytes[start..*pos])
    }

    let magic = token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format(format!(
            "expected binary pgm magic 'P5', got {:?}",
            String::from_utf8_lossy(magic)
        )));
    }

    let mut field = |name: &str| -> Result<usize> {
        let t = token(bytes, &mut pos)?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| {
                Error::Format(format!(
                    "pgm {} is not a decimal integer: {:?}",
                    name,
                    String::from_utf8_lossy(t)
                ))
            })
    };

    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "pgm maxval must be 255, got {}",
            maxval
        )));
    }
    check_dims(width, height)?;

    // Exactly one whitespace byte separates the header from the pixels.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(
            "pgm header must end with a whitespace byte".to_string(),
        ));
    }
    pos += 1;

    let need = width * height;
    let rest = &bytes[pos..];
    if rest.len() < need {
        return Err(Error::Format(format!(
            "pgm pixel section truncated: need {} bytes, found {}",
            need,
            rest.len()
        )));
    }
    if rest.len() > need {
        return Err(Error::Format(format!(
            "pgm has {} trailing bytes after the pixel section",
            rest.len() - need
        )));
    }
    GrayImage::from_vec(width, height, rest.to_vec())
}

/// Serializes an image as binary PGM ("P5") with maxval 255.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Reads a binary PGM file.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

/// Writes a binary PGM file.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Gaussian smoothing
// ---------------------------------------------------------------------------

/// Reflects an index into `[0, n)` without duplicating the border sample,
/// so `-1` maps to `1` and `n` maps to `n - 2`.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = (2 * n - 2) as isize;
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Sampled Gaussian kernel of radius `ceil(3 * sigma)`, normalized to sum 1.
pub fn gaussian_kernel<S: Scalar>(sigma: f64) -> Result<Vec<S>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gaussian sigma must be positive and finite, got {}",
            sigma
        )));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut weights = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f64;
    for i in -(radius as isize)..=(radius as isize) {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
        weights.push(w);
        sum += w;
    }
    Ok(weights
        .into_iter()
        .map(|w| S::from_f64_lossy(w / sum))
        .collect())
}

/// Horizontal correlation with an odd-length kernel, borders reflected.
pub(crate) fn conv1d_rows<S: Scalar>(map: &ProbMap<S>, kernel: &[S]) -> ProbMap<S> {
    let radius = kernel.len() / 2;
    let (w, h) = (map.width, map.height);
    let mut out = vec![S::zero(); w * h];
    for y in 0..h {
        let row = &map.data[y * w..(y + 1) * w];
        let dst = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = S::zero();
            for (k, &wk) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + k as isize - radius as isize, w);
                acc += wk * row[sx];
            }
            dst[x] = acc;
        }
    }
    ProbMap {
        width: w,
        height: h,
        data: out,
    }
}

/// Vertical correlation with an odd-length kernel, borders reflected.
pub(crate) fn conv1d_cols<S: Scalar>(map: &ProbMap<S>, kernel: &[S]) -> ProbMap<S> {
    let radius = kernel.len() / 2;
    let (w, h) = (map.width, map.height);
    let mut out = vec![S::zero(); w * h];
    for y in 0..h {
        for (k, &wk) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - radius as isize, h);
            let src = &map.data[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += wk * src[x];
            }
        }
    }
    ProbMap {
        width: w,
        height: h,
        data: out,
    }
}

/// Gaussian blur with a separable kernel of radius `ceil(3 * sigma)`.
///
/// Borders reflect without duplicating the edge sample. The kernel is a
/// convex combination, so outputs stay inside the input's value range.
pub fn gaussian_blur<S: Scalar>(map: &ProbMap<S>, sigma: f64) -> Result<ProbMap<S>> {
    let kernel = gaussian_kernel::<S>(sigma)?;
    let mid = conv1d_rows(map, &kernel);
    Ok(conv1d_cols(&mid, &kernel))
}

// ---------------------------------------------------------------------------
// Thresholding and normalization
// ---------------------------------------------------------------------------

/// Marks pixels whose value strictly exceeds `threshold`.
///
/// The comparison runs in `f64` so the result does not depend on the
/// scalar type of the map.
pub fn binarize<S: Scalar>(map: &ProbMap<S>, threshold: f64) -> Result<BinaryImage> {
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "binarize threshold must be finite, got {}",
            threshold
        )));
    }
    Ok(BinaryImage {
        width: map.width,
        height: map.height,
        data: map
            .data
            .iter()
            .map(|&v| v.to_f64_lossy() > threshold)
            .collect(),
    })
}

/// Rescales values affinely so the minimum maps to 0 and the maximum to 1.
/// A constant map comes back all zeros.
pub fn normalize_minmax<S: Scalar>(map: &ProbMap<S>) -> ProbMap<S> {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let data = if range > S::zero() {
        map.data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![S::zero(); map.data.len()]
    };
    ProbMap {
        width: map.width,
        height: map.height,
        data,
    }
}

// ---------------------------------------------------------------------------
// Morphological thinning
// ---------------------------------------------------------------------------

/// Thins foreground regions to one-pixel-wide skeletons.
///
/// Runs the classic two-subiteration thinning scheme to a fixed point:
/// each pass deletes border pixels that have 2..=6 foreground neighbors,
/// exactly one background-to-foreground transition around them, and pass
/// -specific background neighbors that prevent breaking connectivity.
/// Pixels outside the image count as background. The output is always a
/// subset of the input foreground, and thinning it again changes nothing.
pub fn skeletonize(img: &BinaryImage) -> BinaryImage {
    let (w, h) = (img.width, img.height);
    let mut cur = img.clone();
    let mut deletions: Vec<usize> = Vec::new();

    loop {
        let mut changed = false;
        for pass in 0..2 {
            deletions.clear();
            for y in 0..h {
                for x in 0..w {
                    if cur.get(x, y) && thinning_deletes(&cur, x, y, pass) {
                        deletions.push(y * w + x);
                    }
                }
            }
            if !deletions.is_empty() {
                changed = true;
                for &i in &deletions {
                    cur.data[i] = false;
                }
            }
        }
        if !changed {
            return cur;
        }
    }
}

/// Foreground test that treats out-of-bounds pixels as background.
#[inline]
fn fg(img: &BinaryImage, x: isize, y: isize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height && {
        img.get(x as usize, y as usize)
    }
}

/// Deletion condition for one thinning subiteration at a foreground pixel.
fn thinning_deletes(img: &BinaryImage, x: usize, y: usize, pass: usize) -> bool {
    let (xi, yi) = (x as isize, y as isize);
    // Neighbors clockwise from north: p[0] = N, p[1] = NE, ..., p[7] = NW.
    let p = [
        fg(img, xi, yi - 1),
        fg(img, xi + 1, yi - 1),
        fg(img, xi + 1, yi),
        fg(img, xi + 1, yi + 1),
        fg(img, xi, yi + 1),
        fg(img, xi - 1, yi + 1),
        fg(img, xi - 1, yi),
        fg(img, xi - 1, yi - 1),
    ];
    let b: usize = p.iter().map(|&v| v as usize).sum();
    if !(2..=6).contains(&b) {
        return false;
    }
    let a = (0..8)
        .filter(|&i| !p[i] && p[(i + 1) % 8])
        .count();
    if a != 1 {
        return false;
    }
    let (n, e, s, wd) = (p[0], p[2], p[4], p[6]);
    if pass == 0 {
        // Delete east and south border pixels and north-west corners.
        (!n || !e || !s) && (!e || !s || !wd)
    } else {
        // Delete west and north border pixels and south-east corners.
        (!n || !e || !wd) && (!n || !s || !wd)
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Resizes with bilinear interpolation on a corner-aligned grid.
///
/// For an output axis of length `n > 1` over an input axis of length `m`,
/// output index `i` samples source coordinate `i * (m - 1) / (n - 1)`, so
/// the first and last samples land exactly on the input corners. An output
/// axis of length 1 samples the input center `(m - 1) / 2`.
pub fn resize_bilinear<S: Scalar>(
    map: &ProbMap<S>,
    out_width: usize,
    out_height: usize,
) -> Result<ProbMap<S>> {
    check_dims(out_width, out_height)?;
    let src_coord = |i: usize, n: usize, m: usize| -> f64 {
        if n > 1 {
            i as f64 * (m - 1) as f64 / (n - 1) as f64
        } else {
            (m - 1) as f64 / 2.0
        }
    };
    let mut out = ProbMap::new(out_width, out_height)?;
    for y in 0..out_height {
        let sy = src_coord(y, out_height, map.height);
        for x in 0..out_width {
            let sx = src_coord(x, out_width, map.width);
            out.set(x, y, map.sample_bilinear(sx, sy));
        }
    }
    Ok(out)
}

/// Extracts the axis-aligned rectangle with top-left `(x0, y0)` and the
/// given size.
pub fn crop<S: Scalar>(
    map: &ProbMap<S>,
    x0: usize,
    y0: usize,
    width: usize,
    height: usize,
) -> Result<ProbMap<S>> {
    check_dims(width, height)?;
    if x0 + width > map.width || y0 + height > map.height {
        return Err(Error::ShapeMismatch(format!(
            "crop {}x{}+{}+{} exceeds the {}x{} image",
            width, height, x0, y0, map.width, map.height
        )));
    }
    let mut out = ProbMap::new(width, height)?;
    for y in 0..height {
        let src = &map.data[(y0 + y) * map.width + x0..][..width];
        out.data[y * width..(y + 1) * width].copy_from_slice(src);
    }
    Ok(out)
}

/// Rotates image content so that a feature at slope angle `angle_deg`
/// (degrees, measured in image coordinates with y pointing down) becomes
/// horizontal. Samples bilinearly around the image center; pixels that map
/// outside the source are zero.
pub fn rotate_to_horizontal<S: Scalar>(map: &ProbMap<S>, angle_deg: f64) -> Result<ProbMap<S>> {
    if !angle_deg.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "rotation angle must be finite, got {}",
            angle_deg
        )));
    }
    let (w, h) = (map.width, map.height);
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = ProbMap::new(w, h)?;
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // Destination pixel offsets map onto the source line direction.
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            if sx >= 0.0 && sx <= (w - 1) as f64 && sy >= 0.0 && sy <= (h - 1) as f64 {
                out.set(x, y, map.sample_bilinear(sx, sy));
            }
        }
    }
    Ok(out)
}

/// Maps a point through the same transform `rotate_to_horizontal` applies to
/// content: the returned point is where `(x, y)` in the source image lands
/// in the rotated image.
pub fn rotate_point_to_horizontal(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
    angle_deg: f64,
) -> (f64, f64) {
    let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    // Inverse of the sampling transform: content moves by the opposite turn.
    (cx + dx * cos + dy * sin, cy - dx * sin + dy * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map_from(w: usize, h: usize, vals: &[f64]) -> ProbMap<f64> {
        ProbMap::from_vec(w, h, vals.to_vec()).unwrap()
    }

    // -- PGM ---------------------------------------------------------------

    #[test]
    fn pgm_roundtrip_preserves_every_byte_value() {
        let data: Vec<u8> = (0..=255u16).map(|v| v as u8).collect();
        let img = GrayImage::from_vec(16, 16, data).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_parser_accepts_header_comments_and_flexible_whitespace() {
        let mut bytes = b"P5 # magic\n# a comment line\n  3\n#c\n2 255\t".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
        assert_eq!(img.get(2, 1), 60);
    }

    #[test]
    fn pgm_parser_rejects_bad_inputs() {
        // Wrong magic.
        assert!(decode_pgm(b"P2\n2 2\n255\n0123").is_err());
        // Wrong maxval.
        assert!(decode_pgm(b"P5\n2 2\n65535\n\0\0\0\0").is_err());
        // Truncated pixels.
        assert!(decode_pgm(b"P5\n2 2\n255\n\0\0\0").is_err());
        // Trailing bytes.
        assert!(decode_pgm(b"P5\n2 2\n255\n\0\0\0\0\n").is_err());
        // Zero dimension.
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
    }

    #[test]
    fn gray_prob_roundtrip_is_identity_on_all_levels() {
        let data: Vec<u8> = (0..=255u16).map(|v| v as u8).collect();
        let img = GrayImage::from_vec(256, 1, data).unwrap();
        assert_eq!(img.to_prob::<f32>().to_gray(), img);
        assert_eq!(img.to_prob::<f64>().to_gray(), img);
    }

    // -- Thresholding --------------------------------------------------------

    #[test]
    fn binarize_at_half_marks_exactly_gray_128_and_up() {
        let data: Vec<u8> = (0..=255u16).map(|v| v as u8).collect();
        let img = GrayImage::from_vec(256, 1, data).unwrap();
        let bin = binarize(&img.to_prob::<f32>(), 0.5).unwrap();
        for g in 0..=255usize {
            assert_eq!(bin.get(g, 0), g >= 128, "gray level {}", g);
        }
    }

    #[test]
    fn binarize_is_strictly_greater_than() {
        let m = map_from(3, 1, &[0.2, 0.5, 0.8]);
        let bin = binarize(&m, 0.5).unwrap();
        assert_eq!(bin.as_slice(), &[false, false, true]);
    }

    // -- Gaussian blur -------------------------------------------------------

    /// Direct 2D convolution with the same reflected borders, written as an
    /// independent reference against the separable implementation.
    fn blur_reference(map: &ProbMap<f64>, sigma: f64) -> ProbMap<f64> {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        let mut sum = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                weights.push((dx, dy, w));
                sum += w;
            }
        }
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= n {
                    i = 2 * n - 2 - i;
                } else {
                    return i as usize;
                }
            }
        };
        let mut out = ProbMap::new(map.width(), map.height()).unwrap();
        for y in 0..map.height() {
            for x in 0..map.width() {
                let mut acc = 0.0;
                for &(dx, dy, w) in &weights {
                    let sx = reflect(x as isize + dx, map.width());
                    let sy = reflect(y as isize + dy, map.height());
                    acc += w * map.get(sx, sy);
                }
                out.set(x, y, acc / sum);
            }
        }
        out
    }

    #[test]
    fn blur_matches_direct_convolution_reference() {
        let mut state = 0x12345678u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / ((1u64 << 31) as f64)
        };
        for &(w, h) in &[(7usize, 5usize), (12, 12), (3, 9), (1, 6), (5, 1)] {
            let data: Vec<f64> = (0..w * h).map(|_| next()).collect();
            let map = ProbMap::from_vec(w, h, data).unwrap();
            for &sigma in &[0.5f64, 1.0, 3.0] {
                let fast = gaussian_blur(&map, sigma).unwrap();
                let slow = blur_reference(&map, sigma);
                for i in 0..w * h {
                    assert_abs_diff_eq!(fast.as_slice()[i], slow.as_slice()[i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let map = ProbMap::from_vec(9, 4, vec![0.37f64; 36]).unwrap();
        let out = gaussian_blur(&map, 2.0).unwrap();
        for &v in out.as_slice() {
            assert_abs_diff_eq!(v, 0.37, epsilon = 1e-12);
        }
    }

    #[test]
    fn blur_kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel::<f64>(1.7).unwrap();
        assert_eq!(k.len(), 2 * 6 + 1);
        let sum: f64 = k.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        for i in 0..k.len() / 2 {
            assert_abs_diff_eq!(k[i], k[k.len() - 1 - i], epsilon = 1e-15);
        }
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let map = ProbMap::<f64>::new(4, 4).unwrap();
        assert!(gaussian_blur(&map, 0.0).is_err());
        assert!(gaussian_blur(&map, -1.0).is_err());
    }

    // -- Thinning ------------------------------------------------------------

    /// Independent thinning reference: same published deletion rules,
    /// mechanized differently (direct neighbor lookups per pixel into a
    /// frozen copy, explicit transition strings).
    fn thinning_reference(img: &BinaryImage) -> BinaryImage {
        let (w, h) = (img.width(), img.height());
        let at = |im: &BinaryImage, x: isize, y: isize| -> u8 {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0
            } else {
                im.get(x as usize, y as usize) as u8
            }
        };
        let mut cur = img.clone();
        loop {
            let mut any = false;
            for pass in 0..2 {
                let frozen = cur.clone();
                let mut to_clear = Vec::new();
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        if at(&frozen, x, y) == 0 {
                            continue;
                        }
                        let p2 = at(&frozen, x, y - 1);
                        let p3 = at(&frozen, x + 1, y - 1);
                        let p4 = at(&frozen, x + 1, y);
                        let p5 = at(&frozen, x + 1, y + 1);
                        let p6 = at(&frozen, x, y + 1);
                        let p7 = at(&frozen, x - 1, y + 1);
                        let p8 = at(&frozen, x - 1, y);
                        let p9 = at(&frozen, x - 1, y - 1);
                        let ring = [p2, p3, p4, p5, p6, p7, p8, p9, p2];
                        let a = ring.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count();
                        let b: u8 = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
                        let cond = if pass == 0 {
                            p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                        } else {
                            p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                        };
                        if (2..=6).contains(&b) && a == 1 && cond {
                            to_clear.push((x as usize, y as usize));
                        }
                    }
                }
                if !to_clear.is_empty() {
                    any = true;
                    for (x, y) in to_clear {
                        cur.set(x, y, false);
                    }
                }
            }
            if !any {
                return cur;
            }
        }
    }

    fn random_blob_image(seed: u64, w: usize, h: usize) -> BinaryImage {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        let mut img = BinaryImage::new(w, h).unwrap();
        for _ in 0..6 {
            let cx = (next() as usize) % w;
            let cy = (next() as usize) % h;
            let r = 2 + (next() as usize) % 5;
            for y in 0..h {
                for x in 0..w {
                    let dx = x as isize - cx as isize;
                    let dy = y as isize - cy as isize;
                    if (dx * dx + dy * dy) as usize <= r * r {
                        img.set(x, y, true);
                    }
                }
            }
        }
        img
    }

    #[test]
    fn thinning_matches_independent_reference_on_random_blobs() {
        for seed in 0..8u64 {
            let img = random_blob_image(seed, 40, 30);
            assert_eq!(skeletonize(&img), thinning_reference(&img), "seed {}", seed);
        }
    }

    #[test]
    fn thinning_reduces_a_plus_shape_to_thin_strokes() {
        // A 5-wide plus made of two overlapping 3-thick bars.
        let mut img = BinaryImage::new(21, 21).unwrap();
        for y in 9..=11 {
            for x in 3..=17 {
                img.set(x, y, true);
            }
        }
        for x in 9..=11 {
            for y in 3..=17 {
                img.set(x, y, true);
            }
        }
        let skel = skeletonize(&img);
        // Every remaining pixel was foreground, and the strokes are thin:
        // no 2x2 block survives.
        for y in 0..21 {
            for x in 0..21 {
                if skel.get(x, y) {
                    assert!(img.get(x, y));
                }
            }
        }
        for y in 0..20 {
            for x in 0..20 {
                let solid = skel.get(x, y)
                    && skel.get(x + 1, y)
                    && skel.get(x, y + 1)
                    && skel.get(x + 1, y + 1);
                assert!(!solid, "2x2 block at ({}, {})", x, y);
            }
        }
        assert!(skel.count_foreground() >= 9, "skeleton should keep the arms");
    }

    #[test]
    fn thinning_is_a_fixed_point() {
        for seed in 0..4u64 {
            let img = random_blob_image(seed, 32, 24);
            let once = skeletonize(&img);
            let twice = skeletonize(&once);
            assert_eq!(once, twice);
        }
    }

    // -- Resize ----------------------------------------------------------------

    #[test]
    fn resize_to_same_size_is_identity() {
        let m = map_from(4, 3, &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.05]);
        let r = resize_bilinear(&m, 4, 3).unwrap();
        for i in 0..12 {
            assert_abs_diff_eq!(r.as_slice()[i], m.as_slice()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn resize_pins_corners_exactly() {
        let m = map_from(5, 4, &(0..20).map(|v| v as f64 / 19.0).collect::<Vec<_>>());
        let r = resize_bilinear(&m, 11, 7).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), m.get(0, 0), epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(10, 0), m.get(4, 0), epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(0, 6), m.get(0, 3), epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(10, 6), m.get(4, 3), epsilon = 1e-12);
    }

    #[test]
    fn resize_reproduces_linear_ramps_exactly() {
        // Bilinear interpolation is exact on affine functions of (x, y).
        let mut m = ProbMap::<f64>::new(9, 6).unwrap();
        for y in 0..6 {
            for x in 0..9 {
                m.set(x, y, 0.1 + 0.05 * x as f64 + 0.02 * y as f64);
            }
        }
        let r = resize_bilinear(&m, 17, 11).unwrap();
        for y in 0..11 {
            for x in 0..17 {
                let sx = x as f64 * 8.0 / 16.0;
                let sy = y as f64 * 5.0 / 10.0;
                let expect = 0.1 + 0.05 * sx + 0.02 * sy;
                assert_abs_diff_eq!(r.get(x, y), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn resize_to_single_row_samples_the_vertical_center() {
        let m = map_from(2, 3, &[0.0, 0.0, 0.4, 0.8, 1.0, 1.0]);
        let r = resize_bilinear(&m, 2, 1).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(1, 0), 0.8, epsilon = 1e-12);
    }

    // -- Rotation ----------------------------------------------------------------

    #[test]
    fn rotate_by_zero_is_identity() {
        let m = map_from(4, 3, &(0..12).map(|v| v as f64 / 11.0).collect::<Vec<_>>());
        let r = rotate_to_horizontal(&m, 0.0).unwrap();
        for i in 0..12 {
            assert_abs_diff_eq!(r.as_slice()[i], m.as_slice()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn rotate_levels_a_tilted_stripe() {
        // A wide stripe along slope angle 10 degrees through the center.
        let (w, h) = (101usize, 61usize);
        let mut m = ProbMap::<f64>::new(w, h).unwrap();
        let theta = 10f64.to_radians();
        let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        for y in 0..h {
            for x in 0..w {
                // Signed distance from the tilted centerline.
                let d = (y as f64 - cy) * theta.cos() - (x as f64 - cx) * theta.sin();
                if d.abs() <= 6.0 {
                    m.set(x, y, 1.0);
                }
            }
        }
        let r = rotate_to_horizontal(&m, 10.0).unwrap();
        // The center row is deep inside the stripe everywhere away from the
        // borders; rows 12 pixels off-center are outside it.
        for x in 20..=80 {
            assert!(r.get(x, 30) > 0.9, "x = {}", x);
            assert!(r.get(x, 30 - 12) < 0.1, "x = {}", x);
            assert!(r.get(x, 30 + 12) < 0.1, "x = {}", x);
        }
    }

    #[test]
    fn rotate_point_tracks_rotated_content() {
        // Put a small bright square at a known spot, rotate, and check the
        // mapped point lands on the bright region.
        let (w, h) = (81usize, 61usize);
        let mut m = ProbMap::<f64>::new(w, h).unwrap();
        let (px, py) = (55usize, 20usize);
        for y in py - 2..=py + 2 {
            for x in px - 2..=px + 2 {
                m.set(x, y, 1.0);
            }
        }
        let r = rotate_to_horizontal(&m, 7.0).unwrap();
        let (qx, qy) = rotate_point_to_horizontal(px as f64, py as f64, w, h, 7.0);
        assert!(r.sample_bilinear(qx, qy) > 0.9);
    }

    // -- Normalization ----------------------------------------------------------

    #[test]
    fn normalize_spans_zero_to_one() {
        let m = map_from(3, 1, &[0.2, 0.5, 0.6]);
        let n = normalize_minmax(&m);
        assert_abs_diff_eq!(n.get(0, 0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.get(1, 0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(n.get(2, 0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_maps_constant_input_to_zeros() {
        let m = map_from(2, 2, &[0.4, 0.4, 0.4, 0.4]);
        let n = normalize_minmax(&m);
        assert!(n.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reflect_index_walks_back_from_both_borders() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-3, 1), 0);
    }
}
