//! Region-of-interest extraction for finger images.
//!
//! The finger appears as a bright horizontal band on a dark background.
//! Its two edges are localized by a windowed second-order moment response
//! (strongest where local structure is most anisotropic), reinforced with a
//! horizontal Gabor filter, thresholded, and fit with one quadratic curve
//! per edge. The image is leveled by rotating the fitted centerline to
//! horizontal, and the region between the curves over the central columns
//! is cropped and resized to a fixed output size.

use crate::error::{Error, Result};
use crate::imaging::{
    self, binarize, conv1d_cols, conv1d_rows, crop, gaussian_kernel, normalize_minmax,
    resize_bilinear, rotate_point_to_horizontal, rotate_to_horizontal, GrayImage, ProbMap,
};
use crate::scalar::Scalar;

/// Tunables of the ROI stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoiConfig {
    /// Odd window side for the moment response, at least 3.
    pub moment_window: usize,
    /// Vertical period of the Gabor carrier, in pixels.
    pub gabor_wavelength: f64,
    /// Gaussian envelope sigma of the Gabor kernel, in pixels.
    pub gabor_sigma: f64,
    /// Threshold on the normalized edge response.
    pub edge_threshold: f64,
    /// Minimum edge pixels required per side.
    pub min_edge_points: usize,
    /// Largest acceptable centerline slope, in degrees.
    pub max_rotation_deg: f64,
    /// Output width in pixels.
    pub out_width: usize,
    /// Output height in pixels.
    pub out_height: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            moment_window: 7,
            gabor_wavelength: 8.0,
            gabor_sigma: 3.0,
            edge_threshold: 0.35,
            min_edge_points: 10,
            max_rotation_deg: 45.0,
            out_width: 225,
            out_height: 90,
        }
    }
}

/// Geometry recovered while extracting one ROI.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoiReport {
    /// Quadratic upper edge `y = a + b x + c x^2` in source coordinates.
    pub upper: [f64; 3],
    /// Quadratic lower edge in source coordinates.
    pub lower: [f64; 3],
    /// Centerline slope angle in degrees (positive slopes downhill to the
    /// right in image coordinates).
    pub centerline_slope_deg: f64,
    /// Rotation applied to the content to level it, in degrees; always the
    /// negation of the detected slope.
    pub applied_rotation_deg: f64,
    /// Crop rectangle `(x0, y0, width, height)` in the rotated frame.
    pub crop_rect: (usize, usize, usize, usize),
    /// Number of thresholded edge pixels feeding the upper and lower fits.
    pub edge_points: (usize, usize),
}

/// Pixel-wise anisotropy response from second-order central moments.
///
/// Each pixel's window (side `window`, borders reflected) is summarized by
/// the squared deviations from the window mean, `w = (I - mean)^2`, taken
/// as a mass distribution. The response is the larger eigenvalue of the
/// central moment matrix `[[mu20, mu11], [mu11, mu02]]` of that
/// distribution, with moments measured about its own centroid, min-max
/// normalized over the image (all zeros when the image is constant). A
/// window with no deviation mass responds zero.
pub fn orientation_intensity<S: Scalar>(map: &ProbMap<S>, window: usize) -> Result<ProbMap<S>> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "moment window must be odd and at least 3, got {}",
            window
        )));
    }
    let r = (window / 2) as isize;
    let (w, h) = (map.width(), map.height());
    let inv_area = 1.0 / (window * window) as f64;
    let mut out = ProbMap::new(w, h)?;

    for y in 0..h {
        for x in 0..w {
            let mut mean = 0.0f64;
            for dy in -r..=r {
                let sy = imaging::reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = imaging::reflect_index(x as isize + dx, w);
                    mean += map.get(sx, sy).to_f64_lossy();
                }
            }
            mean *= inv_area;

            let (mut sw, mut swx, mut swy) = (0.0f64, 0.0f64, 0.0f64);
            let (mut swxx, mut swyy, mut swxy) = (0.0f64, 0.0f64, 0.0f64);
            for dy in -r..=r {
                let sy = imaging::reflect_index(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = imaging::reflect_index(x as isize + dx, w);
                    let dev = map.get(sx, sy).to_f64_lossy() - mean;
                    let wgt = dev * dev;
                    let (fx, fy) = (dx as f64, dy as f64);
                    sw += wgt;
                    swx += wgt * fx;
                    swy += wgt * fy;
                    swxx += wgt * fx * fx;
                    swyy += wgt * fy * fy;
                    swxy += wgt * fx * fy;
                }
            }
            if sw <= f64::EPSILON {
                out.set(x, y, S::zero());
                continue;
            }
            // Central moments via the parallel axis relation.
            let mu20 = swxx - swx * swx / sw;
            let mu02 = swyy - swy * swy / sw;
            let mu11 = swxy - swx * swy / sw;
            let tr = mu20 + mu02;
            let diff = mu20 - mu02;
            let lam = 0.5 * (tr + (diff * diff + 4.0 * mu11 * mu11).sqrt());
            out.set(x, y, S::from_f64_lossy(lam));
        }
    }
    Ok(normalize_minmax(&out))
}

/// Correlation with an even-symmetric horizontal Gabor kernel
/// `exp(-(x^2 + y^2) / (2 sigma^2)) cos(2 pi y / wavelength)`, radius
/// `ceil(3 sigma)`, borders reflected. Responds most strongly to
/// horizontal stripes whose vertical period matches the wavelength. The
/// response is min-max rescaled to [0, 1]; a flat response maps to zero.
pub fn gabor_horizontal<S: Scalar>(
    map: &ProbMap<S>,
    wavelength: f64,
    sigma: f64,
) -> Result<ProbMap<S>> {
    if !(wavelength > 0.0) || !wavelength.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gabor wavelength must be positive, got {}",
            wavelength
        )));
    }
    // The kernel separates into a plain Gaussian across x and a
    // cosine-modulated Gaussian down y.
    let gauss = gaussian_kernel::<S>(sigma)?;
    let radius = (gauss.len() / 2) as isize;
    let modulated: Vec<S> = (-radius..=radius)
        .map(|i| {
            let g = gauss[(i + radius) as usize].to_f64_lossy();
            S::from_f64_lossy(g * (2.0 * std::f64::consts::PI * i as f64 / wavelength).cos())
        })
        .collect();
    let mid = conv1d_rows(map, &gauss);
    Ok(normalize_minmax(&conv1d_cols(&mid, &modulated)))
}

/// Least-squares quadratic `y = a + b x + c x^2` through scattered points.
///
/// Needs at least three distinct x positions; a singular normal system is
/// reported as a degenerate fit.
pub fn fit_edge_quadratic(points: &[(f64, f64)]) -> Result<[f64; 3]> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    if xs.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "quadratic fit needs 3 distinct x positions, got {}",
            xs.len()
        )));
    }

    // Normal equations for the basis [1, x, x^2].
    let (mut s0, mut s1, mut s2, mut s3, mut s4) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    let (mut t0, mut t1, mut t2) = (0.0f64, 0.0, 0.0);
    for &(x, y) in points {
        let x2 = x * x;
        s0 += 1.0;
        s1 += x;
        s2 += x2;
        s3 += x2 * x;
        s4 += x2 * x2;
        t0 += y;
        t1 += x * y;
        t2 += x2 * y;
    }
    let m = nalgebra::Matrix3::new(s0, s1, s2, s1, s2, s3, s2, s3, s4);
    let v = nalgebra::Vector3::new(t0, t1, t2);
    let sol = m
        .lu()
        .solve(&v)
        .ok_or_else(|| Error::DegenerateFit("normal equations are singular".to_string()))?;
    let out = [sol[0], sol[1], sol[2]];
    if out.iter().any(|c| !c.is_finite()) {
        return Err(Error::DegenerateFit(
            "quadratic fit produced non-finite coefficients".to_string(),
        ));
    }
    Ok(out)
}

fn eval_quad(c: &[f64; 3], x: f64) -> f64 {
    c[0] + c[1] * x + c[2] * x * x
}

/// Median of the map values, used as the background response level.
fn median_response<S: Scalar>(map: &ProbMap<S>) -> f64 {
    let mut vals: Vec<f64> = map.as_slice().iter().map(|v| v.to_f64_lossy()).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if vals.is_empty() {
        return 0.0;
    }
    let mid = vals.len() / 2;
    if vals.len() % 2 == 1 {
        vals[mid]
    } else {
        0.5 * (vals[mid - 1] + vals[mid])
    }
}

/// Extracts the aligned region of interest from a raw finger image.
pub fn extract_roi<S: Scalar>(
    img: &GrayImage,
    cfg: &RoiConfig,
) -> Result<(ProbMap<S>, RoiReport)> {
    let (w, h) = (img.width(), img.height());
    let prob: ProbMap<S> = img.to_prob();

    // Edge response: moment anisotropy sharpened by a horizontal Gabor.
    let oi = orientation_intensity(&prob, cfg.moment_window)?;
    let gab = gabor_horizontal(&oi, cfg.gabor_wavelength, cfg.gabor_sigma)?;
    // The edge cut sits the configured fraction of the way from the
    // background response level (the median) to the peak, so a map whose
    // background level is zero is cut at exactly `edge_threshold`.
    let background = median_response(&gab);
    let cut = background + cfg.edge_threshold * (1.0 - background);
    let edges = binarize(&gab, cut)?;

    // Split the edge pixels into the upper and lower half of the frame.
    let mut upper_pts = Vec::new();
    let mut lower_pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if edges.get(x, y) {
                let p = (x as f64, y as f64);
                if (y as f64) < h as f64 / 2.0 {
                    upper_pts.push(p);
                } else {
                    lower_pts.push(p);
                }
            }
        }
    }
    for (side, pts) in [("upper", &upper_pts), ("lower", &lower_pts)] {
        if pts.len() < cfg.min_edge_points {
            return Err(Error::InsufficientEdgeEvidence(format!(
                "{} edge has {} pixels above threshold, needs {}",
                side,
                pts.len(),
                cfg.min_edge_points
            )));
        }
    }

    let upper = fit_edge_quadratic(&upper_pts)?;
    let lower = fit_edge_quadratic(&lower_pts)?;

    // Centerline slope from a least-squares line through the midpoints.
    let center = |x: f64| 0.5 * (eval_quad(&upper, x) + eval_quad(&lower, x));
    let n = w as f64;
    let xbar = (n - 1.0) / 2.0;
    let (mut sxy, mut sxx, mut ybar) = (0.0f64, 0.0f64, 0.0f64);
    for x in 0..w {
        ybar += center(x as f64);
    }
    ybar /= n;
    for x in 0..w {
        let dx = x as f64 - xbar;
        sxy += dx * (center(x as f64) - ybar);
        sxx += dx * dx;
    }
    let slope_deg = (sxy / sxx).atan().to_degrees();
    if slope_deg.abs() > cfg.max_rotation_deg {
        return Err(Error::ImplausibleGeometry(format!(
            "centerline slope {:.1} degrees exceeds the {:.1} degree limit",
            slope_deg, cfg.max_rotation_deg
        )));
    }

    // Level the band and carry the fitted curves into the rotated frame.
    let rotated = rotate_to_horizontal(&prob, slope_deg)?;
    let mut upper_rot = Vec::with_capacity(w);
    let mut lower_rot = Vec::with_capacity(w);
    for x in 0..w {
        let xf = x as f64;
        let yu = eval_quad(&upper, xf);
        let yl = eval_quad(&lower, xf);
        if yu >= yl {
            return Err(Error::ImplausibleGeometry(format!(
                "edge curves cross at column {}",
                x
            )));
        }
        upper_rot.push(rotate_point_to_horizontal(xf, yu, w, h, slope_deg));
        lower_rot.push(rotate_point_to_horizontal(xf, yl, w, h, slope_deg));
    }

    // Keep the central 80 percent of the rotated x extent.
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in upper_rot.iter().chain(lower_rot.iter()) {
        xmin = xmin.min(p.0);
        xmax = xmax.max(p.0);
    }
    let span = xmax - xmin;
    let win_lo = xmin + 0.1 * span;
    let win_hi = xmax - 0.1 * span;

    let mut top = f64::NEG_INFINITY;
    let mut bottom = f64::INFINITY;
    for p in &upper_rot {
        if p.0 >= win_lo && p.0 <= win_hi {
            top = top.max(p.1);
        }
    }
    for p in &lower_rot {
        if p.0 >= win_lo && p.0 <= win_hi {
            bottom = bottom.min(p.1);
        }
    }

    let x0 = win_lo.ceil().max(0.0) as usize;
    let x1 = (win_hi.floor() as isize).min(w as isize - 1).max(0) as usize;
    let y0 = top.ceil().max(0.0) as usize;
    let y1 = (bottom.floor() as isize).min(h as isize - 1).max(0) as usize;
    if x1 <= x0 + 8 || y1 <= y0 + 4 {
        return Err(Error::ImplausibleGeometry(format!(
            "crop region {}..{} x {}..{} is too small",
            x0, x1, y0, y1
        )));
    }

    let rect = (x0, y0, x1 - x0 + 1, y1 - y0 + 1);
    let cropped = crop(&rotated, rect.0, rect.1, rect.2, rect.3)?;
    let out = resize_bilinear(&cropped, cfg.out_width, cfg.out_height)?;

    Ok((
        out,
        RoiReport {
            upper,
            lower,
            centerline_slope_deg: slope_deg,
            applied_rotation_deg: -slope_deg,
            crop_rect: rect,
            edge_points: (upper_pts.len(), lower_pts.len()),
        },
    ))
}
