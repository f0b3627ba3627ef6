//! Synthetic finger-vein phantoms: a bright finger band crossed by dark
//! quadratic ridge ribbons, with per-sample jitter and photometric
//! perturbation, plus exact soft-label ground truth.
//!
//! Per class the ridge layout is drawn once from the seed, so samples of
//! one class share topology while different classes do not. Ridge slots
//! are spaced and sigma-capped so that distinct ridges never bleed into
//! each other above the 0.5 label level.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, ProbMap};
use crate::protocol::{write_manifest, ManifestEntry};

/// Phantom framing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthStyle {
    /// Whole-finger view: tilted bright band on a dark background.
    Full,
    /// Pre-aligned region of interest: the band spans the frame.
    Roi,
}

/// Generator parameters; all randomness derives from `seed`.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub classes: u32,
    pub samples_per_class: u32,
    /// Number of capture sessions, 1 or 2; samples alternate sessions.
    pub sessions: u32,
    /// Inclusive ridge-count range per class.
    pub ridge_min: u32,
    pub ridge_max: u32,
    /// Maximum per-sample translation in pixels.
    pub jitter_px: f64,
    /// Additive brightness range.
    pub brightness: (f64, f64),
    /// Multiplicative contrast range about mid-gray.
    pub contrast: (f64, f64),
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Band tilt range in degrees (Full style only).
    pub max_tilt_deg: f64,
    pub style: SynthStyle,
    pub seed: u64,
}

impl SynthConfig {
    /// Whole-finger phantoms at capture resolution.
    pub fn full_default(classes: u32, samples_per_class: u32, sessions: u32, seed: u64) -> Self {
        SynthConfig {
            width: 320,
            height: 240,
            classes,
            samples_per_class,
            sessions,
            ridge_min: 3,
            ridge_max: 8,
            jitter_px: 2.0,
            brightness: (-0.04, 0.04),
            contrast: (0.92, 1.08),
            noise_sigma: 0.008,
            max_tilt_deg: 3.0,
            style: SynthStyle::Full,
            seed,
        }
    }

    /// Pre-aligned phantoms at the ROI output size.
    pub fn roi_default(classes: u32, samples_per_class: u32, sessions: u32, seed: u64) -> Self {
        SynthConfig {
            width: 225,
            height: 90,
            classes,
            samples_per_class,
            sessions,
            ridge_min: 3,
            ridge_max: 8,
            jitter_px: 2.0,
            brightness: (-0.04, 0.04),
            contrast: (0.92, 1.08),
            noise_sigma: 0.008,
            max_tilt_deg: 0.0,
            style: SynthStyle::Roi,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::InvalidParameter(format!(
                "phantom frame must be at least 32x32, got {}x{}",
                self.width, self.height
            )));
        }
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidParameter(
                "classes and samples_per_class must be positive".to_string(),
            ));
        }
        if self.sessions == 0 || self.sessions > 2 {
            return Err(Error::InvalidParameter(format!(
                "sessions must be 1 or 2, got {}",
                self.sessions
            )));
        }
        if self.ridge_min == 0 || self.ridge_min > self.ridge_max {
            return Err(Error::InvalidParameter(format!(
                "ridge range {}..={} is invalid",
                self.ridge_min, self.ridge_max
            )));
        }
        for (name, (lo, hi)) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{} range ({}, {}) is invalid",
                    name, lo, hi
                )));
            }
        }
        if !(self.jitter_px >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.max_tilt_deg >= 0.0) {
            return Err(Error::InvalidParameter(
                "jitter_px, noise_sigma, and max_tilt_deg must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// One dark ribbon inside the band, in band-relative coordinates.
#[derive(Debug, Clone)]
pub struct RidgeSpec {
    /// Vertical position at the band center, as a fraction of band height.
    pub rel_base: f64,
    /// Linear drift per unit of normalized column position.
    pub rel_slope: f64,
    /// Quadratic drift per unit of squared normalized column position.
    pub rel_curve: f64,
    /// Gaussian profile sigma in pixels.
    pub sigma_px: f64,
    /// Peak darkening in intensity units.
    pub depth: f64,
}

/// Fixed geometry shared by all samples of one class.
#[derive(Debug, Clone)]
pub struct ClassGeometry {
    pub center_y: f64,
    pub half_height: f64,
    pub tilt_deg: f64,
    /// Centerline deflection at the frame edges, in pixels.
    pub bow_px: f64,
    pub ridges: Vec<RidgeSpec>,
}

impl ClassGeometry {
    /// Band centerline height at column x.
    pub fn center_at(&self, x: f64, width: usize) -> f64 {
        let cx = (width as f64 - 1.0) / 2.0;
        let dx = x - cx;
        self.center_y
            + self.tilt_deg.to_radians().tan() * dx
            + self.bow_px * (dx / cx.max(1.0)).powi(2)
    }

    /// Upper and lower band boundaries at column x.
    pub fn band_at(&self, x: f64, width: usize) -> (f64, f64) {
        let c = self.center_at(x, width);
        (c - self.half_height, c + self.half_height)
    }

    /// Center height of ridge r at column x.
    pub fn ridge_at(&self, r: usize, x: f64, width: usize) -> f64 {
        let (u, l) = self.band_at(x, width);
        let t = (x - (width as f64 - 1.0) / 2.0) / width as f64;
        let spec = &self.ridges[r];
        let rel = spec.rel_base + spec.rel_slope * t + spec.rel_curve * t * t;
        u + rel * (l - u)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed from a base seed and a tag path.
pub(crate) fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

/// Draws the class geometry; depends only on `(cfg.seed, class)` and the
/// frame so every sample of the class shares it.
pub fn class_geometry(cfg: &SynthConfig, class: u32) -> Result<ClassGeometry> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive(cfg.seed, &[1, class as u64]));
    let h = cfg.height as f64;

    let (center_y, half_height, tilt_deg, bow_px) = match cfg.style {
        SynthStyle::Full => {
            let cy = h * (0.5 + rng.random_range(-0.04..=0.04));
            let half = h * rng.random_range(0.26..=0.30);
            let tilt = if cfg.max_tilt_deg > 0.0 {
                rng.random_range(-cfg.max_tilt_deg..=cfg.max_tilt_deg)
            } else {
                0.0
            };
            let bow = rng.random_range(-0.06..=0.06) * half;
            (cy, half, tilt, bow)
        }
        SynthStyle::Roi => {
            // The band spans the frame with thin dark margins.
            (h * 0.5, h * 0.46, 0.0, 0.0)
        }
    };

    let n = rng.random_range(cfg.ridge_min..=cfg.ridge_max) as usize;
    // Ridges live in slots across the central band so that worst-case
    // neighbor separation stays at 0.6 of a slot; sigma is capped at that
    // separation over 3.8, keeping the 0.5-level label components apart.
    let band_px = 2.0 * half_height;
    let slot = 0.76 / n as f64;
    let slot_px = slot * band_px;
    let sigma_cap = (0.158 * slot_px).min(3.0);
    let mut ridges = Vec::with_capacity(n);
    for r in 0..n {
        let rel_base = 0.12 + (r as f64 + 0.5) * slot + rng.random_range(-0.1..=0.1) * slot;
        let rel_slope = rng.random_range(-0.1..=0.1) * slot;
        let rel_curve = rng.random_range(-0.2..=0.2) * slot;
        let sigma_px = sigma_cap * rng.random_range(0.55..=1.0);
        let depth = rng.random_range(0.35..=0.5);
        ridges.push(RidgeSpec {
            rel_base,
            rel_slope,
            rel_curve,
            sigma_px,
            depth,
        });
    }
    Ok(ClassGeometry {
        center_y,
        half_height,
        tilt_deg,
        bow_px,
        ridges,
    })
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Renders one sample: the quantized image and its soft label.
///
/// The label is the normalized sum of ridge profiles inside the hard band
/// mask, measured before photometric perturbation, so it is exact ground
/// truth for the geometry.
pub fn render_sample(
    cfg: &SynthConfig,
    class: u32,
    session: u32,
    sample_index: u32,
) -> Result<(GrayImage, ProbMap<f64>)> {
    let geom = class_geometry(cfg, class)?;
    if session == 0 || session > cfg.sessions {
        return Err(Error::InvalidParameter(format!(
            "session {} outside 1..={}",
            session, cfg.sessions
        )));
    }

    // Session 1 is canonical; later sessions add a systematic offset.
    let (mut sdx, mut sdy) = (0.0, 0.0);
    if session > 1 {
        let mut srng =
            ChaCha12Rng::seed_from_u64(derive(cfg.seed, &[3, class as u64, session as u64]));
        sdx = srng.random_range(-0.75..=0.75) * cfg.jitter_px;
        sdy = srng.random_range(-0.75..=0.75) * cfg.jitter_px;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(derive(
        cfg.seed,
        &[2, class as u64, session as u64, sample_index as u64],
    ));
    let dx = rng.random_range(-1.0..=1.0) * cfg.jitter_px + sdx;
    let dy = rng.random_range(-1.0..=1.0) * cfg.jitter_px + sdy;
    let brightness = rng.random_range(cfg.brightness.0..=cfg.brightness.1);
    let contrast = rng.random_range(cfg.contrast.0..=cfg.contrast.1);

    let (w, h) = (cfg.width, cfg.height);
    let mut clean = ProbMap::<f64>::new(w, h)?;
    let mut label = ProbMap::<f64>::new(w, h)?;

    for y in 0..h {
        for x in 0..w {
            // Geometry is sampled in jitter-shifted coordinates.
            let xs = x as f64 - dx;
            let ys = y as f64 - dy;
            let (u, l) = geom.band_at(xs, w);
            let soft = clamp01((ys - u) / 2.0) * clamp01((l - ys) / 2.0);
            let mut ridge_sum = 0.0;
            for r in 0..geom.ridges.len() {
                let spec = &geom.ridges[r];
                let yr = geom.ridge_at(r, xs, w);
                let d = ys - yr;
                if d.abs() < 4.0 * spec.sigma_px {
                    ridge_sum += spec.depth * (-d * d / (2.0 * spec.sigma_px.powi(2))).exp();
                }
            }
            let base = 0.12 + 0.58 * soft;
            clean.set(x, y, clamp01(base - ridge_sum * soft));
            let hard_inside = ys >= u && ys <= l;
            label.set(x, y, if hard_inside { ridge_sum } else { 0.0 });
        }
    }
    let label = crate::imaging::normalize_minmax(&label);

    // Photometric model: contrast about mid-gray, then brightness, then
    // sensor noise via the Box-Muller transform.
    let mut out = ProbMap::<f64>::new(w, h)?;
    for y in 0..h {
        for x in 0..w {
            let noise = if cfg.noise_sigma > 0.0 {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                cfg.noise_sigma
                    * (-2.0 * u1.ln()).sqrt()
                    * (2.0 * std::f64::consts::PI * u2).cos()
            } else {
                0.0
            };
            let v = (clean.get(x, y) - 0.5) * contrast + 0.5 + brightness + noise;
            out.set(x, y, clamp01(v));
        }
    }

    Ok((out.to_gray(), label))
}

/// Session for the k-th sample of a class (alternating) and its index
/// within that session.
pub fn session_of(cfg: &SynthConfig, k: u32) -> (u32, u32) {
    (k % cfg.sessions + 1, k / cfg.sessions)
}

/// Writes the full dataset tree plus `manifest.csv` under `out_dir`.
///
/// Layout: `cls_XXX/sN/img_II.pgm`, with `lbl_II.pgm` alongside when
/// labels are requested. Returned entries carry the same relative paths
/// that were written to the manifest.
pub fn generate_dataset(
    cfg: &SynthConfig,
    out_dir: &Path,
    emit_labels: bool,
) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for class in 0..cfg.classes {
        for k in 0..cfg.samples_per_class {
            let (session, idx) = session_of(cfg, k);
            let rel_dir = format!("cls_{:03}/s{}", class, session);
            let dir = out_dir.join(&rel_dir);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (img, lab) = render_sample(cfg, class, session, idx)?;
            let rel = format!("{}/img_{:02}.pgm", rel_dir, idx);
            crate::imaging::write_pgm(&out_dir.join(&rel), &img)?;
            if emit_labels {
                let lrel = format!("{}/lbl_{:02}.pgm", rel_dir, idx);
                crate::imaging::write_pgm(&out_dir.join(&lrel), &lab.to_gray())?;
            }
            entries.push(ManifestEntry {
                path: rel,
                class_id: class,
                session,
                sample_index: idx,
            });
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{binarize, BinaryImage};

    fn components(bin: &BinaryImage) -> usize {
        // 8-connectivity flood fill.
        let (w, h) = (bin.width(), bin.height());
        let mut seen = vec![false; w * h];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..w * h {
            if seen[start] || !bin.get(start % w, start / w) {
                continue;
            }
            count += 1;
            stack.push(start);
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (px, py) = (p % w, p / w);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (px as i64 + dx, py as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if !seen[q] && bin.get(nx as usize, ny as usize) {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::roi_default(2, 2, 1, 42);
        let (a_img, a_lab) = render_sample(&cfg, 1, 1, 0).unwrap();
        let (b_img, b_lab) = render_sample(&cfg, 1, 1, 0).unwrap();
        assert_eq!(a_img.as_slice(), b_img.as_slice());
        assert_eq!(a_lab.as_slice(), b_lab.as_slice());
    }

    #[test]
    fn classes_differ_and_samples_within_class_differ() {
        let cfg = SynthConfig::roi_default(2, 2, 1, 7);
        let (img_a, _) = render_sample(&cfg, 0, 1, 0).unwrap();
        let (img_b, _) = render_sample(&cfg, 1, 1, 0).unwrap();
        assert_ne!(img_a.as_slice(), img_b.as_slice());
        let (img_a1, _) = render_sample(&cfg, 0, 1, 1).unwrap();
        assert_ne!(img_a.as_slice(), img_a1.as_slice());
    }

    #[test]
    fn label_components_match_ridge_count() {
        for seed in [3u64, 11, 29, 55, 101] {
            let cfg = SynthConfig::roi_default(4, 1, 1, seed);
            for class in 0..cfg.classes {
                let geom = class_geometry(&cfg, class).unwrap();
                let (_, lab) = render_sample(&cfg, class, 1, 0).unwrap();
                let bin = binarize(&lab, 0.5).unwrap();
                let n = components(&bin);
                assert_eq!(
                    n,
                    geom.ridges.len(),
                    "seed {} class {}: {} components for {} ridges",
                    seed,
                    class,
                    n,
                    geom.ridges.len()
                );
                assert!(n >= cfg.ridge_min as usize && n <= cfg.ridge_max as usize);
            }
        }
    }

    #[test]
    fn full_style_labels_also_separate() {
        for seed in [5u64, 17] {
            let cfg = SynthConfig::full_default(3, 1, 1, seed);
            for class in 0..cfg.classes {
                let geom = class_geometry(&cfg, class).unwrap();
                let (_, lab) = render_sample(&cfg, class, 1, 0).unwrap();
                let n = components(&binarize(&lab, 0.5).unwrap());
                assert_eq!(n, geom.ridges.len(), "seed {} class {}", seed, class);
            }
        }
    }

    #[test]
    fn ridge_counts_stay_in_range() {
        let cfg = SynthConfig::roi_default(24, 1, 1, 13);
        let mut seen_min = u32::MAX;
        let mut seen_max = 0;
        for class in 0..cfg.classes {
            let n = class_geometry(&cfg, class).unwrap().ridges.len() as u32;
            assert!(n >= cfg.ridge_min && n <= cfg.ridge_max);
            seen_min = seen_min.min(n);
            seen_max = seen_max.max(n);
        }
        // The draw spans more than a single value across 24 classes.
        assert!(seen_max > seen_min);
    }

    #[test]
    fn label_spans_unit_interval_and_sits_inside_band() {
        let cfg = SynthConfig::full_default(1, 1, 1, 9);
        let geom = class_geometry(&cfg, 0).unwrap();
        let (_, lab) = render_sample(&cfg, 0, 1, 0).unwrap();
        let (lo, hi) = lab.min_max();
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        // No label mass outside the band rows by more than jitter.
        let (u, _) = geom.band_at(0.0, cfg.width);
        let top = (u - cfg.jitter_px - 1.0).max(0.0) as usize;
        for y in 0..top.saturating_sub(geom.half_height as usize / 2) {
            for x in 0..cfg.width {
                assert_eq!(lab.get(x, y), 0.0);
            }
        }
    }

    #[test]
    fn dataset_tree_is_reproducible() {
        use sha2::Digest;
        let cfg = SynthConfig::roi_default(2, 4, 2, 3);
        let hash_tree = |root: &Path| -> Vec<(String, [u8; 32])> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                        let bytes = std::fs::read(&p).unwrap();
                        files.push((rel, sha2::Sha256::digest(&bytes).into()));
                    }
                }
            }
            files.sort();
            files
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let e1 = generate_dataset(&cfg, d1.path(), true).unwrap();
        let e2 = generate_dataset(&cfg, d2.path(), true).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(hash_tree(d1.path()), hash_tree(d2.path()));
        // 2 classes x 4 samples, plus labels, plus the manifest.
        assert_eq!(hash_tree(d1.path()).len(), 2 * 4 * 2 + 1);
    }

    #[test]
    fn sessions_alternate_and_manifest_reads_back() {
        let cfg = SynthConfig::roi_default(2, 4, 2, 5);
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_dataset(&cfg, dir.path(), false).unwrap();
        let s1 = entries.iter().filter(|e| e.session == 1).count();
        let s2 = entries.iter().filter(|e| e.session == 2).count();
        assert_eq!((s1, s2), (4, 4));
        let back = crate::protocol::read_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back.len(), entries.len());
        for e in &back {
            let img = crate::imaging::read_pgm(Path::new(&e.path)).unwrap();
            assert_eq!((img.width(), img.height()), (cfg.width, cfg.height));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::roi_default(1, 1, 1, 0);
        cfg.sessions = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::roi_default(1, 1, 1, 0);
        cfg.ridge_min = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::roi_default(1, 1, 1, 0);
        cfg.contrast = (1.1, 0.9);
        assert!(cfg.validate().is_err());
        let cfg = SynthConfig::roi_default(1, 1, 1, 0);
        assert!(render_sample(&cfg, 0, 2, 0).is_err());
    }
}
