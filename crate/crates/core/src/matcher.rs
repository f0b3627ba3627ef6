//! Two-stage descriptor matching with projective verification.
//!
//! Stage one pairs every probe descriptor with its nearest gallery
//! descriptor and keeps pairs under a distance threshold; stage two makes
//! the pairing one-to-one greedily by ascending distance. The surviving
//! correspondences are verified by a random-sample consensus fit of a
//! homography between the keypoint positions, and the inlier count is the
//! match score.

use nalgebra::{DMatrix, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::descriptor::DescriptorSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Matching and verification settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchConfig {
    /// Stage-one distance cutoff; a pair survives only strictly under it.
    pub distance_threshold: f64,
    /// Consensus sampling rounds.
    pub ransac_iterations: usize,
    /// Reprojection error a correspondence must stay strictly under, in
    /// pixels.
    pub ransac_tolerance: f64,
    /// Seed of the sampling generator; fixes the full result.
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            distance_threshold: 1.2,
            ransac_iterations: 500,
            ransac_tolerance: 3.0,
            seed: 0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold > 0.0) || !self.distance_threshold.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "distance threshold {} must be positive and finite",
                self.distance_threshold
            )));
        }
        if self.ransac_iterations == 0 {
            return Err(Error::InvalidParameter(
                "consensus sampling needs at least one round".into(),
            ));
        }
        if !(self.ransac_tolerance > 0.0) || !self.ransac_tolerance.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "reprojection tolerance {} must be positive and finite",
                self.ransac_tolerance
            )));
        }
        Ok(())
    }
}

/// One matched descriptor pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub probe: usize,
    pub gallery: usize,
    pub distance: f64,
}

/// Outcome of matching one probe image against one gallery image.
///
/// `matches` is the one-to-one pairing from the descriptor stages,
/// ascending by distance. `inliers` indexes into `matches`. The score is
/// the inlier count and 0 whenever verification was impossible.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matches: Vec<Correspondence>,
    pub homography: Option<[f64; 9]>,
    pub inliers: Vec<usize>,
    pub score: usize,
}

impl MatchResult {
    fn unverified(matches: Vec<Correspondence>) -> MatchResult {
        MatchResult {
            matches,
            homography: None,
            inliers: Vec::new(),
            score: 0,
        }
    }
}

/// Euclidean distance between two descriptor vectors.
pub fn descriptor_distance<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&u, &v)| {
            let t = u.to_f64_lossy() - v.to_f64_lossy();
            t * t
        })
        .sum::<f64>()
        .sqrt()
}

/// Two-stage matching: nearest-gallery assignment under the distance
/// threshold, then a greedy one-to-one reduction by ascending distance.
///
/// Nearest-neighbor ties go to the lowest gallery index, and equal-distance
/// candidates are consumed in (distance, probe, gallery) order, so the
/// result is deterministic. Either side empty gives an empty result. All
/// descriptor vectors must share one length.
pub fn match_descriptors<S: Scalar>(
    probe: &DescriptorSet<S>,
    gallery: &DescriptorSet<S>,
    distance_threshold: f64,
) -> Result<Vec<Correspondence>> {
    if !(distance_threshold > 0.0) || !distance_threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "distance threshold {} must be positive and finite",
            distance_threshold
        )));
    }
    if probe.is_empty() || gallery.is_empty() {
        return Ok(Vec::new());
    }
    let dim = probe[0].vector.len();
    for e in probe.iter().chain(gallery.iter()) {
        if e.vector.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor lengths differ: {} and {}",
                dim,
                e.vector.len()
            )));
        }
    }

    let mut candidates: Vec<Correspondence> = Vec::new();
    for (i, p) in probe.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, g) in gallery.iter().enumerate() {
            let d = descriptor_distance(&p.vector, &g.vector);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if best_d < distance_threshold {
            candidates.push(Correspondence {
                probe: i,
                gallery: best,
                distance: best_d,
            });
        }
    }

    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.probe.cmp(&b.probe))
            .then(a.gallery.cmp(&b.gallery))
    });
    let mut gallery_used = vec![false; gallery.len()];
    let mut matches = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !gallery_used[c.gallery] {
            gallery_used[c.gallery] = true;
            matches.push(c);
        }
    }
    Ok(matches)
}

// ---------------------------------------------------------------------------
// Homography estimation
// ---------------------------------------------------------------------------

/// A fitted probe-to-gallery homography with the surviving pair indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    /// Row-major 3x3 matrix scaled so the last entry is 1.
    pub homography: [f64; 9],
    pub inliers: Vec<usize>,
}

/// Similarity transform moving a point set to centroid 0 and mean radius
/// sqrt(2); `None` when the points coincide.
fn normalizer(points: &[(f64, f64)]) -> Option<[f64; 9]> {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
    let (mx, my) = (mx / n, my / n);
    let mean_r = points
        .iter()
        .map(|&(x, y)| ((x - mx).powi(2) + (y - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_r < 1e-9 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_r;
    Some([s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0])
}

fn apply_h(h: &[f64; 9], x: f64, y: f64) -> Option<(f64, f64)> {
    let w = h[6] * x + h[7] * y + h[8];
    if w.abs() < 1e-12 {
        return None;
    }
    Some((
        (h[0] * x + h[1] * y + h[2]) / w,
        (h[3] * x + h[4] * y + h[5]) / w,
    ))
}

fn mat_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

/// Any three of the points collinear, including coincident points.
fn sample_degenerate(pts: &[(f64, f64); 4]) -> bool {
    for a in 0..4 {
        for b in (a + 1)..4 {
            for c in (b + 1)..4 {
                let (ax, ay) = pts[a];
                let (bx, by) = pts[b];
                let (cx, cy) = pts[c];
                let area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
                if area.abs() < 1e-9 {
                    return true;
                }
            }
        }
    }
    false
}

/// Direct linear transform over normalized correspondences: the unit
/// vector minimizing `|A h|` via the smallest eigenpair of `A^T A`.
fn dlt(pairs: &[((f64, f64), (f64, f64))]) -> Option<[f64; 9]> {
    let mut a = DMatrix::<f64>::zeros(pairs.len() * 2, 9);
    for (r, &((x, y), (u, v))) in pairs.iter().enumerate() {
        a[(2 * r, 0)] = -x;
        a[(2 * r, 1)] = -y;
        a[(2 * r, 2)] = -1.0;
        a[(2 * r, 6)] = u * x;
        a[(2 * r, 7)] = u * y;
        a[(2 * r, 8)] = u;
        a[(2 * r + 1, 3)] = -x;
        a[(2 * r + 1, 4)] = -y;
        a[(2 * r + 1, 5)] = -1.0;
        a[(2 * r + 1, 6)] = v * x;
        a[(2 * r + 1, 7)] = v * y;
        a[(2 * r + 1, 8)] = v;
    }
    let ata = SMatrix::<f64, 9, 9>::from_fn(|r, c| a.column(r).dot(&a.column(c)));
    let eig = ata.symmetric_eigen();
    let mut min_i = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let h_col = eig.eigenvectors.column(min_i);
    let mut h = [0.0; 9];
    for (i, hv) in h.iter_mut().enumerate() {
        *hv = h_col[i];
    }
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(h)
}

/// Fits a probe-to-gallery homography by consensus sampling.
///
/// Runs `ransac_iterations` rounds; each draws 4 distinct pairs, skips
/// degenerate (collinear) samples, fits by normalized direct linear
/// transform, and counts pairs with reprojection error strictly under the
/// tolerance. The largest consensus wins (earliest round on ties), is
/// refit over its inliers, and the refit inliers are recounted so every
/// returned index satisfies the tolerance under the returned matrix.
///
/// Fewer than 4 pairs or a fully degenerate geometry gives `Ok(None)`.
pub fn ransac_homography(
    pairs: &[((f64, f64), (f64, f64))],
    cfg: &MatchConfig,
) -> Result<Option<RansacFit>> {
    cfg.validate()?;
    if pairs.len() < 4 {
        return Ok(None);
    }
    for &((px, py), (gx, gy)) in pairs {
        if ![px, py, gx, gy].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "correspondence coordinates must be finite".into(),
            ));
        }
    }

    let probe_pts: Vec<(f64, f64)> = pairs.iter().map(|p| p.0).collect();
    let gallery_pts: Vec<(f64, f64)> = pairs.iter().map(|p| p.1).collect();
    let (tp, tg) = match (normalizer(&probe_pts), normalizer(&gallery_pts)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(None),
    };
    let tg_inv = invert_similarity(&tg);
    let norm_pairs: Vec<((f64, f64), (f64, f64))> = pairs
        .iter()
        .map(|&((px, py), (gx, gy))| {
            let p = apply_h(&tp, px, py).expect("similarity transforms are affine");
            let g = apply_h(&tg, gx, gy).expect("similarity transforms are affine");
            (p, g)
        })
        .collect();

    let denormalize = |hn: &[f64; 9]| -> Option<[f64; 9]> {
        let mut h = mat_mul(&tg_inv, &mat_mul(hn, &tp));
        if h[8].abs() < 1e-12 {
            return None;
        }
        let scale = h[8];
        for v in h.iter_mut() {
            *v /= scale;
        }
        Some(h)
    };

    let count_inliers = |h: &[f64; 9]| -> Vec<usize> {
        pairs
            .iter()
            .enumerate()
            .filter_map(|(i, &((px, py), (gx, gy)))| {
                let (qx, qy) = apply_h(h, px, py)?;
                let err = ((qx - gx).powi(2) + (qy - gy).powi(2)).sqrt();
                (err < cfg.ransac_tolerance).then_some(i)
            })
            .collect()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<usize>, [f64; 9])> = None;
    for _ in 0..cfg.ransac_iterations {
        let mut idx = [0usize; 4];
        let mut filled = 0;
        while filled < 4 {
            let k = rng.random_range(0..pairs.len());
            if !idx[..filled].contains(&k) {
                idx[filled] = k;
                filled += 1;
            }
        }
        let sample_p = [
            norm_pairs[idx[0]].0,
            norm_pairs[idx[1]].0,
            norm_pairs[idx[2]].0,
            norm_pairs[idx[3]].0,
        ];
        let sample_g = [
            norm_pairs[idx[0]].1,
            norm_pairs[idx[1]].1,
            norm_pairs[idx[2]].1,
            norm_pairs[idx[3]].1,
        ];
        if sample_degenerate(&sample_p) || sample_degenerate(&sample_g) {
            continue;
        }
        let sample: Vec<((f64, f64), (f64, f64))> =
            idx.iter().map(|&k| norm_pairs[k]).collect();
        let Some(hn) = dlt(&sample) else { continue };
        let Some(h) = denormalize(&hn) else { continue };
        let inliers = count_inliers(&h);
        let better = match &best {
            None => true,
            Some((bi, _)) => inliers.len() > bi.len(),
        };
        if better {
            best = Some((inliers, h));
        }
    }

    let Some((sample_inliers, sample_h)) = best else {
        return Ok(None);
    };

    let refit_pairs: Vec<((f64, f64), (f64, f64))> = sample_inliers
        .iter()
        .map(|&i| norm_pairs[i])
        .collect();
    if let Some(h) = dlt(&refit_pairs).and_then(|hn| denormalize(&hn)) {
        let inliers = count_inliers(&h);
        if inliers.len() >= 4 {
            return Ok(Some(RansacFit {
                homography: h,
                inliers,
            }));
        }
    }
    Ok(Some(RansacFit {
        homography: sample_h,
        inliers: sample_inliers,
    }))
}

/// Closed-form inverse of a similarity matrix produced by [`normalizer`].
fn invert_similarity(t: &[f64; 9]) -> [f64; 9] {
    let s = t[0];
    [
        1.0 / s,
        0.0,
        -t[2] / s,
        0.0,
        1.0 / s,
        -t[5] / s,
        0.0,
        0.0,
        1.0,
    ]
}

/// Matches two descriptor sets and verifies the pairing geometrically.
///
/// Fewer than 4 one-to-one matches, or a geometry no homography explains,
/// gives a score-0 result instead of an error. The result is fully
/// determined by the inputs and the config seed.
pub fn match_images<S: Scalar>(
    probe: &DescriptorSet<S>,
    gallery: &DescriptorSet<S>,
    cfg: &MatchConfig,
) -> Result<MatchResult> {
    cfg.validate()?;
    let matches = match_descriptors(probe, gallery, cfg.distance_threshold)?;
    if matches.len() < 4 {
        return Ok(MatchResult::unverified(matches));
    }
    let pairs: Vec<((f64, f64), (f64, f64))> = matches
        .iter()
        .map(|m| {
            (
                (probe[m.probe].x as f64, probe[m.probe].y as f64),
                (gallery[m.gallery].x as f64, gallery[m.gallery].y as f64),
            )
        })
        .collect();
    match ransac_homography(&pairs, cfg)? {
        Some(fit) => Ok(MatchResult {
            matches,
            homography: Some(fit.homography),
            score: fit.inliers.len(),
            inliers: fit.inliers,
        }),
        None => Ok(MatchResult::unverified(matches)),
    }
}

/// Accepts the probe when the score reaches the threshold.
pub fn decide(score: usize, threshold: usize) -> bool {
    score >= threshold
}
