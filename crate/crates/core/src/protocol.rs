//! Verification protocols: dataset manifests, genuine/imposter pair
//! enumeration, and ROC/EER computation over match scores.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One dataset sample: an image path plus its identity coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path; relative paths are resolved against the manifest file's
    /// directory by `read_manifest`.
    pub path: String,
    pub class_id: u32,
    /// Capture session, 1 or 2.
    pub session: u32,
    /// Position of the sample within its class and session.
    pub sample_index: u32,
}

const MANIFEST_COLUMNS: &str = "path,class_id,session,sample_index";

/// Writes entries as CSV with a commented column header.
///
/// Paths must not contain commas or newlines; rows are written in the
/// given order so repeated runs produce byte-identical files.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = String::new();
    buf.push_str("# ");
    buf.push_str(MANIFEST_COLUMNS);
    buf.push('\n');
    for e in entries {
        if e.path.contains(',') || e.path.contains('\n') {
            return Err(Error::Manifest(format!(
                "path {:?} contains a comma or newline",
                e.path
            )));
        }
        if e.session != 1 && e.session != 2 {
            return Err(Error::Manifest(format!(
                "session must be 1 or 2, got {} for {:?}",
                e.session, e.path
            )));
        }
        buf.push_str(&format!(
            "{},{},{},{}\n",
            e.path, e.class_id, e.session, e.sample_index
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest CSV, skipping blank lines and `#` comments.
///
/// Relative sample paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest(format!(
                "line {}: expected 4 comma-separated fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let parse_u32 = |s: &str, what: &str| -> Result<u32> {
            s.trim().parse::<u32>().map_err(|_| {
                Error::Manifest(format!("line {}: bad {}: {:?}", ln + 1, what, s))
            })
        };
        let rel = fields[0].trim();
        if rel.is_empty() {
            return Err(Error::Manifest(format!("line {}: empty path", ln + 1)));
        }
        let session = parse_u32(fields[2], "session")?;
        if session != 1 && session != 2 {
            return Err(Error::Manifest(format!(
                "line {}: session must be 1 or 2, got {}",
                ln + 1,
                session
            )));
        }
        let resolved: PathBuf = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            base.join(rel)
        };
        out.push(ManifestEntry {
            path: resolved.to_string_lossy().into_owned(),
            class_id: parse_u32(fields[1], "class_id")?,
            session,
            sample_index: parse_u32(fields[3], "sample_index")?,
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest("manifest has no entries".to_string()));
    }
    Ok(out)
}

/// Genuine and imposter comparisons as index pairs into a manifest.
#[derive(Debug, Clone, Default)]
pub struct PairList {
    /// Same-class comparisons, each `(i, j)` with `i < j`.
    pub genuine: Vec<(usize, usize)>,
    /// Cross-class comparisons, each `(i, j)` with `i < j`.
    pub imposter: Vec<(usize, usize)>,
    /// Classes dropped for missing a required session.
    pub excluded_classes: Vec<u32>,
}

fn by_class(entries: &[ManifestEntry]) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        map.entry(e.class_id).or_default().push(i);
    }
    map
}

/// The class representative: lowest session, then lowest sample index,
/// then lowest manifest position.
fn first_sample(entries: &[ManifestEntry], idxs: &[usize]) -> usize {
    *idxs
        .iter()
        .min_by_key(|&&i| (entries[i].session, entries[i].sample_index, i))
        .expect("class index lists are never empty")
}

/// All-session protocol: every unordered same-class pair is genuine; the
/// first sample of each class against the first sample of every other
/// class is an imposter pair. With z equal-size classes of m samples this
/// yields z*C(m,2) genuine and C(z,2) imposter pairs.
pub fn fvc2004_pairs(entries: &[ManifestEntry]) -> Result<PairList> {
    let classes = by_class(entries);
    if classes.len() < 2 {
        return Err(Error::Manifest(format!(
            "protocol needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let mut genuine = Vec::new();
    for (cid, idxs) in &classes {
        if idxs.len() < 2 {
            return Err(Error::Manifest(format!(
                "class {} has {} sample(s), needs at least 2",
                cid,
                idxs.len()
            )));
        }
        for a in 0..idxs.len() {
            for b in a + 1..idxs.len() {
                let (i, j) = (idxs[a], idxs[b]);
                genuine.push((i.min(j), i.max(j)));
            }
        }
    }
    let firsts: Vec<usize> = classes
        .values()
        .map(|idxs| first_sample(entries, idxs))
        .collect();
    let mut imposter = Vec::new();
    for a in 0..firsts.len() {
        for b in a + 1..firsts.len() {
            let (i, j) = (firsts[a], firsts[b]);
            imposter.push((i.min(j), i.max(j)));
        }
    }
    Ok(PairList {
        genuine,
        imposter,
        excluded_classes: Vec::new(),
    })
}

/// Cross-session protocol: for each class, every session-1 sample against
/// every session-2 sample is genuine; the first session-1 sample of each
/// class against the first session-2 sample of every other class is an
/// imposter pair, deduplicated to unordered class pairs. Classes missing
/// either session are excluded and reported.
pub fn cross_session_pairs(entries: &[ManifestEntry]) -> Result<PairList> {
    let classes = by_class(entries);
    let mut genuine = Vec::new();
    let mut reps = Vec::new();
    let mut excluded = Vec::new();
    for (cid, idxs) in &classes {
        let s1: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| entries[i].session == 1)
            .collect();
        let s2: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| entries[i].session == 2)
            .collect();
        if s1.is_empty() || s2.is_empty() {
            excluded.push(*cid);
            continue;
        }
        for &i in &s1 {
            for &j in &s2 {
                genuine.push((i.min(j), i.max(j)));
            }
        }
        reps.push((first_sample(entries, &s1), first_sample(entries, &s2)));
    }
    if reps.len() < 2 {
        return Err(Error::Manifest(format!(
            "cross-session protocol needs at least 2 dual-session classes, got {}",
            reps.len()
        )));
    }
    let mut imposter = Vec::new();
    for a in 0..reps.len() {
        for b in a + 1..reps.len() {
            let (i, j) = (reps[a].0, reps[b].1);
            imposter.push((i.min(j), i.max(j)));
        }
    }
    Ok(PairList {
        genuine,
        imposter,
        excluded_classes: excluded,
    })
}

/// One operating point of the score-threshold sweep plus the interpolated
/// equal error rate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RocCurve {
    /// Thresholds in increasing order; accept means score >= threshold.
    pub thresholds: Vec<f64>,
    /// False accept rate per threshold: fraction of imposter scores >= t.
    pub far: Vec<f64>,
    /// False reject rate per threshold: fraction of genuine scores < t.
    pub frr: Vec<f64>,
    /// Rate where FAR and FRR cross, linearly interpolated.
    pub eer: f64,
    /// Threshold at the crossing point.
    pub eer_threshold: f64,
}

/// Sweeps every distinct score as an accept threshold (plus one sentinel
/// above the maximum) and interpolates the FAR = FRR crossing.
///
/// Higher scores mean more similar. FAR is monotone nonincreasing in the
/// threshold and FRR monotone nondecreasing, so exactly one sign change of
/// FAR - FRR exists and the crossing is interpolated linearly on the
/// segment between the adjacent thresholds.
pub fn roc_eer(genuine: &[f64], imposter: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(Error::InvalidInput(
            "roc needs at least one genuine and one imposter score".to_string(),
        ));
    }
    if genuine
        .iter()
        .chain(imposter.iter())
        .any(|s| !s.is_finite())
    {
        return Err(Error::InvalidInput("scores must be finite".to_string()));
    }

    let mut thresholds: Vec<f64> = genuine.iter().chain(imposter.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let sentinel = thresholds.last().unwrap() + 1.0;
    thresholds.push(sentinel);

    let ng = genuine.len() as f64;
    let ni = imposter.len() as f64;
    let far: Vec<f64> = thresholds
        .iter()
        .map(|&t| imposter.iter().filter(|&&s| s >= t).count() as f64 / ni)
        .collect();
    let frr: Vec<f64> = thresholds
        .iter()
        .map(|&t| genuine.iter().filter(|&&s| s < t).count() as f64 / ng)
        .collect();

    // FAR - FRR starts at 1 (threshold at the global minimum) and ends at
    // -1 (sentinel), so a sign change is guaranteed.
    let mut eer = f64::NAN;
    let mut eer_threshold = f64::NAN;
    for k in 0..thresholds.len() {
        let d = far[k] - frr[k];
        if d == 0.0 {
            eer = far[k];
            eer_threshold = thresholds[k];
            break;
        }
        if d < 0.0 {
            debug_assert!(k > 0, "first operating point cannot have FAR < FRR");
            let d_prev = far[k - 1] - frr[k - 1];
            let lambda = d_prev / (d_prev - d);
            eer = far[k - 1] + lambda * (far[k] - far[k - 1]);
            eer_threshold = thresholds[k - 1] + lambda * (thresholds[k] - thresholds[k - 1]);
            break;
        }
    }
    debug_assert!(eer.is_finite(), "sweep must locate a crossing");

    Ok(RocCurve {
        thresholds,
        far,
        frr,
        eer,
        eer_threshold,
    })
}
