//! Dataset evaluation: runs the pipeline over a manifest, scores every
//! protocol pair, and reports ROC/EER plus score histograms.
//!
//! Evaluation is deterministic for a given manifest, configuration, and
//! seed. Each comparison gets its own sub-seed derived from the pair's
//! manifest positions, so reports are byte-identical no matter how work
//! is split across threads. Images that fail a stage are kept in the
//! report as failures and score 0 against everything.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::descriptor::{read_descriptor_set, write_descriptor_set, DescriptorSet};
use crate::error::{Error, Result};
use crate::imaging::{binarize, gaussian_blur, skeletonize, ProbMap};
use crate::keypatch::{
    candidate_pixels, extract_patches, reduce_candidates, Keypoint, MIN_CANDIDATES,
};
use crate::matcher::{match_images, MatchConfig};
use crate::pipeline::Pipeline;
use crate::protocol::{
    cross_session_pairs, fvc2004_pairs, roc_eer, ManifestEntry, PairList, RocCurve,
};
use crate::scalar::Scalar;
use crate::synth::derive;

/// Pairing rule for a labeled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// All same-class pairs genuine; first sample of each class against
    /// first samples of later classes imposter.
    Fvc2004,
    /// Session 1 against session 2 within a class genuine; first session-1
    /// sample of each class against later classes' imposter.
    CrossSession,
}

impl Protocol {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fvc2004" => Ok(Protocol::Fvc2004),
            "cross" => Ok(Protocol::CrossSession),
            _ => Err(Error::InvalidParameter(format!(
                "protocol must be 'fvc2004' or 'cross', got '{name}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Fvc2004 => "fvc2004",
            Protocol::CrossSession => "cross",
        }
    }

    pub fn pairs(&self, entries: &[ManifestEntry]) -> Result<PairList> {
        match self {
            Protocol::Fvc2004 => fvc2004_pairs(entries),
            Protocol::CrossSession => cross_session_pairs(entries),
        }
    }
}

/// One image that dropped out of the evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ImageFailure {
    pub path: String,
    /// Stage that rejected the image.
    pub stage: String,
    /// Root cause, stage wrapping stripped.
    pub cause: String,
}

/// Full results of one evaluation run.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub classes: usize,
    pub images: usize,
    pub excluded_classes: Vec<u32>,
    pub genuine_pairs: usize,
    pub imposter_pairs: usize,
    pub failed_images: usize,
    pub failures: Vec<ImageFailure>,
    pub eer: f64,
    pub eer_threshold: f64,
    /// `(score, count)` rows in increasing score order.
    pub genuine_histogram: Vec<(usize, usize)>,
    pub imposter_histogram: Vec<(usize, usize)>,
    pub roc: RocCurve,
    pub config: PipelineConfig,
}

/// Per-pair seed; depends only on the root seed and the pair's manifest
/// positions, never on scheduling.
fn pair_seed(root: u64, a: usize, b: usize) -> u64 {
    derive(root, &[5, a as u64, b as u64])
}

fn score_one<S: Scalar>(
    sets: &[Option<DescriptorSet<S>>],
    matcher: &MatchConfig,
    root_seed: u64,
    a: usize,
    b: usize,
) -> Result<usize> {
    match (&sets[a], &sets[b]) {
        (Some(probe), Some(gallery)) => {
            let mut cfg = matcher.clone();
            cfg.seed = pair_seed(root_seed, a, b);
            Ok(match_images(probe, gallery, &cfg)?.score)
        }
        _ => Ok(0),
    }
}

fn score_side<S: Scalar>(
    sets: &[Option<DescriptorSet<S>>],
    pairs: &[(usize, usize)],
    matcher: &MatchConfig,
    root_seed: u64,
) -> Result<Vec<usize>> {
    pairs
        .par_iter()
        .map(|&(a, b)| score_one(sets, matcher, root_seed, a, b))
        .collect()
}

fn histogram(scores: &[usize]) -> Vec<(usize, usize)> {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in scores {
        *map.entry(s).or_default() += 1;
    }
    map.into_iter().collect()
}

fn as_f64(scores: &[usize]) -> Vec<f64> {
    scores.iter().map(|&s| s as f64).collect()
}

/// Computes descriptors for one manifest entry, going through the cache
/// when one is configured. Cache keys cover the image bytes and every
/// setting that shapes descriptors, so stale entries can never match.
fn descriptors_cached<S: Scalar>(
    pipe: &mut Pipeline<S>,
    entry: &ManifestEntry,
    cache_dir: Option<&Path>,
    fingerprint: &str,
) -> Result<DescriptorSet<S>> {
    let path = Path::new(&entry.path);
    let Some(dir) = cache_dir else {
        return pipe.descriptors_for(path);
    };
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => return Err(Error::stage("read", path, Error::io(path, e))),
    };
    let mut h = Sha256::new();
    h.update(&bytes);
    h.update(b"|");
    h.update(fingerprint.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let cache_path = dir.join(format!("{}.desc", crate::config::hex_of(&digest)));
    if cache_path.is_file() {
        if let Ok(set) = read_descriptor_set::<S>(&cache_path) {
            return Ok(set);
        }
    }
    let set = pipe.descriptors_for(path)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_descriptor_set(&cache_path, &set)?;
    Ok(set)
}

fn compute_all_descriptors<S: Scalar>(
    entries: &[ManifestEntry],
    template: &Pipeline<S>,
    cache_dir: Option<&Path>,
) -> (Vec<Option<DescriptorSet<S>>>, Vec<ImageFailure>) {
    let fingerprint = template.config().stage_fingerprint();
    let results: Vec<std::result::Result<DescriptorSet<S>, Error>> = entries
        .par_iter()
        .map_init(
            || template.clone(),
            |pipe, entry| descriptors_cached(pipe, entry, cache_dir, &fingerprint),
        )
        .collect();

    let mut sets = Vec::with_capacity(entries.len());
    let mut failures = Vec::new();
    for (entry, res) in entries.iter().zip(results) {
        match res {
            Ok(set) => sets.push(Some(set)),
            Err(e) => {
                let stage = match &e {
                    Error::Stage { stage, .. } => stage.clone(),
                    _ => "read".to_string(),
                };
                failures.push(ImageFailure {
                    path: entry.path.clone(),
                    stage,
                    cause: e.root_cause().to_string(),
                });
                sets.push(None);
            }
        }
    }
    failures.sort_by(|a, b| a.path.cmp(&b.path));
    (sets, failures)
}

fn run_in_pool<T: Send>(threads: usize, job: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return job();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(job)
}

/// Evaluates a manifest under a protocol and returns the full report.
pub fn evaluate<S: Scalar>(
    entries: &[ManifestEntry],
    protocol: Protocol,
    cfg: &PipelineConfig,
    cache_dir: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let pairs = protocol.pairs(entries)?;
    let template: Pipeline<S> = Pipeline::new(cfg.clone())?;
    let cache_dir = cache_dir.map(Path::to_path_buf);

    run_in_pool(cfg.threads, move || {
        let (sets, failures) = compute_all_descriptors(entries, &template, cache_dir.as_deref());
        let genuine = score_side(&sets, &pairs.genuine, &cfg.matcher, cfg.seed)?;
        let imposter = score_side(&sets, &pairs.imposter, &cfg.matcher, cfg.seed)?;
        let roc = roc_eer(&as_f64(&genuine), &as_f64(&imposter))?;

        let classes = entries
            .iter()
            .map(|e| e.class_id)
            .collect::<std::collections::BTreeSet<_>>()
            .len();

        Ok(EvalReport {
            protocol: protocol.name().to_string(),
            classes,
            images: entries.len(),
            excluded_classes: pairs.excluded_classes.clone(),
            genuine_pairs: pairs.genuine.len(),
            imposter_pairs: pairs.imposter.len(),
            failed_images: failures.len(),
            failures,
            eer: roc.eer,
            eer_threshold: roc.eer_threshold,
            genuine_histogram: histogram(&genuine),
            imposter_histogram: histogram(&imposter),
            roc: roc.clone(),
            config: cfg.clone(),
        })
    })
}

/// Serializes a report as pretty JSON with a trailing newline.
pub fn report_json(report: &EvalReport) -> Result<String> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, report_json(report)?).map_err(|e| Error::io(path, e))
}

/// Writes `threshold,far,frr` rows for plotting.
pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut buf = String::from("threshold,far,frr\n");
    for i in 0..curve.thresholds.len() {
        buf.push_str(&format!(
            "{},{},{}\n",
            curve.thresholds[i], curve.far[i], curve.frr[i]
        ));
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Detector parameter swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Reduction radius `c`, swept over 1..=12 at fixed patch scale.
    SuppressionRadius,
    /// Patch scale `ks`, swept over 5..=32 at fixed radius.
    PatchScale,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "c" => Ok(SweepAxis::SuppressionRadius),
            "ks" => Ok(SweepAxis::PatchScale),
            _ => Err(Error::InvalidParameter(format!(
                "sweep axis must be 'c' or 'ks', got '{name}'"
            ))),
        }
    }

    pub fn values(&self) -> Vec<u32> {
        match self {
            SweepAxis::SuppressionRadius => (1..=12).collect(),
            SweepAxis::PatchScale => (5..=32).collect(),
        }
    }
}

/// One sweep measurement.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: u32,
    pub eer: f64,
    /// Mean keypoint count over images that passed detection.
    pub mean_keypoints: f64,
    /// Mean wall time per image for this value, descriptor and matching
    /// stages included.
    pub mean_runtime_ms: f64,
}

struct SweepImage<S: Scalar> {
    vein: ProbMap<S>,
    candidates: Vec<(u32, u32)>,
    /// Kept indices at the configured radius, for the patch-scale axis.
    kept_fixed: Vec<usize>,
}

fn prepare_sweep_image<S: Scalar>(
    pipe: &mut Pipeline<S>,
    entry: &ManifestEntry,
) -> Result<SweepImage<S>> {
    let path = Path::new(&entry.path);
    let cfg = pipe.config().detect.clone();
    let vein = pipe.vein_map_for(path)?;
    let blurred = gaussian_blur(&vein, cfg.blur_sigma).map_err(|e| Error::stage("detect", path, e))?;
    let binary = binarize(&blurred, cfg.candidate_threshold as f64 / 255.0)
        .map_err(|e| Error::stage("detect", path, e))?;
    let skeleton = skeletonize(&binary);
    let candidates = candidate_pixels(&blurred, &skeleton, cfg.candidate_threshold)
        .map_err(|e| Error::stage("detect", path, e))?;
    if candidates.len() < MIN_CANDIDATES {
        return Err(Error::stage(
            "detect",
            path,
            Error::InsufficientMinutiae {
                found: candidates.len(),
                required: MIN_CANDIDATES,
            },
        ));
    }
    let kept_fixed = reduce_candidates(
        &candidates,
        vein.width(),
        vein.height(),
        cfg.suppression_radius,
    );
    Ok(SweepImage {
        vein,
        candidates,
        kept_fixed,
    })
}

fn sweep_keypoints<S: Scalar>(img: &SweepImage<S>, axis: SweepAxis, value: u32, cfg: &PipelineConfig) -> Vec<Keypoint> {
    match axis {
        SweepAxis::SuppressionRadius => {
            let kept = reduce_candidates(
                &img.candidates,
                img.vein.width(),
                img.vein.height(),
                value as usize,
            );
            kept.iter()
                .map(|&i| {
                    let (x, y) = img.candidates[i];
                    Keypoint::new(x, y, cfg.detect.patch_scale as f64)
                })
                .collect()
        }
        SweepAxis::PatchScale => img
            .kept_fixed
            .iter()
            .map(|&i| {
                let (x, y) = img.candidates[i];
                Keypoint::new(x, y, value as f64)
            })
            .collect(),
    }
}

/// Measures recognition accuracy while sweeping one detector parameter.
///
/// ROI, vein map, and skeleton candidates are computed once per image;
/// only reduction, patch extraction, description, and matching rerun per
/// value.
pub fn sweep<S: Scalar>(
    entries: &[ManifestEntry],
    axis: SweepAxis,
    protocol: Protocol,
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let pairs = protocol.pairs(entries)?;
    let template: Pipeline<S> = Pipeline::new(cfg.clone())?;

    run_in_pool(cfg.threads, move || {
        let prepared: Vec<Option<SweepImage<S>>> = entries
            .par_iter()
            .map_init(
                || template.clone(),
                |pipe, entry| prepare_sweep_image(pipe, entry).ok(),
            )
            .collect();

        let mut rows = Vec::new();
        for value in axis.values() {
            let start = Instant::now();
            let sets: Vec<Option<DescriptorSet<S>>> = prepared
                .par_iter()
                .zip(entries.par_iter())
                .map_init(
                    || template.clone(),
                    |pipe, (img, entry)| {
                        let img = img.as_ref()?;
                        let kps = sweep_keypoints(img, axis, value, cfg);
                        let patches = extract_patches(&img.vein, &kps).ok()?;
                        let path = Path::new(&entry.path);
                        let (_, set) = pipe.describe_patches(&kps, &patches, path).ok()?;
                        Some(set)
                    },
                )
                .collect();

            let mut kp_counts = Vec::new();
            for (img, _) in prepared.iter().zip(entries).filter(|(i, _)| i.is_some()) {
                let img = img.as_ref().expect("filtered");
                kp_counts.push(sweep_keypoints(img, axis, value, cfg).len());
            }
            let mean_keypoints = if kp_counts.is_empty() {
                0.0
            } else {
                kp_counts.iter().sum::<usize>() as f64 / kp_counts.len() as f64
            };

            let genuine = score_side(&sets, &pairs.genuine, &cfg.matcher, cfg.seed)?;
            let imposter = score_side(&sets, &pairs.imposter, &cfg.matcher, cfg.seed)?;
            let roc = roc_eer(&as_f64(&genuine), &as_f64(&imposter))?;
            let mean_runtime_ms =
                start.elapsed().as_secs_f64() * 1000.0 / entries.len().max(1) as f64;

            rows.push(SweepRow {
                value,
                eer: roc.eer,
                mean_keypoints,
                mean_runtime_ms,
            });
        }
        Ok(rows)
    })
}

/// Writes `value,eer,mean_keypoints,mean_runtime_ms` rows.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut buf = String::from("value,eer,mean_keypoints,mean_runtime_ms\n");
    for r in rows {
        buf.push_str(&format!(
            "{},{},{},{}\n",
            r.value, r.eer, r.mean_keypoints, r.mean_runtime_ms
        ));
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Resolves manifest entries against a base directory, leaving absolute
/// paths alone. `read_manifest` already resolves; this helps callers that
/// build entries programmatically.
pub fn resolve_entries(entries: &[ManifestEntry], base: &Path) -> Vec<ManifestEntry> {
    entries
        .iter()
        .map(|e| {
            let p = Path::new(&e.path);
            let resolved: PathBuf = if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            };
            ManifestEntry {
                path: resolved.to_string_lossy().into_owned(),
                ..e.clone()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};
    use tempfile::tempdir;

    fn small_dataset(dir: &Path, classes: u32, samples: u32, sessions: u32) -> Vec<ManifestEntry> {
        let cfg = SynthConfig::roi_default(classes, samples, sessions, 41);
        let entries = generate_dataset(&cfg, dir, false).unwrap();
        resolve_entries(&entries, dir)
    }

    fn eval_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.roi_skip = true;
        cfg
    }

    #[test]
    fn evaluate_produces_consistent_counts_and_eer() {
        let dir = tempdir().unwrap();
        let entries = small_dataset(dir.path(), 4, 2, 1);
        let report = evaluate::<f32>(&entries, Protocol::Fvc2004, &eval_config(), None).unwrap();
        assert_eq!(report.images, 8);
        assert_eq!(report.classes, 4);
        assert_eq!(report.genuine_pairs, 4);
        assert_eq!(report.imposter_pairs, 6);
        assert!(report.eer >= 0.0 && report.eer <= 1.0);
        assert_eq!(report.failed_images, 0);
        let gh: usize = report.genuine_histogram.iter().map(|(_, c)| c).sum();
        let ih: usize = report.imposter_histogram.iter().map(|(_, c)| c).sum();
        assert_eq!(gh, 4);
        assert_eq!(ih, 6);
    }

    #[test]
    fn reports_are_byte_identical_across_thread_counts() {
        let dir = tempdir().unwrap();
        let entries = small_dataset(dir.path(), 3, 2, 1);
        let mut cfg1 = eval_config();
        cfg1.threads = 1;
        let mut cfg3 = eval_config();
        cfg3.threads = 3;
        let r1 = evaluate::<f32>(&entries, Protocol::Fvc2004, &cfg1, None).unwrap();
        let r3 = evaluate::<f32>(&entries, Protocol::Fvc2004, &cfg3, None).unwrap();
        assert_eq!(report_json(&r1).unwrap(), report_json(&r3).unwrap());
    }

    #[test]
    fn cache_warm_run_matches_cold_run() {
        let dir = tempdir().unwrap();
        let entries = small_dataset(dir.path(), 3, 2, 1);
        let cache = tempdir().unwrap();
        let cfg = eval_config();
        let cold = evaluate::<f32>(&entries, Protocol::Fvc2004, &cfg, Some(cache.path())).unwrap();
        let n_cached = std::fs::read_dir(cache.path()).unwrap().count();
        assert_eq!(n_cached, entries.len());
        let warm = evaluate::<f32>(&entries, Protocol::Fvc2004, &cfg, Some(cache.path())).unwrap();
        assert_eq!(report_json(&cold).unwrap(), report_json(&warm).unwrap());
    }

    #[test]
    fn missing_images_become_failures_not_errors() {
        let dir = tempdir().unwrap();
        let mut entries = small_dataset(dir.path(), 3, 2, 1);
        entries[0].path = dir.path().join("gone.pgm").to_string_lossy().into_owned();
        let report = evaluate::<f32>(&entries, Protocol::Fvc2004, &eval_config(), None).unwrap();
        assert_eq!(report.failed_images, 1);
        assert_eq!(report.failures[0].stage, "read");
        assert!(report.failures[0].path.ends_with("gone.pgm"));
    }

    #[test]
    fn cross_session_protocol_runs() {
        let dir = tempdir().unwrap();
        let entries = small_dataset(dir.path(), 3, 4, 2);
        let report =
            evaluate::<f32>(&entries, Protocol::CrossSession, &eval_config(), None).unwrap();
        assert_eq!(report.protocol, "cross");
        assert_eq!(report.genuine_pairs, 3 * 4);
        assert_eq!(report.imposter_pairs, 3);
    }

    #[test]
    fn sweep_covers_every_value_and_keypoints_shrink_with_radius() {
        let dir = tempdir().unwrap();
        let entries = small_dataset(dir.path(), 2, 2, 1);
        let rows = sweep::<f32>(&entries, SweepAxis::SuppressionRadius, Protocol::Fvc2004, &eval_config())
            .unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[0].value, 1);
        assert_eq!(rows[11].value, 12);
        for w in rows.windows(2) {
            assert!(
                w[1].mean_keypoints <= w[0].mean_keypoints + 1e-9,
                "keypoints grew from radius {} to {}",
                w[0].value,
                w[1].value
            );
        }
    }

    #[test]
    fn sweep_patch_scale_has_28_rows() {
        let dir = tempdir().unwrap();
        let entries = small_dataset(dir.path(), 2, 2, 1);
        let rows =
            sweep::<f32>(&entries, SweepAxis::PatchScale, Protocol::Fvc2004, &eval_config()).unwrap();
        assert_eq!(rows.len(), 28);
        assert_eq!(rows[0].value, 5);
        assert_eq!(rows[27].value, 32);
        let dir2 = tempdir().unwrap();
        write_sweep_csv(&dir2.path().join("sweep.csv"), &rows).unwrap();
        let text = std::fs::read_to_string(dir2.path().join("sweep.csv")).unwrap();
        assert!(text.starts_with("value,eer,mean_keypoints,mean_runtime_ms\n"));
        assert_eq!(text.lines().count(), 29);
    }

    #[test]
    fn axis_and_protocol_parse() {
        assert_eq!(SweepAxis::parse("c").unwrap(), SweepAxis::SuppressionRadius);
        assert_eq!(SweepAxis::parse("ks").unwrap(), SweepAxis::PatchScale);
        assert!(SweepAxis::parse("q").is_err());
        assert_eq!(Protocol::parse("fvc2004").unwrap(), Protocol::Fvc2004);
        assert_eq!(Protocol::parse("cross").unwrap(), Protocol::CrossSession);
        assert!(Protocol::parse("x").is_err());
    }

    #[test]
    fn roc_csv_has_header_and_rows() {
        let curve = roc_eer(&[3.0, 5.0], &[0.0, 1.0]).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        write_roc_csv(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("threshold,far,frr"));
        assert_eq!(text.lines().count(), curve.thresholds.len() + 1);
    }
}
