//! Cross-stage behavior on synthetic data: extractor agreement, cache
//! stability, stage error attribution, and score separation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use veinpatch_core::config::{ExtractorKind, PipelineConfig};
use veinpatch_core::error::Error;
use veinpatch_core::eval::{evaluate, Protocol};
use veinpatch_core::imaging::{read_pgm, write_pgm, GrayImage, ProbMap};
use veinpatch_core::matcher::match_images;
use veinpatch_core::pipeline::Pipeline;
use veinpatch_core::protocol::read_manifest;
use veinpatch_core::synth::{generate_dataset, SynthConfig};
use veinpatch_core::unet::{TrainConfig, UNet, UNetSpec};

fn label_path_for(img: &Path) -> PathBuf {
    let name = img.file_name().unwrap().to_string_lossy().to_string();
    img.with_file_name(name.replace("img_", "lbl_"))
}

fn load_pairs(manifest: &Path) -> Vec<(ProbMap<f32>, ProbMap<f32>)> {
    read_manifest(manifest)
        .unwrap()
        .iter()
        .map(|e| {
            let img = read_pgm(Path::new(&e.path)).unwrap();
            let lbl = read_pgm(&label_path_for(Path::new(&e.path))).unwrap();
            (img.to_prob(), lbl.to_prob())
        })
        .collect()
}

#[test]
fn unet_keypoints_approximate_the_traditional_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let mut scfg = SynthConfig::roi_default(2, 2, 1, 11);
    scfg.width = 96;
    scfg.height = 48;
    generate_dataset(&scfg, dir.path(), true).unwrap();

    let manifest = dir.path().join("manifest.csv");
    let pairs = load_pairs(&manifest);
    assert_eq!(pairs.len(), 4);

    let spec = UNetSpec {
        input_width: 96,
        input_height: 48,
        ..UNetSpec::default()
    };
    let mut net = UNet::<f32>::build(spec, 3).unwrap();
    let tcfg = TrainConfig {
        epochs: 60,
        batch_size: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let losses = net.train(&pairs, &tcfg).unwrap();
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "training did not reduce the loss: {:?}",
        losses
    );
    let model_path = dir.path().join("approx.vpw");
    net.save(&model_path).unwrap();

    let mut cfg = PipelineConfig::default();
    cfg.roi_skip = true;
    let mut traditional = Pipeline::<f32>::new(cfg.clone()).unwrap();
    let mut ucfg = cfg;
    ucfg.extractor = ExtractorKind::Unet;
    ucfg.extractor_model = Some(model_path);
    let mut learned = Pipeline::<f32>::new(ucfg).unwrap();

    let probe = read_manifest(&manifest).unwrap()[0].path.clone();
    let t_out = traditional.process_image(Path::new(&probe)).unwrap();
    let u_out = learned.process_image(Path::new(&probe)).unwrap();
    assert!(!t_out.keypoints.is_empty());
    assert!(!u_out.keypoints.is_empty());

    let close = u_out
        .keypoints
        .iter()
        .filter(|u| {
            t_out.keypoints.iter().any(|t| {
                let dx = u.x as f64 - t.x as f64;
                let dy = u.y as f64 - t.y as f64;
                dx * dx + dy * dy <= 9.0
            })
        })
        .count();
    let frac = close as f64 / u_out.keypoints.len() as f64;
    assert!(
        frac >= 0.6,
        "only {:.0}% of learned-extractor keypoints lie within 3 px of a \
         traditional keypoint ({} of {})",
        frac * 100.0,
        close,
        u_out.keypoints.len()
    );
}

fn cache_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "desc") {
            out.insert(
                p.file_name().unwrap().to_string_lossy().to_string(),
                fs::read(&p).unwrap(),
            );
        }
    }
    out
}

#[test]
fn repeated_runs_produce_identical_descriptor_cache_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let scfg = SynthConfig::roi_default(2, 2, 1, 5);
    generate_dataset(&scfg, dir.path(), false).unwrap();
    let entries = read_manifest(&dir.path().join("manifest.csv")).unwrap();

    let mut cfg = PipelineConfig::default();
    cfg.roi_skip = true;

    let cache_a = dir.path().join("cache_a");
    let cache_b = dir.path().join("cache_b");
    fs::create_dir_all(&cache_a).unwrap();
    fs::create_dir_all(&cache_b).unwrap();
    evaluate::<f32>(&entries, Protocol::Fvc2004, &cfg, Some(&cache_a)).unwrap();
    evaluate::<f32>(&entries, Protocol::Fvc2004, &cfg, Some(&cache_b)).unwrap();

    let a = cache_bytes(&cache_a);
    let b = cache_bytes(&cache_b);
    assert_eq!(a.len(), entries.len());
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "cache file names differ between runs"
    );
    for (name, bytes) in &a {
        assert_eq!(bytes, &b[name], "cache file {} differs between runs", name);
    }
}

#[test]
fn blank_image_fails_in_the_roi_stage() {
    let dir = tempfile::tempdir().unwrap();
    let blank = dir.path().join("blank.pgm");
    write_pgm(&blank, &GrayImage::new(320, 240).unwrap()).unwrap();

    let mut pipe = Pipeline::<f32>::new(PipelineConfig::default()).unwrap();
    match pipe.process_image(&blank) {
        Err(Error::Stage { stage, path, source }) => {
            assert_eq!(stage, "roi");
            assert_eq!(path, blank);
            assert!(matches!(*source, Error::InsufficientEdgeEvidence(_)));
        }
        other => panic!("expected a roi stage error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn genuine_pairs_outscore_imposters_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let scfg = SynthConfig::roi_default(2, 2, 1, 21);
    generate_dataset(&scfg, dir.path(), false).unwrap();
    let entries = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(entries.len(), 4);

    let mut cfg = PipelineConfig::default();
    cfg.roi_skip = true;
    let mut pipe = Pipeline::<f32>::new(cfg.clone()).unwrap();
    let sets: Vec<_> = entries
        .iter()
        .map(|e| pipe.descriptors_for(Path::new(&e.path)).unwrap())
        .collect();

    let mut mcfg = cfg.matcher.clone();
    mcfg.seed = cfg.seed;
    let score =
        |a: usize, b: usize| match_images(&sets[a], &sets[b], &mcfg).unwrap().score;

    // Manifest order is class 0 samples 0/1 then class 1 samples 0/1.
    let genuine = [score(0, 1), score(2, 3)];
    let imposter = [score(0, 2), score(0, 3), score(1, 2), score(1, 3)];
    let worst_genuine = *genuine.iter().min().unwrap();
    let best_imposter = *imposter.iter().max().unwrap();
    assert!(
        best_imposter <= 5,
        "imposter inlier score {} is not near zero",
        best_imposter
    );
    assert!(
        worst_genuine > best_imposter,
        "genuine scores {:?} do not dominate imposter scores {:?}",
        genuine,
        imposter
    );
}

#[test]
fn full_frame_images_flow_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let scfg = SynthConfig::full_default(1, 2, 1, 9);
    generate_dataset(&scfg, dir.path(), false).unwrap();
    let entries = read_manifest(&dir.path().join("manifest.csv")).unwrap();

    let cfg = PipelineConfig::default();
    let mut pipe = Pipeline::<f32>::new(cfg.clone()).unwrap();
    for e in &entries {
        let out = pipe.process_image(Path::new(&e.path)).unwrap();
        let rep = out.roi_report.expect("roi stage must run on full frames");
        assert!(rep.applied_rotation_deg.abs() <= cfg.roi.max_rotation_deg);
        assert_eq!(out.roi.width(), cfg.roi.out_width);
        assert_eq!(out.roi.height(), cfg.roi.out_height);
        assert!(!out.keypoints.is_empty());
        assert_eq!(out.keypoints.len(), out.descriptors.len());
    }
}
