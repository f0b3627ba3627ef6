//! `veinpatch`: command-line front end for the finger-vein recognition
//! pipeline. One subcommand per stage plus dataset tooling, evaluation,
//! and parameter sweeps.
//!
//! Every command exits 0 on success and prints `error: ...` on stderr
//! with a nonzero exit on failure. Settings come from built-in defaults,
//! then the config file (`--config` or `VEINPATCH_CONFIG`), then flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use veinpatch_core::config::{effective_config, PipelineConfig};
use veinpatch_core::descriptor::{
    generate_patch_corpus, load_patch_corpus, read_descriptor_set, write_descriptor_set,
    DescTrainConfig, PatchCorpusConfig, PatchDescriptor,
};
use veinpatch_core::error::{Error, Result};
use veinpatch_core::eval::{
    evaluate, sweep, write_report_json, write_roc_csv, write_sweep_csv, Protocol, SweepAxis,
};
use veinpatch_core::imaging::{read_pgm, write_pgm, ProbMap};
use veinpatch_core::keypatch::{detect_keypoints, extract_patches, read_keypoints, write_keypoints};
use veinpatch_core::matcher::match_images;
use veinpatch_core::pipeline::{dump_stages, Pipeline};
use veinpatch_core::protocol::{read_manifest, write_manifest, ManifestEntry};
use veinpatch_core::roi::extract_roi;
use veinpatch_core::synth::{generate_dataset, SynthConfig};
use veinpatch_core::unet::{TrainConfig, UNet, UNetSpec};
use veinpatch_core::veinlabel::make_soft_label;
use veinpatch_core::Real;

#[derive(Parser)]
#[command(
    name = "veinpatch",
    version,
    about = "Finger-vein recognition: ROI, vein maps, keypoints, descriptors, matching, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a class/session directory tree of PGM images into a manifest.
    Ingest(IngestArgs),
    /// Generate a synthetic finger-vein dataset with ground-truth labels.
    Synth(SynthArgs),
    /// Extract the aligned region of interest from a raw finger image.
    Roi(RoiArgs),
    /// Build soft vein labels for every ROI image under a directory.
    Labels(LabelsArgs),
    /// Train the segmentation network on (ROI, label) image pairs.
    TrainUnet(TrainUnetArgs),
    /// Run a trained segmentation model on one ROI image.
    InferUnet(InferUnetArgs),
    /// Detect skeleton keypoints on a vein probability map.
    Detect(DetectArgs),
    /// Compute descriptors for detected keypoints on a vein map.
    Describe(DescribeArgs),
    /// Train the patch descriptor on a labeled patch corpus.
    TrainDesc(TrainDescArgs),
    /// Match two descriptor files and print the verification score.
    Match(MatchArgs),
    /// Run a verification protocol over a manifest and write the report.
    Evaluate(EvaluateArgs),
    /// Sweep one detector parameter and write accuracy per value.
    Sweep(SweepArgs),
    /// Measure segmentation precision of a model against labels.
    EvalSeg(EvalSegArgs),
}

/// Settings shared by pipeline-running commands. Each flag overrides the
/// matching config-file key.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file; overrides the VEINPATCH_CONFIG default.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Root seed for every stochastic choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for batch work; 0 uses the runtime default.
    #[arg(long)]
    threads: Option<usize>,
    /// Treat inputs as pre-aligned crops and skip ROI extraction.
    #[arg(long)]
    roi_skip: Option<bool>,
    /// Vein map source: traditional | unet.
    #[arg(long)]
    extractor: Option<String>,
    /// Segmentation model path for --extractor unet.
    #[arg(long)]
    extractor_model: Option<PathBuf>,
    /// Descriptor source: raw | model.
    #[arg(long)]
    descriptor: Option<String>,
    /// Descriptor model path for --descriptor model.
    #[arg(long)]
    descriptor_model: Option<PathBuf>,
    /// Keypoint reduction radius c.
    #[arg(long)]
    c: Option<usize>,
    /// Keypoint patch scale ks.
    #[arg(long)]
    ks: Option<u32>,
    /// Pre-detection blur sigma.
    #[arg(long)]
    sigma: Option<f64>,
    /// Candidate gray-level threshold (0..=254).
    #[arg(long)]
    threshold: Option<u8>,
    /// Descriptor distance threshold t_d.
    #[arg(long)]
    td: Option<f64>,
    /// Homography search iterations.
    #[arg(long)]
    ransac_iters: Option<u32>,
    /// Inlier reprojection tolerance in pixels.
    #[arg(long)]
    tol: Option<f64>,
    /// Curvature scale for soft labels and the traditional extractor.
    #[arg(long)]
    sigma_curv: Option<f64>,
    /// Post-curvature smoothing blur.
    #[arg(long)]
    sigma_smooth: Option<f64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        push("roi.skip", self.roi_skip.map(|v| v.to_string()));
        push("extractor.kind", self.extractor.clone());
        push(
            "extractor.model",
            self.extractor_model
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
        );
        push("descriptor.kind", self.descriptor.clone());
        push(
            "descriptor.model",
            self.descriptor_model
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
        );
        push("keypoint.c", self.c.map(|v| v.to_string()));
        push("keypoint.ks", self.ks.map(|v| v.to_string()));
        push("keypoint.sigma", self.sigma.map(|v| v.to_string()));
        push("keypoint.threshold", self.threshold.map(|v| v.to_string()));
        push("matcher.td", self.td.map(|v| v.to_string()));
        push(
            "matcher.iterations",
            self.ransac_iters.map(|v| v.to_string()),
        );
        push("matcher.tolerance", self.tol.map(|v| v.to_string()));
        push("labels.sigma_curv", self.sigma_curv.map(|v| v.to_string()));
        push(
            "labels.sigma_smooth",
            self.sigma_smooth.map(|v| v.to_string()),
        );
        kv
    }

    fn effective(&self) -> Result<PipelineConfig> {
        effective_config(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset root: class directories containing session directories of
    /// PGM files, for example cls_001/s1/img_00.pgm.
    #[arg(long)]
    root: PathBuf,
    /// Manifest CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Exclusion report CSV; defaults to <out>.exclusions.csv.
    #[arg(long)]
    exclusions: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images, labels, and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Number of classes (distinct fingers).
    #[arg(long)]
    classes: u32,
    /// Samples per class.
    #[arg(long)]
    samples: u32,
    /// Capture sessions, 1 or 2.
    #[arg(long, default_value_t = 1)]
    sessions: u32,
    /// Phantom style: full (raw capture) or roi (pre-aligned crop).
    #[arg(long, default_value = "full")]
    style: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip writing ground-truth label images.
    #[arg(long)]
    no_labels: bool,
    /// Minimum ridges per class.
    #[arg(long)]
    ridge_min: Option<u32>,
    /// Maximum ridges per class.
    #[arg(long)]
    ridge_max: Option<u32>,
    /// Per-sample translation jitter in pixels.
    #[arg(long)]
    jitter: Option<f64>,
    /// Per-pixel Gaussian noise level.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Frame width in pixels.
    #[arg(long)]
    width: Option<usize>,
    /// Frame height in pixels.
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args)]
struct RoiArgs {
    /// Raw finger image (PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Aligned ROI image to write (PGM).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON report of the recovered geometry.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct LabelsArgs {
    /// Directory tree of ROI images (PGM).
    #[arg(long)]
    data: PathBuf,
    /// Output directory; mirrors the input layout.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainUnetArgs {
    /// Directory tree of ROI images.
    #[arg(long)]
    data: PathBuf,
    /// Directory tree of label images; same layout as --data, label file
    /// names may swap an img_ prefix for lbl_.
    #[arg(long)]
    labels: PathBuf,
    /// Model file to write (VPW1 plus a .json sidecar).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cross-entropy weight in the loss.
    #[arg(long)]
    bce_weight: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Dice smoothing factor.
    #[arg(long)]
    smooth: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferUnetArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// ROI image (PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Vein probability map to write (PGM).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Vein probability map (PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Keypoint CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct DescribeArgs {
    /// Vein probability map (PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Keypoint CSV from detect.
    #[arg(long)]
    kps: PathBuf,
    /// Descriptor file to write.
    #[arg(long)]
    out: PathBuf,
    /// Trained descriptor model; mutually exclusive with --raw.
    #[arg(long, conflicts_with = "raw")]
    model: Option<PathBuf>,
    /// Use the training-free projection descriptor.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainDescArgs {
    /// Patch corpus directory: one subdirectory of 32x32 PGM patches per
    /// class. Mutually exclusive with --synth-classes.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Generate a synthetic corpus with this many classes instead.
    #[arg(long, conflicts_with = "corpus")]
    synth_classes: Option<u32>,
    /// Samples per synthetic class.
    #[arg(long, requires = "synth_classes")]
    synth_samples: Option<u32>,
    /// Model file to write (VPW1 plus a .json sidecar).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Hinge margin of the triplet term.
    #[arg(long)]
    margin: Option<f64>,
    /// Classes per training batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MatchArgs {
    /// Probe descriptor file.
    #[arg(long)]
    probe: PathBuf,
    /// Gallery descriptor file.
    #[arg(long)]
    gallery: PathBuf,
    /// Print full match detail as JSON after the score line.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Manifest CSV listing the dataset.
    #[arg(long)]
    manifest: PathBuf,
    /// Pairing protocol: fvc2004 | cross.
    #[arg(long)]
    protocol: String,
    /// Report JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional ROC CSV dump.
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Descriptor cache directory; reused across runs and sweeps.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Dump per-image stage artifacts (ROI, vein map, keypoints,
    /// descriptors) into this directory.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Manifest CSV listing the dataset.
    #[arg(long)]
    manifest: PathBuf,
    /// Parameter to sweep: c | ks.
    #[arg(long)]
    axis: String,
    /// Pairing protocol: fvc2004 | cross.
    #[arg(long, default_value = "fvc2004")]
    protocol: String,
    /// Sweep CSV to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalSegArgs {
    /// Trained segmentation model.
    #[arg(long)]
    model: PathBuf,
    /// Directory tree of ROI images.
    #[arg(long)]
    data: PathBuf,
    /// Directory tree of label images; layout as in train-unet.
    #[arg(long)]
    labels: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Roi(a) => cmd_roi(a),
        Command::Labels(a) => cmd_labels(a),
        Command::TrainUnet(a) => cmd_train_unet(a),
        Command::InferUnet(a) => cmd_infer_unet(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Describe(a) => cmd_describe(a),
        Command::TrainDesc(a) => cmd_train_desc(a),
        Command::Match(a) => cmd_match(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::EvalSeg(a) => cmd_eval_seg(a),
    }
}

/// All `.pgm` files under `dir`, as paths relative to `dir`, sorted.
fn walk_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    fn visit(base: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let here = base.join(rel);
        let mut names: Vec<_> = std::fs::read_dir(&here)
            .map_err(|e| Error::io(&here, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&here, e))?
            .into_iter()
            .map(|d| d.file_name())
            .collect();
        names.sort();
        for name in names {
            let sub = rel.join(&name);
            let full = base.join(&sub);
            if full.is_dir() {
                visit(base, &sub, out)?;
            } else if sub.extension().is_some_and(|e| e == "pgm") {
                out.push(sub);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    visit(dir, Path::new(""), &mut out)?;
    Ok(out)
}

/// Trailing decimal digits of a file or directory stem.
fn trailing_digits(name: &str) -> Option<u32> {
    let digits: String = name
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    if digits.is_empty() {
        None
    } else {
        digits.parse().ok()
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let root = &a.root;
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!(
            "ingest root {} is not a directory",
            root.display()
        )));
    }
    let rels = walk_pgms(root)?;
    let out_base = a.out.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut excluded: Vec<(String, String)> = Vec::new();
    for rel in &rels {
        let rel_str = rel.to_string_lossy().into_owned();
        let comps: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        if comps.len() != 3 {
            excluded.push((
                rel_str,
                "expected class_dir/session_dir/file.pgm layout".into(),
            ));
            continue;
        }
        let Some(class_id) = trailing_digits(&comps[0]) else {
            excluded.push((rel_str, format!("class directory '{}' has no id digits", comps[0])));
            continue;
        };
        let Some(session) = trailing_digits(&comps[1]) else {
            excluded.push((rel_str, format!("session directory '{}' has no digits", comps[1])));
            continue;
        };
        if session != 1 && session != 2 {
            excluded.push((rel_str, format!("session {session} is not 1 or 2")));
            continue;
        }
        let stem = rel.file_stem().unwrap_or_default().to_string_lossy();
        let Some(sample_index) = trailing_digits(&stem) else {
            excluded.push((rel_str, format!("file '{stem}' has no sample digits")));
            continue;
        };
        let full = root.join(rel);
        if let Err(e) = read_pgm(&full) {
            excluded.push((rel_str, e.root_cause().to_string()));
            continue;
        }
        // Manifest paths resolve from the manifest's own directory.
        let path = match full.strip_prefix(&out_base) {
            Ok(p) => p.to_path_buf(),
            Err(_) => full.clone(),
        };
        entries.push(ManifestEntry {
            path: path.to_string_lossy().into_owned(),
            class_id,
            session,
            sample_index,
        });
    }

    if entries.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no usable images under {}",
            root.display()
        )));
    }
    write_manifest(&a.out, &entries)?;

    let classes = entries
        .iter()
        .map(|e| e.class_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let sessions = entries
        .iter()
        .map(|e| e.session)
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    if !excluded.is_empty() {
        let report = a
            .exclusions
            .unwrap_or_else(|| a.out.with_extension("exclusions.csv"));
        let mut buf = String::from("# path,reason\n");
        for (p, r) in &excluded {
            buf.push_str(&format!("{},{}\n", p, r.replace(',', ";")));
        }
        std::fs::write(&report, buf).map_err(|e| Error::io(&report, e))?;
        println!("exclusion_report={}", report.display());
    }
    println!(
        "manifest={} classes={} sessions={} images={} excluded={}",
        a.out.display(),
        classes,
        sessions,
        entries.len(),
        excluded.len()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match a.style.as_str() {
        "full" => SynthConfig::full_default(a.classes, a.samples, a.sessions, a.seed),
        "roi" => SynthConfig::roi_default(a.classes, a.samples, a.sessions, a.seed),
        other => {
            return Err(Error::InvalidParameter(format!(
                "style must be 'full' or 'roi', got '{other}'"
            )))
        }
    };
    if let Some(v) = a.ridge_min {
        cfg.ridge_min = v;
    }
    if let Some(v) = a.ridge_max {
        cfg.ridge_max = v;
    }
    if let Some(v) = a.jitter {
        cfg.jitter_px = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    let entries = generate_dataset(&cfg, &a.out, !a.no_labels)?;
    println!(
        "manifest={} classes={} images={} labels={}",
        a.out.join("manifest.csv").display(),
        a.classes,
        entries.len(),
        if a.no_labels { "no" } else { "yes" }
    );
    Ok(())
}

fn cmd_roi(a: RoiArgs) -> Result<()> {
    let cfg = a.cfg.effective()?;
    let img = read_pgm(&a.input)?;
    let (roi, report) = extract_roi::<Real>(&img, &cfg.roi)
        .map_err(|e| Error::stage("roi", &a.input, e))?;
    write_pgm(&a.out, &roi.to_gray())?;
    if let Some(rp) = a.report {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("roi report: {e}")))?;
        std::fs::write(&rp, json + "\n").map_err(|e| Error::io(&rp, e))?;
    }
    println!(
        "roi={} rotation_deg={:.3} edge_points={},{}",
        a.out.display(),
        report.applied_rotation_deg,
        report.edge_points.0,
        report.edge_points.1
    );
    Ok(())
}

fn cmd_labels(a: LabelsArgs) -> Result<()> {
    let cfg = a.cfg.effective()?;
    let rels = walk_pgms(&a.data)?;
    if rels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no PGM images under {}",
            a.data.display()
        )));
    }
    let mut written = 0usize;
    for rel in &rels {
        let src = a.data.join(rel);
        let img = read_pgm(&src)?;
        let map: ProbMap<Real> = img.to_prob();
        let label = make_soft_label(&map, cfg.label_sigma_curv, cfg.label_sigma_smooth)
            .map_err(|e| Error::stage("labels", &src, e))?;
        let dst = a.out.join(rel);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_pgm(&dst, &label.to_gray())?;
        written += 1;
    }
    println!("labels={written} out={}", a.out.display());
    Ok(())
}

/// Pairs each ROI under `data` with its label under `labels`. The label
/// has the same relative path, except that an `img_` file-name prefix may
/// be replaced by `lbl_`.
fn load_pairs(data: &Path, labels: &Path) -> Result<Vec<(ProbMap<Real>, ProbMap<Real>)>> {
    let rels = walk_pgms(data)?;
    // A labels tree generated next to the images also contains the images
    // themselves when both flags point at the same root; keep img_ files.
    let rels: Vec<_> = rels
        .into_iter()
        .filter(|r| {
            !r.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .starts_with("lbl_")
        })
        .collect();
    if rels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no PGM images under {}",
            data.display()
        )));
    }
    let mut pairs = Vec::with_capacity(rels.len());
    for rel in &rels {
        let img_path = data.join(rel);
        let mut label_path = labels.join(rel);
        if !label_path.is_file() {
            let name = rel.file_name().unwrap_or_default().to_string_lossy();
            if let Some(stripped) = name.strip_prefix("img_") {
                label_path = labels.join(rel.with_file_name(format!("lbl_{stripped}")));
            }
        }
        if !label_path.is_file() {
            return Err(Error::InvalidInput(format!(
                "no label found for {}",
                img_path.display()
            )));
        }
        let roi: ProbMap<Real> = read_pgm(&img_path)?.to_prob();
        let lab: ProbMap<Real> = read_pgm(&label_path)?.to_prob();
        pairs.push((roi, lab));
    }
    Ok(pairs)
}

fn cmd_train_unet(a: TrainUnetArgs) -> Result<()> {
    let pairs = load_pairs(&a.data, &a.labels)?;
    let mut cfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.bce_weight {
        cfg.bce_weight = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.smooth {
        cfg.smooth = v;
    }
    let mut model: UNet<Real> = UNet::build(UNetSpec::default(), a.seed)?;
    let losses = model.train(&pairs, &cfg)?;
    for (i, loss) in losses.iter().enumerate() {
        println!("epoch={} loss={}", i + 1, loss);
    }
    model.save(&a.out)?;
    println!(
        "model={} pairs={} epochs={} final_loss={}",
        a.out.display(),
        pairs.len(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_infer_unet(a: InferUnetArgs) -> Result<()> {
    let mut model: UNet<Real> = UNet::load(&a.model)?;
    let roi: ProbMap<Real> = read_pgm(&a.input)?.to_prob();
    let prob = model
        .infer_map(&roi)
        .map_err(|e| Error::stage("extract", &a.input, e))?;
    write_pgm(&a.out, &prob.to_gray())?;
    println!("map={}", a.out.display());
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let cfg = a.cfg.effective()?;
    let map: ProbMap<Real> = read_pgm(&a.input)?.to_prob();
    let kps = detect_keypoints(&map, &cfg.detect)
        .map_err(|e| Error::stage("detect", &a.input, e))?;
    write_keypoints(&a.out, &kps)?;
    println!("keypoints={} out={}", kps.len(), a.out.display());
    Ok(())
}

fn cmd_describe(a: DescribeArgs) -> Result<()> {
    if a.model.is_none() && !a.raw {
        return Err(Error::InvalidParameter(
            "describe needs --model <file> or --raw".into(),
        ));
    }
    let mut overrides = a.cfg.overrides();
    if a.raw {
        overrides.push(("descriptor.kind".into(), "raw".into()));
    }
    if let Some(m) = &a.model {
        overrides.push(("descriptor.kind".into(), "model".into()));
        overrides.push((
            "descriptor.model".into(),
            m.to_string_lossy().into_owned(),
        ));
    }
    let cfg = effective_config(a.cfg.config.as_deref(), &overrides)?;
    let mut pipe: Pipeline<Real> = Pipeline::new(cfg)?;
    let map: ProbMap<Real> = read_pgm(&a.input)?.to_prob();
    let kps = read_keypoints(&a.kps)?;
    let patches = extract_patches(&map, &kps)
        .map_err(|e| Error::stage("describe", &a.input, e))?;
    let (_, set) = pipe.describe_patches(&kps, &patches, &a.input)?;
    write_descriptor_set(&a.out, &set)?;
    println!("descriptors={} out={}", set.len(), a.out.display());
    Ok(())
}

fn cmd_train_desc(a: TrainDescArgs) -> Result<()> {
    let corpus: Vec<Vec<ProbMap<Real>>> = match (&a.corpus, a.synth_classes) {
        (Some(dir), None) => load_patch_corpus(dir)?,
        (None, Some(classes)) => {
            let cfg = PatchCorpusConfig {
                classes,
                samples_per_class: a.synth_samples.unwrap_or(6),
                seed: a.seed,
                ..PatchCorpusConfig::default()
            };
            generate_patch_corpus(&cfg)?
        }
        (None, None) => {
            return Err(Error::InvalidParameter(
                "train-desc needs --corpus <dir> or --synth-classes N".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let mut cfg = DescTrainConfig {
        seed: a.seed,
        ..DescTrainConfig::default()
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.margin {
        cfg.margin = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_classes = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    let mut model: PatchDescriptor<Real> = PatchDescriptor::build(a.seed)?;
    let losses = model.train(&corpus, &cfg)?;
    for (i, loss) in losses.iter().enumerate() {
        println!("epoch={} loss={}", i + 1, loss);
    }
    model.save(&a.out)?;
    println!(
        "model={} classes={} epochs={} final_loss={}",
        a.out.display(),
        corpus.len(),
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let cfg = a.cfg.effective()?;
    let mut mcfg = cfg.matcher.clone();
    mcfg.seed = cfg.seed;
    let probe = read_descriptor_set::<Real>(&a.probe)?;
    let gallery = read_descriptor_set::<Real>(&a.gallery)?;
    let result = match_images(&probe, &gallery, &mcfg)?;
    println!("score={}", result.score);
    if a.json {
        let detail = serde_json::json!({
            "score": result.score,
            "matches": result.matches.len(),
            "inliers": result.inliers.len(),
            "homography": result.homography,
        });
        println!("{detail}");
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = a.cfg.effective()?;
    let protocol = Protocol::parse(&a.protocol)?;
    let entries = read_manifest(&a.manifest)?;

    if let Some(dump) = &a.dump_dir {
        let mut pipe: Pipeline<Real> = Pipeline::new(cfg.clone())?;
        for entry in &entries {
            let path = Path::new(&entry.path);
            match pipe.process_image(path) {
                Ok(out) => {
                    let stem = format!(
                        "cls{:03}_s{}_{:02}",
                        entry.class_id, entry.session, entry.sample_index
                    );
                    dump_stages(dump, &stem, &out)?;
                }
                Err(_) => continue,
            }
        }
    }

    let report = evaluate::<Real>(&entries, protocol, &cfg, a.cache.as_deref())?;
    write_report_json(&a.out, &report)?;
    if let Some(roc_path) = &a.roc {
        write_roc_csv(roc_path, &report.roc)?;
    }
    println!(
        "report={} eer={} threshold={} genuine={} imposter={} failed={}",
        a.out.display(),
        report.eer,
        report.eer_threshold,
        report.genuine_pairs,
        report.imposter_pairs,
        report.failed_images
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.cfg.effective()?;
    let axis = SweepAxis::parse(&a.axis)?;
    let protocol = Protocol::parse(&a.protocol)?;
    let entries = read_manifest(&a.manifest)?;
    let rows = sweep::<Real>(&entries, axis, protocol, &cfg)?;
    write_sweep_csv(&a.out, &rows)?;
    println!("sweep={} axis={} rows={}", a.out.display(), a.axis, rows.len());
    Ok(())
}

fn cmd_eval_seg(a: EvalSegArgs) -> Result<()> {
    let pairs = load_pairs(&a.data, &a.labels)?;
    let mut model: UNet<Real> = UNet::load(&a.model)?;
    let precision = model.precision_eval(&pairs)?;
    println!("precision={precision} pairs={}", pairs.len());
    Ok(())
}
