//! Patch descriptors: a trainable convolutional embedding, a
//! training-free projection fallback, a synthetic patch corpus for
//! training, and the on-disk descriptor cache format.
//!
//! Both descriptor routes map a 32x32 patch to a unit-length vector of
//! [`DESC_DIM`] values, so the matching stage never cares which one
//! produced the cache.

use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ProbMap;
use crate::keypatch::PATCH_SIZE;
use crate::scalar::Scalar;
use crate::synth::derive;
use crate::tensornet::adam::{Adam, AdamConfig};
use crate::tensornet::{vpw, Graph, Mode, Tensor, ValueId};

/// Length of every descriptor vector.
pub const DESC_DIM: usize = 128;

/// Flattened patch length feeding the projection fallback.
const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE;

// ---------------------------------------------------------------------------
// Trainable convolutional descriptor
// ---------------------------------------------------------------------------

/// Training settings for the descriptor network.
///
/// Each step draws `batch_classes` distinct patch classes and one
/// anchor/positive pair per class; the loss is the quadratic hinge over
/// hardest in-batch negatives plus the second-order similarity
/// regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescTrainConfig {
    pub batch_classes: usize,
    pub margin: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DescTrainConfig {
    fn default() -> Self {
        DescTrainConfig {
            batch_classes: 32,
            margin: 1.0,
            epochs: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl DescTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_classes < 2 {
            return Err(Error::InvalidParameter(
                "descriptor batches need at least 2 classes".into(),
            ));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "margin {} must be nonnegative and finite",
                self.margin
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Provenance carried in the sidecar next to saved weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescMeta {
    pub init_seed: u64,
    pub train: Option<DescTrainConfig>,
    pub epoch_losses: Vec<f64>,
}

/// Convolutional descriptor over 32x32 patches.
///
/// Seven convolution layers, 3x3 kernels with channel widths
/// 32, 32, 64, 64, 128, 128, downsampling after the third and fifth
/// layers, normalization and a rectifier between layers, then an 8x8
/// valid convolution collapses the 8x8 map into one 128-vector that is
/// scaled to unit length.
#[derive(Clone)]
pub struct PatchDescriptor<S: Scalar> {
    graph: Graph<S>,
    input: ValueId,
    desc: ValueId,
    fos: ValueId,
    loss: ValueId,
    pub meta: DescMeta,
}

/// Parameters in the convolution layers, from the layer dimensions.
pub fn conv_param_count() -> usize {
    let dims: [(usize, usize, usize); 7] = [
        (1, 32, 3),
        (32, 32, 3),
        (32, 64, 3),
        (64, 64, 3),
        (64, 128, 3),
        (128, 128, 3),
        (128, 128, 8),
    ];
    dims.iter()
        .map(|&(ci, co, k)| ci * co * k * k + co)
        .sum()
}

/// Parameters in the normalization layers.
pub fn norm_param_count() -> usize {
    2 * (32 + 32 + 64 + 64 + 128 + 128)
}

impl<S: Scalar> PatchDescriptor<S> {
    /// Builds the network with parameters drawn from `seed`.
    pub fn build(seed: u64) -> Result<Self> {
        let mut g = Graph::new();
        let input = g.input("patches");
        let widths = [32usize, 32, 64, 64, 128, 128];
        let mut x = input;
        let mut cin = 1usize;
        for (i, &cout) in widths.iter().enumerate() {
            let layer = i + 1;
            x = g.conv2d(&format!("l{layer}"), x, cin, cout, 3, 1);
            if layer == 3 || layer == 5 {
                x = g.maxpool2(x);
            }
            x = g.batch_norm(&format!("l{layer}.norm"), x, cout);
            x = g.relu(x);
            cin = cout;
        }
        x = g.conv2d("l7", x, 128, DESC_DIM, 8, 0);
        let flat = g.flatten_rows(x);
        let desc = g.l2norm_rows(flat, 1e-12);
        let fos = g.fos_loss(desc, 1.0);
        let sos = g.sos_reg(desc);
        let loss = g.add(fos, sos);
        g.init_params(seed);
        Ok(PatchDescriptor {
            graph: g,
            input,
            desc,
            fos,
            loss,
            meta: DescMeta {
                init_seed: seed,
                train: None,
                epoch_losses: Vec::new(),
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.graph.count_param_elements(|_| true)
    }

    fn pack_batch(&self, patches: &[&ProbMap<S>]) -> Result<Tensor<S>> {
        for p in patches {
            if p.width() != PATCH_SIZE || p.height() != PATCH_SIZE {
                return Err(Error::ShapeMismatch(format!(
                    "descriptor input must be {}x{}, got {}x{}",
                    PATCH_SIZE,
                    PATCH_SIZE,
                    p.width(),
                    p.height()
                )));
            }
        }
        let mut data = Vec::with_capacity(patches.len() * PATCH_LEN);
        for p in patches {
            data.extend(p.as_slice().iter().copied());
        }
        Tensor::from_vec(&[patches.len(), 1, PATCH_SIZE, PATCH_SIZE], data)
    }

    /// Descriptors for a batch of patches, one unit-length row each.
    pub fn describe_all(&mut self, patches: &[&ProbMap<S>]) -> Result<Vec<Vec<S>>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.pack_batch(patches)?;
        let desc = self.desc;
        let tape = self
            .graph
            .forward_subset(&[(self.input, x)], Mode::Eval, &[desc])?;
        let out = tape.value(desc);
        Ok(out
            .data()
            .chunks(DESC_DIM)
            .map(|row| row.to_vec())
            .collect())
    }

    /// Descriptor of one patch.
    pub fn describe(&mut self, patch: &ProbMap<S>) -> Result<Vec<S>> {
        Ok(self.describe_all(&[patch])?.remove(0))
    }

    /// Minimizes the pair loss over a corpus of patch classes; returns the
    /// mean loss per epoch.
    ///
    /// `corpus[k]` holds the sample patches of class `k`; every class
    /// needs at least two samples and the corpus at least
    /// `cfg.batch_classes` classes. Classes are reshuffled every epoch
    /// from a generator seeded by the config, so runs are reproducible.
    pub fn train(&mut self, corpus: &[Vec<ProbMap<S>>], cfg: &DescTrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if corpus.len() < cfg.batch_classes {
            return Err(Error::InvalidCorpus(format!(
                "corpus holds {} classes but batches need {}",
                corpus.len(),
                cfg.batch_classes
            )));
        }
        for (k, class) in corpus.iter().enumerate() {
            if class.len() < 2 {
                return Err(Error::InvalidCorpus(format!(
                    "class {} has {} samples, anchor and positive need 2",
                    k,
                    class.len()
                )));
            }
        }

        self.graph.set_fos_margin(self.fos, cfg.margin)?;
        let mut adam = Adam::new(&self.graph, AdamConfig::with_lr(cfg.learning_rate));
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);

        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0f64;
            let mut classes_used = 0usize;
            for chunk in order.chunks(cfg.batch_classes) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut anchors: Vec<&ProbMap<S>> = Vec::with_capacity(chunk.len());
                let mut positives: Vec<&ProbMap<S>> = Vec::with_capacity(chunk.len());
                for &k in chunk {
                    let class = &corpus[k];
                    let a = rng.random_range(0..class.len());
                    let mut p = rng.random_range(0..class.len() - 1);
                    if p >= a {
                        p += 1;
                    }
                    anchors.push(&class[a]);
                    positives.push(&class[p]);
                }
                anchors.extend(positives);
                let x = self.pack_batch(&anchors)?;
                let tape = self.graph.forward(&[(self.input, x)], Mode::Train)?;
                let loss = tape.value(self.loss).scalar_value().to_f64_lossy();
                let grads = self.graph.backward(&tape, self.loss)?;
                adam.step(&mut self.graph, &grads)?;
                loss_sum += loss * chunk.len() as f64;
                classes_used += chunk.len();
            }
            if classes_used == 0 {
                return Err(Error::InvalidCorpus(
                    "no batch held at least 2 classes".into(),
                ));
            }
            log.push(loss_sum / classes_used as f64);
        }

        self.meta.train = Some(cfg.clone());
        self.meta.epoch_losses = log.clone();
        Ok(log)
    }

    fn sidecar_path(path: &Path) -> std::path::PathBuf {
        let mut os = path.as_os_str().to_owned();
        os.push(".json");
        std::path::PathBuf::from(os)
    }

    /// Persists weights plus a metadata sidecar at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        vpw::save_weights(&self.graph, path)?;
        let side = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Format(format!("metadata serialization failed: {e}")))?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    /// Restores a model saved by [`PatchDescriptor::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DescMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("metadata parse failed: {e}")))?;
        let mut model = Self::build(meta.init_seed)?;
        vpw::load_weights(&mut model.graph, path)?;
        model.meta = meta;
        Ok(model)
    }

    #[cfg(test)]
    pub(crate) fn graph(&self) -> &Graph<S> {
        &self.graph
    }
}

// ---------------------------------------------------------------------------
// Training-free projection descriptor
// ---------------------------------------------------------------------------

/// Seed of the frozen random projection. Changing it would invalidate
/// every cache built with the projection route, so it never changes.
const RAW_PROJECTION_SEED: u64 = 0x5241_5731;

static RAW_PROJECTION: OnceLock<Vec<f64>> = OnceLock::new();

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Rows of the fixed orthonormal projection, row-major
/// `DESC_DIM x PATCH_LEN`.
fn raw_projection() -> &'static [f64] {
    RAW_PROJECTION
        .get_or_init(|| {
            let mut rng = ChaCha12Rng::seed_from_u64(RAW_PROJECTION_SEED);
            let mut rows = vec![0.0f64; DESC_DIM * PATCH_LEN];
            for v in rows.iter_mut() {
                *v = gauss(&mut rng);
            }
            for i in 0..DESC_DIM {
                // Two orthogonalization passes keep the rows orthonormal
                // to near machine precision.
                for _ in 0..2 {
                    for j in 0..i {
                        let dot: f64 = (0..PATCH_LEN)
                            .map(|k| rows[i * PATCH_LEN + k] * rows[j * PATCH_LEN + k])
                            .sum();
                        for k in 0..PATCH_LEN {
                            rows[i * PATCH_LEN + k] -= dot * rows[j * PATCH_LEN + k];
                        }
                    }
                }
                let norm: f64 = (0..PATCH_LEN)
                    .map(|k| rows[i * PATCH_LEN + k].powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(norm > 1e-9, "random rows cannot be linearly dependent");
                for k in 0..PATCH_LEN {
                    rows[i * PATCH_LEN + k] /= norm;
                }
            }
            rows
        })
        .as_slice()
}

/// Training-free descriptor: the patch is flattened, centered, scaled to
/// unit length, projected through a fixed orthonormal map, and rescaled
/// to unit length.
///
/// Centering and scaling make the result invariant to positive affine
/// intensity changes of the patch. A constant patch has no direction and
/// fails with [`Error::DegeneratePatch`].
pub fn raw_descriptor<S: Scalar>(patch: &ProbMap<S>) -> Result<Vec<S>> {
    if patch.width() != PATCH_SIZE || patch.height() != PATCH_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "descriptor input must be {}x{}, got {}x{}",
            PATCH_SIZE,
            PATCH_SIZE,
            patch.width(),
            patch.height()
        )));
    }
    let mut v: Vec<f64> = patch.as_slice().iter().map(|&x| x.to_f64_lossy()).collect();
    let mean = v.iter().sum::<f64>() / PATCH_LEN as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::DegeneratePatch(
            "patch has no intensity variation".into(),
        ));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    let proj = raw_projection();
    let mut out = vec![0.0f64; DESC_DIM];
    for (i, o) in out.iter_mut().enumerate() {
        *o = v
            .iter()
            .zip(&proj[i * PATCH_LEN..(i + 1) * PATCH_LEN])
            .map(|(a, b)| a * b)
            .sum();
    }
    let onorm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if onorm < 1e-12 {
        return Err(Error::DegeneratePatch(
            "patch direction is orthogonal to the projection".into(),
        ));
    }
    Ok(out
        .into_iter()
        .map(|x| S::from_f64_lossy(x / onorm))
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic patch corpus
// ---------------------------------------------------------------------------

/// Settings for the synthetic patch-class corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCorpusConfig {
    pub classes: u32,
    pub samples_per_class: u32,
    /// Per-sample translation of the whole pattern, in pixels.
    pub shift: f64,
    /// Additive brightness range, drawn symmetrically.
    pub brightness: f64,
    /// Multiplicative contrast range.
    pub contrast: (f64, f64),
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PatchCorpusConfig {
    fn default() -> Self {
        PatchCorpusConfig {
            classes: 64,
            samples_per_class: 6,
            shift: 1.5,
            brightness: 0.08,
            contrast: (0.85, 1.15),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PatchCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class < 2 {
            return Err(Error::InvalidParameter(
                "corpus needs classes and at least 2 samples per class".into(),
            ));
        }
        if !(self.shift >= 0.0) || !(self.brightness >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter(
                "corpus augmentation ranges must be nonnegative".into(),
            ));
        }
        if !(self.contrast.0 > 0.0) || self.contrast.1 < self.contrast.0 {
            return Err(Error::InvalidParameter(format!(
                "contrast range {:?} must be positive and ordered",
                self.contrast
            )));
        }
        Ok(())
    }
}

/// One bright ridge through a patch.
struct PatchLine {
    angle: f64,
    cx: f64,
    cy: f64,
    sigma: f64,
    depth: f64,
}

/// Class geometry: one to three ridges meeting in the patch. The leading
/// angle steps by the golden angle per class so classes stay spread out.
fn patch_class_lines(cfg: &PatchCorpusConfig, class: u32) -> Vec<PatchLine> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive(cfg.seed, &[11, class as u64]));
    let golden_deg = 137.507_764;
    let base_angle =
        (class as f64 * golden_deg + rng.random_range(-8.0..=8.0)).to_radians();
    let count = 1 + (rng.random::<f64>() * 3.0) as usize % 3;
    let cx = 16.0 + rng.random_range(-4.0..=4.0);
    let cy = 16.0 + rng.random_range(-4.0..=4.0);
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let separation = rng.random_range(35.0f64..=140.0).to_radians();
        lines.push(PatchLine {
            angle: base_angle + i as f64 * separation,
            cx: cx + rng.random_range(-1.5..=1.5),
            cy: cy + rng.random_range(-1.5..=1.5),
            sigma: rng.random_range(1.0..=2.2),
            depth: rng.random_range(0.5..=0.9),
        });
    }
    lines
}

/// Renders one augmented sample of a class.
fn render_patch_sample<S: Scalar>(
    cfg: &PatchCorpusConfig,
    lines: &[PatchLine],
    rng: &mut ChaCha12Rng,
) -> ProbMap<S> {
    let dx = rng.random_range(-cfg.shift..=cfg.shift);
    let dy = rng.random_range(-cfg.shift..=cfg.shift);
    let contrast = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
    let brightness = rng.random_range(-cfg.brightness..=cfg.brightness);
    let mut out = ProbMap::new(PATCH_SIZE, PATCH_SIZE).expect("fixed nonzero size");
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let px = x as f64 - dx;
            let py = y as f64 - dy;
            let mut v = 0.03f64;
            for line in lines {
                let d = -(line.angle.sin()) * (px - line.cx) + line.angle.cos() * (py - line.cy);
                v += line.depth * (-d * d / (2.0 * line.sigma * line.sigma)).exp();
            }
            let noisy = v * contrast + brightness + gauss(rng) * cfg.noise_sigma;
            out.set(x, y, S::from_f64_lossy(noisy.clamp(0.0, 1.0)));
        }
    }
    out
}

/// Generates the corpus: `classes` ridge geometries, each rendered
/// `samples_per_class` times under small shifts, photometric changes, and
/// noise. Fully determined by the config.
pub fn generate_patch_corpus<S: Scalar>(cfg: &PatchCorpusConfig) -> Result<Vec<Vec<ProbMap<S>>>> {
    cfg.validate()?;
    let mut corpus = Vec::with_capacity(cfg.classes as usize);
    for class in 0..cfg.classes {
        let lines = patch_class_lines(cfg, class);
        let mut samples = Vec::with_capacity(cfg.samples_per_class as usize);
        for s in 0..cfg.samples_per_class {
            let mut rng =
                ChaCha12Rng::seed_from_u64(derive(cfg.seed, &[12, class as u64, s as u64]));
            samples.push(render_patch_sample(cfg, &lines, &mut rng));
        }
        corpus.push(samples);
    }
    Ok(corpus)
}

/// Loads a corpus from a directory of class folders, each holding the
/// sample images of one class. Folders and files are taken in sorted
/// order so the corpus is stable across filesystems.
pub fn load_patch_corpus<S: Scalar>(dir: &Path) -> Result<Vec<Vec<ProbMap<S>>>> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::InvalidCorpus(format!(
            "{} holds no class directories",
            dir.display()
        )));
    }
    let mut corpus = Vec::with_capacity(class_dirs.len());
    for cd in class_dirs {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(&cd)
            .map_err(|e| Error::io(&cd, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        let mut samples = Vec::with_capacity(files.len());
        for f in files {
            let img = crate::imaging::read_pgm(&f)?;
            let map: ProbMap<S> = img.to_prob();
            if map.width() != PATCH_SIZE || map.height() != PATCH_SIZE {
                return Err(Error::InvalidCorpus(format!(
                    "{} is {}x{}, patches must be {}x{}",
                    f.display(),
                    map.width(),
                    map.height(),
                    PATCH_SIZE,
                    PATCH_SIZE
                )));
            }
            samples.push(map);
        }
        if samples.is_empty() {
            return Err(Error::InvalidCorpus(format!(
                "{} holds no .pgm samples",
                cd.display()
            )));
        }
        corpus.push(samples);
    }
    Ok(corpus)
}

/// Writes a corpus as the directory layout read by
/// [`load_patch_corpus`].
pub fn write_patch_corpus<S: Scalar>(dir: &Path, corpus: &[Vec<ProbMap<S>>]) -> Result<()> {
    for (k, class) in corpus.iter().enumerate() {
        let cd = dir.join(format!("class_{k:03}"));
        std::fs::create_dir_all(&cd).map_err(|e| Error::io(&cd, e))?;
        for (s, map) in class.iter().enumerate() {
            let path = cd.join(format!("patch_{s:02}.pgm"));
            crate::imaging::write_pgm(&path, &map.to_gray())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Descriptor cache
// ---------------------------------------------------------------------------

/// A keypoint position with its descriptor, as stored in the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct DescEntry<S: Scalar> {
    pub x: u32,
    pub y: u32,
    pub vector: Vec<S>,
}

/// All descriptors extracted from one image.
pub type DescriptorSet<S> = Vec<DescEntry<S>>;

/// Encodes a descriptor set: little-endian `u32` count, then per entry
/// `u16` x, `u16` y, and [`DESC_DIM`] `f32` values.
pub fn encode_descriptor_set<S: Scalar>(set: &DescriptorSet<S>) -> Result<Vec<u8>> {
    let count = u32::try_from(set.len())
        .map_err(|_| Error::InvalidParameter("descriptor set too large".into()))?;
    let mut out = Vec::with_capacity(4 + set.len() * (4 + DESC_DIM * 4));
    out.extend_from_slice(&count.to_le_bytes());
    for e in set {
        if e.vector.len() != DESC_DIM {
            return Err(Error::ShapeMismatch(format!(
                "descriptor has {} values, cache stores {}",
                e.vector.len(),
                DESC_DIM
            )));
        }
        let x = u16::try_from(e.x).map_err(|_| {
            Error::InvalidParameter(format!("x {} exceeds the 16-bit cache range", e.x))
        })?;
        let y = u16::try_from(e.y).map_err(|_| {
            Error::InvalidParameter(format!("y {} exceeds the 16-bit cache range", e.y))
        })?;
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
        for v in &e.vector {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes the format written by [`encode_descriptor_set`]. The byte
/// length must match the count exactly.
pub fn decode_descriptor_set<S: Scalar>(bytes: &[u8]) -> Result<DescriptorSet<S>> {
    if bytes.len() < 4 {
        return Err(Error::Format(
            "descriptor cache shorter than its header".into(),
        ));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().expect("checked length")) as usize;
    let entry_len = 4 + DESC_DIM * 4;
    let expect = 4 + count * entry_len;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "descriptor cache holds {} bytes, {} entries need {}",
            bytes.len(),
            count,
            expect
        )));
    }
    let mut set = Vec::with_capacity(count);
    for i in 0..count {
        let at = 4 + i * entry_len;
        let x = u16::from_le_bytes(bytes[at..at + 2].try_into().expect("checked length")) as u32;
        let y =
            u16::from_le_bytes(bytes[at + 2..at + 4].try_into().expect("checked length")) as u32;
        let mut vector = Vec::with_capacity(DESC_DIM);
        for k in 0..DESC_DIM {
            let off = at + 4 + k * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("checked length"));
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "descriptor cache entry {} holds a non-finite value",
                    i
                )));
            }
            vector.push(S::from_f64_lossy(v as f64));
        }
        set.push(DescEntry { x, y, vector });
    }
    Ok(set)
}

/// Writes a descriptor cache file.
pub fn write_descriptor_set<S: Scalar>(path: &Path, set: &DescriptorSet<S>) -> Result<()> {
    std::fs::write(path, encode_descriptor_set(set)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a descriptor cache file.
pub fn read_descriptor_set<S: Scalar>(path: &Path) -> Result<DescriptorSet<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptor_set(&bytes)
}
