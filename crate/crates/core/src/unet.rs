//! Compact encoder-decoder segmentation network that maps a finger ROI to
//! a vein probability map.
//!
//! Four encoder levels of double 3x3 convolutions at widths b/2b/4b/8b
//! (default 16/32/64/128) with 2x2 max pooling between, three decoder
//! levels of nearest-neighbor upsampling, a width-halving convolution,
//! skip concatenation, and another double convolution, then a final 1x1
//! convolution and sigmoid. Training minimizes a smoothed Dice loss plus
//! weighted binary cross-entropy.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, GrayImage, ProbMap};
use crate::scalar::Scalar;
use crate::tensornet::adam::{Adam, AdamConfig};
use crate::tensornet::{vpw, Graph, Mode, Tensor, ValueId};

/// Network input height (rows); ROIs are resized to this for the network.
pub const UNET_HEIGHT: usize = 128;
/// Network input width (columns).
pub const UNET_WIDTH: usize = 256;

/// Architecture switches; the persisted sidecar restores them on load.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct UNetSpec {
    /// Width of the first encoder level; deeper levels double it.
    pub base_channels: usize,
    /// Whether each convolution is followed by batch normalization.
    pub batch_norm: bool,
    /// Network input rows; inputs are resized here and back.
    pub input_height: usize,
    /// Network input columns.
    pub input_width: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            base_channels: 16,
            batch_norm: true,
            input_height: UNET_HEIGHT,
            input_width: UNET_WIDTH,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidParameter(
                "base_channels must be positive".to_string(),
            ));
        }
        // Three pooling stages need dimensions divisible by 8.
        if self.input_height % 8 != 0
            || self.input_width % 8 != 0
            || self.input_height == 0
            || self.input_width == 0
        {
            return Err(Error::InvalidParameter(format!(
                "network input {}x{} must be positive and divisible by 8",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Numerator/denominator smoothing of the Dice term.
    pub smooth: f64,
    /// Weight of the cross-entropy term.
    pub bce_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 30,
            smooth: 1.0,
            bce_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch_size must be at least 1".to_string(),
            ));
        }
        if !(self.smooth > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must be positive, got {}",
                self.smooth
            )));
        }
        if !(self.bce_weight >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bce_weight must be nonnegative, got {}",
                self.bce_weight
            )));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::InvalidParameter(
                "learning_rate must be positive and epochs at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Persisted alongside the weight file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetMeta {
    pub spec: UNetSpec,
    pub init_seed: u64,
    pub train: Option<TrainConfig>,
    pub epoch_losses: Vec<f64>,
}

/// The segmentation model: graph plus the node handles the stages need.
#[derive(Clone)]
pub struct UNet<S: Scalar> {
    graph: Graph<S>,
    input: ValueId,
    label: ValueId,
    prob: ValueId,
    loss: ValueId,
    spec: UNetSpec,
    meta: UNetMeta,
}

fn double_conv<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: ValueId,
    cin: usize,
    cout: usize,
    bn: bool,
) -> ValueId {
    let c1 = g.conv2d(&format!("{prefix}.conv1"), x, cin, cout, 3, 1);
    let n1 = if bn {
        g.batch_norm(&format!("{prefix}.norm1"), c1, cout)
    } else {
        c1
    };
    let r1 = g.relu(n1);
    let c2 = g.conv2d(&format!("{prefix}.conv2"), r1, cout, cout, 3, 1);
    let n2 = if bn {
        g.batch_norm(&format!("{prefix}.norm2"), c2, cout)
    } else {
        c2
    };
    g.relu(n2)
}

fn up_block<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: ValueId,
    skip: ValueId,
    cin: usize,
    bn: bool,
) -> ValueId {
    let half = cin / 2;
    let up = g.upsample2(x);
    let c = g.conv2d(&format!("{prefix}.up"), up, cin, half, 3, 1);
    let n = if bn {
        g.batch_norm(&format!("{prefix}.upnorm"), c, half)
    } else {
        c
    };
    let r = g.relu(n);
    let cat = g.concat_channels(r, skip);
    double_conv(g, prefix, cat, cin, half, bn)
}

/// Convolution parameter count (weights plus biases) of the architecture
/// at a given base width, from the layer table.
pub fn conv_param_count(base: usize) -> usize {
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
    let b = base;
    let mut n = 0;
    n += conv(1, b, 3) + conv(b, b, 3);
    n += conv(b, 2 * b, 3) + conv(2 * b, 2 * b, 3);
    n += conv(2 * b, 4 * b, 3) + conv(4 * b, 4 * b, 3);
    n += conv(4 * b, 8 * b, 3) + conv(8 * b, 8 * b, 3);
    n += conv(8 * b, 4 * b, 3) + conv(8 * b, 4 * b, 3) + conv(4 * b, 4 * b, 3);
    n += conv(4 * b, 2 * b, 3) + conv(4 * b, 2 * b, 3) + conv(2 * b, 2 * b, 3);
    n += conv(2 * b, b, 3) + conv(2 * b, b, 3) + conv(b, b, 3);
    n += conv(b, 1, 1);
    n
}

/// Batch-norm affine parameter count (gamma plus beta) at a base width.
pub fn norm_param_count(base: usize) -> usize {
    // Channels carrying normalization: encoder double convs, decoder
    // up-convolutions, and decoder double convs.
    let enc = 2 * (base + 2 * base + 4 * base + 8 * base);
    let ups = 4 * base + 2 * base + base;
    let dec = 2 * (4 * base + 2 * base + base);
    2 * (enc + ups + dec)
}

impl<S: Scalar> UNet<S> {
    /// Builds the network and initializes parameters from the seed.
    pub fn build(spec: UNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let b = spec.base_channels;
        let bn = spec.batch_norm;
        let mut g = Graph::<S>::new();
        let input = g.input("roi");
        let label = g.input("label");

        let e1 = double_conv(&mut g, "enc1", input, 1, b, bn);
        let p1 = g.maxpool2(e1);
        let e2 = double_conv(&mut g, "enc2", p1, b, 2 * b, bn);
        let p2 = g.maxpool2(e2);
        let e3 = double_conv(&mut g, "enc3", p2, 2 * b, 4 * b, bn);
        let p3 = g.maxpool2(e3);
        let e4 = double_conv(&mut g, "enc4", p3, 4 * b, 8 * b, bn);

        let d3 = up_block(&mut g, "dec3", e4, e3, 8 * b, bn);
        let d2 = up_block(&mut g, "dec2", d3, e2, 4 * b, bn);
        let d1 = up_block(&mut g, "dec1", d2, e1, 2 * b, bn);

        let logits = g.conv2d("out", d1, b, 1, 1, 0);
        let prob = g.sigmoid(logits);
        let loss = g.dice_bce(prob, label, 1.0, 1.0);

        g.init_params(seed);
        let meta = UNetMeta {
            spec: spec.clone(),
            init_seed: seed,
            train: None,
            epoch_losses: Vec::new(),
        };
        Ok(UNet {
            graph: g,
            input,
            label,
            prob,
            loss,
            spec,
            meta,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn meta(&self) -> &UNetMeta {
        &self.meta
    }

    /// Read access to the underlying graph, for parameter inspection.
    pub fn graph(&self) -> &Graph<S> {
        &self.graph
    }

    /// Total trainable parameter count (convolutions plus normalization).
    pub fn param_count(&self) -> usize {
        self.graph.count_param_elements(|_| true)
    }

    fn pack_batch(&self, maps: &[&ProbMap<S>]) -> Tensor<S> {
        let (w, h) = (self.spec.input_width, self.spec.input_height);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            debug_assert_eq!((m.width(), m.height()), (w, h));
            data.extend_from_slice(m.as_slice());
        }
        Tensor::from_vec(&[maps.len(), 1, h, w], data).expect("packed batch shape is consistent")
    }

    fn resize_to_net(&self, m: &ProbMap<S>) -> Result<ProbMap<S>> {
        if m.width() == self.spec.input_width && m.height() == self.spec.input_height {
            Ok(m.clone())
        } else {
            resize_bilinear(m, self.spec.input_width, self.spec.input_height)
        }
    }

    /// Vein probability map for one ROI, resized back to the ROI's size.
    pub fn infer_map(&mut self, roi: &ProbMap<S>) -> Result<ProbMap<S>> {
        let (ow, oh) = (roi.width(), roi.height());
        let net_in = self.resize_to_net(roi)?;
        let x = self.pack_batch(&[&net_in]);
        let dummy = Tensor::zeros(&[1, 1, self.spec.input_height, self.spec.input_width]);
        let tape = self
            .graph
            .forward(&[(self.input, x), (self.label, dummy)], Mode::Eval)?;
        let out = tape.value(self.prob);
        let map = ProbMap::from_vec(
            self.spec.input_width,
            self.spec.input_height,
            out.data().to_vec(),
        )?;
        if (map.width(), map.height()) == (ow, oh) {
            Ok(map)
        } else {
            resize_bilinear(&map, ow, oh)
        }
    }

    /// Vein probability map for a grayscale ROI image.
    pub fn infer(&mut self, roi: &GrayImage) -> Result<ProbMap<S>> {
        self.infer_map(&roi.to_prob())
    }

    /// Minimizes the loss over the dataset; returns mean loss per epoch.
    ///
    /// Every ROI and label is resized to the network input size once up
    /// front. Batches are drawn in a freshly shuffled order each epoch
    /// from a generator seeded by the config, so runs are reproducible.
    pub fn train(
        &mut self,
        data: &[(ProbMap<S>, ProbMap<S>)],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput(
                "training dataset is empty".to_string(),
            ));
        }
        if data
            .iter()
            .all(|(_, lab)| lab.as_slice().iter().all(|v| *v == S::zero()))
        {
            return Err(Error::DegenerateLabels(
                "every training label is identically zero".to_string(),
            ));
        }

        let mut rois = Vec::with_capacity(data.len());
        let mut labels = Vec::with_capacity(data.len());
        for (roi, lab) in data {
            rois.push(self.resize_to_net(roi)?);
            labels.push(self.resize_to_net(lab)?);
        }

        self.graph
            .set_dice_bce(self.loss, cfg.smooth, cfg.bce_weight)?;
        let mut adam = Adam::new(&self.graph, AdamConfig::with_lr(cfg.learning_rate));
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);

        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0f64;
            for chunk in order.chunks(cfg.batch_size) {
                let xs: Vec<&ProbMap<S>> = chunk.iter().map(|&i| &rois[i]).collect();
                let ys: Vec<&ProbMap<S>> = chunk.iter().map(|&i| &labels[i]).collect();
                let x = self.pack_batch(&xs);
                let y = self.pack_batch(&ys);
                let tape = self
                    .graph
                    .forward(&[(self.input, x), (self.label, y)], Mode::Train)?;
                let loss = tape.value(self.loss).scalar_value().to_f64_lossy();
                let grads = self.graph.backward(&tape, self.loss)?;
                adam.step(&mut self.graph, &grads)?;
                loss_sum += loss * chunk.len() as f64;
            }
            log.push(loss_sum / data.len() as f64);
        }

        self.meta.train = Some(cfg.clone());
        self.meta.epoch_losses = log.clone();
        Ok(log)
    }

    /// Dataset-level precision of predictions against labels, both
    /// binarized at 0.5.
    pub fn precision_eval(&mut self, data: &[(ProbMap<S>, ProbMap<S>)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidInput(
                "precision evaluation needs at least one sample".to_string(),
            ));
        }
        let (mut tp, mut fp) = (0u64, 0u64);
        for (roi, lab) in data {
            let pred = self.infer_map(roi)?;
            if (pred.width(), pred.height()) != (lab.width(), lab.height()) {
                return Err(Error::ShapeMismatch(format!(
                    "label {}x{} does not match ROI {}x{}",
                    lab.width(),
                    lab.height(),
                    roi.width(),
                    roi.height()
                )));
            }
            let half = S::from_f64_lossy(0.5);
            for (p, y) in pred.as_slice().iter().zip(lab.as_slice()) {
                if *p > half {
                    if *y > half {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
        }
        if tp + fp == 0 {
            return Err(Error::UndefinedPrecision(
                "no pixel was predicted positive at threshold 0.5".to_string(),
            ));
        }
        Ok(tp as f64 / (tp + fp) as f64)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut os = path.as_os_str().to_owned();
        os.push(".json");
        PathBuf::from(os)
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

    /// Restores a model saved by [`UNet::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: UNetMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("metadata parse failed: {e}")))?;
        let mut model = Self::build(meta.spec.clone(), meta.init_seed)?;
        vpw::load_weights(&mut model.graph, path)?;
        model.meta = meta;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_sample, SynthConfig, SynthStyle};
    use crate::veinlabel::make_soft_label;

    fn tiny_spec() -> UNetSpec {
        UNetSpec {
            base_channels: 2,
            batch_norm: true,
            input_height: 16,
            input_width: 32,
        }
    }

    fn tiny_dataset(n: u32) -> Vec<(ProbMap<f32>, ProbMap<f32>)> {
        let cfg = SynthConfig {
            width: 64,
            height: 32,
            classes: n,
            samples_per_class: 1,
            sessions: 1,
            ridge_min: 3,
            ridge_max: 4,
            jitter_px: 1.0,
            brightness: (-0.02, 0.02),
            contrast: (0.95, 1.05),
            noise_sigma: 0.004,
            max_tilt_deg: 0.0,
            style: SynthStyle::Roi,
            seed: 99,
        };
        (0..n)
            .map(|c| {
                let (img, lab) = render_sample(&cfg, c, 1, 0).unwrap();
                (img.to_prob::<f32>(), lab.cast::<f32>())
            })
            .collect()
    }

    #[test]
    fn parameter_count_matches_layer_table() {
        let model = UNet::<f32>::build(
            UNetSpec {
                batch_norm: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(model.param_count(), conv_param_count(16));
        assert_eq!(conv_param_count(16), 535_505);

        let with_norm = UNet::<f32>::build(UNetSpec::default(), 0).unwrap();
        assert_eq!(
            with_norm.param_count(),
            conv_param_count(16) + norm_param_count(16)
        );
        assert_eq!(norm_param_count(16), 1_632);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let spec = tiny_spec();
        let a = UNet::<f32>::build(spec.clone(), 5).unwrap();
        let b = UNet::<f32>::build(spec.clone(), 5).unwrap();
        assert_eq!(
            vpw::graph_tensors(&a.graph),
            vpw::graph_tensors(&b.graph)
        );
        let c = UNet::<f32>::build(spec, 6).unwrap();
        assert_ne!(
            vpw::graph_tensors(&a.graph),
            vpw::graph_tensors(&c.graph)
        );
    }

    #[test]
    fn zero_input_maps_into_open_unit_interval() {
        let mut model = UNet::<f32>::build(tiny_spec(), 3).unwrap();
        let zero = ProbMap::<f32>::new(32, 16).unwrap();
        let out = model.infer_map(&zero).unwrap();
        assert_eq!((out.width(), out.height()), (32, 16));
        for &v in out.as_slice() {
            assert!(v > 0.0 && v < 1.0, "sigmoid output {} out of range", v);
        }
    }

    #[test]
    fn inference_resizes_back_to_input_dims() {
        let mut model = UNet::<f32>::build(tiny_spec(), 3).unwrap();
        let roi = ProbMap::<f32>::from_vec(50, 21, vec![0.4; 50 * 21]).unwrap();
        let out = model.infer_map(&roi).unwrap();
        assert_eq!((out.width(), out.height()), (50, 21));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = tiny_dataset(8);
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 3e-3,
            epochs: 12,
            seed: 7,
            ..Default::default()
        };
        let mut a = UNet::<f32>::build(tiny_spec(), 11).unwrap();
        let log_a = a.train(&data, &cfg).unwrap();
        assert_eq!(log_a.len(), cfg.epochs);
        assert!(
            log_a.last().unwrap() < log_a.first().unwrap(),
            "loss went from {} to {}",
            log_a[0],
            log_a.last().unwrap()
        );

        let mut b = UNet::<f32>::build(tiny_spec(), 11).unwrap();
        let log_b = b.train(&data, &cfg).unwrap();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn bce_weight_changes_the_loss_curve() {
        let data = tiny_dataset(4);
        let mk = |w: f64| {
            let mut m = UNet::<f32>::build(tiny_spec(), 2).unwrap();
            let cfg = TrainConfig {
                batch_size: 4,
                learning_rate: 3e-3,
                epochs: 6,
                bce_weight: w,
                seed: 1,
                ..Default::default()
            };
            m.train(&data, &cfg).unwrap()
        };
        let dice_only = mk(0.0);
        let with_bce = mk(1.0);
        assert_ne!(dice_only, with_bce);
        assert!(dice_only.last().unwrap() < dice_only.first().unwrap());
        assert!(with_bce.last().unwrap() < with_bce.first().unwrap());
    }

    #[test]
    fn degenerate_and_empty_datasets_are_refused() {
        let mut model = UNet::<f32>::build(tiny_spec(), 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(
            model.train(&[], &cfg),
            Err(Error::InvalidInput(_))
        ));
        let zeros = vec![(
            ProbMap::<f32>::from_vec(32, 16, vec![0.3; 512]).unwrap(),
            ProbMap::<f32>::new(32, 16).unwrap(),
        )];
        assert!(matches!(
            model.train(&zeros, &cfg),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn precision_is_one_against_own_binarized_output() {
        let data = tiny_dataset(4);
        let mut model = UNet::<f32>::build(tiny_spec(), 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 3e-3,
            epochs: 8,
            seed: 3,
            ..Default::default()
        };
        model.train(&data, &cfg).unwrap();
        // Evaluating the model against its own thresholded predictions is
        // precision 1 by construction.
        let self_labeled: Vec<(ProbMap<f32>, ProbMap<f32>)> = data
            .iter()
            .map(|(roi, _)| {
                let pred = model.infer_map(roi).unwrap();
                let hard = ProbMap::from_vec(
                    pred.width(),
                    pred.height(),
                    pred.as_slice()
                        .iter()
                        .map(|&v| if v > 0.5 { 1.0f32 } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                (roi.clone(), hard)
            })
            .collect();
        match model.precision_eval(&self_labeled) {
            Ok(p) => assert!((p - 1.0).abs() < 1e-12, "precision {}", p),
            Err(Error::UndefinedPrecision(_)) => {
                // Acceptable only if the model predicts nothing positive.
            }
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn weights_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vpw");
        let data = tiny_dataset(4);
        let mut model = UNet::<f32>::build(tiny_spec(), 8).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            epochs: 2,
            seed: 5,
            ..Default::default()
        };
        model.train(&data, &cfg).unwrap();
        model.save(&path).unwrap();
        assert!(path.exists());
        assert!(dir.path().join("model.vpw.json").exists());

        let mut back = UNet::<f32>::load(&path).unwrap();
        assert_eq!(back.meta().epoch_losses, model.meta().epoch_losses);
        let probe = &data[0].0;
        let a = model.infer_map(probe).unwrap();
        let b = back.infer_map(probe).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn curvature_labels_supervise_the_net() {
        // End-to-end shape compatibility: soft labels from the curvature
        // stage train without shape or finiteness errors.
        let cfg = SynthConfig {
            width: 64,
            height: 32,
            style: SynthStyle::Roi,
            ..SynthConfig::roi_default(3, 1, 1, 21)
        };
        let data: Vec<(ProbMap<f32>, ProbMap<f32>)> = (0..3)
            .map(|c| {
                let (img, _) = render_sample(&cfg, c, 1, 0).unwrap();
                let prob = img.to_prob::<f32>();
                let lab = make_soft_label(&prob, 2.0, 1.0).unwrap();
                (prob, lab)
            })
            .collect();
        let mut model = UNet::<f32>::build(tiny_spec(), 1).unwrap();
        let tc = TrainConfig {
            batch_size: 3,
            learning_rate: 1e-3,
            epochs: 3,
            seed: 2,
            ..Default::default()
        };
        let log = model.train(&data, &tc).unwrap();
        assert!(log.iter().all(|l| l.is_finite()));
    }
}
