//! End-to-end recognition pipeline for a single image: ROI alignment,
//! vein map extraction, keypoint detection, and patch description.
//!
//! A [`Pipeline`] owns any trained models the configuration names, so
//! cloning one gives a worker its own graphs for parallel batch runs.
//! Every stage failure is wrapped with the stage name and the image path
//! so batch reports can say where each image dropped out.

use std::path::Path;

use crate::config::{DescriptorKind, ExtractorKind, PipelineConfig};
use crate::descriptor::{raw_descriptor, DescEntry, DescriptorSet, PatchDescriptor};
use crate::error::{Error, Result};
use crate::imaging::{read_pgm, write_pgm, GrayImage, ProbMap};
use crate::keypatch::{detect_keypoints, extract_patches, write_keypoints, Keypoint};
use crate::roi::{extract_roi, RoiReport};
use crate::scalar::Scalar;
use crate::unet::UNet;
use crate::veinlabel::make_soft_label;

/// Everything the per-image stages produce.
#[derive(Debug, Clone)]
pub struct StageOutput<S: Scalar> {
    /// Aligned region of interest in [0, 1].
    pub roi: ProbMap<S>,
    /// Alignment details, absent when ROI extraction was skipped.
    pub roi_report: Option<RoiReport>,
    /// Vein probability map the later stages run on.
    pub vein_map: ProbMap<S>,
    /// Keypoints that produced a descriptor, in detection order.
    pub keypoints: Vec<Keypoint>,
    /// One descriptor per keypoint.
    pub descriptors: DescriptorSet<S>,
}

/// The full single-image pipeline with its loaded models.
#[derive(Clone)]
pub struct Pipeline<S: Scalar> {
    cfg: PipelineConfig,
    unet: Option<UNet<S>>,
    desc: Option<PatchDescriptor<S>>,
}

impl<S: Scalar> Pipeline<S> {
    /// Validates the config and loads whichever models it names.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let unet = match (cfg.extractor, &cfg.extractor_model) {
            (ExtractorKind::Unet, Some(path)) => Some(UNet::load(path)?),
            _ => None,
        };
        let desc = match (cfg.descriptor, &cfg.descriptor_model) {
            (DescriptorKind::Model, Some(path)) => Some(PatchDescriptor::load(path)?),
            _ => None,
        };
        Ok(Pipeline { cfg, unet, desc })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Reads a PGM image and runs every stage on it.
    pub fn process_image(&mut self, path: &Path) -> Result<StageOutput<S>> {
        let img = read_pgm(path).map_err(|e| Error::stage("read", path, e))?;
        self.process(&img, path)
    }

    /// Runs every stage on an already-loaded image. `path` only labels
    /// errors.
    pub fn process(&mut self, img: &GrayImage, path: &Path) -> Result<StageOutput<S>> {
        let (roi, roi_report) = self.roi_stage(img, path)?;
        let vein_map = self.extract_stage(&roi, path)?;

        let detected = detect_keypoints(&vein_map, &self.cfg.detect)
            .map_err(|e| Error::stage("detect", path, e))?;

        let patches = extract_patches(&vein_map, &detected)
            .map_err(|e| Error::stage("describe", path, e))?;
        let (keypoints, descriptors) = self.describe_patches(&detected, &patches, path)?;

        Ok(StageOutput {
            roi,
            roi_report,
            vein_map,
            keypoints,
            descriptors,
        })
    }

    fn roi_stage(&self, img: &GrayImage, path: &Path) -> Result<(ProbMap<S>, Option<RoiReport>)> {
        if self.cfg.roi_skip {
            Ok((img.to_prob::<S>(), None))
        } else {
            let (roi, report) =
                extract_roi(img, &self.cfg.roi).map_err(|e| Error::stage("roi", path, e))?;
            Ok((roi, Some(report)))
        }
    }

    fn extract_stage(&mut self, roi: &ProbMap<S>, path: &Path) -> Result<ProbMap<S>> {
        match self.cfg.extractor {
            ExtractorKind::Traditional => {
                make_soft_label(roi, self.cfg.label_sigma_curv, self.cfg.label_sigma_smooth)
                    .map_err(|e| Error::stage("extract", path, e))
            }
            ExtractorKind::Unet => {
                let net = self.unet.as_mut().expect("validated unet config");
                net.infer_map(roi).map_err(|e| Error::stage("extract", path, e))
            }
        }
    }

    /// ROI and vein-map stages only; for callers that manage detection
    /// themselves.
    pub fn vein_map_for(&mut self, path: &Path) -> Result<ProbMap<S>> {
        let img = read_pgm(path).map_err(|e| Error::stage("read", path, e))?;
        let (roi, _) = self.roi_stage(&img, path)?;
        self.extract_stage(&roi, path)
    }

    /// Descriptor stage. Returns the keypoints that produced a descriptor,
    /// aligned with the descriptor set.
    pub fn describe_patches(
        &mut self,
        keypoints: &[Keypoint],
        patches: &[ProbMap<S>],
        path: &Path,
    ) -> Result<(Vec<Keypoint>, DescriptorSet<S>)> {
        if keypoints.len() != patches.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} keypoints but {} patches",
                keypoints.len(),
                patches.len()
            )));
        }
        match self.cfg.descriptor {
            DescriptorKind::Raw => {
                // Flat patches have no raw descriptor; drop those keypoints
                // but refuse an image where nothing survives.
                let mut kept_kps = Vec::new();
                let mut set = DescriptorSet::new();
                for (kp, patch) in keypoints.iter().zip(patches) {
                    match raw_descriptor(patch) {
                        Ok(vector) => {
                            kept_kps.push(*kp);
                            set.push(DescEntry { x: kp.x, y: kp.y, vector });
                        }
                        Err(Error::DegeneratePatch(_)) => continue,
                        Err(e) => return Err(Error::stage("describe", path, e)),
                    }
                }
                if set.is_empty() {
                    return Err(Error::stage(
                        "describe",
                        path,
                        Error::DegeneratePatch("no patch produced a descriptor".into()),
                    ));
                }
                Ok((kept_kps, set))
            }
            DescriptorKind::Model => {
                let net = self.desc.as_mut().expect("validated descriptor config");
                let refs: Vec<&ProbMap<S>> = patches.iter().collect();
                let vectors = net
                    .describe_all(&refs)
                    .map_err(|e| Error::stage("describe", path, e))?;
                let set = keypoints
                    .iter()
                    .zip(vectors)
                    .map(|(kp, vector)| DescEntry { x: kp.x, y: kp.y, vector })
                    .collect();
                Ok((keypoints.to_vec(), set))
            }
        }
    }

    /// Descriptors for one image file; the usual entry point for matching.
    pub fn descriptors_for(&mut self, path: &Path) -> Result<DescriptorSet<S>> {
        Ok(self.process_image(path)?.descriptors)
    }
}

/// Writes every stage artifact under `dir` with the given file stem:
/// `{stem}.roi.pgm`, `{stem}.vein.pgm`, `{stem}.keypoints.csv`, and
/// `{stem}.desc.bin`.
pub fn dump_stages<S: Scalar>(dir: &Path, stem: &str, out: &StageOutput<S>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pgm(&dir.join(format!("{stem}.roi.pgm")), &out.roi.to_gray())?;
    write_pgm(&dir.join(format!("{stem}.vein.pgm")), &out.vein_map.to_gray())?;
    write_keypoints(&dir.join(format!("{stem}.keypoints.csv")), &out.keypoints)?;
    crate::descriptor::write_descriptor_set(
        &dir.join(format!("{stem}.desc.bin")),
        &out.descriptors,
    )?;
    Ok(())
}
