//! Pipeline configuration: typed settings for every stage, a flat
//! `key = value` file format, and the override order command line >
//! config file > built-in default.
//!
//! Keys are namespaced per stage (`keypoint.c`, `matcher.td`). Unknown
//! keys and malformed values are rejected rather than ignored so typos
//! surface immediately. The environment variable `VEINPATCH_CONFIG` names
//! a default config file used when no explicit file is given.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypatch::DetectConfig;
use crate::matcher::MatchConfig;
use crate::roi::RoiConfig;

/// Environment variable naming the fallback config file.
pub const CONFIG_ENV_VAR: &str = "VEINPATCH_CONFIG";

/// Source of the vein probability map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Curvature response of the ROI, blurred and normalized.
    Traditional,
    /// A trained segmentation network loaded from `extractor.model`.
    Unet,
}

/// Source of patch descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    /// Training-free orthonormal projection of the centered patch.
    Raw,
    /// A trained descriptor network loaded from `descriptor.model`.
    Model,
}

/// Every stage setting of the recognition pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Skips ROI extraction for inputs that are already aligned crops.
    pub roi_skip: bool,
    pub roi: RoiConfig,
    /// Curvature scale of the traditional extractor and of label building.
    pub label_sigma_curv: f64,
    /// Softening blur applied after the curvature response.
    pub label_sigma_smooth: f64,
    pub extractor: ExtractorKind,
    pub extractor_model: Option<PathBuf>,
    pub detect: DetectConfig,
    pub descriptor: DescriptorKind,
    pub descriptor_model: Option<PathBuf>,
    pub matcher: MatchConfig,
    /// Root seed; every stochastic choice in a run derives from it.
    pub seed: u64,
    /// Worker threads for batch work; 0 picks the runtime default. Never
    /// affects results, so reports leave it out.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            roi_skip: false,
            roi: RoiConfig::default(),
            label_sigma_curv: 2.0,
            label_sigma_smooth: 1.5,
            extractor: ExtractorKind::Traditional,
            extractor_model: None,
            detect: DetectConfig::default(),
            descriptor: DescriptorKind::Raw,
            descriptor_model: None,
            matcher: MatchConfig::default(),
            seed: 0,
            threads: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("config key '{key}' cannot parse value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Format(format!(
            "config key '{key}' needs a boolean, got '{value}'"
        ))),
    }
}

impl PipelineConfig {
    /// Applies one `key = value` setting. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "roi.skip" => self.roi_skip = parse_bool(key, value)?,
            "roi.window" => self.roi.moment_window = parse_num(key, value)?,
            "roi.gabor_wavelength" => self.roi.gabor_wavelength = parse_num(key, value)?,
            "roi.gabor_sigma" => self.roi.gabor_sigma = parse_num(key, value)?,
            "roi.threshold" => self.roi.edge_threshold = parse_num(key, value)?,
            "roi.min_edge_points" => self.roi.min_edge_points = parse_num(key, value)?,
            "roi.max_rotation" => self.roi.max_rotation_deg = parse_num(key, value)?,
            "roi.out_w" => self.roi.out_width = parse_num(key, value)?,
            "roi.out_h" => self.roi.out_height = parse_num(key, value)?,
            "labels.sigma_curv" => self.label_sigma_curv = parse_num(key, value)?,
            "labels.sigma_smooth" => self.label_sigma_smooth = parse_num(key, value)?,
            "extractor.kind" => {
                self.extractor = match value {
                    "traditional" => ExtractorKind::Traditional,
                    "unet" => ExtractorKind::Unet,
                    _ => {
                        return Err(Error::Format(format!(
                            "extractor.kind must be 'traditional' or 'unet', got '{value}'"
                        )))
                    }
                }
            }
            "extractor.model" => self.extractor_model = Some(PathBuf::from(value)),
            "keypoint.c" => self.detect.suppression_radius = parse_num(key, value)?,
            "keypoint.ks" => self.detect.patch_scale = parse_num(key, value)?,
            "keypoint.sigma" => self.detect.blur_sigma = parse_num(key, value)?,
            "keypoint.threshold" => self.detect.candidate_threshold = parse_num(key, value)?,
            "descriptor.kind" => {
                self.descriptor = match value {
                    "raw" => DescriptorKind::Raw,
                    "model" => DescriptorKind::Model,
                    _ => {
                        return Err(Error::Format(format!(
                            "descriptor.kind must be 'raw' or 'model', got '{value}'"
                        )))
                    }
                }
            }
            "descriptor.model" => self.descriptor_model = Some(PathBuf::from(value)),
            "matcher.td" => self.matcher.distance_threshold = parse_num(key, value)?,
            "matcher.iterations" => self.matcher.ransac_iterations = parse_num(key, value)?,
            "matcher.tolerance" => self.matcher.ransac_tolerance = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            _ => {
                return Err(Error::Format(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    /// Applies settings in order; later pairs override earlier ones.
    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// Checks cross-field consistency and per-stage ranges.
    pub fn validate(&self) -> Result<()> {
        self.detect.validate()?;
        self.matcher.validate()?;
        if !(self.label_sigma_curv > 0.0) || !(self.label_sigma_smooth > 0.0) {
            return Err(Error::InvalidParameter(
                "label sigmas must be positive".into(),
            ));
        }
        if self.extractor == ExtractorKind::Unet && self.extractor_model.is_none() {
            return Err(Error::InvalidParameter(
                "extractor.kind = unet needs extractor.model".into(),
            ));
        }
        if self.descriptor == DescriptorKind::Model && self.descriptor_model.is_none() {
            return Err(Error::InvalidParameter(
                "descriptor.kind = model needs descriptor.model".into(),
            ));
        }
        if self.threads > 512 {
            return Err(Error::InvalidParameter(format!(
                "thread count {} is out of range",
                self.threads
            )));
        }
        Ok(())
    }

    /// Stable fingerprint of every setting that changes per-image
    /// descriptor output; cache entries embed it so a settings change
    /// invalidates them.
    pub fn stage_fingerprint(&self) -> String {
        let model_tag = |p: &Option<PathBuf>| -> String {
            match p {
                Some(path) => match std::fs::read(path) {
                    Ok(bytes) => {
                        use sha2::{Digest, Sha256};
                        let digest: [u8; 32] = Sha256::digest(&bytes).into();
                        hex_of(&digest)
                    }
                    Err(_) => format!("missing:{}", path.display()),
                },
                None => "none".to_string(),
            }
        };
        format!(
            "v1|roi_skip={}|roi={:?},{},{},{},{},{},{},{}|labels={},{}|ex={:?}:{}|kp={},{},{},{}|desc={:?}:{}",
            self.roi_skip,
            self.roi.moment_window,
            self.roi.gabor_wavelength,
            self.roi.gabor_sigma,
            self.roi.edge_threshold,
            self.roi.min_edge_points,
            self.roi.max_rotation_deg,
            self.roi.out_width,
            self.roi.out_height,
            self.label_sigma_curv,
            self.label_sigma_smooth,
            self.extractor,
            model_tag(&self.extractor_model),
            self.detect.suppression_radius,
            self.detect.patch_scale,
            self.detect.blur_sigma,
            self.detect.candidate_threshold,
            self.descriptor,
            model_tag(&self.descriptor_model),
        )
    }
}

/// Lowercase hex of a digest.
pub(crate) fn hex_of(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses flat `key = value` text. Blank lines and `#` comments are
/// skipped; keys must be unique.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "config line {} has no '=': '{}'",
                i + 1,
                line
            )));
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(Error::Format(format!("config line {} has an empty key", i + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Format(format!(
                "config key '{}' appears twice",
                key
            )));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Reads and parses a config file.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

/// Builds the effective configuration.
///
/// Starts from defaults, applies the config file (the explicit one, else
/// the file named by `VEINPATCH_CONFIG` if set), then the command-line
/// overrides, and validates the result.
pub fn effective_config(
    explicit_file: Option<&Path>,
    cli_overrides: &[(String, String)],
) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    let env_file = std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from);
    let file = explicit_file.map(Path::to_path_buf).or(env_file);
    if let Some(f) = file {
        cfg.apply_all(&read_config_file(&f)?)?;
    }
    cfg.apply_all(cli_overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.matcher.distance_threshold, 1.2);
        assert_eq!(cfg.detect.suppression_radius, 4);
        assert_eq!(cfg.detect.patch_scale, 11);
        assert_eq!(cfg.detect.blur_sigma, 1.0);
        assert_eq!(cfg.detect.candidate_threshold, 20);
        assert_eq!(cfg.matcher.ransac_iterations, 500);
        assert_eq!(cfg.matcher.ransac_tolerance, 3.0);
        assert_eq!(cfg.extractor, ExtractorKind::Traditional);
        assert_eq!(cfg.descriptor, DescriptorKind::Raw);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn kv_parser_handles_comments_and_rejects_noise() {
        let text = "# a comment\n\nkeypoint.c = 6\n matcher.td=0.9 \n";
        let pairs = parse_kv(text).unwrap();
        assert_eq!(
            pairs,
            vec![
                ("keypoint.c".to_string(), "6".to_string()),
                ("matcher.td".to_string(), "0.9".to_string())
            ]
        );
        assert!(parse_kv("keypoint.c 6").is_err());
        assert!(parse_kv("= 3").is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
    }

    #[test]
    fn apply_sets_typed_fields_and_rejects_unknown_keys() {
        let mut cfg = PipelineConfig::default();
        cfg.apply("keypoint.c", "7").unwrap();
        cfg.apply("matcher.td", "0.8").unwrap();
        cfg.apply("extractor.kind", "traditional").unwrap();
        cfg.apply("roi.skip", "true").unwrap();
        cfg.apply("seed", "99").unwrap();
        assert_eq!(cfg.detect.suppression_radius, 7);
        assert_eq!(cfg.matcher.distance_threshold, 0.8);
        assert!(cfg.roi_skip);
        assert_eq!(cfg.seed, 99);
        assert!(cfg.apply("keypoint.cc", "7").is_err());
        assert!(cfg.apply("keypoint.c", "x").is_err());
        assert!(cfg.apply("extractor.kind", "magic").is_err());
    }

    #[test]
    fn later_settings_override_earlier_ones() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_all(&[
            ("keypoint.c".into(), "2".into()),
            ("keypoint.c".into(), "9".into()),
        ])
        .unwrap();
        assert_eq!(cfg.detect.suppression_radius, 9);
    }

    #[test]
    fn validation_requires_model_paths_for_model_kinds() {
        let mut cfg = PipelineConfig::default();
        cfg.apply("extractor.kind", "unet").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply("extractor.model", "/tmp/m.vpw").unwrap();
        assert!(cfg.validate().is_ok());
        let mut cfg = PipelineConfig::default();
        cfg.apply("descriptor.kind", "model").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_stage_settings() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        let fa = a.stage_fingerprint();
        assert_eq!(fa, b.stage_fingerprint());
        b.apply("keypoint.ks", "13").unwrap();
        assert_ne!(fa, b.stage_fingerprint());
        let mut c = a.clone();
        c.apply("matcher.td", "0.7").unwrap();
        // Matching settings do not touch per-image descriptors.
        assert_eq!(fa, c.stage_fingerprint());
    }

    #[test]
    fn config_file_roundtrip_applies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("veinpatch.conf");
        std::fs::write(&path, "keypoint.c = 5\nmatcher.td = 1.0\n").unwrap();
        let pairs = read_config_file(&path).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.apply_all(&pairs).unwrap();
        assert_eq!(cfg.detect.suppression_radius, 5);
        assert_eq!(cfg.matcher.distance_threshold, 1.0);
    }
}
