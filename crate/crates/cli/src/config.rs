use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pollen_core::auth::{AuthConfig, DEFAULT_TOLERANCE};
use pollen_core::detector::{DEFAULT_INPUT_EXTENT, DEFAULT_NUM_ANCHORS};
use pollen_core::metrics::DEFAULT_MATCH_IOU;
use pollen_core::synth::SlideSpec;
use pollen_core::train::TrainConfig;

use crate::CliError;

/// Everything a command needs, resolved from the config file and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 means "not set": `POLLEN_THREADS` or 1.
    pub threads: usize,
    pub paths: Paths,
    pub data: DataSection,
    pub slide: SlideSpec,
    pub detector: DetectorSection,
    pub train: TrainConfig,
    pub auth: AuthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 0,
            paths: Paths::default(),
            data: DataSection::default(),
            slide: SlideSpec::default(),
            detector: DetectorSection::default(),
            train: TrainConfig::default(),
            auth: AuthSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub run_dir: PathBuf,
    pub weights: PathBuf,
    pub detections: PathBuf,
    pub report: PathBuf,
    pub auth_model: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data/train".into(),
            run_dir: "runs/detector".into(),
            weights: "runs/detector/final.plnw".into(),
            detections: "runs/detections.txt".into(),
            report: "runs/report.json".into(),
            auth_model: "runs/auth.plna".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_images: usize,
    /// Multiplies every grain count range of the slide spec.
    pub count_scale: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_images: 200,
            count_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub input_extent: usize,
    pub anchors: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Cells per side used to count true negatives.
    pub tn_grid: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            input_extent: DEFAULT_INPUT_EXTENT,
            anchors: DEFAULT_NUM_ANCHORS,
            conf_threshold: 0.5,
            nms_iou: 0.45,
            match_iou: DEFAULT_MATCH_IOU,
            tn_grid: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuthSection {
    #[serde(flatten)]
    pub model: AuthConfig,
    pub frames: usize,
    pub samples_per_profile: usize,
    pub dilution_tolerance: f64,
}

impl Default for AuthSection {
    fn default() -> Self {
        AuthSection {
            model: AuthConfig::default(),
            frames: 10,
            samples_per_profile: 5,
            dilution_tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: pollen_core::Error| CliError::Usage(e.to_string());
        self.slide.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.auth.model.validate().map_err(usage)?;
        let d = &self.detector;
        if d.input_extent == 0 || !d.input_extent.is_multiple_of(32) {
            return Err(CliError::Usage(format!(
                "detector.input_extent {} must be a positive multiple of 32",
                d.input_extent
            )));
        }
        if d.anchors == 0 {
            return Err(CliError::Usage("detector.anchors must be positive".into()));
        }
        for (name, v) in [
            ("conf_threshold", d.conf_threshold),
            ("nms_iou", d.nms_iou),
            ("match_iou", d.match_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Usage(format!(
                    "detector.{name} {v} must lie in [0, 1]"
                )));
            }
        }
        if !(self.data.count_scale >= 0.0 && self.data.count_scale.is_finite()) {
            return Err(CliError::Usage(
                "data.count_scale must be non-negative".into(),
            ));
        }
        if self.auth.frames == 0 || self.auth.samples_per_profile == 0 {
            return Err(CliError::Usage(
                "auth.frames and auth.samples_per_profile must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_config_parses_back() {
        let c = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig =
            toml::from_str("seed = 3\n[train]\nepochs = 2\n[train.optimizer]\nlr = 0.01\n")
                .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.optimizer.lr, 0.01);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
    }
}
