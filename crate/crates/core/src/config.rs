//! Flat `key = value` configuration (TOML without tables). Every key is
//! optional; unknown keys and nested tables are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedder::augment::{derive_seed, AugmentParams};
use crate::embedder::train::EmbedderSchedule;
use crate::error::{Error, Result};
use crate::localizer::TrainSchedule;
use crate::pipeline::PipelineConfig;
use crate::synthetic::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out: PathBuf,

    pub data_dir: Option<PathBuf>,
    pub n_scenes: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub classes: usize,
    pub rows: u32,
    pub cols: u32,
    pub image_size: u32,
    pub query_size: u32,
    pub blank_prob: f64,
    pub jitter: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub illumination_min: f64,
    pub illumination_max: f64,
    pub noise: f64,

    pub detector_weights: Option<PathBuf>,
    pub detector_momentum: f64,
    pub detector_weight_decay: f64,
    pub detector_batch_size: usize,
    pub detector_warmup_factor: f64,
    pub detector_max_lr: f64,
    pub detector_phase1_epochs: usize,
    pub detector_phase2_lr: f64,
    pub detector_phase2_epochs: usize,
    pub detector_train_proposals: usize,

    pub embedder_weights: Option<PathBuf>,
    pub embedder_epochs: usize,
    pub embedder_lr: f64,
    pub margin: f64,
    pub embedder_batch_size: usize,
    pub anchors_per_class: usize,

    pub blur_sigma_min: f32,
    pub blur_sigma_max: f32,
    pub crop_fraction_min: f64,
    pub crop_fraction_max: f64,
    pub brightness_min: f32,
    pub brightness_max: f32,
    pub saturation_min: f32,
    pub saturation_max: f32,

    pub gallery_index: Option<PathBuf>,
    pub n_aug: usize,

    pub max_dets: usize,
    pub score_threshold: f64,
    pub crop_padding: f64,
    pub topk: usize,
    pub allow_stale_gallery: bool,
}

impl Default for Config {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let det = TrainSchedule::desk();
        let emb = EmbedderSchedule::desk();
        let aug = AugmentParams::default();
        let pipe = PipelineConfig::default();
        Self {
            seed: spec.seed,
            out: "out".into(),
            data_dir: None,
            n_scenes: 240,
            split_train: 200.0 / 240.0,
            split_val: 20.0 / 240.0,
            split_test: 20.0 / 240.0,
            classes: spec.classes,
            rows: spec.rows,
            cols: spec.cols,
            image_size: spec.image_size,
            query_size: spec.query_size,
            blank_prob: spec.blank_prob,
            jitter: spec.jitter,
            scale_min: spec.scale.0,
            scale_max: spec.scale.1,
            aspect_min: spec.aspect.0,
            aspect_max: spec.aspect.1,
            illumination_min: spec.illumination.0,
            illumination_max: spec.illumination.1,
            noise: spec.noise,
            detector_weights: None,
            detector_momentum: det.momentum,
            detector_weight_decay: det.weight_decay,
            detector_batch_size: det.batch_size,
            detector_warmup_factor: det.warmup_factor,
            detector_max_lr: det.max_lr,
            detector_phase1_epochs: det.phase1_epochs,
            detector_phase2_lr: det.phase2_lr,
            detector_phase2_epochs: det.phase2_epochs,
            detector_train_proposals: det.train_proposals,
            embedder_weights: None,
            embedder_epochs: emb.epochs,
            embedder_lr: emb.lr,
            margin: emb.margin,
            embedder_batch_size: emb.batch_size,
            anchors_per_class: emb.anchors_per_class,
            blur_sigma_min: aug.blur_sigma.0,
            blur_sigma_max: aug.blur_sigma.1,
            crop_fraction_min: aug.crop_fraction.0,
            crop_fraction_max: aug.crop_fraction.1,
            brightness_min: aug.brightness.0,
            brightness_max: aug.brightness.1,
            saturation_min: aug.saturation.0,
            saturation_max: aug.saturation.1,
            gallery_index: None,
            n_aug: 10,
            max_dets: pipe.max_dets,
            score_threshold: pipe.score_threshold,
            crop_padding: pipe.crop_padding,
            topk: pipe.topk,
            allow_stale_gallery: pipe.allow_stale_gallery,
        }
    }
}

/// Stream tags mixed into the global seed so each stage draws independently.
pub mod stream {
    pub const DETECTOR_INIT: u64 = 1;
    pub const DETECTOR_TRAIN: u64 = 2;
    pub const EMBEDDER_INIT: u64 = 3;
    pub const EMBEDDER_TRAIN: u64 = 4;
    pub const GALLERY: u64 = 5;
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stage_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, &[stream])
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn detector_weights(&self) -> PathBuf {
        self.detector_weights.clone().unwrap_or_else(|| self.out.join("detector.safetensors"))
    }

    pub fn embedder_weights(&self) -> PathBuf {
        self.embedder_weights.clone().unwrap_or_else(|| self.out.join("embedder.safetensors"))
    }

    pub fn gallery_index(&self) -> PathBuf {
        self.gallery_index.clone().unwrap_or_else(|| self.out.join("gallery.idx"))
    }

    pub fn splits(&self) -> [f64; 3] {
        [self.split_train, self.split_val, self.split_test]
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            rows: self.rows,
            cols: self.cols,
            classes: self.classes,
            blank_prob: self.blank_prob,
            jitter: self.jitter,
            scale: (self.scale_min, self.scale_max),
            aspect: (self.aspect_min, self.aspect_max),
            illumination: (self.illumination_min, self.illumination_max),
            noise: self.noise,
            query_size: self.query_size,
            seed: self.seed,
        }
    }

    pub fn detector_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            momentum: self.detector_momentum,
            weight_decay: self.detector_weight_decay,
            batch_size: self.detector_batch_size,
            warmup_factor: self.detector_warmup_factor,
            max_lr: self.detector_max_lr,
            phase1_epochs: self.detector_phase1_epochs,
            phase2_lr: self.detector_phase2_lr,
            phase2_epochs: self.detector_phase2_epochs,
            train_proposals: self.detector_train_proposals,
        }
    }

    pub fn embedder_schedule(&self) -> EmbedderSchedule {
        EmbedderSchedule {
            epochs: self.embedder_epochs,
            lr: self.embedder_lr,
            margin: self.margin,
            batch_size: self.embedder_batch_size,
            anchors_per_class: self.anchors_per_class,
        }
    }

    pub fn augment(&self) -> AugmentParams {
        AugmentParams {
            blur_sigma: (self.blur_sigma_min, self.blur_sigma_max),
            crop_fraction: (self.crop_fraction_min, self.crop_fraction_max),
            brightness: (self.brightness_min, self.brightness_max),
            saturation: (self.saturation_min, self.saturation_max),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            detector_weights: self.detector_weights(),
            embedder_weights: self.embedder_weights(),
            gallery_index: self.gallery_index(),
            max_dets: self.max_dets,
            score_threshold: self.score_threshold,
            crop_padding: self.crop_padding,
            topk: self.topk,
            allow_stale_gallery: self.allow_stale_gallery,
            out_dir: self.out.clone(),
        }
    }
}
