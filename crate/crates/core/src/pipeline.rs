//! End-to-end recognition: detect packages, crop each detection with a
//! small margin, embed the crop and look it up in the gallery.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::evaluation::LabeledDetection;
use crate::gallery::{self, GalleryIndex};
use crate::geometry::BBox;
use crate::imageio::rgb_to_tensor;
use crate::localizer::{Detector, InferenceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub detector_weights: PathBuf,
    pub embedder_weights: PathBuf,
    pub gallery_index: PathBuf,
    pub max_dets: usize,
    pub score_threshold: f64,
    /// Fraction of each box side added on every side before cropping.
    pub crop_padding: f64,
    /// Length of the ranked label list attached to each detection.
    pub topk: usize,
    /// Accept a gallery whose embedder fingerprint differs from the weights.
    pub allow_stale_gallery: bool,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector_weights: "weights/detector.safetensors".into(),
            embedder_weights: "weights/embedder.safetensors".into(),
            gallery_index: "weights/gallery.idx".into(),
            max_dets: 100,
            score_threshold: 0.5,
            crop_padding: 0.05,
            topk: 50,
            allow_stale_gallery: false,
            out_dir: "out".into(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.crop_padding) {
            return Err(Error::invalid("crop_padding must lie in [0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::invalid("score_threshold must lie in [0, 1]"));
        }
        if self.max_dets == 0 {
            return Err(Error::invalid("max_dets must be positive"));
        }
        Ok(())
    }
}

/// The pixel region of `bbox` grown by `padding`, clamped to the image.
pub fn crop_region(bbox: &BBox, padding: f64, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let b = bbox.pad(padding).clip(width as f64, height as f64)?;
    let x0 = b.x1().floor() as u32;
    let y0 = b.y1().floor() as u32;
    let x1 = (b.x2().ceil() as u32).min(width);
    let y1 = (b.y2().ceil() as u32).min(height);
    (x1 > x0 && y1 > y0).then(|| (x0, y0, x1 - x0, y1 - y0))
}

pub fn crop_patch(img: &RgbImage, bbox: &BBox, padding: f64) -> Option<RgbImage> {
    let (x, y, w, h) = crop_region(bbox, padding, img.width(), img.height())?;
    Some(image::imageops::crop_imm(img, x, y, w, h).to_image())
}

pub struct Recognizer {
    pub detector: Detector<f32>,
    pub embedder: Embedder<f32>,
    pub index: GalleryIndex,
    pub config: PipelineConfig,
}

impl Recognizer {
    /// Checks that `index` was built with the weights fingerprinted as
    /// `embedder_fingerprint`, unless the config allows a stale gallery.
    pub fn new(
        detector: Detector<f32>,
        embedder: Embedder<f32>,
        embedder_fingerprint: &str,
        index: GalleryIndex,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        match index.verify_fingerprint(embedder_fingerprint) {
            Err(e) if !config.allow_stale_gallery => return Err(e),
            Err(e) => log::warn!("{e}; continuing because stale galleries are allowed"),
            Ok(()) => {}
        }
        if index.dim() != embedder.dim() {
            return Err(Error::Shape(format!("gallery dim {} but embedder dim {}", index.dim(), embedder.dim())));
        }
        Ok(Self { detector, embedder, index, config })
    }

    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let (detector, _) = archive::load::<Detector<f32>>(&config.detector_weights)?;
        let (embedder, fp) = archive::load::<Embedder<f32>>(&config.embedder_weights)?;
        let index = gallery::load_index(&config.gallery_index)?;
        Self::new(detector, embedder, &fp, index, config.clone())
    }

    pub fn recognize(&self, img: &RgbImage) -> Result<Vec<LabeledDetection>> {
        let cfg = InferenceConfig { score_threshold: self.config.score_threshold, ..InferenceConfig::default() };
        let dets = self.detector.detect(&rgb_to_tensor(img), self.config.max_dets, &cfg)?;
        let mut out = Vec::with_capacity(dets.len());
        for d in dets {
            let Some(patch) = crop_patch(img, &d.bbox, self.config.crop_padding) else {
                continue;
            };
            let e = self.embedder.encode(&patch)?;
            let (label, distance) = gallery::classify(&e, &self.index);
            let topk = gallery::topk(&e, &self.index, self.config.topk).into_iter().map(|(l, _)| l).collect();
            out.push(LabeledDetection { bbox: d.bbox, score: d.score, label: Some(label), distance: Some(distance), topk });
        }
        Ok(out)
    }
}

pub fn run_pipeline(image: &RgbImage, config: &PipelineConfig) -> Result<Vec<LabeledDetection>> {
    Recognizer::load(config)?.recognize(image)
}

/// Recognizes every image listed in an annotation file, in file order.
pub fn recognize_annotated(
    recognizer: &Recognizer,
    annotations: &Path,
) -> Result<Vec<crate::evaluation::SceneDetections>> {
    crate::dataset::read_annotations(annotations)?
        .into_iter()
        .map(|a| {
            let img = crate::imageio::load_rgb(&crate::dataset::resolve_image(annotations, &a.image))?;
            Ok(crate::evaluation::SceneDetections { image: a.image, boxes: recognizer.recognize(&img)? })
        })
        .collect()
}
