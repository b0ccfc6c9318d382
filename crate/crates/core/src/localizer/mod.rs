//! Class-agnostic product localizer: backbone → pyramid → shared RPN →
//! proposals → RoI pooling → box regressor.

pub mod proposals;
pub mod roi;
pub mod rpn;
pub mod train;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{by_score_desc, decode_deltas, generate_anchors, greedy_nms_sorted, AnchorSpec, BBox, ScoredBox};
use crate::nn::{Param, Parameters};
use crate::pyramid::{
    backbone_backward, backbone_forward, Encoder, EncoderConfig, FeaturePyramid, Fpn, PyramidConfig, FIRST_LEVEL, LEVELS,
};
use crate::tensor::{Scalar, Tensor};

pub use proposals::{propose, LevelProposals, Proposal, ProposalConfig};
pub use roi::{roi_head_loss, roi_level, roi_pool, RoiHead, RoiHeadConfig, RoiLoss};
pub use rpn::{rpn_forward, rpn_loss, AnchorSampling, RpnHead, RpnLoss, RpnOutput};
pub use train::{train_detector, DetectionSample, DetectorTraining, StepLog, TrainSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: EncoderConfig,
    pub pyramid: PyramidConfig,
    pub roi: RoiHeadConfig,
}

impl DetectorConfig {
    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            backbone: EncoderConfig { in_channels: 3, widths: [8, 16, 32, 64, 64] },
            pyramid: PyramidConfig { d: 32 },
            roi: RoiHeadConfig { pool_size: 7, hidden: 128 },
        }
    }
}

/// Inference-time thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub proposals: usize,
    pub proposal_nms: f64,
    pub detection_nms: f64,
    pub score_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { proposals: 300, proposal_nms: 0.7, detection_nms: 0.5, score_threshold: 0.05 }
    }
}

/// Training-time target assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetConfig {
    pub anchors: AnchorSampling,
    pub train_proposals: usize,
    pub proposal_nms: f64,
    /// Matched RoIs regressed per image.
    pub roi_batch: usize,
    pub roi_beta: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { anchors: AnchorSampling::default(), train_proposals: 1000, proposal_nms: 0.7, roi_batch: 64, roi_beta: 1.0 / 9.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Detector<T> {
    pub config: DetectorConfig,
    pub backbone: Encoder<T>,
    pub fpn: Fpn<T>,
    /// The single RPN parameter set applied at every level.
    pub rpn: RpnHead<T>,
    pub roi_head: RoiHead<T>,
}

/// Per-image loss terms from one forward/backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub rpn: f64,
    pub roi: f64,
    pub roi_matched: usize,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.rpn + self.roi
    }
}

/// Anchors of every level for a given input size, index 0 = `P2`.
pub fn pyramid_anchors(height: usize, width: usize) -> Vec<Vec<BBox>> {
    (0..LEVELS as u32)
        .map(|i| {
            let level = FIRST_LEVEL + i;
            let spec = AnchorSpec::for_level(level).expect("levels 2..=5");
            let s = 1usize << level;
            generate_anchors(&spec, height / s, width / s)
        })
        .collect()
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Encoder::new(config.backbone.clone(), &mut rng);
        let w = config.backbone.widths;
        let fpn = Fpn::new(config.pyramid, [w[1], w[2], w[3], w[4]], &mut rng)?;
        let rpn = RpnHead::new(config.pyramid.d, &mut rng);
        let roi_head = RoiHead::new(config.pyramid.d, config.roi, &mut rng);
        Ok(Self { config, backbone, fpn, rpn, roi_head })
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            fpn: self.fpn.cast(),
            rpn: self.rpn.cast(),
            roi_head: self.roi_head.cast(),
        }
    }

    pub fn pyramid(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let (c, _) = backbone_forward(image, &self.backbone)?;
        self.fpn.forward(&c).map(|(p, _)| p)
    }

    fn pool_batch(
        &self,
        pyramid: &FeaturePyramid<T>,
        boxes: &[BBox],
        image_size: (usize, usize),
    ) -> Result<(Vec<T>, Vec<roi::PooledRoi<T>>)> {
        let size = self.config.roi.pool_size;
        let mut flat = Vec::with_capacity(boxes.len() * self.roi_head.input_len());
        let mut pooled = Vec::with_capacity(boxes.len());
        for b in boxes {
            let r = roi_pool(pyramid, b, size, image_size)?;
            flat.extend_from_slice(&r.values);
            pooled.push(r);
        }
        Ok((flat, pooled))
    }

    /// One training forward pass; accumulates gradients when `backward`.
    ///
    /// With `fixed_rois` the RoI head is trained on exactly those boxes
    /// instead of sampled proposals, which keeps the loss a smooth function
    /// of the weights (used by gradient checks).
    pub fn train_step(
        &mut self,
        image: &Tensor<T>,
        gts: &[BBox],
        targets: &TargetConfig,
        rng: &mut impl Rng,
        fixed_rois: Option<&[BBox]>,
        backward: bool,
    ) -> Result<StepLoss> {
        if gts.is_empty() {
            return Err(Error::invalid("training image has no ground-truth boxes"));
        }
        let image_size = (image.width(), image.height());
        let (c, bb_cache) = backbone_forward(image, &self.backbone)?;
        let (pyr, fpn_cache) = self.fpn.forward(&c)?;
        let anchors = pyramid_anchors(image.height(), image.width());
        let mut outs = Vec::with_capacity(LEVELS);
        let mut rpn_caches = Vec::with_capacity(LEVELS);
        for p in &pyr.levels {
            let (o, cache) = self.rpn.forward(p)?;
            outs.push(o);
            rpn_caches.push(cache);
        }
        let rpn = rpn_loss(&outs, &anchors, gts, &targets.anchors, rng)?;

        let rois: Vec<BBox> = match fixed_rois {
            Some(r) => r.to_vec(),
            None => {
                let levels: Vec<LevelProposals<'_, T>> = outs
                    .iter()
                    .zip(&anchors)
                    .enumerate()
                    .map(|(i, (o, a))| LevelProposals { level: FIRST_LEVEL + i as u32, output: o, anchors: a })
                    .collect();
                let props = propose(&levels, image_size, &ProposalConfig::new(targets.train_proposals, targets.proposal_nms));
                let mut cand: Vec<BBox> = props
                    .iter()
                    .map(|p| p.bbox)
                    .chain(gts.iter().copied())
                    .filter(|b| roi::match_proposal(b, gts, roi::ROI_MATCH_IOU).is_some())
                    .collect();
                cand.shuffle(rng);
                cand.truncate(targets.roi_batch);
                cand
            }
        };
        let (flat, pooled) = self.pool_batch(&pyr, &rois, image_size)?;
        let (pred, head_cache) = self.roi_head.forward(flat, rois.len());
        let pred64: Vec<[f64; 4]> = pred.chunks(4).map(|r| [r[0], r[1], r[2], r[3]].map(|v| v.as_f64())).collect();
        let roi = roi_head_loss(&pred64, &rois, gts, targets.roi_beta);
        let loss = StepLoss { rpn: rpn.total, roi: roi.loss, roi_matched: roi.matched };
        if !backward {
            return Ok(loss);
        }

        let dpred: Vec<T> = roi.grads.iter().flat_map(|g| g.map(T::from_f64)).collect();
        let mut dpyr: [Tensor<T>; LEVELS] = pyr.levels.clone().map(|l| Tensor::zeros(l.channels(), l.height(), l.width()));
        if !rois.is_empty() {
            let dflat = self.roi_head.backward(&head_cache, &dpred);
            for (r, g) in pooled.iter().zip(dflat.chunks(self.roi_head.input_len())) {
                roi::roi_pool_backward(r, g, &mut dpyr);
            }
        }
        for (l, ((cache, (dl, dd)), dp)) in rpn_caches.iter().zip(&rpn.grads).zip(dpyr.iter_mut()).enumerate() {
            let g = self.rpn.backward(cache, dl, dd);
            debug_assert_eq!(g.shape(), dp.shape(), "level {l}");
            dp.add_assign(&g);
        }
        let dc = self.fpn.backward(&fpn_cache, dpyr);
        backbone_backward(&mut self.backbone, &bb_cache, dc);
        Ok(loss)
    }

    /// Class-agnostic detections, best first.
    pub fn detect(&self, image: &Tensor<T>, max_dets: usize, cfg: &InferenceConfig) -> Result<Vec<ScoredBox>> {
        let order: [u32; LEVELS] = std::array::from_fn(|i| FIRST_LEVEL + i as u32);
        self.detect_with_level_order(image, max_dets, cfg, order)
    }

    /// [`Detector::detect`] with the per-level RPN passes visited in `order`.
    pub fn detect_with_level_order(
        &self,
        image: &Tensor<T>,
        max_dets: usize,
        cfg: &InferenceConfig,
        order: [u32; LEVELS],
    ) -> Result<Vec<ScoredBox>> {
        let image_size = (image.width(), image.height());
        let pyr = self.pyramid(image)?;
        let anchors = pyramid_anchors(image.height(), image.width());
        let mut outs: Vec<(u32, RpnOutput<T>)> = Vec::with_capacity(LEVELS);
        for &level in &order {
            let idx = (level - FIRST_LEVEL) as usize;
            outs.push((level, rpn_forward(&pyr.levels[idx], &self.rpn)?));
        }
        let levels: Vec<LevelProposals<'_, T>> = outs
            .iter()
            .map(|(level, o)| LevelProposals { level: *level, output: o, anchors: &anchors[(*level - FIRST_LEVEL) as usize] })
            .collect();
        let props = propose(&levels, image_size, &ProposalConfig::new(cfg.proposals.max(max_dets), cfg.proposal_nms));
        if props.is_empty() || max_dets == 0 {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
        let (flat, _) = self.pool_batch(&pyr, &boxes, image_size)?;
        let (pred, _) = self.roi_head.forward(flat, boxes.len());
        let mut refined: Vec<ScoredBox> = Vec::with_capacity(props.len());
        for (p, d) in props.iter().zip(pred.chunks(4)) {
            let deltas = [d[0], d[1], d[2], d[3]].map(|v| v.as_f64());
            if let Some(b) = decode_deltas(&p.bbox, deltas).clip(image_size.0 as f64, image_size.1 as f64) {
                refined.push(ScoredBox { bbox: b, score: p.score });
            }
        }
        // proposals arrive sorted; a stable sort keeps that order for ties
        refined.sort_by(|a, b| by_score_desc(a.score, b.score));
        let bxs: Vec<BBox> = refined.iter().map(|d| d.bbox).collect();
        let kept = greedy_nms_sorted(&bxs, cfg.detection_nms, usize::MAX);
        Ok(kept
            .into_iter()
            .map(|k| refined[k])
            .filter(|d| d.score >= cfg.score_threshold)
            .take(max_dets)
            .collect())
    }
}

impl<T: Scalar> Parameters<T> for Detector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.backbone.visit(&crate::nn::join(prefix, "backbone"), f);
        self.fpn.visit(&crate::nn::join(prefix, "fpn"), f);
        self.rpn.visit(&crate::nn::join(prefix, "rpn"), f);
        self.roi_head.visit(&crate::nn::join(prefix, "roi_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.backbone.visit_mut(&crate::nn::join(prefix, "backbone"), f);
        self.fpn.visit_mut(&crate::nn::join(prefix, "fpn"), f);
        self.rpn.visit_mut(&crate::nn::join(prefix, "rpn"), f);
        self.roi_head.visit_mut(&crate::nn::join(prefix, "roi_head"), f);
    }
}
