//! Region-of-interest max pooling over the pyramid and the box-refinement
//! head (two fully connected layers plus a 4-output regressor; there is no
//! classification branch).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox};
use crate::localizer::rpn::{smooth_l1, smooth_l1_grad};
use crate::nn::{join, relu_backward_slice, relu_slice, Linear, Param, Parameters};
use crate::pyramid::{level_stride, FeaturePyramid, FIRST_LEVEL, LEVELS};
use crate::tensor::{Scalar, Tensor};

/// Pyramid level a box is pooled from: `clamp(⌊2 + log2(√(wh)/32)⌋, 2, 5)`,
/// the same size-to-level mapping the anchor scales use.
pub fn roi_level(b: &BBox) -> u32 {
    let s = b.area().sqrt();
    let k = (2.0 + (s / 32.0).log2()).floor();
    k.clamp(FIRST_LEVEL as f64, (FIRST_LEVEL as usize + LEVELS - 1) as f64) as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledRoi<T> {
    pub level: u32,
    /// `d × S × S`, channel-major.
    pub values: Vec<T>,
    /// Offset into the level tensor that supplied each value.
    pub argmax: Vec<usize>,
}

fn cell_range(start: f64, end: f64, i: usize, s: usize, limit: usize) -> (usize, usize) {
    let bin = (end - start) / s as f64;
    let lo = (start + i as f64 * bin).floor().max(0.0) as usize;
    let lo = lo.min(limit - 1);
    let hi = ((start + (i + 1) as f64 * bin).ceil() as usize).clamp(lo + 1, limit);
    (lo, hi)
}

/// Cell-wise max over the projection of `bbox` onto its assigned level.
///
/// `image_size` is `(width, height)` in pixels; the box is clipped to the
/// image first and rejected if nothing remains.
pub fn roi_pool<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    bbox: &BBox,
    size: usize,
    image_size: (usize, usize),
) -> Result<PooledRoi<T>> {
    let clipped = bbox
        .clip(image_size.0 as f64, image_size.1 as f64)
        .ok_or_else(|| Error::BoxOutsideImage(format!("{:?}", bbox.corners())))?;
    let level = roi_level(&clipped);
    let fmap = pyramid.level(level);
    let stride = level_stride(level) as f64;
    let (d, h, w) = fmap.shape();
    let (fx1, fy1, fx2, fy2) = (clipped.x1() / stride, clipped.y1() / stride, clipped.x2() / stride, clipped.y2() / stride);
    let mut values = Vec::with_capacity(d * size * size);
    let mut argmax = Vec::with_capacity(d * size * size);
    let rows: Vec<(usize, usize)> = (0..size).map(|i| cell_range(fy1, fy2, i, size, h)).collect();
    let cols: Vec<(usize, usize)> = (0..size).map(|j| cell_range(fx1, fx2, j, size, w)).collect();
    let data = fmap.data();
    for c in 0..d {
        let base = c * h * w;
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let off = base + y * w + x;
                        if data[off] > data[best] {
                            best = off;
                        }
                    }
                }
                values.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PooledRoi { level, values, argmax })
}

/// Scatters the pooled-value gradient back onto the pyramid gradient.
pub fn roi_pool_backward<T: Scalar>(roi: &PooledRoi<T>, grad: &[T], dpyramid: &mut [Tensor<T>; LEVELS]) {
    let target = dpyramid[(roi.level - FIRST_LEVEL) as usize].data_mut();
    for (&off, &g) in roi.argmax.iter().zip(grad) {
        target[off] += g;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiHeadConfig {
    pub pool_size: usize,
    pub hidden: usize,
}

impl Default for RoiHeadConfig {
    fn default() -> Self {
        Self { pool_size: 7, hidden: 256 }
    }
}

#[derive(Clone, Debug)]
pub struct RoiHead<T> {
    pub config: RoiHeadConfig,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub regressor: Linear<T>,
}

pub struct RoiHeadCache<T> {
    x: Vec<T>,
    h1: Vec<T>,
    h2: Vec<T>,
    n: usize,
}

impl<T: Scalar> RoiHead<T> {
    pub fn new(d: usize, config: RoiHeadConfig, rng: &mut impl Rng) -> Self {
        let inputs = d * config.pool_size * config.pool_size;
        Self {
            config,
            fc1: Linear::new(inputs, config.hidden, 2f64.sqrt(), rng),
            fc2: Linear::new(config.hidden, config.hidden, 2f64.sqrt(), rng),
            regressor: Linear::new(config.hidden, 4, 0.01, rng),
        }
    }

    pub fn input_len(&self) -> usize {
        self.fc1.in_features
    }

    /// `x` holds `n` flattened pooled RoIs; returns `n × 4` deltas.
    pub fn forward(&self, x: Vec<T>, n: usize) -> (Vec<T>, RoiHeadCache<T>) {
        let mut h1 = self.fc1.forward(&x, n);
        relu_slice(&mut h1);
        let mut h2 = self.fc2.forward(&h1, n);
        relu_slice(&mut h2);
        let out = self.regressor.forward(&h2, n);
        (out, RoiHeadCache { x, h1, h2, n })
    }

    pub fn backward(&mut self, cache: &RoiHeadCache<T>, dout: &[T]) -> Vec<T> {
        let mut dh2 = self.regressor.backward(&cache.h2, cache.n, dout);
        relu_backward_slice(&cache.h2, &mut dh2);
        let mut dh1 = self.fc2.backward(&cache.h1, cache.n, &dh2);
        relu_backward_slice(&cache.h1, &mut dh1);
        self.fc1.backward(&cache.x, cache.n, &dh1)
    }

    pub fn cast<U: Scalar>(&self) -> RoiHead<U> {
        RoiHead { config: self.config, fc1: self.fc1.cast(), fc2: self.fc2.cast(), regressor: self.regressor.cast() }
    }
}

impl<T: Scalar> Parameters<T> for RoiHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.regressor.visit(&join(prefix, "regressor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.regressor.visit_mut(&join(prefix, "regressor"), f);
    }
}

/// Regression target for a proposal: the best gt with IoU ≥ `min_iou`.
pub fn match_proposal(proposal: &BBox, gts: &[BBox], min_iou: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let v = iou(proposal, gt);
        if v >= min_iou && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((g, v));
        }
    }
    best.map(|(g, _)| g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiLoss {
    pub loss: f64,
    pub matched: usize,
    /// Gradient with respect to each predicted delta row.
    pub grads: Vec<[f64; 4]>,
}

pub const ROI_MATCH_IOU: f64 = 0.5;

/// Smooth-L1 between predicted and target deltas over proposals matched to
/// a gt (IoU ≥ 0.5), averaged over the matched count. Unmatched proposals
/// contribute nothing.
pub fn roi_head_loss(pred: &[[f64; 4]], proposals: &[BBox], gts: &[BBox], beta: f64) -> RoiLoss {
    assert_eq!(pred.len(), proposals.len(), "one prediction per proposal");
    let matches: Vec<Option<usize>> = proposals.iter().map(|p| match_proposal(p, gts, ROI_MATCH_IOU)).collect();
    let matched = matches.iter().filter(|m| m.is_some()).count();
    let mut grads = vec![[0.0; 4]; pred.len()];
    if matched == 0 {
        return RoiLoss { loss: 0.0, matched, grads };
    }
    let n = matched as f64;
    let mut loss = 0.0;
    for (i, m) in matches.iter().enumerate() {
        let Some(g) = m else { continue };
        let target = encode_deltas(&proposals[i], &gts[*g]);
        for j in 0..4 {
            let diff = pred[i][j] - target[j];
            loss += smooth_l1(diff, beta);
            grads[i][j] = smooth_l1_grad(diff, beta) / n;
        }
    }
    RoiLoss { loss: loss / n, matched, grads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn constant_pyramid(d: usize, side: usize, value: f64) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: [
                Tensor::filled(d, side / 4, side / 4, value),
                Tensor::filled(d, side / 8, side / 8, value),
                Tensor::filled(d, side / 16, side / 16, value),
                Tensor::filled(d, side / 32, side / 32, value),
            ],
        }
    }

    #[test]
    fn level_assignment_follows_anchor_scales() {
        assert_eq!(roi_level(&b(0., 0., 32., 32.)), 2);
        assert_eq!(roi_level(&b(0., 0., 64., 64.)), 3);
        assert_eq!(roi_level(&b(0., 0., 128., 128.)), 4);
        assert_eq!(roi_level(&b(0., 0., 256., 256.)), 5);
        assert_eq!(roi_level(&b(0., 0., 4., 4.)), 2);
        assert_eq!(roi_level(&b(0., 0., 900., 900.)), 5);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let p = constant_pyramid(3, 256, 2.5);
        let r = roi_pool(&p, &b(10., 20., 50., 90.), 7, (256, 256)).unwrap();
        assert_eq!(r.values.len(), 3 * 49);
        assert!(r.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn whole_map_single_cell_is_global_max() {
        let mut p = constant_pyramid(2, 256, 0.0);
        // the full image is 256x256 → level 5 (8x8 map)
        for (i, v) in p.levels[3].data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64;
        }
        let r = roi_pool(&p, &b(0., 0., 256., 256.), 1, (256, 256)).unwrap();
        assert_eq!(r.level, 5);
        let lvl = &p.levels[3];
        for c in 0..2 {
            let max = lvl.plane(c).iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(r.values[c], max);
        }
        let small = roi_pool(&p, &b(0., 0., 32., 32.), 7, (256, 256)).unwrap();
        assert_eq!(small.level, 2);
    }

    #[test]
    fn outside_box_is_rejected() {
        let p = constant_pyramid(1, 64, 1.0);
        let r = roi_pool(&p, &b(100., 100., 120., 120.), 7, (64, 64));
        assert!(matches!(r, Err(Error::BoxOutsideImage(_))));
    }

    #[test]
    fn roi_loss_examples() {
        let gt = b(0., 0., 32., 32.);
        let exact = roi_head_loss(&[[0.0; 4]], &[gt], &[gt], 1.0 / 9.0);
        assert_eq!(exact.loss, 0.0);
        assert_eq!(exact.matched, 1);
        let none = roi_head_loss(&[[0.3; 4]], &[b(100., 100., 120., 120.)], &[gt], 1.0 / 9.0);
        assert_eq!((none.loss, none.matched), (0.0, 0));
        // proposal shifted 4 px right: target dx = -4/32 = -0.125
        let p = b(4., 0., 36., 32.);
        let one = roi_head_loss(&[[0.0, 0.05, 0.0, 0.0]], &[p], &[gt], 1.0 / 9.0);
        let expect = smooth_l1(0.125, 1.0 / 9.0) + smooth_l1(0.05, 1.0 / 9.0);
        // 0.125 ≥ 1/9 → linear branch; 0.05 < 1/9 → quadratic branch
        let hand = (0.125 - 1.0 / 18.0) + 0.5 * 0.05 * 0.05 * 9.0;
        assert!((expect - hand).abs() < 1e-15);
        assert!((one.loss - hand).abs() < 1e-12);
    }
}
