//! Shared region proposal head and its anchor-matching loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou, BBox, ANCHORS_PER_CELL};
use crate::nn::{join, relu, relu_backward, sigmoid, Conv2d, ConvCache, Param, Parameters};
use crate::tensor::{Scalar, Tensor};

/// 3×3 sliding-window convolution followed by the object classifier
/// (1×1, one logit per anchor) and object regressor (1×1, four deltas per
/// anchor). A single instance serves every pyramid level.
#[derive(Clone, Debug)]
pub struct RpnHead<T> {
    pub conv: Conv2d<T>,
    pub cls: Conv2d<T>,
    pub reg: Conv2d<T>,
}

/// Per-level head output. Channel `a` of `logits`/`objectness` and channels
/// `4a..4a+4` of `deltas` belong to aspect `a` of each cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput<T> {
    pub logits: Tensor<T>,
    pub objectness: Tensor<T>,
    pub deltas: Tensor<T>,
}

impl<T: Scalar> RpnOutput<T> {
    pub fn num_anchors(&self) -> usize {
        self.logits.data().len()
    }

    /// Flat anchor index (row, col, aspect order) to the tensor offset of its
    /// logit.
    pub fn logit_offset(&self, anchor: usize) -> usize {
        let hw = self.logits.plane_len();
        let a = anchor % ANCHORS_PER_CELL;
        let cell = anchor / ANCHORS_PER_CELL;
        a * hw + cell
    }

    pub fn logit(&self, anchor: usize) -> T {
        self.logits.data()[self.logit_offset(anchor)]
    }

    pub fn score(&self, anchor: usize) -> T {
        self.objectness.data()[self.logit_offset(anchor)]
    }

    pub fn delta_offsets(&self, anchor: usize) -> [usize; 4] {
        let hw = self.deltas.plane_len();
        let a = anchor % ANCHORS_PER_CELL;
        let cell = anchor / ANCHORS_PER_CELL;
        [0, 1, 2, 3].map(|j| (4 * a + j) * hw + cell)
    }

    pub fn delta(&self, anchor: usize) -> [T; 4] {
        self.delta_offsets(anchor).map(|o| self.deltas.data()[o])
    }
}

pub struct RpnCache<T> {
    conv: ConvCache<T>,
    hidden: Tensor<T>,
    cls: ConvCache<T>,
    reg: ConvCache<T>,
}

impl<T: Scalar> RpnHead<T> {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(d, d, 3, 1, 2f64.sqrt(), rng),
            cls: Conv2d::new(d, ANCHORS_PER_CELL, 1, 1, 0.1, rng),
            reg: Conv2d::new(d, 4 * ANCHORS_PER_CELL, 1, 1, 0.1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn forward(&self, p: &Tensor<T>) -> Result<(RpnOutput<T>, RpnCache<T>)> {
        if p.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "RPN expects {} channels, pyramid level has {}",
                self.channels(),
                p.channels()
            )));
        }
        let (h, conv_cache) = self.conv.forward(p)?;
        let hidden = relu(&h);
        let (logits, cls_cache) = self.cls.forward(&hidden)?;
        let (deltas, reg_cache) = self.reg.forward(&hidden)?;
        let objectness = logits.map(sigmoid);
        Ok((
            RpnOutput { logits, objectness, deltas },
            RpnCache { conv: conv_cache, hidden, cls: cls_cache, reg: reg_cache },
        ))
    }

    /// Returns the gradient with respect to the pyramid level.
    pub fn backward(&mut self, cache: &RpnCache<T>, dlogits: &Tensor<T>, ddeltas: &Tensor<T>) -> Tensor<T> {
        let mut dhidden = self.cls.backward(&cache.cls, dlogits);
        dhidden.add_assign(&self.reg.backward(&cache.reg, ddeltas));
        let dh = relu_backward(&cache.hidden, &dhidden);
        self.conv.backward(&cache.conv, &dh)
    }

    pub fn cast<U: Scalar>(&self) -> RpnHead<U> {
        RpnHead { conv: self.conv.cast(), cls: self.cls.cast(), reg: self.reg.cast() }
    }
}

impl<T: Scalar> Parameters<T> for RpnHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.reg.visit_mut(&join(prefix, "reg"), f);
    }
}

/// Runs the shared head on one pyramid level.
pub fn rpn_forward<T: Scalar>(p: &Tensor<T>, head: &RpnHead<T>) -> Result<RpnOutput<T>> {
    head.forward(p).map(|(o, _)| o)
}

/// Anchor labelling and sampling thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSampling {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub batch_per_image: usize,
    pub positive_fraction: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
}

impl Default for AnchorSampling {
    fn default() -> Self {
        Self { positive_iou: 0.7, negative_iou: 0.3, batch_per_image: 256, positive_fraction: 0.5, beta: 1.0 / 9.0 }
    }
}

/// Positive: IoU > 0.7 with some gt, or the best anchor for a gt.
/// Negative: max IoU < 0.3. Returns `(label, matched gt)` per anchor with
/// label 1 / 0 / -1 (ignored).
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], cfg: &AnchorSampling) -> Vec<(i8, usize)> {
    let mut best = vec![(0.0f64, 0usize); anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(a, gt);
            if v > best[i].0 {
                best[i] = (v, g);
            }
            if v > gt_best[g] {
                gt_best[g] = v;
            }
        }
    }
    let mut out: Vec<(i8, usize)> = best
        .iter()
        .map(|&(v, g)| {
            if v > cfg.positive_iou {
                (1, g)
            } else if v < cfg.negative_iou {
                (0, g)
            } else {
                (-1, g)
            }
        })
        .collect();
    for (g, gt) in gts.iter().enumerate() {
        if gt_best[g] <= 0.0 {
            continue;
        }
        for (i, a) in anchors.iter().enumerate() {
            if iou(a, gt) == gt_best[g] {
                out[i] = (1, g);
            }
        }
    }
    out
}

/// Sampled anchor indices (sorted) and which of them are positive.
pub fn sample_anchors(labels: &[(i8, usize)], cfg: &AnchorSampling, rng: &mut impl Rng) -> Vec<(usize, bool)> {
    let mut pos: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.0 == 1).map(|(i, _)| i).collect();
    let mut neg: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.0 == 0).map(|(i, _)| i).collect();
    let max_pos = (cfg.batch_per_image as f64 * cfg.positive_fraction) as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    let max_neg = cfg.batch_per_image.saturating_sub(pos.len());
    neg.shuffle(rng);
    neg.truncate(max_neg);
    let mut out: Vec<(usize, bool)> = pos.into_iter().map(|i| (i, true)).chain(neg.into_iter().map(|i| (i, false))).collect();
    out.sort_unstable();
    out
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Binary cross-entropy on a logit, numerically stable.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
pub struct RpnLoss<T> {
    pub total: f64,
    pub objectness: f64,
    pub regression: f64,
    pub positives: usize,
    pub negatives: usize,
    /// `(dlogits, ddeltas)` per level.
    pub grads: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Objectness BCE averaged over sampled anchors plus smooth-L1 on the
/// positive anchors' deltas, normalized by the sample count.
///
/// `anchors[l]` must be the anchors of `outputs[l]` in flat order.
pub fn rpn_loss<T: Scalar>(
    outputs: &[RpnOutput<T>],
    anchors: &[Vec<BBox>],
    gts: &[BBox],
    cfg: &AnchorSampling,
    rng: &mut impl Rng,
) -> Result<RpnLoss<T>> {
    if gts.is_empty() {
        return Err(Error::invalid("rpn_loss needs at least one ground-truth box"));
    }
    if outputs.len() != anchors.len() {
        return Err(Error::Shape("one anchor set per RPN output".into()));
    }
    let mut offsets = Vec::with_capacity(outputs.len());
    let mut flat: Vec<BBox> = Vec::new();
    for (o, a) in outputs.iter().zip(anchors) {
        if o.num_anchors() != a.len() {
            return Err(Error::Shape(format!("{} anchors for {} RPN outputs", a.len(), o.num_anchors())));
        }
        offsets.push(flat.len());
        flat.extend_from_slice(a);
    }
    let labels = match_anchors(&flat, gts, cfg);
    let sampled = sample_anchors(&labels, cfg, rng);
    let mut grads: Vec<(Tensor<T>, Tensor<T>)> = outputs
        .iter()
        .map(|o| {
            (
                Tensor::zeros(o.logits.channels(), o.logits.height(), o.logits.width()),
                Tensor::zeros(o.deltas.channels(), o.deltas.height(), o.deltas.width()),
            )
        })
        .collect();
    let n = sampled.len().max(1) as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut positives = 0;
    for &(idx, positive) in &sampled {
        let level = offsets.partition_point(|&o| o <= idx) - 1;
        let local = idx - offsets[level];
        let out = &outputs[level];
        let z = out.logit(local).as_f64();
        let y = if positive { 1.0 } else { 0.0 };
        cls += bce_with_logit(z, y);
        let off = out.logit_offset(local);
        grads[level].0.data_mut()[off] += T::from_f64((sigmoid(z) - y) / n);
        if positive {
            positives += 1;
            let target = encode_deltas(&flat[idx], &gts[labels[idx].1]);
            let pred = out.delta(local);
            let doffs = out.delta_offsets(local);
            for j in 0..4 {
                let diff = pred[j].as_f64() - target[j];
                reg += smooth_l1(diff, cfg.beta);
                grads[level].1.data_mut()[doffs[j]] += T::from_f64(smooth_l1_grad(diff, cfg.beta) / n);
            }
        }
    }
    let objectness = cls / n;
    let regression = reg / n;
    Ok(RpnLoss {
        total: objectness + regression,
        objectness,
        regression,
        positives,
        negatives: sampled.len() - positives,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, AnchorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn head_shapes_and_sharing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = RpnHead::<f32>::new(256, &mut rng);
        let p = Tensor::from_vec(256, 8, 8, (0..256 * 64).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect()).unwrap();
        let out = rpn_forward(&p, &head).unwrap();
        assert_eq!(out.objectness.shape(), (3, 8, 8));
        assert_eq!(out.deltas.shape(), (12, 8, 8));
        assert!(out.objectness.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out, rpn_forward(&p, &head).unwrap());
        assert!(rpn_forward(&Tensor::zeros(8, 2, 2), &head).is_err());
    }

    #[test]
    fn best_anchor_is_positive_even_below_threshold() {
        let anchors = vec![b(0., 0., 10., 10.), b(50., 50., 60., 60.)];
        let gts = vec![b(0., 0., 20., 20.)]; // IoU 0.25 with anchor 0
        let labels = match_anchors(&anchors, &gts, &AnchorSampling::default());
        assert_eq!(labels[0], (1, 0));
        assert_eq!(labels[1].0, 0);
    }

    #[test]
    fn sampling_caps_positive_fraction() {
        let labels: Vec<(i8, usize)> = (0..100).map(|i| (if i < 60 { 1 } else { 0 }, 0)).collect();
        let cfg = AnchorSampling { batch_per_image: 20, ..Default::default() };
        let s = sample_anchors(&labels, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.len(), 20);
        assert_eq!(s.iter().filter(|x| x.1).count(), 10);
    }

    /// One anchor exactly on the gt, logit 0, predicted deltas (0.5, 0, 0, 0).
    #[test]
    fn single_anchor_loss_is_hand_computed() {
        let anchor = b(0., 0., 32., 32.);
        let out = RpnOutput {
            logits: Tensor::from_vec(1, 1, 1, vec![0.0f64]).unwrap(),
            objectness: Tensor::from_vec(1, 1, 1, vec![0.5f64]).unwrap(),
            deltas: Tensor::from_vec(4, 1, 1, vec![0.5, 0.0, 0.0, 0.0]).unwrap(),
        };
        // fake a one-aspect layout: anchors-per-cell is 3, so use three cells' worth
        let outs = vec![pad_to_three(out)];
        let anchors = vec![vec![anchor, b(100., 100., 101., 101.), b(200., 200., 201., 201.)]];
        let cfg = AnchorSampling { batch_per_image: 1, positive_fraction: 1.0, ..Default::default() };
        let loss = rpn_loss(&outs, &anchors, &[anchor], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // BCE(0, 1) = ln 2 ; smooth-L1(0.5, 1/9) = 0.5 - 1/18
        let expect = 2f64.ln() + (0.5 - 1.0 / 18.0);
        assert!((loss.total - expect).abs() < 1e-12, "{} vs {expect}", loss.total);
        assert_eq!(loss.positives, 1);
    }

    fn pad_to_three(o: RpnOutput<f64>) -> RpnOutput<f64> {
        // 3 aspects on a 1x1 map; anchor 0 is aspect 0
        let mut logits = vec![-30.0; 3];
        logits[0] = o.logits.data()[0];
        let mut deltas = vec![0.0; 12];
        deltas[..4].copy_from_slice(o.deltas.data());
        let logits = Tensor::from_vec(3, 1, 1, logits).unwrap();
        RpnOutput { objectness: logits.map(sigmoid), logits, deltas: Tensor::from_vec(12, 1, 1, deltas).unwrap() }
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let spec = AnchorSpec::for_level(2).unwrap();
        let anchors = generate_anchors(&spec, 4, 4);
        let gt = anchors[15];
        let cfg = AnchorSampling::default();
        let labels = match_anchors(&anchors, &[gt], &cfg);
        let mut logits = vec![0.0f64; 48];
        let mut deltas = vec![0.0f64; 192];
        let probe = RpnOutput::<f64> {
            logits: Tensor::zeros(3, 4, 4),
            objectness: Tensor::zeros(3, 4, 4),
            deltas: Tensor::zeros(12, 4, 4),
        };
        for (i, &(l, g)) in labels.iter().enumerate() {
            logits[probe.logit_offset(i)] = match l {
                1 => 60.0,
                _ => -60.0,
            };
            if l == 1 {
                let t = encode_deltas(&anchors[i], &[gt][g]);
                for (j, o) in probe.delta_offsets(i).iter().enumerate() {
                    deltas[*o] = t[j];
                }
            }
        }
        let logits = Tensor::from_vec(3, 4, 4, logits).unwrap();
        let out = RpnOutput { objectness: logits.map(sigmoid), logits, deltas: Tensor::from_vec(12, 4, 4, deltas).unwrap() };
        let loss = rpn_loss(&[out], &[anchors], &[gt], &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(loss.total >= 0.0 && loss.total < 1e-20, "{}", loss.total);
    }

    #[test]
    fn loss_requires_ground_truth() {
        let cfg = AnchorSampling::default();
        let r: Result<RpnLoss<f64>> = rpn_loss(&[], &[], &[], &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }
}
