//! Box arithmetic shared by localization and evaluation: IoU, center
//! containment, greedy NMS, per-level anchors and the center/log-size delta
//! parameterization used by both regressor heads.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in continuous pixel coordinates, top-left origin.
///
/// Always has strictly positive width and height and finite corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid(format!("degenerate box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to `[0, width] × [0, height]`; `None` if nothing with positive
    /// area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(self.x1.clamp(0.0, width), self.y1.clamp(0.0, height), self.x2.clamp(0.0, width), self.y2.clamp(0.0, height))
            .ok()
    }

    /// Grows each side by `fraction` of the corresponding box side.
    pub fn pad(&self, fraction: f64) -> BBox {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        BBox { x1: self.x1 - dx, y1: self.y1 - dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// A box with an objectness / confidence score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, score })
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Whether the midpoint of `det` lies in `gt`, boundary included.
pub fn center_inside(det: &BBox, gt: &BBox) -> bool {
    let (cx, cy) = det.center();
    cx >= gt.x1 && cx <= gt.x2 && cy >= gt.y1 && cy <= gt.y2
}

/// Descending-score comparator; equal scores keep their relative order
/// when used with a stable sort.
pub fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy suppression over boxes that are already in priority order.
///
/// Returns the kept indices; stops once `limit` boxes are kept.
pub fn greedy_nms_sorted(boxes: &[BBox], iou_threshold: f64, limit: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for i in 0..boxes.len() {
        if keep.len() >= limit {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for j in i + 1..boxes.len() {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy non-maximum suppression: output sorted by descending score,
/// ties broken by input position.
pub fn nms(dets: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(dets[a].score, dets[b].score));
    let boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    greedy_nms_sorted(&boxes, iou_threshold, usize::MAX).into_iter().map(|k| dets[order[k]]).collect()
}

/// Width:height ratio of an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectRatio {
    pub w: f64,
    pub h: f64,
}

pub const ANCHOR_ASPECTS: [AspectRatio; 3] =
    [AspectRatio { w: 1.0, h: 1.0 }, AspectRatio { w: 1.0, h: 2.0 }, AspectRatio { w: 2.0, h: 1.0 }];

pub const ANCHORS_PER_CELL: usize = ANCHOR_ASPECTS.len();

/// One pyramid level's anchor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    pub level: u32,
    pub scale: f64,
    pub aspect_ratios: Vec<AspectRatio>,
    pub stride: f64,
}

impl AnchorSpec {
    /// Levels 2..=5 carry scales 32, 64, 128, 256 at strides 4..32.
    pub fn for_level(level: u32) -> Result<Self> {
        if !(2..=5).contains(&level) {
            return Err(Error::invalid(format!("pyramid level {level} outside 2..=5")));
        }
        Ok(Self {
            level,
            scale: f64::from(1u32 << (level + 3)),
            aspect_ratios: ANCHOR_ASPECTS.to_vec(),
            stride: f64::from(1u32 << level),
        })
    }

    /// `(width, height)` of the anchor with area `scale²` and ratio `ar`.
    pub fn anchor_size(&self, ar: AspectRatio) -> (f64, f64) {
        let r = (ar.w / ar.h).sqrt();
        (self.scale * r, self.scale / r)
    }
}

/// Anchors in `(row, col, aspect)` order; may extend past the image.
pub fn generate_anchors(spec: &AnchorSpec, feature_h: usize, feature_w: usize) -> Vec<BBox> {
    let sizes: Vec<(f64, f64)> = spec.aspect_ratios.iter().map(|&ar| spec.anchor_size(ar)).collect();
    let mut out = Vec::with_capacity(feature_h * feature_w * sizes.len());
    for row in 0..feature_h {
        let cy = (row as f64 + 0.5) * spec.stride;
        for col in 0..feature_w {
            let cx = (col as f64 + 0.5) * spec.stride;
            for &(w, h) in &sizes {
                out.push(BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h });
            }
        }
    }
    out
}

/// Log-size clamp applied to `dw`/`dh` before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.0;

/// Regression target `(dx, dy, dw, dh)` taking `reference` onto `target`.
pub fn encode_deltas(reference: &BBox, target: &BBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    [
        (tx - rx) / reference.width(),
        (ty - ry) / reference.height(),
        (target.width() / reference.width()).ln(),
        (target.height() / reference.height()).ln(),
    ]
}

/// Applies regressed deltas to `anchor`. `dw`/`dh` are clamped to
/// `±MAX_LOG_SCALE`.
pub fn decode_deltas(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    if deltas == [0.0; 4] {
        return *anchor;
    }
    let (ax, ay) = anchor.center();
    let cx = ax + deltas[0] * anchor.width();
    let cy = ay + deltas[1] * anchor.height();
    let w = anchor.width() * deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = anchor.height() * deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, s: f64) -> ScoredBox {
        ScoredBox::new(b(x1, y1, x2, y2), s).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(20., 20., 30., 30.)), 0.0);
        assert!((iou(&b(0., 0., 10., 10.), &b(5., 0., 15., 10.)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn center_inside_examples() {
        let gt = b(0., 0., 10., 10.);
        assert!(center_inside(&b(4., 4., 6., 6.), &gt));
        assert!(!center_inside(&b(20., 20., 22., 22.), &gt));
        assert!(!center_inside(&b(8., 8., 16., 16.), &gt));
        // boundary counts as inside
        assert!(center_inside(&b(8., 8., 12., 12.), &gt));
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0., 0., 0., 5.).is_err());
        assert!(BBox::new(0., 0., 5., f64::NAN).is_err());
        assert!(ScoredBox::new(b(0., 0., 1., 1.), 1.5).is_err());
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let dup = nms(&[sb(0., 0., 10., 10., 0.9), sb(0., 0., 10., 10., 0.8)], 0.5);
        assert_eq!(dup, vec![sb(0., 0., 10., 10., 0.9)]);
        let both = nms(&[sb(0., 0., 10., 10., 0.9), sb(5., 0., 15., 10., 0.8)], 0.5);
        assert_eq!(both.len(), 2);
    }

    #[test]
    fn nms_ties_keep_insertion_order() {
        let out = nms(&[sb(0., 0., 10., 10., 0.5), sb(1., 0., 11., 10., 0.5)], 0.5);
        assert_eq!(out, vec![sb(0., 0., 10., 10., 0.5)]);
    }

    #[test]
    fn anchor_examples() {
        let spec = AnchorSpec::for_level(2).unwrap();
        assert_eq!(spec.scale, 32.0);
        assert_eq!(spec.stride, 4.0);
        let a = generate_anchors(&spec, 1, 1);
        assert_eq!(a.len(), 3);
        for anchor in &a {
            assert_eq!(anchor.center(), (2.0, 2.0));
            assert!((anchor.area() - 1024.0).abs() < 1e-9);
        }
        assert_eq!(a[0], b(-14., -14., 18., 18.));
        assert_eq!(generate_anchors(&spec, 2, 2).len(), 12);
        let scales: Vec<f64> = (2..=5).map(|l| AnchorSpec::for_level(l).unwrap().scale).collect();
        assert_eq!(scales, vec![32.0, 64.0, 128.0, 256.0]);
        assert!(AnchorSpec::for_level(6).is_err());
    }

    #[test]
    fn decode_examples() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(decode_deltas(&a, [0.0; 4]), a);
        let wide = decode_deltas(&a, [0.0, 0.0, 2f64.ln(), 0.0]);
        for (got, want) in wide.corners().iter().zip([-5., 0., 15., 10.]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(decode_deltas(&a, [1.0, 0.0, 0.0, 0.0]), b(10., 0., 20., 10.));
        // runaway log-scale is clamped
        let huge = decode_deltas(&a, [0.0, 0.0, 50.0, -50.0]);
        assert!((huge.width() - 10.0 * 4f64.exp()).abs() < 1e-9);
        assert!((huge.height() - 10.0 * (-4f64).exp()).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn encode_decode_inverse(a in arb_box(), t in arb_box()) {
            let d = encode_deltas(&a, &t);
            prop_assume!(d[2].abs() <= MAX_LOG_SCALE && d[3].abs() <= MAX_LOG_SCALE);
            let back = decode_deltas(&a, d);
            for (x, y) in back.corners().iter().zip(t.corners()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn nms_output_is_iou_antichain(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..20), thr in 0.05..0.95f64) {
            let dets: Vec<ScoredBox> = boxes.into_iter().map(|(bb, s)| ScoredBox::new(bb, s).unwrap()).collect();
            let kept = nms(&dets, thr);
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) <= thr);
                }
                if i > 0 {
                    prop_assert!(kept[i - 1].score >= kept[i].score);
                }
            }
        }
    }
}
