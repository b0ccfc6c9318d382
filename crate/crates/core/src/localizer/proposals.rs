use std::cmp::Ordering;

use crate::geometry::{by_score_desc, decode_deltas, greedy_nms_sorted, BBox, ScoredBox};
use crate::localizer::rpn::RpnOutput;
use crate::tensor::Scalar;

/// A decoded, clipped anchor that survived proposal selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub level: u32,
    pub anchor: usize,
}

impl Proposal {
    pub fn scored(&self) -> ScoredBox {
        ScoredBox { bbox: self.bbox, score: self.score }
    }
}

/// One pyramid level's RPN output with the anchors it was computed over.
pub struct LevelProposals<'a, T> {
    pub level: u32,
    pub output: &'a RpnOutput<T>,
    pub anchors: &'a [BBox],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub top_n: usize,
    pub nms_threshold: f64,
    /// Candidates kept (by score) before suppression.
    pub pre_nms_top_n: usize,
    pub min_area: f64,
    /// Candidates must score strictly above this.
    pub min_score: f64,
}

impl ProposalConfig {
    pub fn new(top_n: usize, nms_threshold: f64) -> Self {
        Self { top_n, nms_threshold, pre_nms_top_n: 2000, min_area: 1.0, min_score: 0.0 }
    }
}

/// Orders by descending score, then by `(level, anchor)` so the result does
/// not depend on the order levels are supplied in.
fn priority(a: &Proposal, b: &Proposal) -> Ordering {
    by_score_desc(a.score, b.score).then(a.level.cmp(&b.level)).then(a.anchor.cmp(&b.anchor))
}

/// Decodes every anchor, clips to the image, drops boxes under `min_area`,
/// then runs greedy NMS over the pooled candidates of all levels and keeps
/// at most `top_n`.
pub fn propose<T: Scalar>(
    levels: &[LevelProposals<'_, T>],
    image_size: (usize, usize),
    cfg: &ProposalConfig,
) -> Vec<Proposal> {
    let (img_w, img_h) = (image_size.0 as f64, image_size.1 as f64);
    let mut cands = Vec::new();
    for lvl in levels {
        for (i, anchor) in lvl.anchors.iter().enumerate() {
            let score = lvl.output.score(i).as_f64();
            if score <= cfg.min_score {
                continue;
            }
            let d = lvl.output.delta(i).map(|v| v.as_f64());
            let Some(bbox) = decode_deltas(anchor, d).clip(img_w, img_h) else { continue };
            if bbox.area() < cfg.min_area {
                continue;
            }
            cands.push(Proposal { bbox, score, level: lvl.level, anchor: i });
        }
    }
    cands.sort_by(priority);
    cands.truncate(cfg.pre_nms_top_n.max(cfg.top_n));
    let boxes: Vec<BBox> = cands.iter().map(|c| c.bbox).collect();
    greedy_nms_sorted(&boxes, cfg.nms_threshold, cfg.top_n).into_iter().map(|k| cands[k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sigmoid;
    use crate::tensor::Tensor;

    fn output(logits: Vec<f64>) -> RpnOutput<f64> {
        let n = logits.len();
        let logits = Tensor::from_vec(3, 1, n / 3, logits).unwrap();
        RpnOutput { objectness: logits.map(sigmoid), logits, deltas: Tensor::zeros(12, 1, n / 3) }
    }

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_live_anchor_survives() {
        // exp(-1e4) underflows, so the other two score exactly 0
        let out = output(vec![-1e4, 5.0, -1e4]);
        let anchors = [b(0., 0., 10., 10.), b(20., 20., 30., 30.), b(40., 40., 50., 50.)];
        let props = propose(
            &[LevelProposals { level: 2, output: &out, anchors: &anchors }],
            (64, 64),
            &ProposalConfig::new(10, 0.7),
        );
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].bbox, anchors[1]);
    }

    #[test]
    fn coincident_anchors_collapse() {
        // sigmoid^-1(0.9), sigmoid^-1(0.8)
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let out = output(vec![logit(0.9), logit(0.8), -1e4]);
        let anchors = [b(0., 0., 10., 10.), b(0., 0., 10., 10.), b(40., 40., 50., 50.)];
        let props = propose(
            &[LevelProposals { level: 2, output: &out, anchors: &anchors }],
            (64, 64),
            &ProposalConfig::new(2, 0.5),
        );
        assert_eq!(props.len(), 1);
        assert!((props[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn proposals_are_clipped_and_filtered() {
        let out = output(vec![1.0, 2.0, 3.0]);
        let anchors = [b(-20., -20., 10., 10.), b(60., 60., 90., 90.), b(100., 100., 120., 120.)];
        let props = propose(
            &[LevelProposals { level: 2, output: &out, anchors: &anchors }],
            (64, 64),
            &ProposalConfig::new(10, 0.7),
        );
        assert_eq!(props.len(), 2);
        for p in &props {
            assert!(p.bbox.x1() >= 0.0 && p.bbox.y1() >= 0.0 && p.bbox.x2() <= 64.0 && p.bbox.y2() <= 64.0);
        }
    }
}
