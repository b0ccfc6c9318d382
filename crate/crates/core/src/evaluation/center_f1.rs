//! Center-in-box precision/recall/F1.
//!
//! Detections are visited by descending score. A detection whose center
//! lies in no ground-truth box is a false positive. Otherwise it is
//! assigned to the containing box of highest IoU; it is a true positive if
//! the labels agree and that box has not been claimed yet, and a false
//! positive otherwise. Ground-truth boxes never claimed are false negatives,
//! so `TP + FN` always equals the number of ground-truth boxes.

use crate::evaluation::{EvalReport, Metric, Scene};
use crate::geometry::{center_inside, iou};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CenterCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn count_scene(scene: &Scene) -> CenterCounts {
    let mut claimed = vec![false; scene.truth.len()];
    let mut c = CenterCounts::default();
    for d in scene.score_order() {
        let det = &scene.detections[d];
        let mut host: Option<(usize, f64)> = None;
        for (g, (gt, _)) in scene.truth.iter().enumerate() {
            if center_inside(&det.bbox, gt) {
                let v = iou(&det.bbox, gt);
                if host.is_none_or(|(_, hv)| v > hv) {
                    host = Some((g, v));
                }
            }
        }
        match host {
            Some((g, _)) if !claimed[g] && det.label.as_deref() == Some(scene.truth[g].1.as_str()) => {
                claimed[g] = true;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    c.fn_ = scene.truth.len() - c.tp;
    c
}

/// Counts summed over scenes before computing the rates.
pub fn eval_center_f1(scenes: &[Scene]) -> EvalReport {
    let mut total = CenterCounts::default();
    for s in scenes {
        let c = count_scene(s);
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    let precision = Metric::ratio(total.tp as f64, (total.tp + total.fp) as f64);
    let recall = Metric::ratio(total.tp as f64, (total.tp + total.fn_) as f64);
    let f1 = if recall.is_undefined() {
        Metric::UNDEFINED
    } else {
        let p = precision.get().unwrap_or(0.0);
        let r = recall.get().unwrap_or(0.0);
        if p + r == 0.0 {
            Metric::value(0.0)
        } else {
            Metric::value(2.0 * p * r / (p + r))
        }
    };
    let mut report = EvalReport::new(
        "center-f1",
        serde_json::json!({ "center_test": "closed", "overlap_rule": "highest-iou", "aggregation": "micro" }),
    );
    report.push("precision", None, precision);
    report.push("recall", None, recall);
    report.push("F1", None, f1);
    report.count("tp", total.tp);
    report.count("fp", total.fp);
    report.count("fn", total.fn_);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::testutil::{b, permute_keeping_ties, random_scene};
    use crate::evaluation::LabeledDetection;
    use crate::geometry::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Oracle by clause enumeration: a gt box counts as found iff at least
    /// one detection it hosts carries its label; every other detection is a
    /// false positive. The visiting order only decides which duplicate wins,
    /// so it does not appear here.
    fn oracle(s: &Scene) -> (usize, usize, usize) {
        let host: Vec<Option<usize>> = s
            .detections
            .iter()
            .map(|d| {
                let (cx, cy) = d.bbox.center();
                let inside: Vec<usize> = (0..s.truth.len())
                    .filter(|&g| {
                        let t = s.truth[g].0;
                        cx >= t.x1() && cx <= t.x2() && cy >= t.y1() && cy <= t.y2()
                    })
                    .collect();
                let best = inside.iter().map(|&g| iou(&d.bbox, &s.truth[g].0)).fold(f64::NEG_INFINITY, f64::max);
                inside.into_iter().find(|&g| iou(&d.bbox, &s.truth[g].0) == best)
            })
            .collect();
        let tp = (0..s.truth.len())
            .filter(|&g| {
                s.detections.iter().zip(&host).any(|(d, &h)| h == Some(g) && d.label.as_ref() == Some(&s.truth[g].1))
            })
            .count();
        (tp, s.detections.len() - tp, s.truth.len() - tp)
    }

    fn scene(dets: Vec<LabeledDetection>, truth: &[(BBox, &str)]) -> Scene {
        Scene { detections: dets, truth: truth.iter().map(|(b, l)| (*b, l.to_string())).collect() }
    }

    #[test]
    fn single_hit_and_single_miss() {
        let truth = [(b(0.0, 0.0, 10.0, 10.0), "a")];
        let r = eval_center_f1(&[scene(vec![LabeledDetection::labeled(b(2.0, 2.0, 8.0, 8.0), 0.9, "a")], &truth)]);
        assert_eq!((r.get_count("tp"), r.get("F1", None)), (Some(1), Some(Metric::value(1.0))));
        let r = eval_center_f1(&[scene(vec![LabeledDetection::labeled(b(20.0, 20.0, 30.0, 30.0), 0.9, "a")], &truth)]);
        assert_eq!((r.get_count("fp"), r.get_count("fn")), (Some(1), Some(1)));
        assert_eq!(r.get("F1", None), Some(Metric::value(0.0)));
    }

    #[test]
    fn wrong_label_miss_and_hit() {
        let truth = [(b(0.0, 0.0, 10.0, 10.0), "a"), (b(20.0, 0.0, 30.0, 10.0), "b"), (b(40.0, 0.0, 50.0, 10.0), "c")];
        let dets = vec![
            LabeledDetection::labeled(b(1.0, 1.0, 9.0, 9.0), 0.9, "z"),
            LabeledDetection::labeled(b(41.0, 1.0, 49.0, 9.0), 0.8, "c"),
        ];
        let s = scene(dets, &truth);
        let c = count_scene(&s);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 2));
        assert_eq!(oracle(&s), (1, 1, 2));
        let r = eval_center_f1(&[s]);
        assert_eq!(r.get("precision", None), Some(Metric::value(0.5)));
        assert_eq!(r.get("recall", None), Some(Metric::value(1.0 / 3.0)));
    }

    #[test]
    fn duplicates_and_overlaps() {
        // two overlapping gts; the detection centered in both goes to the higher-IoU one
        let truth = [(b(0.0, 0.0, 10.0, 10.0), "a"), (b(4.0, 0.0, 14.0, 10.0), "b")];
        let dets = vec![
            LabeledDetection::labeled(b(4.0, 0.0, 13.0, 10.0), 0.9, "b"),
            LabeledDetection::labeled(b(4.0, 0.0, 13.0, 10.0), 0.8, "b"),
        ];
        let c = count_scene(&scene(dets, &truth));
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 1));
    }

    #[test]
    fn random_scenes_match_oracle_and_keep_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let s = random_scene(&mut rng, 5, 5, &["a", "b"]);
            let c = count_scene(&s);
            assert_eq!((c.tp, c.fp, c.fn_), oracle(&s));
            assert_eq!(c.tp + c.fn_, s.truth.len());
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let scenes: Vec<Scene> = (0..3).map(|_| random_scene(&mut rng, 5, 6, &["a", "b"])).collect();
            let shuffled: Vec<Scene> = scenes.iter().map(|s| permute_keeping_ties(s, &mut rng)).collect();
            assert_eq!(eval_center_f1(&scenes), eval_center_f1(&shuffled));
        }
    }
}
