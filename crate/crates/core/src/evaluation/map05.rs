//! Label-aware mAP at IoU 0.5 with all-point interpolation, and product
//! recall over ground-truth instances.

use std::collections::BTreeSet;

use crate::evaluation::{greedy_match, EvalReport, Metric, Scene};
use crate::geometry::{by_score_desc, BBox};

/// IoU must strictly exceed this for a match.
pub const MATCH_IOU: f64 = 0.5;

/// Area under the precision envelope, summed at every recall change.
pub fn all_point_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).filter(|&i| recall[i] != recall[i - 1]).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Per-class detections in descending score order with their match flags,
/// and the class's ground-truth count.
fn class_matches(scenes: &[Scene], class: &str) -> (Vec<bool>, usize, usize) {
    let mut flags: Vec<(f64, bool)> = Vec::new();
    let (mut num_gt, mut matched) = (0, 0);
    for s in scenes {
        let gt_idx: Vec<usize> = (0..s.truth.len()).filter(|&g| s.truth[g].1 == class).collect();
        num_gt += gt_idx.len();
        let det_idx: Vec<usize> = s
            .score_order()
            .into_iter()
            .filter(|&d| s.detections[d].label.as_deref() == Some(class))
            .collect();
        let dets: Vec<BBox> = det_idx.iter().map(|&d| s.detections[d].bbox).collect();
        let gts: Vec<BBox> = gt_idx.iter().map(|&g| s.truth[g].0).collect();
        let order: Vec<usize> = (0..dets.len()).collect();
        let m = greedy_match(&dets, &order, &gts, |v| v > MATCH_IOU, |_, _| true);
        matched += m.iter().filter(|x| x.is_some()).count();
        flags.extend(det_idx.iter().zip(&m).map(|(&d, x)| (s.detections[d].score, x.is_some())));
    }
    flags.sort_by(|a, b| by_score_desc(a.0, b.0));
    (flags.into_iter().map(|(_, t)| t).collect(), num_gt, matched)
}

/// mAP@0.5 averaged over classes present in the ground truth; PR@0.5 is
/// the fraction of ground-truth instances matched by a correctly labelled
/// detection (each instance counted once).
pub fn eval_map_pr_05(scenes: &[Scene]) -> EvalReport {
    let mut report = EvalReport::new("map05", serde_json::json!({ "iou_threshold": MATCH_IOU, "interpolation": "all-point" }));
    let classes: BTreeSet<&str> = scenes.iter().flat_map(|s| s.truth.iter().map(|(_, l)| l.as_str())).collect();
    let (mut ap_sum, mut total_gt, mut total_matched) = (0.0, 0usize, 0usize);
    for c in &classes {
        let (tp, num_gt, matched) = class_matches(scenes, c);
        ap_sum += all_point_ap(&tp, num_gt);
        total_gt += num_gt;
        total_matched += matched;
    }
    let num_det: usize = scenes.iter().map(|s| s.detections.len()).sum();
    report.push("mAP@0.5", None, Metric::ratio(ap_sum, classes.len() as f64));
    report.push("PR@0.5", None, Metric::ratio(total_matched as f64, total_gt as f64));
    report.count("classes", classes.len());
    report.count("gt", total_gt);
    report.count("matched", total_matched);
    report.count("detections", num_det);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::testutil::{b, permute_keeping_ties, random_scene};
    use crate::evaluation::LabeledDetection;
    use crate::geometry::iou;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Oracle: per class, every detection in score order claims the best
    /// free same-label gt via a full IoU scan; AP is the exact area under
    /// the monotone envelope `p̂(r) = max{p_k : r_k ≥ r}` integrated over
    /// the distinct recall levels.
    fn oracle(scenes: &[Scene]) -> (Option<f64>, Option<f64>) {
        let mut classes: Vec<String> = scenes.iter().flat_map(|s| s.truth.iter().map(|t| t.1.clone())).collect();
        classes.sort();
        classes.dedup();
        if classes.is_empty() {
            return (None, None);
        }
        let (mut ap_sum, mut gt_all, mut hit_all) = (0.0, 0, 0);
        for c in &classes {
            let mut rows: Vec<(f64, usize, usize, bool)> = Vec::new();
            let mut n_gt = 0;
            for (si, s) in scenes.iter().enumerate() {
                n_gt += s.truth.iter().filter(|t| &t.1 == c).count();
                let mut idx: Vec<usize> =
                    (0..s.detections.len()).filter(|&d| s.detections[d].label.as_ref() == Some(c)).collect();
                idx.sort_by(|&a, &b| s.detections[b].score.partial_cmp(&s.detections[a].score).unwrap().then(a.cmp(&b)));
                let mut used = vec![false; s.truth.len()];
                for (rank, &d) in idx.iter().enumerate() {
                    let mut best: Option<(usize, f64)> = None;
                    for g in 0..s.truth.len() {
                        let v = iou(&s.detections[d].bbox, &s.truth[g].0);
                        if s.truth[g].1 == *c && !used[g] && v > 0.5 && best.is_none_or(|x| v > x.1) {
                            best = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = best {
                        used[g] = true;
                        hit_all += 1;
                    }
                    rows.push((s.detections[d].score, si, rank, best.is_some()));
                }
            }
            gt_all += n_gt;
            rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut pts = Vec::new();
            let mut tp = 0;
            for (k, r) in rows.iter().enumerate() {
                tp += r.3 as usize;
                pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
            }
            let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
            levels.dedup();
            let mut prev = 0.0;
            for r in levels {
                if r > prev {
                    let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
                    ap_sum += (r - prev) * p;
                    prev = r;
                }
            }
        }
        (Some(ap_sum / classes.len() as f64), Some(hit_all as f64 / gt_all as f64))
    }

    fn scene(dets: Vec<LabeledDetection>, truth: &[(BBox, &str)]) -> Scene {
        Scene { detections: dets, truth: truth.iter().map(|(b, l)| (*b, l.to_string())).collect() }
    }

    #[test]
    fn perfect_and_all_wrong() {
        let truth = [(b(0.0, 0.0, 10.0, 10.0), "a"), (b(20.0, 0.0, 30.0, 10.0), "b")];
        let good = truth.iter().map(|(g, l)| LabeledDetection::labeled(*g, 0.9, l)).collect();
        let r = eval_map_pr_05(&[scene(good, &truth)]);
        assert_eq!(r.get("mAP@0.5", None), Some(Metric::value(1.0)));
        assert_eq!(r.get("PR@0.5", None), Some(Metric::value(1.0)));
        let bad = truth.iter().map(|(g, l)| LabeledDetection::labeled(*g, 0.9, if *l == "a" { "b" } else { "a" })).collect();
        let r = eval_map_pr_05(&[scene(bad, &truth)]);
        assert_eq!(r.get("mAP@0.5", None), Some(Metric::value(0.0)));
        assert_eq!(r.get("PR@0.5", None), Some(Metric::value(0.0)));
    }

    #[test]
    fn iou_of_exactly_half_does_not_match() {
        let truth = [(b(0.0, 0.0, 10.0, 10.0), "a")];
        // covers half of the gt: IoU = 50 / 100
        let det = vec![LabeledDetection::labeled(b(0.0, 0.0, 10.0, 5.0), 0.9, "a")];
        let r = eval_map_pr_05(&[scene(det, &truth)]);
        assert_eq!(r.get("PR@0.5", None), Some(Metric::value(0.0)));
    }

    #[test]
    fn two_class_hand_built_scene() {
        let truth = [
            (b(0.0, 0.0, 10.0, 10.0), "a"),
            (b(20.0, 0.0, 30.0, 10.0), "a"),
            (b(0.0, 20.0, 10.0, 30.0), "b"),
            (b(20.0, 20.0, 30.0, 30.0), "b"),
        ];
        let dets = vec![
            LabeledDetection::labeled(b(0.0, 0.0, 10.0, 10.0), 0.9, "a"),
            LabeledDetection::labeled(b(0.0, 0.0, 10.0, 10.0), 0.8, "a"),
            LabeledDetection::labeled(b(20.0, 0.0, 30.0, 10.0), 0.7, "a"),
            LabeledDetection::labeled(b(0.0, 20.0, 10.0, 30.0), 0.6, "a"),
            LabeledDetection::labeled(b(20.0, 20.0, 30.0, 30.0), 0.5, "b"),
        ];
        let s = [scene(dets, &truth)];
        let r = eval_map_pr_05(&s);
        // class a: TP FP TP FP → AP = 0.5·1 + 0.5·(2/3); class b: TP at rank 1 of 2 gts → 0.5
        let expect = (0.5 + 0.5 * 2.0 / 3.0 + 0.5) / 2.0;
        assert!((r.get("mAP@0.5", None).unwrap().get().unwrap() - expect).abs() < 1e-12);
        assert_eq!(r.get("PR@0.5", None), Some(Metric::value(0.75)));
        let (m, p) = oracle(&s);
        assert!((m.unwrap() - expect).abs() < 1e-12);
        assert_eq!(p, Some(0.75));
    }

    #[test]
    fn random_small_scenes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let scenes: Vec<Scene> = (0..2).map(|_| random_scene(&mut rng, 5, 5, &["a", "b"])).collect();
            let r = eval_map_pr_05(&scenes);
            let (m, p) = oracle(&scenes);
            let got_m = r.get("mAP@0.5", None).unwrap().get();
            assert_eq!(got_m.is_some(), m.is_some());
            if let (Some(g), Some(w)) = (got_m, m) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
            assert_eq!(r.get("PR@0.5", None).unwrap().get(), p);
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let scenes: Vec<Scene> = (0..3).map(|_| random_scene(&mut rng, 5, 6, &["a", "b"])).collect();
            let shuffled: Vec<Scene> = scenes.iter().map(|s| permute_keeping_ties(s, &mut rng)).collect();
            assert_eq!(eval_map_pr_05(&scenes), eval_map_pr_05(&shuffled));
        }
    }
}
