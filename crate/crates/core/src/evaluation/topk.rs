//! Top-K retrieval precision and product recall.
//!
//! Within each image, detections (by descending score) are matched one to
//! one to ground-truth boxes at IoU above 0.5. A detection is a true
//! positive at K when it is matched and its gt label appears among its first
//! K ranked labels; every other detection is a false positive. Per image,
//! precision is `TP / detections` and product recall is `TP / gt boxes`.
//! Both are averaged over the images that have ground truth (AP@K, APR@K)
//! and then over the K values (mAP, mAPR).

use crate::evaluation::{greedy_match, EvalReport, Metric, Scene};
use crate::geometry::BBox;

pub const DEFAULT_K: [usize; 2] = [20, 50];
pub const MATCH_IOU: f64 = 0.5;

fn image_rates(scene: &Scene, k: usize) -> (f64, f64) {
    let dets: Vec<BBox> = scene.detections.iter().map(|d| d.bbox).collect();
    let gts: Vec<BBox> = scene.truth.iter().map(|t| t.0).collect();
    let m = greedy_match(&dets, &scene.score_order(), &gts, |v| v > MATCH_IOU, |_, _| true);
    let tp = m
        .iter()
        .zip(&scene.detections)
        .filter(|(g, d)| g.is_some_and(|g| d.topk.iter().take(k).any(|l| *l == scene.truth[g].1)))
        .count();
    let precision = if dets.is_empty() { 0.0 } else { tp as f64 / dets.len() as f64 };
    (precision, tp as f64 / gts.len() as f64)
}

pub fn eval_topk_map(scenes: &[Scene], k_list: &[usize]) -> EvalReport {
    let mut report =
        EvalReport::new("topk", serde_json::json!({ "k": k_list, "iou_threshold": MATCH_IOU, "aggregation": "per-image" }));
    let with_gt: Vec<&Scene> = scenes.iter().filter(|s| !s.truth.is_empty()).collect();
    let n = with_gt.len() as f64;
    let (mut ap_sum, mut apr_sum) = (0.0, 0.0);
    for &k in k_list {
        let (p, r) = with_gt.iter().map(|s| image_rates(s, k)).fold((0.0, 0.0), |a, x| (a.0 + x.0, a.1 + x.1));
        let (ap, apr) = (Metric::ratio(p, n), Metric::ratio(r, n));
        ap_sum += ap.get().unwrap_or(0.0);
        apr_sum += apr.get().unwrap_or(0.0);
        report.push(format!("AP@{k}"), None, ap);
        report.push(format!("APR@{k}"), None, apr);
    }
    let defined = !with_gt.is_empty() && !k_list.is_empty();
    let avg = |s: f64| if defined { Metric::value(s / k_list.len() as f64) } else { Metric::UNDEFINED };
    report.push("mAP", None, avg(ap_sum));
    report.push("mAPR", None, avg(apr_sum));
    report.count("images", with_gt.len());
    report.count("gt", with_gt.iter().map(|s| s.truth.len()).sum());
    report.count("detections", scenes.iter().map(|s| s.detections.len()).sum());
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

    fn det(bbox: BBox, score: f64, ranked: &[&str]) -> LabeledDetection {
        let mut d = LabeledDetection::labeled(bbox, score, ranked[0]);
        d.topk = ranked.iter().map(|s| s.to_string()).collect();
        d
    }

    /// Oracle: explicit score sort, full IoU scan per detection, then
    /// per-image rates averaged first over images and then over K.
    fn oracle(scenes: &[Scene], ks: &[usize]) -> Option<(f64, f64)> {
        let imgs: Vec<&Scene> = scenes.iter().filter(|s| !s.truth.is_empty()).collect();
        if imgs.is_empty() {
            return None;
        }
        let (mut map, mut mapr) = (0.0, 0.0);
        for &k in ks {
            let (mut ap, mut apr) = (0.0, 0.0);
            for s in &imgs {
                let mut idx: Vec<usize> = (0..s.detections.len()).collect();
                idx.sort_by(|&a, &c| s.detections[c].score.partial_cmp(&s.detections[a].score).unwrap().then(a.cmp(&c)));
                let mut used = vec![false; s.truth.len()];
                let mut tp = 0;
                for d in idx {
                    let mut best: Option<(usize, f64)> = None;
                    for g in 0..s.truth.len() {
                        let v = iou(&s.detections[d].bbox, &s.truth[g].0);
                        if !used[g] && v > 0.5 && best.is_none_or(|x| v > x.1) {
                            best = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = best {
                        used[g] = true;
                        let ranked = &s.detections[d].topk;
                        if ranked[..k.min(ranked.len())].contains(&s.truth[g].1) {
                            tp += 1;
                        }
                    }
                }
                let nd = s.detections.len();
                ap += if nd == 0 { 0.0 } else { tp as f64 / nd as f64 };
                apr += tp as f64 / s.truth.len() as f64;
            }
            map += ap / imgs.len() as f64;
            mapr += apr / imgs.len() as f64;
        }
        Some((map / ks.len() as f64, mapr / ks.len() as f64))
    }

    fn rates(r: &EvalReport) -> Option<(f64, f64)> {
        Some((r.get("mAP", None)?.get()?, r.get("mAPR", None)?.get()?))
    }

    #[test]
    fn rank_one_and_never_present() {
        let truth = vec![(b(0.0, 0.0, 10.0, 10.0), "a".to_string()), (b(20.0, 0.0, 30.0, 10.0), "b".to_string())];
        let good = Scene {
            detections: vec![det(truth[0].0, 0.9, &["a", "b"]), det(truth[1].0, 0.8, &["b", "a"])],
            truth: truth.clone(),
        };
        for k in [1, 2, 20] {
            assert_eq!(rates(&eval_topk_map(std::slice::from_ref(&good), &[k])), Some((1.0, 1.0)));
        }
        let bad = Scene {
            detections: vec![det(truth[0].0, 0.9, &["c", "d"]), det(truth[1].0, 0.8, &["d", "c"])],
            truth,
        };
        assert_eq!(rates(&eval_topk_map(&[bad], &DEFAULT_K)), Some((0.0, 0.0)));
    }

    #[test]
    fn two_image_toy_case() {
        let (g1, g2, far) = (b(0.0, 0.0, 10.0, 10.0), b(20.0, 0.0, 30.0, 10.0), b(50.0, 50.0, 60.0, 60.0));
        let s1 = Scene {
            detections: vec![det(g1, 0.9, &["b", "a", "c"]), det(g2, 0.8, &["b", "c", "a"]), det(far, 0.7, &["a", "b", "c"])],
            truth: vec![(g1, "a".into()), (g2, "b".into())],
        };
        let s2 = Scene { detections: vec![det(g1, 0.5, &["a", "c", "b"])], truth: vec![(g1, "c".into())] };
        let scenes = [s1, s2];
        // K=1: image 1 has P=1/3, R=1/2 and image 2 has 0, 0
        // K=2: image 1 has P=2/3, R=1 and image 2 has 1, 1
        let r = eval_topk_map(&scenes, &[1, 2]);
        let close = |m: &str, want: f64| assert!((r.get(m, None).unwrap().get().unwrap() - want).abs() < 1e-12, "{m}");
        close("AP@1", 1.0 / 6.0);
        close("APR@1", 0.25);
        close("AP@2", 5.0 / 6.0);
        close("APR@2", 1.0);
        close("mAP", 0.5);
        close("mAPR", 0.625);
        let (m, p) = oracle(&scenes, &[1, 2]).unwrap();
        assert!((m - 0.5).abs() < 1e-12 && (p - 0.625).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_undefined() {
        let s = Scene { detections: vec![det(b(0.0, 0.0, 1.0, 1.0), 0.9, &["a"])], truth: vec![] };
        let r = eval_topk_map(&[s], &DEFAULT_K);
        assert!(r.get("mAP", None).unwrap().is_undefined());
        assert!(r.get("APR@20", None).unwrap().is_undefined());
    }

    #[test]
    fn random_scenes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..500 {
            let scenes: Vec<Scene> = (0..3).map(|_| random_scene(&mut rng, 5, 5, &["a", "b", "c", "d"])).collect();
            let got = rates(&eval_topk_map(&scenes, &[1, 2, 3]));
            let want = oracle(&scenes, &[1, 2, 3]);
            assert_eq!(got.is_some(), want.is_some());
            if let (Some(g), Some(w)) = (got, want) {
                assert!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12, "{g:?} vs {w:?}");
            }
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let scenes: Vec<Scene> = (0..3).map(|_| random_scene(&mut rng, 5, 6, &["a", "b", "c"])).collect();
            let shuffled: Vec<Scene> = scenes.iter().map(|s| permute_keeping_ties(s, &mut rng)).collect();
            assert_eq!(eval_topk_map(&scenes, &[1, 2]), eval_topk_map(&shuffled, &[1, 2]));
        }
    }
}
