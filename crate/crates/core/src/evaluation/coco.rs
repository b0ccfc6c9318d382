//! Single-category COCO-style AP/AR over class-agnostic detections.

use serde::{Deserialize, Serialize};

use crate::evaluation::{greedy_match, EvalReport, Metric, Scene};
use crate::geometry::{by_score_desc, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoParams {
    pub iou_thresholds: Vec<f64>,
    /// AR is reported at every entry, AP at the largest.
    pub max_dets: Vec<usize>,
}

impl Default for CocoParams {
    fn default() -> Self {
        Self { iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(), max_dets: vec![1, 10, 100] }
    }
}

/// Recall grid of 101 points `0, 0.01, …, 1`.
pub fn recall_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Precision/recall accumulation at one IoU threshold and detection cap.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulated {
    pub num_gt: usize,
    /// True-positive flags in global descending-score order.
    pub tp: Vec<bool>,
}

pub fn accumulate(scenes: &[Scene], threshold: f64, max_dets: usize) -> Accumulated {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for s in scenes {
        num_gt += s.truth.len();
        let mut order = s.score_order();
        order.truncate(max_dets);
        let dets: Vec<BBox> = s.detections.iter().map(|d| d.bbox).collect();
        let gts: Vec<BBox> = s.truth.iter().map(|(b, _)| *b).collect();
        let m = greedy_match(&dets, &order, &gts, |v| v >= threshold, |_, _| true);
        scored.extend(order.iter().map(|&d| (s.detections[d].score, m[d].is_some())));
    }
    scored.sort_by(|a, b| by_score_desc(a.0, b.0));
    Accumulated { num_gt, tp: scored.into_iter().map(|(_, t)| t).collect() }
}

impl Accumulated {
    /// Precision and recall after each detection.
    pub fn curve(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut precision = Vec::with_capacity(self.tp.len());
        let mut recall = Vec::with_capacity(self.tp.len());
        for &t in &self.tp {
            if t {
                tp += 1;
            } else {
                fp += 1;
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / self.num_gt as f64);
        }
        (precision, recall)
    }

    /// 101-point interpolated AP; undefined without ground truth.
    pub fn average_precision(&self) -> Metric {
        if self.num_gt == 0 {
            return Metric::UNDEFINED;
        }
        let (mut precision, recall) = self.curve();
        for i in (1..precision.len()).rev() {
            precision[i - 1] = precision[i - 1].max(precision[i]);
        }
        let grid = recall_grid();
        let total: f64 = grid
            .iter()
            .map(|&r| {
                let i = recall.partition_point(|&x| x < r);
                precision.get(i).copied().unwrap_or(0.0)
            })
            .sum();
        Metric::value(total / grid.len() as f64)
    }

    pub fn recall(&self) -> Metric {
        Metric::ratio(self.tp.iter().filter(|&&t| t).count() as f64, self.num_gt as f64)
    }
}

fn mean(values: &[Metric]) -> Metric {
    if values.is_empty() || values.iter().any(Metric::is_undefined) {
        return Metric::UNDEFINED;
    }
    Metric::value(values.iter().filter_map(Metric::get).sum::<f64>() / values.len() as f64)
}

fn fmt_t(t: f64) -> String {
    format!("{t:.2}")
}

/// AP at each threshold and averaged over thresholds (at the largest
/// `maxDets`), and AR averaged over thresholds at every `maxDets`.
pub fn eval_coco(scenes: &[Scene], params: &CocoParams) -> EvalReport {
    let mut report = EvalReport::new("coco", serde_json::to_value(params).expect("params serialize"));
    let top = params.max_dets.iter().copied().max().unwrap_or(100);
    let aps: Vec<Metric> =
        params.iou_thresholds.iter().map(|&t| accumulate(scenes, t, top).average_precision()).collect();
    for key in [0.5, 0.75] {
        if let Some(i) = params.iou_thresholds.iter().position(|&t| (t - key).abs() < 1e-9) {
            report.push(format!("AP@{}", fmt_t(key)), Some(top), aps[i]);
        }
    }
    let range = match (params.iou_thresholds.first(), params.iou_thresholds.last()) {
        (Some(a), Some(b)) => format!("[{}:{}]", fmt_t(*a), fmt_t(*b)),
        _ => "[]".to_string(),
    };
    report.push(format!("AP@{range}"), Some(top), mean(&aps));
    for &m in &params.max_dets {
        let ars: Vec<Metric> = params.iou_thresholds.iter().map(|&t| accumulate(scenes, t, m).recall()).collect();
        report.push(format!("AR@{range}"), Some(m), mean(&ars));
    }
    let num_gt: usize = scenes.iter().map(|s| s.truth.len()).sum();
    let num_det: usize = scenes.iter().map(|s| s.detections.len()).sum();
    report.count("images", scenes.len());
    report.count("gt", num_gt);
    report.count("detections", num_det);
    report
}
