//! The four evaluation protocols, each a pure function from paired
//! detections and ground truth to an [`EvalReport`].

pub mod center_f1;
pub mod coco;
pub mod map05;
pub mod topk;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{by_score_desc, iou, BBox};

pub use center_f1::eval_center_f1;
pub use coco::{eval_coco, CocoParams};
pub use map05::eval_map_pr_05;
pub use topk::eval_topk_map;

/// Ground truth of one image.
pub type GroundTruthScene = Annotation;

/// A detection as emitted by the recognition pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub distance: Option<f64>,
    /// Candidate labels, best first.
    #[serde(default)]
    pub topk: Vec<String>,
}

impl LabeledDetection {
    pub fn unlabeled(bbox: BBox, score: f64) -> Self {
        Self { bbox, score, label: None, distance: None, topk: Vec::new() }
    }

    pub fn labeled(bbox: BBox, score: f64, label: &str) -> Self {
        Self { bbox, score, label: Some(label.to_string()), distance: None, topk: vec![label.to_string()] }
    }
}

/// The detections JSON document for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub image: String,
    pub boxes: Vec<LabeledDetection>,
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub detections: Vec<LabeledDetection>,
    pub truth: Vec<(BBox, String)>,
}

impl Scene {
    pub fn new(detections: Vec<LabeledDetection>, gt: &Annotation) -> Self {
        Self { detections, truth: gt.items().map(|(b, l)| (*b, l.to_string())).collect() }
    }

    /// Detection indices by descending score, ties in input order.
    pub fn score_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.detections.len()).collect();
        order.sort_by(|&a, &b| by_score_desc(self.detections[a].score, self.detections[b].score));
        order
    }
}

/// Pairs detections with ground truth by image name, in ground-truth order.
/// Images without detections evaluate as empty; detections for an image
/// absent from the ground truth are an error.
pub fn pair_scenes(dets: &[SceneDetections], gts: &[GroundTruthScene]) -> Result<Vec<Scene>> {
    let mut by_image: HashMap<&str, &SceneDetections> = HashMap::new();
    for d in dets {
        if by_image.insert(d.image.as_str(), d).is_some() {
            return Err(Error::invalid(format!("duplicate detections for image {}", d.image)));
        }
    }
    let mut scenes = Vec::with_capacity(gts.len());
    for g in gts {
        g.validate()?;
        let d = by_image.remove(g.image.as_str()).map(|d| d.boxes.clone()).unwrap_or_default();
        scenes.push(Scene::new(d, g));
    }
    if let Some(extra) = by_image.keys().min() {
        return Err(Error::invalid(format!("detections for unknown image {extra}")));
    }
    Ok(scenes)
}

/// Greedy matching: detections are visited in `order`; each takes the
/// unmatched eligible ground truth with the highest IoU passing the
/// threshold (ties to the lower index). Returns the match per detection.
pub(crate) fn greedy_match(
    dets: &[BBox],
    order: &[usize],
    gts: &[BBox],
    passes: impl Fn(f64) -> bool,
    eligible: impl Fn(usize, usize) -> bool,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || !eligible(d, g) {
                continue;
            }
            let v = iou(&dets[d], gt);
            if passes(v) && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// A rate that may be undefined for lack of data; serialized as `null`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Metric(pub Option<f64>);

impl Metric {
    pub const UNDEFINED: Metric = Metric(None);

    pub fn value(v: f64) -> Self {
        Metric(Some(v))
    }

    /// `num / den`, undefined when `den` is zero.
    pub fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Self::UNDEFINED
        } else {
            Self::value(num / den)
        }
    }

    pub fn get(&self) -> Option<f64> {
        self.0
    }

    pub fn is_undefined(&self) -> bool {
        self.0.is_none()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.6}"),
            None => f.write_str("undefined"),
        }
    }
}

/// One table row: a named value, optionally qualified by `maxDets`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    #[serde(rename = "maxDets", skip_serializing_if = "Option::is_none", default)]
    pub max_dets: Option<usize>,
    pub value: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub rows: Vec<ReportRow>,
    pub counts: Vec<(String, usize)>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(protocol: &str, config: serde_json::Value) -> Self {
        Self { protocol: protocol.to_string(), rows: Vec::new(), counts: Vec::new(), config }
    }

    pub fn push(&mut self, metric: impl Into<String>, max_dets: Option<usize>, value: Metric) {
        self.rows.push(ReportRow { metric: metric.into(), max_dets, value });
    }

    pub fn count(&mut self, name: &str, n: usize) {
        self.counts.push((name.to_string(), n));
    }

    /// First row named `metric` (and `max_dets`, when given).
    pub fn get(&self, metric: &str, max_dets: Option<usize>) -> Option<Metric> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && (max_dets.is_none() || r.max_dets == max_dets))
            .map(|r| r.value)
    }

    pub fn get_count(&self, name: &str) -> Option<usize> {
        self.counts.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = format!("protocol = {}\n", self.protocol);
        for r in &self.rows {
            match r.max_dets {
                Some(m) => s.push_str(&format!("{} maxDets={} = {}\n", r.metric, m, r.value)),
                None => s.push_str(&format!("{} = {}\n", r.metric, r.value)),
            }
        }
        for (n, c) in &self.counts {
            s.push_str(&format!("count.{n} = {c}\n"));
        }
        if let serde_json::Value::Object(map) = &self.config {
            for (k, v) in map {
                s.push_str(&format!("config.{k} = {v}\n"));
            }
        }
        s
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;

    pub fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// A small random scene on a 40×40 canvas whose detections jitter
    /// around the ground truth so that matches at various IoUs occur.
    pub fn random_scene(rng: &mut impl Rng, max_gt: usize, max_det: usize, labels: &[&str]) -> Scene {
        let rand_box = |rng: &mut dyn rand::RngCore| {
            let x = rng.gen_range(0.0..30.0);
            let y = rng.gen_range(0.0..30.0);
            b(x, y, x + rng.gen_range(4.0..12.0), y + rng.gen_range(4.0..12.0))
        };
        let truth: Vec<(BBox, String)> = (0..rng.gen_range(0..=max_gt))
            .map(|_| (rand_box(rng), labels[rng.gen_range(0..labels.len())].to_string()))
            .collect();
        let detections = (0..rng.gen_range(0..=max_det))
            .map(|_| {
                let bbox = if !truth.is_empty() && rng.gen_bool(0.7) {
                    let g = truth[rng.gen_range(0..truth.len())].0;
                    let j = |rng: &mut dyn rand::RngCore| rng.gen_range(-2.0..2.0);
                    let (x1, y1) = (g.x1() + j(rng), g.y1() + j(rng));
                    b(x1, y1, (g.x2() + j(rng)).max(x1 + 1.0), (g.y2() + j(rng)).max(y1 + 1.0))
                } else {
                    rand_box(rng)
                };
                // coarse scores so ties occur
                let score = rng.gen_range(1..=6) as f64 / 6.0;
                let mut topk: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
                for i in (1..topk.len()).rev() {
                    topk.swap(i, rng.gen_range(0..=i));
                }
                LabeledDetection { bbox, score, label: Some(topk[0].clone()), distance: None, topk }
            })
            .collect();
        Scene { detections, truth }
    }

    /// Reorders detections while keeping equal-score detections in their
    /// original relative order.
    pub fn permute_keeping_ties(scene: &Scene, rng: &mut impl Rng) -> Scene {
        let mut keyed: Vec<(u64, usize)> = (0..scene.detections.len()).map(|i| (rng.gen(), i)).collect();
        keyed.sort();
        let mut order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
        // restore relative order within each score class
        let mut by_score: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
        for &i in &order {
            by_score.entry(scene.detections[i].score.to_bits()).or_default().push(i);
        }
        for idxs in by_score.values_mut() {
            idxs.sort();
        }
        let mut cursor: HashMap<u64, usize> = HashMap::new();
        for slot in order.iter_mut() {
            let key = scene.detections[*slot].score.to_bits();
            let c = cursor.entry(key).or_insert(0);
            *slot = by_score[&key][*c];
            *c += 1;
        }
        Scene { detections: order.iter().map(|&i| scene.detections[i].clone()).collect(), truth: scene.truth.clone() }
    }
}
