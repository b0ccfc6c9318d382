//! Runs the four evaluation protocols on one set of scenes: perturbed
//! copies of synthetic ground truth with a few label swaps and false alarms.
//!
//! `cargo run --example protocols`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rackscan::evaluation::{eval_center_f1, eval_coco, eval_map_pr_05, eval_topk_map, CocoParams, LabeledDetection, Scene};
use rackscan::geometry::BBox;
use rackscan::synthetic::{generate_scene, SyntheticSpec};

fn main() -> rackscan::Result<()> {
    let spec = SyntheticSpec::default();
    let labels = spec.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut scenes = Vec::new();
    for i in 0..25 {
        let truth = generate_scene(&spec, i)?.annotation("", &spec);
        let mut dets = Vec::new();
        for (b, l) in truth.items() {
            let j = |r: &mut ChaCha8Rng| r.gen_range(-3.0..3.0);
            let bbox = BBox::new(b.x1() + j(&mut rng), b.y1() + j(&mut rng), b.x2() + j(&mut rng), b.y2() + j(&mut rng))?;
            let label = if rng.gen_bool(0.1) { labels[rng.gen_range(0..labels.len())].clone() } else { l.to_string() };
            let mut d = LabeledDetection::labeled(bbox, rng.gen_range(0.3..1.0), &label);
            d.topk = std::iter::once(label.clone()).chain(labels.iter().filter(|x| **x != label).cloned()).take(5).collect();
            d.topk.swap(0, rng.gen_range(0..2));
            dets.push(d);
        }
        for _ in 0..rng.gen_range(0..3) {
            let (x, y) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
            dets.push(LabeledDetection::labeled(BBox::new(x, y, x + 20.0, y + 20.0)?, rng.gen_range(0.0..0.5), &labels[0]));
        }
        scenes.push(Scene::new(dets, &truth));
    }

    for report in [
        eval_coco(&scenes, &CocoParams::default()),
        eval_map_pr_05(&scenes),
        eval_center_f1(&scenes),
        eval_topk_map(&scenes, &[1, 5]),
    ] {
        print!("{}", report.to_key_value());
        println!();
    }
    Ok(())
}
