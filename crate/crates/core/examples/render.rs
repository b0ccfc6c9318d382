//! Draws ground-truth boxes and labels over a synthetic shelf, one stable
//! color per label, and writes the figure as a PNG.
//!
//! `cargo run --example render -- [OUT.png]`

use std::path::PathBuf;

use rackscan::evaluation::LabeledDetection;
use rackscan::render::{color_map, save_annotated};
use rackscan::synthetic::{generate_scene, SyntheticSpec};

fn main() -> rackscan::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rackscan-render.png"));
    let spec = SyntheticSpec { image_size: 256, rows: 4, cols: 5, ..SyntheticSpec::default() };
    let scene = generate_scene(&spec, 3)?;
    let truth = scene.annotation("", &spec);
    let dets: Vec<LabeledDetection> = truth.items().map(|(b, l)| LabeledDetection::labeled(*b, 1.0, l)).collect();
    let labels = spec.labels();
    save_annotated(&scene.image, &dets, &color_map(labels.iter().map(String::as_str)), &out)?;
    println!("{} packages drawn to {}", dets.len(), out.display());
    Ok(())
}
