//! Generates a small synthetic shelf dataset: scene images, per-split
//! annotation files and the query catalogue.
//!
//! `cargo run --example synthetic_dataset -- [OUT_DIR]`

use std::path::PathBuf;

use rackscan::dataset::read_annotations;
use rackscan::synthetic::{generate_dataset, SyntheticSpec};

fn main() -> rackscan::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rackscan-synthetic"));
    let spec = SyntheticSpec { seed: 11, ..SyntheticSpec::default() };
    let summary = generate_dataset(&spec, 30, [0.7, 0.1, 0.2], &out)?;
    println!("wrote {} train / {} val / {} test scenes to {}", summary.counts[0], summary.counts[1], summary.counts[2], out.display());
    println!("classes: {}", summary.classes.join(", "));

    let test = read_annotations(&out.join("test.jsonl"))?;
    for a in test.iter().take(3) {
        println!("{}: {} packages", a.image, a.boxes.len());
        for (b, l) in a.boxes.iter().zip(&a.labels) {
            println!("  {l:<8} [{:.0}, {:.0}, {:.0}, {:.0}]", b.x1(), b.y1(), b.x2(), b.y2());
        }
    }
    Ok(())
}
