//! Trains both models on a synthetic shelf dataset, builds the gallery and
//! scores held-out scenes with the label-aware and center-in-box protocols.
//!
//! `cargo run --release --example end_to_end`

use std::time::Instant;

use rackscan::embedder::augment::AugmentParams;
use rackscan::embedder::train::{train_embedder, EmbedderSchedule};
use rackscan::embedder::{Embedder, EmbedderConfig};
use rackscan::evaluation::{eval_center_f1, eval_map_pr_05, Scene};
use rackscan::gallery::build_gallery;
use rackscan::imageio::rgb_to_tensor;
use rackscan::localizer::{train_detector, DetectionSample, Detector, DetectorConfig, TargetConfig, TrainSchedule};
use rackscan::pipeline::{PipelineConfig, Recognizer};
use rackscan::synthetic::{generate_scene, query_database, SyntheticSpec};

fn main() -> rackscan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let (n_train, n_test) = (200u64, 20u64);
    let train: Vec<_> = (0..n_train).map(|i| generate_scene(&spec, i)).collect::<Result<_, _>>()?;
    let test: Vec<_> = (n_train..n_train + n_test).map(|i| generate_scene(&spec, i)).collect::<Result<_, _>>()?;
    let samples: Vec<DetectionSample> = train
        .iter()
        .map(|s| DetectionSample { image: rgb_to_tensor(&s.image), boxes: s.placements.iter().map(|p| p.bbox()).collect() })
        .collect();

    let detector = Detector::<f32>::new(DetectorConfig::desk(), 1)?;
    let trained = train_detector(detector, &samples, &TrainSchedule::desk(), &TargetConfig::default(), 2)?;
    println!("detector trained in {:.1}s", start.elapsed().as_secs_f64());

    let db = query_database(&spec)?;
    let aug = AugmentParams::default();
    let embedder = Embedder::<f32>::new(EmbedderConfig::desk(), 3);
    let emb = train_embedder(embedder, &db, &EmbedderSchedule::desk(), &aug, 4)?;
    println!("embedder trained in {:.1}s", start.elapsed().as_secs_f64());

    let index = build_gallery(&db, &emb.embedder, "in-memory", 10, &aug, 5)?;
    let rec = Recognizer::new(trained.detector, emb.embedder, "in-memory", index, PipelineConfig::default())?;
    let scenes: Vec<Scene> = test
        .iter()
        .map(|s| {
            let truth = s.annotation("", &spec);
            Ok(Scene { detections: rec.recognize(&s.image)?, truth: truth.boxes.into_iter().zip(truth.labels).collect() })
        })
        .collect::<rackscan::Result<_>>()?;
    print!("{}", eval_map_pr_05(&scenes).to_key_value());
    print!("{}", eval_center_f1(&scenes).to_key_value());
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
