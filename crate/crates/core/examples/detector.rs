//! Trains the class-agnostic region localizer on synthetic shelves, saves
//! its weights archive and scores held-out detections with the COCO protocol.
//!
//! `cargo run --release --example detector`

use rackscan::archive;
use rackscan::evaluation::{eval_coco, CocoParams, LabeledDetection, Scene};
use rackscan::imageio::rgb_to_tensor;
use rackscan::localizer::{train_detector, DetectionSample, Detector, DetectorConfig, InferenceConfig, TargetConfig, TrainSchedule};
use rackscan::synthetic::{generate_scene, SyntheticSpec};

fn main() -> rackscan::Result<()> {
    let spec = SyntheticSpec::default();
    let samples: Vec<DetectionSample> = (0..100)
        .map(|i| {
            let s = generate_scene(&spec, i)?;
            Ok(DetectionSample { image: rgb_to_tensor(&s.image), boxes: s.placements.iter().map(|p| p.bbox()).collect() })
        })
        .collect::<rackscan::Result<_>>()?;

    let detector = Detector::<f32>::new(DetectorConfig::desk(), 1)?;
    let run = train_detector(detector, &samples, &TrainSchedule::desk(), &TargetConfig::default(), 2)?;
    for (epoch, loss) in run.epoch_loss.iter().enumerate() {
        println!("epoch {:>2}  loss {loss:.4}", epoch + 1);
    }
    let path = std::env::temp_dir().join("rackscan-detector.safetensors");
    let fingerprint = archive::save(&run.detector, &path)?;
    println!("saved {} ({})", path.display(), &fingerprint[..12]);

    let cfg = InferenceConfig::default();
    let scenes: Vec<Scene> = (1000..1020)
        .map(|i| {
            let s = generate_scene(&spec, i)?;
            let dets = run.detector.detect(&rgb_to_tensor(&s.image), 100, &cfg)?;
            let truth = s.annotation("", &spec);
            Ok(Scene::new(dets.iter().map(|d| LabeledDetection::unlabeled(d.bbox, d.score)).collect(), &truth))
        })
        .collect::<rackscan::Result<_>>()?;
    print!("{}", eval_coco(&scenes, &CocoParams::default()).to_key_value());
    Ok(())
}
