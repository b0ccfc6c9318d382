//! The `rackscan` command line. [`run`] returns the process exit code:
//! 0 on success, 1 on a usage error, 2 when data or weights are unusable.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::archive;
use crate::config::{stream, Config};
use crate::dataset::{load_detection_samples, load_queries, read_annotations, read_jsonl, resolve_image};
use crate::embedder::{train_embedder, Embedder, EmbedderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    eval_center_f1, eval_coco, eval_map_pr_05, eval_topk_map, pair_scenes, CocoParams, EvalReport, LabeledDetection,
    SceneDetections,
};
use crate::gallery::{build_gallery, save_index};
use crate::imageio::{load_rgb, rgb_to_tensor};
use crate::localizer::{train_detector, Detector, DetectorConfig, InferenceConfig, TargetConfig};
use crate::pipeline::{recognize_annotated, Recognizer};
use crate::render::{color_map, save_annotated};
use crate::synthetic::generate_dataset;

#[derive(Debug, Parser)]
#[command(name = "rackscan", version, about = "Shelf product detection and recognition")]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; default paths of data, weights and reports live here.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shelf dataset with query images.
    GenSynthetic {
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Train the localizer on an annotation file.
    TrainDetector {
        #[arg(long, value_name = "JSONL")]
        annotations: Option<PathBuf>,
    },
    /// Train the embedder on a directory of query images.
    TrainEmbedder {
        #[arg(long, value_name = "DIR")]
        queries: Option<PathBuf>,
    },
    /// Embed the query images and their augmentations into a gallery index.
    BuildGallery {
        #[arg(long, value_name = "DIR")]
        queries: Option<PathBuf>,
    },
    /// Class-agnostic detection on one image.
    Detect {
        #[arg(long)]
        image: PathBuf,
    },
    /// Detection plus recognition, on one image or every image of an annotation file.
    Recognize(RecognizeArgs),
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct RecognizeArgs {
    #[arg(long, required_unless_present = "annotations", conflicts_with = "annotations")]
    pub image: Option<PathBuf>,
    #[arg(long, required_unless_present = "image", value_name = "JSONL")]
    pub annotations: Option<PathBuf>,
    /// Use a gallery built with different embedder weights.
    #[arg(long)]
    pub allow_stale_gallery: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Coco,
    Map05,
    CenterF1,
    Topk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Kv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(value_enum)]
    pub protocol: Protocol,
    /// Detections, one `{image, boxes}` object per line.
    #[arg(long, value_name = "JSONL")]
    pub dets: PathBuf,
    /// Ground-truth annotations.
    #[arg(long, value_name = "JSONL")]
    pub gts: PathBuf,
    /// K values for the top-K protocol.
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 50])]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Kv)]
    pub format: Format,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(|e| Error::io(path, e))
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenSynthetic { n_scenes } => {
            let dir = cfg.data_dir();
            let summary = generate_dataset(&cfg.synthetic_spec(), n_scenes.unwrap_or(cfg.n_scenes), cfg.splits(), &dir)?;
            println!(
                "wrote {} train / {} val / {} test scenes and {} query images to {}",
                summary.counts[0],
                summary.counts[1],
                summary.counts[2],
                summary.classes.len(),
                dir.display()
            );
        }
        Command::TrainDetector { annotations } => {
            let path = annotations.clone().unwrap_or_else(|| cfg.data_dir().join("train.jsonl"));
            let samples = load_detection_samples(&path)?;
            let detector = Detector::<f32>::new(DetectorConfig::desk(), cfg.stage_seed(stream::DETECTOR_INIT))?;
            let trained = train_detector(
                detector,
                &samples,
                &cfg.detector_schedule(),
                &TargetConfig::default(),
                cfg.stage_seed(stream::DETECTOR_TRAIN),
            )?;
            create_dir(&cfg.out)?;
            trained.write_csv(&cfg.out.join("detector_log.csv"))?;
            let weights = cfg.detector_weights();
            let fp = archive::save(&trained.detector, &weights)?;
            println!("wrote {} (sha256 {fp})", weights.display());
        }
        Command::TrainEmbedder { queries } => {
            let db = load_queries(&queries.clone().unwrap_or_else(|| cfg.data_dir().join("queries")))?;
            let embedder = Embedder::<f32>::new(EmbedderConfig::desk(), cfg.stage_seed(stream::EMBEDDER_INIT));
            let trained =
                train_embedder(embedder, &db, &cfg.embedder_schedule(), &cfg.augment(), cfg.stage_seed(stream::EMBEDDER_TRAIN))?;
            create_dir(&cfg.out)?;
            trained.write_csv(&cfg.out.join("embedder_log.csv"))?;
            let weights = cfg.embedder_weights();
            let fp = archive::save(&trained.embedder, &weights)?;
            println!("wrote {} (sha256 {fp})", weights.display());
        }
        Command::BuildGallery { queries } => {
            let db = load_queries(&queries.clone().unwrap_or_else(|| cfg.data_dir().join("queries")))?;
            let (embedder, fp) = archive::load::<Embedder<f32>>(&cfg.embedder_weights())?;
            let index = build_gallery(&db, &embedder, &fp, cfg.n_aug, &cfg.augment(), cfg.stage_seed(stream::GALLERY))?;
            let path = cfg.gallery_index();
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_index(&index, &path)?;
            println!("wrote {} ({} entries, {} labels)", path.display(), index.len(), db.len());
        }
        Command::Detect { image } => {
            let (detector, _) = archive::load::<Detector<f32>>(&cfg.detector_weights())?;
            let img = load_rgb(image)?;
            let inference = InferenceConfig { score_threshold: cfg.score_threshold, ..InferenceConfig::default() };
            let boxes = detector
                .detect(&rgb_to_tensor(&img), cfg.max_dets, &inference)?
                .into_iter()
                .map(|d| LabeledDetection::unlabeled(d.bbox, d.score))
                .collect();
            let doc = SceneDetections { image: image.display().to_string(), boxes };
            let path = cfg.out.join(format!("{}.detections.json", stem(image)));
            write_file(&path, format!("{}\n", serde_json::to_string(&doc)?).as_bytes())?;
            println!("wrote {} ({} boxes)", path.display(), doc.boxes.len());
        }
        Command::Recognize(args) => {
            let mut pipe = cfg.pipeline();
            pipe.allow_stale_gallery |= args.allow_stale_gallery;
            let recognizer = Recognizer::load(&pipe)?;
            let colors = color_map(recognizer.index.labels());
            if let Some(image) = &args.image {
                let img = load_rgb(image)?;
                let doc = SceneDetections { image: image.display().to_string(), boxes: recognizer.recognize(&img)? };
                let json = cfg.out.join(format!("{}.json", stem(image)));
                write_file(&json, format!("{}\n", serde_json::to_string(&doc)?).as_bytes())?;
                let png = cfg.out.join(format!("{}.png", stem(image)));
                save_annotated(&img, &doc.boxes, &colors, &png)?;
                println!("wrote {} and {} ({} detections)", json.display(), png.display(), doc.boxes.len());
            } else if let Some(ann) = &args.annotations {
                let docs = recognize_annotated(&recognizer, ann)?;
                let path = cfg.out.join("detections.jsonl");
                create_dir(&cfg.out)?;
                crate::dataset::write_jsonl(&path, &docs)?;
                let rendered = cfg.out.join("rendered");
                create_dir(&rendered)?;
                for d in &docs {
                    let img = load_rgb(&resolve_image(ann, &d.image))?;
                    save_annotated(&img, &d.boxes, &colors, &rendered.join(format!("{}.png", stem(Path::new(&d.image)))))?;
                }
                println!("wrote {} ({} images)", path.display(), docs.len());
            }
        }
        Command::Evaluate(args) => {
            let report = evaluate(args)?;
            let name = format!("report_{}", report.protocol);
            create_dir(&cfg.out)?;
            write_file(&cfg.out.join(format!("{name}.json")), format!("{}\n", report.to_json()).as_bytes())?;
            write_file(&cfg.out.join(format!("{name}.txt")), report.to_key_value().as_bytes())?;
            match args.format {
                Format::Json => println!("{}", report.to_json()),
                Format::Kv => print!("{}", report.to_key_value()),
            }
        }
    }
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let dets: Vec<SceneDetections> = read_jsonl(&args.dets)?;
    let gts = read_annotations(&args.gts)?;
    let scenes = pair_scenes(&dets, &gts)?;
    Ok(match args.protocol {
        Protocol::Coco => eval_coco(&scenes, &CocoParams::default()),
        Protocol::Map05 => eval_map_pr_05(&scenes),
        Protocol::CenterF1 => eval_center_f1(&scenes),
        Protocol::Topk => eval_topk_map(&scenes, &args.k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["rackscan", "frobnicate"]), 1);
        assert_eq!(run(["rackscan", "evaluate", "bogus", "--dets", "a", "--gts", "b"]), 1);
        assert_eq!(run(["rackscan", "recognize"]), 1);
        assert_eq!(run(["rackscan", "recognize", "--image", "a.png", "--annotations", "b.jsonl"]), 1);
        assert_eq!(run(["rackscan", "--help"]), 0);
    }

    #[test]
    fn missing_weights_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["rackscan", "--out", out, "detect", "--image", "nope.png"]), 2);
        let err = execute(&Cli::parse_from(["rackscan", "--out", out, "detect", "--image", "x.png"])).unwrap_err();
        assert!(err.to_string().contains("detector.safetensors"), "{err}");
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\nout = \"x\"\n").unwrap();
        let cli = Cli::parse_from(["rackscan", "--config", path.to_str().unwrap(), "--seed", "9", "gen-synthetic"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.out), (9, PathBuf::from("x")));
    }
}
