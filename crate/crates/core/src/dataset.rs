//! Annotation JSON-lines files: one `{image, boxes, labels}` object per line,
//! image paths relative to the annotation file's directory.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::QueryProduct;
use crate::geometry::BBox;
use crate::imageio::{load_rgb, rgb_to_tensor};
use crate::localizer::DetectionSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub boxes: Vec<BBox>,
    pub labels: Vec<String>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{}: {} boxes but {} labels",
                self.image,
                self.boxes.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }

    pub fn items(&self) -> impl Iterator<Item = (&BBox, &str)> {
        self.boxes.iter().zip(self.labels.iter().map(String::as_str))
    }
}

/// Reads every line of a JSON-lines file into `T`, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            what: "json-lines file",
            reason: format!("{}:{}: {e}", path.display(), n + 1),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let rows: Vec<Annotation> = read_jsonl(path)?;
    for r in &rows {
        r.validate()?;
    }
    Ok(rows)
}

/// Image path of an annotation, resolved against the annotation file.
pub fn resolve_image(annotations_path: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        annotations_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads images and class-agnostic boxes for detector training.
pub fn load_detection_samples(annotations_path: &Path) -> Result<Vec<DetectionSample>> {
    read_annotations(annotations_path)?
        .into_iter()
        .map(|a| {
            let img = load_rgb(&resolve_image(annotations_path, &a.image))?;
            Ok(DetectionSample { image: rgb_to_tensor(&img), boxes: a.boxes })
        })
        .collect()
}

/// The query database: every `*.png` in `dir`, labelled by file stem and
/// sorted by label.
pub fn load_queries(dir: &Path) -> Result<Vec<QueryProduct>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no query images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let label = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::invalid(format!("bad file name {}", p.display())))?;
            Ok(QueryProduct { label: label.to_string(), image: load_rgb(p)? })
        })
        .collect()
}
