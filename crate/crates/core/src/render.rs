//! Draws detections onto a copy of the image: one colored rectangle per
//! detection, with its label above the box.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::evaluation::LabeledDetection;
use crate::font;
use crate::geometry::BBox;

pub type ColorMap = BTreeMap<String, Rgb<u8>>;

/// Color used for unlabelled detections.
pub const UNLABELED: Rgb<u8> = Rgb([255, 0, 0]);

/// A saturated color derived from the label's hash.
pub fn label_color(label: &str) -> Rgb<u8> {
    let h = Sha256::digest(label.as_bytes());
    let hue = u16::from_le_bytes([h[0], h[1]]) as f64 / 65536.0 * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    Rgb([r, g, b].map(|v: f64| (40.0 + 215.0 * v).round() as u8))
}

/// A map giving each label its hashed color.
pub fn color_map<'a>(labels: impl IntoIterator<Item = &'a str>) -> ColorMap {
    labels.into_iter().map(|l| (l.to_string(), label_color(l))).collect()
}

/// Inclusive pixel rectangle covered by `b`, clamped to the image.
fn pixel_rect(b: &BBox, w: u32, h: u32) -> Option<(u32, u32, u32, u32)> {
    let b = b.clip(w as f64, h as f64)?;
    let x0 = b.x1().floor() as u32;
    let y0 = b.y1().floor() as u32;
    let x1 = (b.x2().ceil() as u32).clamp(x0 + 1, w) - 1;
    let y1 = (b.y2().ceil() as u32).clamp(y0 + 1, h) - 1;
    (x0 < w && y0 < h).then_some((x0, y0, x1, y1))
}

pub fn draw_rect(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let Some((x0, y0, x1, y1)) = pixel_rect(b, img.width(), img.height()) else {
        return;
    };
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

/// Rectangles in input order, then labels, so label text stays legible
/// where boxes overlap. Labels go above the box, or inside it at the top
/// edge of the image.
pub fn render_annotations(image: &RgbImage, dets: &[LabeledDetection], colors: &ColorMap, labels: bool) -> RgbImage {
    let mut out = image.clone();
    let color_of = |d: &LabeledDetection| match &d.label {
        Some(l) => colors.get(l).copied().unwrap_or_else(|| label_color(l)),
        None => UNLABELED,
    };
    for d in dets {
        draw_rect(&mut out, &d.bbox, color_of(d));
    }
    if labels {
        for d in dets {
            let Some(text) = &d.label else { continue };
            let Some((x0, y0, _, _)) = pixel_rect(&d.bbox, out.width(), out.height()) else { continue };
            let ty = if y0 > font::GLYPH_H { y0 - font::GLYPH_H - 1 } else { y0 + 2 };
            font::draw_text(&mut out, x0 as i64, ty as i64, text, 1, color_of(d));
        }
    }
    out
}

pub fn save_annotated(
    image: &RgbImage,
    dets: &[LabeledDetection],
    colors: &ColorMap,
    path: &Path,
) -> Result<()> {
    crate::imageio::save_png(&render_annotations(image, dets, colors, true), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::testutil::b;

    fn canvas() -> RgbImage {
        RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 5) as u8, (y * 7) as u8, 90]))
    }

    #[test]
    fn no_detections_leaves_pixels_alone() {
        let img = canvas();
        assert_eq!(render_annotations(&img, &[], &ColorMap::new(), true), img);
    }

    #[test]
    fn one_detection_draws_one_rectangle() {
        let img = canvas();
        let colors = color_map(["a"]);
        let d = LabeledDetection::labeled(b(5.0, 4.0, 15.0, 12.0), 0.9, "a");
        let out = render_annotations(&img, &[d], &colors, false);
        let c = colors["a"];
        for y in 0..30 {
            for x in 0..40 {
                let edge = ((x == 5 || x == 14) && (4..=11).contains(&y)) || ((y == 4 || y == 11) && (5..=14).contains(&x));
                if edge {
                    assert_eq!(*out.get_pixel(x, y), c, "({x},{y})");
                } else {
                    assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn classes_get_their_mapped_colors() {
        let colors = color_map(["a", "b"]);
        assert_ne!(colors["a"], colors["b"]);
        let dets = [
            LabeledDetection::labeled(b(1.0, 1.0, 10.0, 10.0), 0.9, "a"),
            LabeledDetection::labeled(b(20.0, 1.0, 30.0, 10.0), 0.8, "b"),
        ];
        let out = render_annotations(&canvas(), &dets, &colors, true);
        assert_eq!(*out.get_pixel(1, 5), colors["a"]);
        assert_eq!(*out.get_pixel(20, 5), colors["b"]);
    }

    #[test]
    fn rendering_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dets = [LabeledDetection::labeled(b(2.0, 9.0, 30.0, 25.0), 0.9, "plum-e")];
        let (p1, p2) = (dir.path().join("1.png"), dir.path().join("2.png"));
        save_annotated(&canvas(), &dets, &color_map(["plum-e"]), &p1).unwrap();
        save_annotated(&canvas(), &dets, &color_map(["plum-e"]), &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
