//! Procedural shelf scenes: a grid of rack cells, each holding one flat
//! product package (or left blank), plus one clean query image per class.
//!
//! Every package is an axis-aligned filled rectangle, so its annotation box
//! is exactly the bounding box of its pixel mask. Packages carry a colored
//! body, an emblem shape and a letter. Two catalogue entries share body and
//! emblem and differ only in the letter.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_jsonl, Annotation};
use crate::embedder::augment::derive_seed;
use crate::error::{Error, Result};
use crate::font;
use crate::gallery::QueryProduct;
use crate::geometry::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Emblem {
    Circle,
    Ring,
    Square,
    Triangle,
    Diamond,
    Cross,
    Bar,
}

impl Emblem {
    /// Whether normalized point `(u, v)` in `[-1, 1]²` is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Emblem::Circle => u * u + v * v <= 1.0,
            Emblem::Ring => (0.45..=1.0).contains(&(u * u + v * v)),
            Emblem::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Emblem::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Emblem::Diamond => u.abs() + v.abs() <= 1.0,
            Emblem::Cross => u.abs() <= 0.3 || v.abs() <= 0.3,
            Emblem::Bar => v.abs() <= 0.35,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductGlyph {
    pub name: &'static str,
    pub body: [u8; 3],
    pub emblem: Emblem,
    pub emblem_color: [u8; 3],
    pub letter: char,
}

const fn glyph(name: &'static str, body: [u8; 3], emblem: Emblem, emblem_color: [u8; 3], letter: char) -> ProductGlyph {
    ProductGlyph { name, body, emblem, emblem_color, letter }
}

const WHITE: [u8; 3] = [245, 245, 245];

pub const CATALOGUE: [ProductGlyph; 12] = [
    glyph("tomato", [200, 40, 40], Emblem::Circle, WHITE, 'A'),
    glyph("ocean", [40, 70, 200], Emblem::Triangle, [240, 220, 40], 'B'),
    glyph("mint", [40, 160, 70], Emblem::Square, WHITE, 'C'),
    glyph("amber", [235, 140, 30], Emblem::Diamond, [30, 30, 110], 'D'),
    glyph("lagoon", [30, 165, 175], Emblem::Cross, WHITE, 'G'),
    glyph("lemon", [225, 205, 40], Emblem::Ring, [190, 30, 30], 'H'),
    glyph("plum-e", [130, 50, 170], Emblem::Circle, WHITE, 'E'),
    glyph("plum-f", [130, 50, 170], Emblem::Circle, WHITE, 'F'),
    glyph("rose", [235, 110, 170], Emblem::Bar, [20, 20, 20], 'K'),
    glyph("cocoa", [120, 75, 35], Emblem::Triangle, WHITE, 'M'),
    glyph("slate", [85, 105, 150], Emblem::Diamond, [240, 220, 40], 'P'),
    glyph("lime", [150, 210, 60], Emblem::Square, [110, 30, 140], 'R'),
];

const SHELF: [u8; 3] = [112, 98, 84];
const PLANK: [u8; 3] = [66, 52, 42];
const PLANK_ROWS: u32 = 3;

/// The letter sits inside the central band that survives any crop keeping
/// at least 80% of each side.
const LETTER_TOP: f64 = 0.42;
const LETTER_BOTTOM: f64 = 0.8;

/// Query images leave this fraction of the side as margin around the
/// package.
pub const QUERY_MARGIN: f64 = 0.12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: u32,
    pub rows: u32,
    pub cols: u32,
    pub classes: usize,
    pub blank_prob: f64,
    /// How much of a cell's free space the package position may wander, in `[0, 1]`.
    pub jitter: f64,
    /// Package size as a fraction of the shorter usable cell side.
    pub scale: (f64, f64),
    /// Package width:height ratio range.
    pub aspect: (f64, f64),
    /// Global brightness multiplier range.
    pub illumination: (f64, f64),
    /// Amplitude of per-pixel noise, in 8-bit levels.
    pub noise: f64,
    pub query_size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            rows: 3,
            cols: 3,
            classes: 8,
            blank_prob: 0.15,
            jitter: 1.0,
            scale: (0.6, 0.9),
            aspect: (0.87, 1.15),
            illumination: (0.85, 1.15),
            noise: 6.0,
            query_size: 64,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > CATALOGUE.len() {
            return Err(Error::invalid(format!("classes must be in 2..={}", CATALOGUE.len())));
        }
        if !(0.0..=1.0).contains(&self.blank_prob) || !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::invalid("blank_prob and jitter must lie in [0, 1]"));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("scale range must satisfy 0 < lo <= hi <= 1"));
        }
        let (lo, hi) = self.aspect;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("aspect range must satisfy 0 < lo <= hi"));
        }
        let (lo, hi) = self.illumination;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("illumination range must satisfy 0 < lo <= hi"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        if self.rows == 0 || self.cols == 0 || self.image_size < 8 * self.rows.max(self.cols) || self.query_size < 16 {
            return Err(Error::invalid("grid too fine for the image size"));
        }
        Ok(())
    }

    pub fn glyphs(&self) -> &'static [ProductGlyph] {
        &CATALOGUE[..self.classes.min(CATALOGUE.len())]
    }

    pub fn labels(&self) -> Vec<String> {
        self.glyphs().iter().map(|g| g.name.to_string()).collect()
    }
}

/// One package: catalogue index and pixel rectangle `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub class: usize,
    pub rect: [u32; 4],
}

impl Placement {
    pub fn bbox(&self) -> BBox {
        let [x, y, w, h] = self.rect.map(f64::from);
        BBox::new(x, y, x + w, y + h).expect("placements have positive size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub placements: Vec<Placement>,
    pub illumination: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub placements: Vec<Placement>,
    /// Per pixel, 0 for background or `1 + placement index`.
    pub instance_map: Vec<u16>,
}

impl SyntheticScene {
    pub fn annotation(&self, image: &str, spec: &SyntheticSpec) -> Annotation {
        let glyphs = spec.glyphs();
        Annotation {
            image: image.to_string(),
            boxes: self.placements.iter().map(Placement::bbox).collect(),
            labels: self.placements.iter().map(|p| glyphs[p.class].name.to_string()).collect(),
        }
    }

    /// Bounding box of each instance's mask, recomputed from the pixels.
    pub fn mask_boxes(&self) -> Vec<Option<BBox>> {
        let w = self.image.width() as usize;
        let mut ext: Vec<Option<[usize; 4]>> = vec![None; self.placements.len()];
        for (i, &id) in self.instance_map.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let e = ext[id as usize - 1].get_or_insert([x, y, x, y]);
            *e = [e[0].min(x), e[1].min(y), e[2].max(x), e[3].max(y)];
        }
        ext.into_iter()
            .map(|e| e.and_then(|[x1, y1, x2, y2]| BBox::new(x1 as f64, y1 as f64, x2 as f64 + 1.0, y2 as f64 + 1.0).ok()))
            .collect()
    }
}

pub fn sample_layout(spec: &SyntheticSpec, rng: &mut impl Rng) -> SceneLayout {
    let cell_w = spec.image_size as f64 / spec.cols as f64;
    let cell_h = spec.image_size as f64 / spec.rows as f64;
    let usable_h = cell_h - PLANK_ROWS as f64;
    let mut placements = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let blank = rng.gen_bool(spec.blank_prob);
            let class = rng.gen_range(0..spec.classes);
            let side = rng.gen_range(spec.scale.0..=spec.scale.1) * cell_w.min(usable_h);
            let aspect = rng.gen_range(spec.aspect.0..=spec.aspect.1).sqrt();
            let (jx, jy) = (rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5));
            if blank {
                continue;
            }
            let w = (side * aspect).round().clamp(4.0, cell_w.floor() - 1.0);
            let h = (side / aspect).round().clamp(4.0, usable_h.floor() - 1.0);
            let x0 = c as f64 * cell_w;
            let y0 = r as f64 * cell_h;
            let x = (x0 + (cell_w - w) * (0.5 + jx * spec.jitter)).round().clamp(x0.ceil(), (x0 + cell_w - w).floor());
            let y = (y0 + (usable_h - h) * (0.5 + jy * spec.jitter)).round().clamp(y0.ceil(), (y0 + usable_h - h).floor());
            placements.push(Placement { class, rect: [x as u32, y as u32, w as u32, h as u32] });
        }
    }
    let illumination = rng.gen_range(spec.illumination.0..=spec.illumination.1);
    SceneLayout { placements, illumination, noise_seed: rng.gen() }
}

fn scaled(c: [u8; 3], f: f64) -> [f64; 3] {
    c.map(|v| v as f64 * f)
}

/// Paints one package into `px`, a float RGB buffer of width `stride`,
/// stamping `id` into `ids` for every pixel written.
fn paint_package(px: &mut [[f64; 3]], ids: &mut [u16], id: u16, stride: usize, g: &ProductGlyph, rect: [u32; 4]) {
    let [x0, y0, w, h] = rect.map(|v| v as usize);
    let border = scaled(g.body, 0.6);
    for dy in 0..h {
        for dx in 0..w {
            let (u, v) = ((dx as f64 + 0.5) / w as f64, (dy as f64 + 0.5) / h as f64);
            let mut color = g.body.map(f64::from);
            if dx == 0 || dy == 0 || dx + 1 == w || dy + 1 == h {
                color = border;
            } else if (0.2..0.8).contains(&u) && (0.07..0.39).contains(&v) {
                if g.emblem.contains((u - 0.5) / 0.3, (v - 0.23) / 0.16) {
                    color = g.emblem_color.map(f64::from);
                }
            } else if (0.21..0.79).contains(&u) && (LETTER_TOP..LETTER_BOTTOM).contains(&v) {
                let col = ((u - 0.21) / 0.58 * font::GLYPH_W as f64) as u32;
                let row = ((v - LETTER_TOP) / (LETTER_BOTTOM - LETTER_TOP) * font::GLYPH_H as f64) as u32;
                if font::pixel(g.letter, col, row) {
                    color = g.emblem_color.map(f64::from);
                }
            }
            px[(y0 + dy) * stride + x0 + dx] = color;
            ids[(y0 + dy) * stride + x0 + dx] = id;
        }
    }
}

fn to_image(px: &[[f64; 3]], w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb(px[(y * w + x) as usize].map(|v| v.round().clamp(0.0, 255.0) as u8)))
}

pub fn render_layout(spec: &SyntheticSpec, layout: &SceneLayout) -> Result<SyntheticScene> {
    spec.validate()?;
    let n = spec.image_size;
    let stride = n as usize;
    let cell_h = n as f64 / spec.rows as f64;
    let mut px = vec![SHELF.map(f64::from); stride * stride];
    for r in 1..=spec.rows {
        let bottom = (r as f64 * cell_h).round() as usize;
        for y in bottom.saturating_sub(PLANK_ROWS as usize)..bottom.min(stride) {
            px[y * stride..(y + 1) * stride].fill(PLANK.map(f64::from));
        }
    }
    let mut instance_map = vec![0u16; stride * stride];
    let glyphs = spec.glyphs();
    for (i, p) in layout.placements.iter().enumerate() {
        let [x, y, w, h] = p.rect;
        if p.class >= glyphs.len() || w == 0 || h == 0 || x + w > n || y + h > n {
            return Err(Error::invalid(format!("placement {i} does not fit the scene")));
        }
        paint_package(&mut px, &mut instance_map, i as u16 + 1, stride, &glyphs[p.class], p.rect);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(layout.noise_seed);
    for p in px.iter_mut() {
        let e = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
        *p = p.map(|v| v * layout.illumination + e);
    }
    Ok(SyntheticScene { image: to_image(&px, n, n), placements: layout.placements.clone(), instance_map })
}

/// Scene number `index` of the stream defined by `spec.seed`.
pub fn generate_scene(spec: &SyntheticSpec, index: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[index]));
    let layout = sample_layout(spec, &mut rng);
    render_layout(spec, &layout)
}

/// The clean canonical image of one catalogue class.
pub fn query_image(spec: &SyntheticSpec, class: usize) -> Result<RgbImage> {
    spec.validate()?;
    let g = spec.glyphs().get(class).ok_or_else(|| Error::invalid(format!("no class {class}")))?;
    let s = spec.query_size;
    let m = (s as f64 * QUERY_MARGIN).round() as u32;
    let mut px = vec![SHELF.map(f64::from); (s * s) as usize];
    let mut ids = vec![0; px.len()];
    paint_package(&mut px, &mut ids, 1, s as usize, g, [m, m, s - 2 * m, s - 2 * m]);
    Ok(to_image(&px, s, s))
}

pub fn query_database(spec: &SyntheticSpec) -> Result<Vec<QueryProduct>> {
    (0..spec.classes).map(|c| Ok(QueryProduct { label: spec.glyphs()[c].name.to_string(), image: query_image(spec, c)? })).collect()
}

/// Scene counts for train/val/test: the first two are rounded from the
/// fractions and the test split takes the remainder.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must be in [0, 1] and sum to 1"));
    }
    let train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub counts: [usize; 3],
    pub classes: Vec<String>,
}

/// Writes `images/`, one `<split>.jsonl` per split, and `queries/` with one
/// PNG per class named after its label. Scene `i` lands in exactly one split.
pub fn generate_dataset(spec: &SyntheticSpec, n_scenes: usize, fractions: [f64; 3], out: &Path) -> Result<DatasetSummary> {
    spec.validate()?;
    let counts = split_counts(n_scenes, fractions)?;
    for sub in ["images", "queries"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut index = 0u64;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let scene = generate_scene(spec, index)?;
            let rel = format!("images/scene_{index:05}.png");
            crate::imageio::save_png(&scene.image, &out.join(&rel))?;
            rows.push(scene.annotation(&rel, spec));
            index += 1;
        }
        write_jsonl(&out.join(format!("{split}.jsonl")), &rows)?;
    }
    for q in query_database(spec)? {
        crate::imageio::save_png(&q.image, &out.join("queries").join(format!("{}.png", q.label)))?;
    }
    Ok(DatasetSummary { counts, classes: spec.labels() })
}
