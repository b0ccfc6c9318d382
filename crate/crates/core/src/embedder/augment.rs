//! The augmentation operator used to turn one query image into many anchors.

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling ranges, each drawn uniformly and inclusively.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub blur_sigma: (f32, f32),
    /// Side of the random crop as a fraction of the image side, drawn
    /// separately for width and height.
    pub crop_fraction: (f64, f64),
    pub brightness: (f32, f32),
    pub saturation: (f32, f32),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { blur_sigma: (0.0, 1.5), crop_fraction: (0.8, 1.0), brightness: (0.7, 1.3), saturation: (0.7, 1.3) }
    }
}

/// Blurs below this sigma are skipped: the kernel is numerically a delta.
const MIN_BLUR_SIGMA: f32 = 0.1;

impl AugmentParams {
    /// Ranges that reproduce the input exactly.
    pub fn identity() -> Self {
        Self { blur_sigma: (0.0, 0.0), crop_fraction: (1.0, 1.0), brightness: (1.0, 1.0), saturation: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let f = |(lo, hi): (f32, f32)| (lo as f64, hi as f64);
        let ok = ordered(f(self.blur_sigma))
            && ordered(self.crop_fraction)
            && ordered(f(self.brightness))
            && ordered(f(self.saturation))
            && self.blur_sigma.0 >= 0.0
            && self.crop_fraction.0 > 0.5
            && self.crop_fraction.1 <= 1.0
            && self.brightness.0 > 0.0
            && self.saturation.0 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("augmentation ranges out of bounds: {self:?}")))
        }
    }
}

/// One concrete draw from [`AugmentParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub sigma: f32,
    /// Crop rectangle `(x, y, w, h)` in source pixels.
    pub crop: (u32, u32, u32, u32),
    pub brightness: f32,
    pub saturation: f32,
}

impl AugmentDraw {
    pub fn sample(params: &AugmentParams, width: u32, height: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = rng.gen_range(params.blur_sigma.0..=params.blur_sigma.1);
        let fw = rng.gen_range(params.crop_fraction.0..=params.crop_fraction.1);
        let fh = rng.gen_range(params.crop_fraction.0..=params.crop_fraction.1);
        let cw = ((width as f64 * fw).round() as u32).clamp(1, width);
        let ch = ((height as f64 * fh).round() as u32).clamp(1, height);
        let x = rng.gen_range(0..=width - cw);
        let y = rng.gen_range(0..=height - ch);
        let brightness = rng.gen_range(params.brightness.0..=params.brightness.1);
        let saturation = rng.gen_range(params.saturation.0..=params.saturation.1);
        Self { sigma, crop: (x, y, cw, ch), brightness, saturation }
    }

    /// Crop (re-resized to the input size), brightness, saturation, blur.
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        let (x, y, cw, ch) = self.crop;
        let mut out = if (cw, ch) == (w, h) {
            img.clone()
        } else {
            let view = image::imageops::crop_imm(img, x, y, cw, ch).to_image();
            image::imageops::resize(&view, w, h, FilterType::Triangle)
        };
        if self.brightness != 1.0 || self.saturation != 1.0 {
            for px in out.pixels_mut() {
                let mut v = px.0.map(|c| c as f32 * self.brightness);
                if self.saturation != 1.0 {
                    let gray = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
                    v = v.map(|c| gray + self.saturation * (c - gray));
                }
                px.0 = v.map(|c| c.round().clamp(0.0, 255.0) as u8);
            }
        }
        if self.sigma >= MIN_BLUR_SIGMA {
            out = image::imageops::blur(&out, self.sigma);
        }
        out
    }
}

/// Random label-preserving variation of `img` with the same dimensions;
/// a pure function of `(img, params, seed)`.
pub fn augment(img: &RgbImage, params: &AugmentParams, seed: u64) -> RgbImage {
    AugmentDraw::sample(params, img.width(), img.height(), seed).apply(img)
}

/// Mixes a base seed with a stream path into an independent seed.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for &s in stream {
        h = splitmix(h ^ splitmix(s.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
