//! Patch encoder producing unit-norm MAC descriptors, and its triplet
//! training machinery.
//!
//! The descriptor is the per-channel global max of the fourth and fifth
//! encoder stages, concatenated and ℓ2-normalized.

pub mod augment;
pub mod train;
pub mod triplet;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{resize_square, rgb_to_tensor};
use crate::nn::{Param, Parameters};
use crate::pyramid::{Encoder, EncoderCache, EncoderConfig};
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment, derive_seed, AugmentDraw, AugmentParams};
pub use train::{train_embedder, EmbedderSchedule, EmbedderTraining, EpochLog};
pub use triplet::{hardest_negatives, squared_distance, triplet_hinge, triplet_loss, triplet_loss_grad, TripletGrad};

/// Tolerance on the norm of a stored embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A unit-norm descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vector: Vec<f32>,
}

impl Embedding {
    /// Normalizes a raw descriptor.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("descriptor is not finite"));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroDescriptor);
        }
        Ok(Self { vector: raw.iter().map(|v| (v / norm) as f32).collect() })
    }

    /// Wraps a vector that must already have unit norm.
    pub fn from_unit(vector: Vec<f32>) -> Result<Self> {
        let e = Self { vector };
        if (e.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE || e.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("embedding norm {} is not 1", e.norm())));
        }
        Ok(e)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &Embedding) -> f64 {
        squared_distance(&self.vector, &other.vector)
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.vector
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub encoder: EncoderConfig,
    /// Square patch side fed to the encoder.
    pub input_size: u32,
}

impl EmbedderConfig {
    pub fn desk() -> Self {
        Self { encoder: EncoderConfig::desk(), input_size: 64 }
    }

    /// ResNet-18-like widths on 224-pixel patches: a 256 + 512 = 768 descriptor.
    pub fn full() -> Self {
        Self { encoder: EncoderConfig::full(), input_size: 224 }
    }

    pub fn dim(&self) -> usize {
        self.encoder.widths[3] + self.encoder.widths[4]
    }
}

#[derive(Clone, Debug)]
pub struct Embedder<T> {
    pub config: EmbedderConfig,
    pub encoder: Encoder<T>,
}

pub struct DescriptorCache<T> {
    encoder: EncoderCache<T>,
    shapes: [(usize, usize, usize); 2],
    /// Flat offset of each channel's maximum inside its stage output.
    argmax: Vec<usize>,
    norm: f64,
    unit: Vec<T>,
}

fn global_max<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let plane = x.plane_len();
    (0..x.channels())
        .map(|c| {
            let p = x.plane(c);
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            (p[best], c * plane + best)
        })
        .unzip()
}

impl<T: Scalar> Embedder<T> {
    pub fn new(config: EmbedderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), &mut rng);
        Self { config, encoder }
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn cast<U: Scalar>(&self) -> Embedder<U> {
        Embedder { config: self.config.clone(), encoder: self.encoder.cast() }
    }

    /// Unit descriptor of a prepared input tensor, with the cache for
    /// [`Embedder::backward`].
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Vec<T>, DescriptorCache<T>)> {
        let (outs, encoder) = self.encoder.forward(x)?;
        let (m4, a4) = global_max(&outs[3]);
        let (m5, a5) = global_max(&outs[4]);
        let raw: Vec<T> = m4.into_iter().chain(m5).collect();
        let norm = raw.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::invalid("descriptor is not finite"));
        }
        if norm == 0.0 {
            return Err(Error::ZeroDescriptor);
        }
        let inv = T::from_f64(1.0 / norm);
        let unit: Vec<T> = raw.iter().map(|&v| v * inv).collect();
        let argmax = a4.into_iter().chain(a5).collect();
        let shapes = [outs[3].shape(), outs[4].shape()];
        Ok((unit.clone(), DescriptorCache { encoder, shapes, argmax, norm, unit }))
    }

    /// Accumulates parameter gradients for an upstream gradient on the unit
    /// descriptor.
    pub fn backward(&mut self, cache: &DescriptorCache<T>, dunit: &[T]) {
        assert_eq!(dunit.len(), cache.unit.len(), "descriptor gradient size");
        let dot: f64 = cache.unit.iter().zip(dunit).map(|(y, g)| y.as_f64() * g.as_f64()).sum();
        let inv = 1.0 / cache.norm;
        let draw: Vec<T> =
            cache.unit.iter().zip(dunit).map(|(y, g)| T::from_f64((g.as_f64() - y.as_f64() * dot) * inv)).collect();
        let split = cache.shapes[0].0;
        let mut slots: Vec<Option<Tensor<T>>> = vec![None, None, None];
        for (range, &(c, h, w)) in [(0..split), (split..draw.len())].into_iter().zip(&cache.shapes) {
            let mut g = Tensor::zeros(c, h, w);
            for i in range {
                g.data_mut()[cache.argmax[i]] += draw[i];
            }
            slots.push(Some(g));
        }
        self.encoder.backward(&cache.encoder, slots);
    }

    /// Resizes the patch to the configured input size if needed and returns
    /// its unit-norm descriptor.
    pub fn encode(&self, patch: &RgbImage) -> Result<Embedding> {
        let img = resize_square(patch, self.config.input_size);
        self.encode_tensor(&rgb_to_tensor(&img))
    }

    pub fn encode_tensor(&self, x: &Tensor<T>) -> Result<Embedding> {
        let (unit, _) = self.forward(x)?;
        Embedding::from_raw(&unit.iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }
}

impl<T: Scalar> Parameters<T> for Embedder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&crate::nn::join(prefix, "encoder"), f);
    }
}

/// A mined training triplet: `anchor` is an augmentation of batch element
/// `positive`; `negative` is the hardest other-label batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: RgbImage,
    pub positive: usize,
    pub negative: usize,
}

/// Online hard negative mining over a batch of labelled patches: one triplet
/// per element, anchors drawn with `derive_seed(seed, [i])`.
pub fn mine_hard_negatives<L: PartialEq>(
    embedder: &Embedder<f32>,
    batch: &[(RgbImage, L)],
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let anchors: Vec<RgbImage> =
        batch.iter().enumerate().map(|(i, (img, _))| augment(img, params, derive_seed(seed, &[i as u64]))).collect();
    let xa = anchors.iter().map(|a| embedder.encode(a)).collect::<Result<Vec<_>>>()?;
    let xp = batch.iter().map(|(p, _)| embedder.encode(p)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<&L> = batch.iter().map(|(_, l)| l).collect();
    let neg = hardest_negatives::<f32, _, _>(&xa, &xp, &labels)?;
    Ok(anchors
        .into_iter()
        .zip(neg)
        .enumerate()
        .map(|(positive, (anchor, negative))| Triplet { anchor, positive, negative })
        .collect())
}
