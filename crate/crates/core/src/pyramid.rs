//! Five-stage residual backbone and the top-down feature pyramid.
//!
//! The backbone emits `{C2, C3, C4, C5}` at strides 4..32 (the stride-2 `C1`
//! is consumed internally but never emitted). The pyramid merges them top
//! down:
//!
//! ```text
//! P5      = Conv1x1(C5)
//! P~k     = Upsample2x(Pk)              (nearest neighbour)
//! C~(k-1) = Conv1x1(C(k-1))
//! P(k-1)  = Conv3x3(P~k + C~(k-1))
//! ```
//!
//! Every `Pk` has `d` channels and the spatial size of `Ck`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Conv2d, ConvCache, Param, Parameters};
use crate::tensor::{Scalar, Tensor};

/// Number of pyramid levels (`P2..=P5`).
pub const LEVELS: usize = 4;
/// Lowest pyramid level index.
pub const FIRST_LEVEL: u32 = 2;

/// Stride (pixels) of pyramid level `k`.
pub fn level_stride(level: u32) -> usize {
    1 << level
}

/// Two 3×3 convolutions (the first with stride 2) plus a strided 1×1
/// projection on the skip path.
#[derive(Clone, Debug)]
pub struct ResidualStage<T> {
    pub conv_a: Conv2d<T>,
    pub conv_b: Conv2d<T>,
    pub skip: Conv2d<T>,
}

pub struct StageCache<T> {
    a: ConvCache<T>,
    ra: Tensor<T>,
    b: ConvCache<T>,
    skip: ConvCache<T>,
    out: Tensor<T>,
}

impl<T: Scalar> ResidualStage<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv_a: Conv2d::new(cin, cout, 3, 2, 2f64.sqrt(), rng),
            conv_b: Conv2d::new(cout, cout, 3, 1, 0.5, rng),
            skip: Conv2d::new(cin, cout, 1, 2, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StageCache<T>)> {
        let (a, a_cache) = self.conv_a.forward(x)?;
        let ra = relu(&a);
        let (mut z, b_cache) = self.conv_b.forward(&ra)?;
        let (s, skip_cache) = self.skip.forward(x)?;
        z.add_assign(&s);
        let out = relu(&z);
        Ok((out.clone(), StageCache { a: a_cache, ra, b: b_cache, skip: skip_cache, out }))
    }

    pub fn backward(&mut self, cache: &StageCache<T>, dout: &Tensor<T>) -> Tensor<T> {
        let dz = relu_backward(&cache.out, dout);
        let dra = self.conv_b.backward(&cache.b, &dz);
        let da = relu_backward(&cache.ra, &dra);
        let mut dx = self.conv_a.backward(&cache.a, &da);
        dx.add_assign(&self.skip.backward(&cache.skip, &dz));
        dx
    }

    pub fn cast<U: Scalar>(&self) -> ResidualStage<U> {
        ResidualStage { conv_a: self.conv_a.cast(), conv_b: self.conv_b.cast(), skip: self.skip.cast() }
    }
}

impl<T: Scalar> Parameters<T> for ResidualStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.skip.visit(&join(prefix, "skip"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.skip.visit_mut(&join(prefix, "skip"), f);
    }
}

/// Channel widths of the five stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; 5],
}

impl EncoderConfig {
    /// Laptop-sized widths.
    pub fn desk() -> Self {
        Self { in_channels: 3, widths: [16, 32, 64, 128, 256] }
    }

    /// ResNet-18/50-like widths (`B4 = 256`, `B5 = 512`).
    pub fn full() -> Self {
        Self { in_channels: 3, widths: [64, 64, 128, 256, 512] }
    }
}

/// Five stride-2 residual stages; stage `i` (1-based) has stride `2^i`.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub stages: Vec<ResidualStage<T>>,
}

pub struct EncoderCache<T> {
    stages: Vec<StageCache<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut cin = config.in_channels;
        let mut stages = Vec::with_capacity(5);
        for &w in &config.widths {
            stages.push(ResidualStage::new(cin, w, rng));
            cin = w;
        }
        Self { config, stages }
    }

    /// All five stage outputs `X1..X5`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<(Vec<Tensor<T>>, EncoderCache<T>)> {
        let mut outs = Vec::with_capacity(5);
        let mut caches = Vec::with_capacity(5);
        for (i, stage) in self.stages.iter().enumerate() {
            let input = if i == 0 { image } else { &outs[i - 1] };
            let (y, c) = stage.forward(input)?;
            outs.push(y);
            caches.push(c);
        }
        Ok((outs, EncoderCache { stages: caches }))
    }

    /// Backpropagates gradients given for any subset of stage outputs.
    pub fn backward(&mut self, cache: &EncoderCache<T>, mut grads: Vec<Option<Tensor<T>>>) {
        assert_eq!(grads.len(), self.stages.len(), "one gradient slot per stage");
        for i in (0..self.stages.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let dx = self.stages[i].backward(&cache.stages[i], &g);
            if i > 0 {
                match &mut grads[i - 1] {
                    Some(prev) => prev.add_assign(&dx),
                    slot @ None => *slot = Some(dx),
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder { config: self.config.clone(), stages: self.stages.iter().map(|s| s.cast()).collect() }
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}

/// Backbone feature maps `C2..C5`, index 0 = `C2`.
pub type BackboneFeatures<T> = [Tensor<T>; LEVELS];

/// Runs the backbone and returns `{C2, C3, C4, C5}`.
pub fn backbone_forward<T: Scalar>(
    image: &Tensor<T>,
    backbone: &Encoder<T>,
) -> Result<(BackboneFeatures<T>, EncoderCache<T>)> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Sizing { height: h, width: w, multiple: 32 });
    }
    let (mut outs, cache) = backbone.forward(image)?;
    let c5 = outs.pop().expect("five stages");
    let c4 = outs.pop().expect("five stages");
    let c3 = outs.pop().expect("five stages");
    let c2 = outs.pop().expect("five stages");
    Ok(([c2, c3, c4, c5], cache))
}

/// Backpropagates `dC2..dC5` through the backbone.
pub fn backbone_backward<T: Scalar>(backbone: &mut Encoder<T>, cache: &EncoderCache<T>, grads: [Tensor<T>; LEVELS]) {
    let mut slots: Vec<Option<Tensor<T>>> = vec![None];
    slots.extend(grads.into_iter().map(Some));
    backbone.backward(cache, slots);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Channel depth shared by every pyramid level.
    pub d: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { d: 256 }
    }
}

/// Pyramid levels `P2..P5`, index 0 = `P2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: [Tensor<T>; LEVELS],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn level(&self, k: u32) -> &Tensor<T> {
        &self.levels[(k - FIRST_LEVEL) as usize]
    }
}

/// Lateral 1×1 and smoothing 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct Fpn<T> {
    pub config: PyramidConfig,
    /// One per `C2..C5`.
    pub lateral: Vec<Conv2d<T>>,
    /// One per `P2..P4`; `P5` is the bare lateral projection.
    pub smooth: Vec<Conv2d<T>>,
}

pub struct FpnCache<T> {
    lateral: Vec<ConvCache<T>>,
    smooth: Vec<ConvCache<T>>,
}

impl<T: Scalar> Fpn<T> {
    pub fn new(config: PyramidConfig, in_channels: [usize; LEVELS], rng: &mut impl Rng) -> Result<Self> {
        if config.d == 0 {
            return Err(Error::invalid("pyramid depth d must be at least 1"));
        }
        let lateral = in_channels.iter().map(|&c| Conv2d::new(c, config.d, 1, 1, 1.0, rng)).collect();
        let smooth = (0..LEVELS - 1).map(|_| Conv2d::new(config.d, config.d, 3, 1, 1.0, rng)).collect();
        Ok(Self { config, lateral, smooth })
    }

    pub fn forward(&self, c: &BackboneFeatures<T>) -> Result<(FeaturePyramid<T>, FpnCache<T>)> {
        for i in 0..LEVELS - 1 {
            let (hi, lo) = (&c[i], &c[i + 1]);
            if hi.height() != 2 * lo.height() || hi.width() != 2 * lo.width() {
                return Err(Error::Shape(format!(
                    "C{} is {}x{} but C{} is {}x{}; levels must halve exactly",
                    i + 2,
                    hi.height(),
                    hi.width(),
                    i + 3,
                    lo.height(),
                    lo.width()
                )));
            }
        }
        let mut lat_caches = Vec::with_capacity(LEVELS);
        let mut lats = Vec::with_capacity(LEVELS);
        for (conv, ck) in self.lateral.iter().zip(c) {
            let (y, cache) = conv.forward(ck)?;
            lats.push(y);
            lat_caches.push(cache);
        }
        let mut levels: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        levels[LEVELS - 1] = Some(lats[LEVELS - 1].clone());
        let mut smooth_caches: Vec<Option<ConvCache<T>>> = (0..LEVELS - 1).map(|_| None).collect();
        for i in (0..LEVELS - 1).rev() {
            let mut merged = upsample2x_nearest(levels[i + 1].as_ref().expect("built top-down"));
            merged.add_assign(&lats[i]);
            let (p, cache) = self.smooth[i].forward(&merged)?;
            levels[i] = Some(p);
            smooth_caches[i] = Some(cache);
        }
        let levels: Vec<Tensor<T>> = levels.into_iter().map(|l| l.expect("all levels built")).collect();
        let levels: [Tensor<T>; LEVELS] = levels.try_into().map_err(|_| Error::Shape("pyramid levels".into()))?;
        Ok((
            FeaturePyramid { levels },
            FpnCache { lateral: lat_caches, smooth: smooth_caches.into_iter().map(|c| c.expect("cached")).collect() },
        ))
    }

    /// Takes `dP2..dP5`, returns `dC2..dC5`.
    pub fn backward(&mut self, cache: &FpnCache<T>, grads: [Tensor<T>; LEVELS]) -> [Tensor<T>; LEVELS] {
        let mut dp: Vec<Tensor<T>> = grads.into_iter().collect();
        let mut dc: Vec<Option<Tensor<T>>> = vec![None; LEVELS];
        for i in 0..LEVELS - 1 {
            let dm = self.smooth[i].backward(&cache.smooth[i], &dp[i]);
            dc[i] = Some(self.lateral[i].backward(&cache.lateral[i], &dm));
            dp[i + 1].add_assign(&upsample2x_backward(&dm));
        }
        dc[LEVELS - 1] = Some(self.lateral[LEVELS - 1].backward(&cache.lateral[LEVELS - 1], &dp[LEVELS - 1]));
        let dc: Vec<Tensor<T>> = dc.into_iter().map(|t| t.expect("all levels")).collect();
        dc.try_into().unwrap_or_else(|_| unreachable!("fixed level count"))
    }

    pub fn cast<U: Scalar>(&self) -> Fpn<U> {
        Fpn {
            config: self.config,
            lateral: self.lateral.iter().map(|c| c.cast()).collect(),
            smooth: self.smooth.iter().map(|c| c.cast()).collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Fpn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.lateral.iter().enumerate() {
            c.visit(&join(prefix, &format!("lateral{}", i + 2)), f);
        }
        for (i, c) in self.smooth.iter().enumerate() {
            c.visit(&join(prefix, &format!("smooth{}", i + 2)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.lateral.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("lateral{}", i + 2)), f);
        }
        for (i, c) in self.smooth.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("smooth{}", i + 2)), f);
        }
    }
}

/// Builds `P2..P5` from `C2..C5`.
pub fn build_pyramid<T: Scalar>(c: &BackboneFeatures<T>, fpn: &Fpn<T>) -> Result<FeaturePyramid<T>> {
    fpn.forward(c).map(|(p, _)| p)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x_nearest<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = m.shape();
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                *out.at_mut(ch, y, x) = m.at(ch, y / 2, x / 2);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_nearest`]: sums each 2×2 block.
pub fn upsample2x_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = g.shape();
    let mut out = Tensor::zeros(c, h2 / 2, w2 / 2);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                *out.at_mut(ch, y / 2, x / 2) += g.at(ch, y, x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_backbone(rng: &mut ChaCha8Rng) -> Encoder<f64> {
        Encoder::new(EncoderConfig { in_channels: 3, widths: [2, 3, 4, 5, 6] }, rng)
    }

    #[test]
    fn backbone_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = small_backbone(&mut rng);
        let (c, _) = backbone_forward(&Tensor::<f64>::zeros(3, 64, 64), &bb).unwrap();
        let dims: Vec<_> = c.iter().map(|t| (t.height(), t.width())).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        let (c, _) = backbone_forward(&Tensor::<f64>::zeros(3, 224, 224), &bb).unwrap();
        assert_eq!((c[3].height(), c[3].width()), (7, 7));
        // zero input, zero biases
        assert!(c.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(matches!(
            backbone_forward(&Tensor::<f64>::zeros(3, 60, 64), &bb),
            Err(Error::Sizing { height: 60, .. })
        ));
    }

    #[test]
    fn p5_has_d_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            Tensor::<f64>::zeros(7, 16, 16),
            Tensor::zeros(7, 8, 8),
            Tensor::zeros(7, 4, 4),
            Tensor::from_vec(7, 2, 2, (0..28).map(f64::from).collect()).unwrap(),
        ];
        let fpn = Fpn::new(PyramidConfig { d: 256 }, [7; 4], &mut rng).unwrap();
        let p = build_pyramid(&inputs, &fpn).unwrap();
        assert_eq!(p.level(5).shape(), (256, 2, 2));
        assert_eq!(p.level(2).shape(), (256, 16, 16));
    }

    #[test]
    fn zero_smoothing_kernel_annihilates_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 2;
        let mut fpn = Fpn::<f64>::new(PyramidConfig { d }, [d; 4], &mut rng).unwrap();
        for lat in &mut fpn.lateral {
            lat.weight.value = vec![1.0, 0.0, 0.0, 1.0];
        }
        for s in &mut fpn.smooth {
            s.weight.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let c = [
            Tensor::filled(d, 8, 8, 1.0),
            Tensor::filled(d, 4, 4, 2.0),
            Tensor::filled(d, 2, 2, 3.0),
            Tensor::filled(d, 1, 1, 4.0),
        ];
        let p = build_pyramid(&c, &fpn).unwrap();
        assert!(p.level(4).data().iter().all(|&v| v == 0.0));
        assert!(p.level(5).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn mismatched_levels_are_structural_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fpn = Fpn::<f64>::new(PyramidConfig { d: 2 }, [1; 4], &mut rng).unwrap();
        let c = [Tensor::zeros(1, 8, 8), Tensor::zeros(1, 3, 4), Tensor::zeros(1, 2, 2), Tensor::zeros(1, 1, 1)];
        assert!(matches!(build_pyramid(&c, &fpn), Err(Error::Shape(_))));
        let c = [Tensor::zeros(2, 8, 8), Tensor::zeros(1, 4, 4), Tensor::zeros(1, 2, 2), Tensor::zeros(1, 1, 1)];
        assert!(matches!(build_pyramid(&c, &fpn), Err(Error::Shape(_))));
        assert!(Fpn::<f64>::new(PyramidConfig { d: 0 }, [1; 4], &mut rng).is_err());
    }

    #[test]
    fn upsample_examples() {
        let m = Tensor::from_vec(1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample2x_nearest(&m);
        assert_eq!(u.data(), &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
        let one = upsample2x_nearest(&Tensor::filled(3, 1, 1, 7.5f64));
        assert_eq!(one.shape(), (3, 2, 2));
        assert!(one.data().iter().all(|&v| v == 7.5));
    }

    fn arb_map() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, f64, f64)> {
        (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
            let n = c * h * w;
            (
                prop::collection::vec(-10.0..10.0f64, n),
                prop::collection::vec(-10.0..10.0f64, n),
                -3.0..3.0f64,
                -3.0..3.0f64,
            )
                .prop_map(move |(a, b, al, be)| {
                    (Tensor::from_vec(c, h, w, a).unwrap(), Tensor::from_vec(c, h, w, b).unwrap(), al, be)
                })
        })
    }

    proptest! {
        #[test]
        fn upsample_sum_and_linearity((m, n, alpha, beta) in arb_map()) {
            let um = upsample2x_nearest(&m);
            prop_assert!((um.sum() - 4.0 * m.sum()).abs() < 1e-9);
            let mut combo = m.scale(alpha);
            combo.add_assign(&n.scale(beta));
            let lhs = upsample2x_nearest(&combo);
            let mut rhs = um.scale(alpha);
            rhs.add_assign(&upsample2x_nearest(&n).scale(beta));
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
