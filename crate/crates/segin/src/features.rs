//! Dense feature extraction: the pluggable stand-in for a pretrained backbone.
//!
//! Three kinds are supported: `toy-conv` (a frozen, seeded two-layer tanh
//! convolution stack), `color-pool` (channel-preserving average pooling), and
//! `precomputed` (features loaded from a `SEGT` tensor file, e.g. exported
//! from a real backbone). The functional kinds are differentiable so the
//! feature-reconstruction loss can flow gradients back to the image.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, NdFloat, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::segt::{self, SegtError, SegtTensor};

/// Channel count produced by the toy convolution stack.
pub const TOY_CONV_CHANNELS: usize = 8;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image dimensions {h}x{w} not divisible by downsample factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("image contains a non-finite value")]
    NonFinite,
    #[error("precomputed extractor needs a tensor path for this input")]
    MissingPrecomputedPath,
    #[error("precomputed features {got:?} do not match image shape {expected:?}")]
    PrecomputedShape { expected: (usize, usize), got: (usize, usize) },
    #[error("operation `{0}` is not supported by a precomputed extractor")]
    Unsupported(&'static str),
    #[error(transparent)]
    Tensor(#[from] SegtError),
}

/// Which feature backbone to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    ToyConv,
    ColorPool,
    Precomputed,
}

impl std::str::FromStr for ExtractorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy-conv" => Ok(ExtractorKind::ToyConv),
            "color-pool" => Ok(ExtractorKind::ColorPool),
            "precomputed" => Ok(ExtractorKind::Precomputed),
            other => Err(format!("unknown extractor kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureExtractorConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub downsample_factor: usize,
    /// Tensor files consulted when `kind` is `Precomputed`.
    #[serde(default)]
    pub precomputed_input: Option<PathBuf>,
    #[serde(default)]
    pub precomputed_reference: Option<PathBuf>,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            kind: ExtractorKind::ToyConv,
            seed: 0,
            downsample_factor: 4,
            precomputed_input: None,
            precomputed_reference: None,
        }
    }
}

/// Dense feature tensor of shape `(H_f, W_f, C)` plus its source image size.
/// The source size is an integer multiple of the grid, so the scaling factor
/// `delta = H / H_f = W / W_f` is a positive integer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f32>,
    pub source_image_shape: (usize, usize),
}

impl FeatureMap {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[0], s[1])
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    /// The integer pixel-to-cell scaling factor.
    pub fn delta(&self) -> usize {
        self.source_image_shape.0 / self.data.shape()[0]
    }

    pub fn to_segt(&self) -> SegtTensor {
        let s = self.data.shape();
        SegtTensor::new(
            (s[0], s[1], s[2]),
            self.source_image_shape,
            self.data.iter().copied().collect(),
        )
    }

    pub fn from_segt(t: &SegtTensor) -> Self {
        let data = Array3::from_shape_vec((t.dims.0, t.dims.1, t.dims.2), t.data.clone())
            .expect("dims/data mismatch in SEGT tensor");
        FeatureMap { data, source_image_shape: t.source }
    }
}

/// Frozen weights of the toy convolution stack: conv3x3 (3 -> C), tanh,
/// average pool by the downsample factor, conv3x3 (C -> C), tanh.
#[derive(Debug, Clone)]
struct ToyConvWeights<F> {
    w1: Array4<F>, // (C, 3, 3, 3)
    w2: Array4<F>, // (C, C, 3, 3)
}

fn seeded_toy_weights<F: NdFloat>(seed: u64) -> ToyConvWeights<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = TOY_CONV_CHANNELS;
    // He-style scale; drawn in f32 then widened so f32/f64 stacks share weights.
    let mut draw = |fan_in: usize| {
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        normal.sample(&mut rng)
    };
    let w1 = Array4::from_shape_simple_fn((c, 3, 3, 3), || F::from(draw(27)).unwrap());
    let w2 = Array4::from_shape_simple_fn((c, c, 3, 3), || F::from(draw(9 * c)).unwrap());
    ToyConvWeights { w1, w2 }
}

/// An instantiated extractor, generic over the float type so loss gradient
/// checks can run the whole stack in f64.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<F> {
    kind: ExtractorKind,
    factor: usize,
    toy: Option<ToyConvWeights<F>>,
    precomputed_input: Option<PathBuf>,
    precomputed_reference: Option<PathBuf>,
}

/// Which side of a correspondence an image sits on; selects the tensor file
/// consulted by a precomputed extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Input,
    Reference,
}

impl<F: NdFloat> FeatureExtractor<F> {
    pub fn from_config(cfg: &FeatureExtractorConfig) -> Self {
        let toy = match cfg.kind {
            ExtractorKind::ToyConv => Some(seeded_toy_weights(cfg.seed)),
            _ => None,
        };
        FeatureExtractor {
            kind: cfg.kind,
            factor: cfg.downsample_factor,
            toy,
            precomputed_input: cfg.precomputed_input.clone(),
            precomputed_reference: cfg.precomputed_reference.clone(),
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn downsample_factor(&self) -> usize {
        self.factor
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            ExtractorKind::ToyConv => TOY_CONV_CHANNELS,
            ExtractorKind::ColorPool => 3,
            ExtractorKind::Precomputed => 0,
        }
    }

    fn check_input(&self, image: &Array3<F>) -> Result<(usize, usize), FeatureError> {
        let (h, w, _) = image.dim();
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(FeatureError::NotDivisible { h, w, factor: self.factor });
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok((h, w))
    }

    /// Dense features of shape `(H/f, W/f, C)`.
    pub fn features(&self, image: &Array3<F>) -> Result<Array3<F>, FeatureError> {
        let _ = self.check_input(image)?;
        match self.kind {
            ExtractorKind::ColorPool => Ok(avg_pool(image, self.factor)),
            ExtractorKind::ToyConv => {
                let toy = self.toy.as_ref().unwrap();
                let a1 = conv3x3_hwc(image, &toy.w1).mapv(|v| v.tanh());
                let p = avg_pool(&a1, self.factor);
                let a2 = conv3x3_hwc(&p, &toy.w2).mapv(|v| v.tanh());
                Ok(a2)
            }
            ExtractorKind::Precomputed => Err(FeatureError::Unsupported("features")),
        }
    }

    /// Gradient of a scalar loss with respect to the image, given its gradient
    /// with respect to the features. Only functional kinds support this.
    pub fn backward(&self, image: &Array3<F>, grad_feat: &Array3<F>) -> Result<Array3<F>, FeatureError> {
        let _ = self.check_input(image)?;
        match self.kind {
            ExtractorKind::ColorPool => Ok(avg_pool_backward(grad_feat, self.factor)),
            ExtractorKind::ToyConv => {
                let toy = self.toy.as_ref().unwrap();
                let z1 = conv3x3_hwc(image, &toy.w1);
                let a1 = z1.mapv(|v| v.tanh());
                let p = avg_pool(&a1, self.factor);
                let z2 = conv3x3_hwc(&p, &toy.w2);
                let a2 = z2.mapv(|v| v.tanh());

                let one = F::one();
                let g_z2 = grad_feat * &a2.mapv(|t| one - t * t);
                let g_p = conv3x3_hwc_input_grad(&g_z2, &toy.w2, p.dim().2);
                let g_a1 = avg_pool_backward(&g_p, self.factor);
                let g_z1 = &g_a1 * &a1.mapv(|t| one - t * t);
                Ok(conv3x3_hwc_input_grad(&g_z1, &toy.w1, image.dim().2))
            }
            ExtractorKind::Precomputed => Err(FeatureError::Unsupported("backward")),
        }
    }

    fn precomputed_path(&self, side: Side) -> Result<&Path, FeatureError> {
        let p = match side {
            Side::Input => self.precomputed_input.as_deref(),
            Side::Reference => self.precomputed_reference.as_deref(),
        };
        p.ok_or(FeatureError::MissingPrecomputedPath)
    }
}

impl FeatureExtractor<f32> {
    /// Full feature map for `image`, including the source-shape bookkeeping.
    /// For precomputed extractors the tensor selected by `side` is loaded and
    /// validated against the image shape.
    pub fn feature_map(&self, image: &Array3<f32>, side: Side) -> Result<FeatureMap, FeatureError> {
        match self.kind {
            ExtractorKind::Precomputed => {
                let (h, w) = self.check_input(image)?;
                let t = segt::load_segt(self.precomputed_path(side)?)?;
                let fm = FeatureMap::from_segt(&t);
                if fm.source_image_shape != (h, w) {
                    return Err(FeatureError::PrecomputedShape {
                        expected: (h, w),
                        got: fm.source_image_shape,
                    });
                }
                Ok(fm)
            }
            _ => {
                let data = self.features(image)?;
                Ok(FeatureMap { data, source_image_shape: (image.dim().0, image.dim().1) })
            }
        }
    }
}

/// Extract features from an image; deterministic for a fixed `(image, cfg)`.
pub fn extract_features(image: &Array3<f32>, cfg: &FeatureExtractorConfig) -> Result<FeatureMap, FeatureError> {
    FeatureExtractor::<f32>::from_config(cfg).feature_map(image, Side::Input)
}

fn avg_pool<F: NdFloat>(x: &Array3<F>, f: usize) -> Array3<F> {
    let (h, w, c) = x.dim();
    let (hf, wf) = (h / f, w / f);
    let norm = F::from(f * f).unwrap();
    let mut out = Array3::zeros((hf, wf, c));
    for i in 0..hf {
        for j in 0..wf {
            for ch in 0..c {
                let mut s = F::zero();
                for di in 0..f {
                    for dj in 0..f {
                        s = s + x[(i * f + di, j * f + dj, ch)];
                    }
                }
                out[(i, j, ch)] = s / norm;
            }
        }
    }
    out
}

fn avg_pool_backward<F: NdFloat>(g: &Array3<F>, f: usize) -> Array3<F> {
    let (hf, wf, c) = g.dim();
    let norm = F::from(f * f).unwrap();
    let mut out = Array3::zeros((hf * f, wf * f, c));
    for i in 0..hf {
        for j in 0..wf {
            for ch in 0..c {
                let v = g[(i, j, ch)] / norm;
                for di in 0..f {
                    for dj in 0..f {
                        out[(i * f + di, j * f + dj, ch)] = v;
                    }
                }
            }
        }
    }
    out
}

/// 3x3 same convolution on an `(H, W, Cin)` tensor with zero padding.
fn conv3x3_hwc<F: NdFloat>(x: &Array3<F>, w: &Array4<F>) -> Array3<F> {
    let (h, wd, cin) = x.dim();
    let cout = w.dim().0;
    debug_assert_eq!(w.dim().1, cin);
    let mut out = Array3::zeros((h, wd, cout));
    for i in 0..h {
        for j in 0..wd {
            for co in 0..cout {
                let mut s = F::zero();
                for di in 0..3usize {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3usize {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s = s + x[(ii as usize, jj as usize, ci)] * w[(co, ci, di, dj)];
                        }
                    }
                }
                out[(i, j, co)] = s;
            }
        }
    }
    out
}

/// Gradient of `conv3x3_hwc` with respect to its input (weights frozen).
fn conv3x3_hwc_input_grad<F: NdFloat>(g: &Array3<F>, w: &Array4<F>, cin: usize) -> Array3<F> {
    let (h, wd, cout) = g.dim();
    let mut out = Array3::zeros((h, wd, cin));
    for i in 0..h {
        for j in 0..wd {
            for co in 0..cout {
                let gv = g[(i, j, co)];
                if gv == F::zero() {
                    continue;
                }
                for di in 0..3usize {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3usize {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            out[(ii as usize, jj as usize, ci)] =
                                out[(ii as usize, jj as usize, ci)] + gv * w[(co, ci, di, dj)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Promote an f32 image to another float type.
pub fn widen<F: NdFloat>(image: &Array3<f32>) -> Array3<F> {
    image.mapv(|v| F::from(v).unwrap())
}

/// Elementwise check used by operations that reject NaN input up front.
pub fn all_finite(image: &Array3<f32>) -> bool {
    let mut ok = true;
    Zip::from(image).for_each(|v| ok &= v.is_finite());
    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn constant_image(h: usize, w: usize, v: f32) -> Array3<f32> {
        Array3::from_elem((h, w, 3), v)
    }

    #[test]
    fn color_pool_of_constant_is_constant() {
        let img = constant_image(8, 8, 0.5);
        let cfg = FeatureExtractorConfig { kind: ExtractorKind::ColorPool, ..Default::default() };
        let fm = extract_features(&img, &cfg).unwrap();
        assert_eq!(fm.data.dim(), (2, 2, 3));
        assert!(fm.data.iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert_eq!(fm.source_image_shape, (8, 8));
        assert_eq!(fm.delta(), 4);
    }

    #[test]
    fn color_pool_checkerboard_means() {
        // 2x2 image, factor 2: the single output cell is the mean of the four pixels.
        let mut img = Array3::zeros((2, 2, 3));
        for c in 0..3 {
            img[(0, 1, c)] = 1.0;
            img[(1, 1, c)] = 1.0;
        }
        let cfg = FeatureExtractorConfig {
            kind: ExtractorKind::ColorPool,
            downsample_factor: 2,
            ..Default::default()
        };
        let fm = extract_features(&img, &cfg).unwrap();
        assert_eq!(fm.data.dim(), (1, 1, 3));
        for c in 0..3 {
            assert!((fm.data[(0, 0, c)] - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn toy_conv_is_deterministic() {
        let img = {
            let mut im = constant_image(8, 8, 0.3);
            im[(3, 4, 1)] = 0.9;
            im
        };
        let cfg = FeatureExtractorConfig { seed: 42, ..Default::default() };
        let a = extract_features(&img, &cfg).unwrap();
        let b = extract_features(&img, &cfg).unwrap();
        assert_eq!(a.data.shape(), &[2, 2, TOY_CONV_CHANNELS]);
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let other = extract_features(&img, &FeatureExtractorConfig { seed: 43, ..Default::default() }).unwrap();
        assert!(a.data.iter().zip(other.data.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn rejects_non_divisible_and_nan() {
        let cfg = FeatureExtractorConfig::default();
        let img = constant_image(6, 8, 0.5);
        assert!(matches!(extract_features(&img, &cfg), Err(FeatureError::NotDivisible { .. })));
        let mut img = constant_image(8, 8, 0.5);
        img[(0, 0, 0)] = f32::NAN;
        assert!(matches!(extract_features(&img, &cfg), Err(FeatureError::NonFinite)));
    }

    #[test]
    fn toy_conv_backward_matches_finite_differences() {
        let cfg = FeatureExtractorConfig { seed: 5, downsample_factor: 2, ..Default::default() };
        let ex = FeatureExtractor::<f64>::from_config(&cfg);
        let mut rng_v = 0.1f64;
        let img = Array3::from_shape_simple_fn((4, 4, 3), || {
            rng_v = (rng_v * 7.13).fract();
            rng_v
        });
        // Loss = sum of features; grad_feat = ones.
        let feats = ex.features(&img).unwrap();
        let grad = ex.backward(&img, &Array3::ones(feats.dim())).unwrap();
        let h = 1e-6;
        for &(i, j, c) in &[(0usize, 0usize, 0usize), (1, 2, 1), (3, 3, 2)] {
            let mut plus = img.clone();
            plus[(i, j, c)] += h;
            let mut minus = img.clone();
            minus[(i, j, c)] -= h;
            let fd = (ex.features(&plus).unwrap().sum() - ex.features(&minus).unwrap().sum()) / (2.0 * h);
            assert!(
                (fd - grad[(i, j, c)]).abs() < 1e-6,
                "fd {fd} vs analytic {}",
                grad[(i, j, c)]
            );
        }
    }

    #[test]
    fn feature_map_segt_round_trip() {
        let img = constant_image(8, 8, 0.25);
        let fm = extract_features(&img, &FeatureExtractorConfig::default()).unwrap();
        let t = fm.to_segt();
        let back = FeatureMap::from_segt(&t);
        assert_eq!(fm, back);
    }
}
