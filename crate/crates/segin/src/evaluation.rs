//! Quantitative protocols: a perceptual feature-space distance, translation
//! diversity, similarity to the reference, reconstruction capability, and a
//! Fréchet distance between feature distributions.
//!
//! All protocols run over the pluggable extractor; supplying a pretrained
//! backbone via the precomputed path reproduces the published metric
//! definitions, while the toy extractor keeps everything testable.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{FeatureError, FeatureExtractor, FeatureExtractorConfig};
use crate::segt::{self, SegtError, SegtTensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("covariance matrix is not symmetric")]
    NonSymmetric,
    #[error("translation failed: {0}")]
    Translate(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] SegtError),
}

/// Protocol sizes and the extractor behind the distances.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricConfig {
    pub extractor: FeatureExtractorConfig,
    pub n_inputs: usize,
    pub pairs_per_input: usize,
    pub n_references: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            extractor: FeatureExtractorConfig::default(),
            n_inputs: 100,
            pairs_per_input: 19,
            n_references: 10,
            seed: 0,
        }
    }
}

/// Compensated (Kahan) accumulator so aggregation order cannot disturb the
/// reported means.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let y = v - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Mean Euclidean distance between per-position unit-normalized feature
/// vectors; zero vectors normalize to zero.
pub fn perceptual_distance(
    a: &Array3<f32>,
    b: &Array3<f32>,
    extractor: &FeatureExtractor<f32>,
) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let (hf, wf, c) = fa.dim();
    let mut acc = KahanSum::default();
    for i in 0..hf {
        for j in 0..wf {
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for ch in 0..c {
                na += (fa[(i, j, ch)] as f64).powi(2);
                nb += (fb[(i, j, ch)] as f64).powi(2);
            }
            let na = na.sqrt();
            let nb = nb.sqrt();
            let mut d2 = 0.0f64;
            for ch in 0..c {
                let va = if na > 0.0 { fa[(i, j, ch)] as f64 / na } else { 0.0 };
                let vb = if nb > 0.0 { fb[(i, j, ch)] as f64 / nb } else { 0.0 };
                d2 += (va - vb) * (va - vb);
            }
            acc.add(d2.sqrt());
        }
    }
    Ok(acc.value() / (hf * wf) as f64)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Fréchet distance between two Gaussians:
/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the matrix square
/// root taken through a symmetric eigendecomposition (negative eigenvalues
/// clamp to zero).
pub fn frechet_distance(
    mu1: &Array1<f64>,
    sigma1: &Array2<f64>,
    mu2: &Array1<f64>,
    sigma2: &Array2<f64>,
) -> Result<f64, EvalError> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.dim() != (d, d) || sigma2.dim() != (d, d) {
        return Err(EvalError::ShapeMismatch(vec![d], vec![mu2.len()]));
    }
    for s in [sigma1, sigma2] {
        for i in 0..d {
            for j in 0..d {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-8 {
                    return Err(EvalError::NonSymmetric);
                }
            }
        }
    }
    let mut mean_term = 0.0;
    for i in 0..d {
        mean_term += (mu1[i] - mu2[i]).powi(2);
    }
    let s1 = to_dmatrix(sigma1);
    let s2 = to_dmatrix(sigma2);
    let s2h = sqrtm_psd(&s2);
    let inner = &s2h * &s1 * &s2h;
    // Symmetrize against round-off before the second square root.
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
    Ok(value.max(0.0))
}

/// Pooled per-image feature vector: the mean feature over all positions.
pub fn pooled_feature(img: &Array3<f32>, extractor: &FeatureExtractor<f32>) -> Result<Array1<f64>, EvalError> {
    let f = extractor.features(img)?;
    let (hf, wf, c) = f.dim();
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        let mut acc = KahanSum::default();
        for i in 0..hf {
            for j in 0..wf {
                acc.add(f[(i, j, ch)] as f64);
            }
        }
        out[ch] = acc.value() / (hf * wf) as f64;
    }
    Ok(out)
}

/// Gaussian fit of a set of pooled feature vectors. With fewer than `dim + 1`
/// samples the covariance gets `1e-6` shrinkage on the diagonal.
pub struct FeatureStats {
    pub mu: Array1<f64>,
    pub sigma: Array2<f64>,
    pub n: usize,
}

pub fn feature_stats(
    images: &[Array3<f32>],
    extractor: &FeatureExtractor<f32>,
) -> Result<FeatureStats, EvalError> {
    if images.is_empty() {
        return Err(EvalError::Config("empty image set".into()));
    }
    let feats: Vec<Array1<f64>> = images
        .iter()
        .map(|im| pooled_feature(im, extractor))
        .collect::<Result<_, _>>()?;
    let dim = feats[0].len();
    let n = feats.len();
    let mut mu = Array1::zeros(dim);
    for d in 0..dim {
        let mut acc = KahanSum::default();
        for f in &feats {
            acc.add(f[d]);
        }
        mu[d] = acc.value() / n as f64;
    }
    let mut sigma = Array2::zeros((dim, dim));
    let denom = (n.max(2) - 1) as f64;
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = KahanSum::default();
            for f in &feats {
                acc.add((f[i] - mu[i]) * (f[j] - mu[j]));
            }
            sigma[(i, j)] = acc.value() / denom;
        }
    }
    if n < dim + 1 {
        for i in 0..dim {
            sigma[(i, i)] += 1e-6;
        }
    }
    Ok(FeatureStats { mu, sigma, n })
}

impl FeatureStats {
    /// Cache the statistics as two `SEGT` tensors (`<stem>.mu.segt`,
    /// `<stem>.sigma.segt`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        let dim = self.mu.len();
        let mu = SegtTensor::new((1, dim, 1), (self.n, dim), self.mu.iter().map(|&v| v as f32).collect());
        let sigma = SegtTensor::new(
            (dim, dim, 1),
            (self.n, dim),
            self.sigma.iter().map(|&v| v as f32).collect(),
        );
        segt::save_segt(&dir.join(format!("{stem}.mu.segt")), &mu)?;
        segt::save_segt(&dir.join(format!("{stem}.sigma.segt")), &sigma)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, EvalError> {
        let mu_t = segt::load_segt(&dir.join(format!("{stem}.mu.segt")))?;
        let sigma_t = segt::load_segt(&dir.join(format!("{stem}.sigma.segt")))?;
        let dim = mu_t.dims.1;
        let mu = Array1::from_iter(mu_t.data.iter().map(|&v| v as f64));
        let sigma = Array2::from_shape_vec((dim, dim), sigma_t.data.iter().map(|&v| v as f64).collect())
            .map_err(|_| EvalError::Config("bad covariance tensor".into()))?;
        Ok(FeatureStats { mu, sigma, n: sigma_t.source.0 })
    }
}

/// Fréchet distance between the pooled-feature Gaussians of two image sets.
pub fn fid_score(
    generated: &[Array3<f32>],
    real: &[Array3<f32>],
    extractor: &FeatureExtractor<f32>,
) -> Result<f64, EvalError> {
    if generated.is_empty() || real.is_empty() {
        return Err(EvalError::Config("empty test set".into()));
    }
    let a = feature_stats(generated, extractor)?;
    let b = feature_stats(real, extractor)?;
    frechet_distance(&a.mu, &a.sigma, &b.mu, &b.sigma)
}

/// Callback translating `(input, reference)` to an output image; the trainer
/// provides this from a trained checkpoint.
pub type TranslateFn<'a> = dyn FnMut(&Array3<f32>, &Array3<f32>) -> Result<Array3<f32>, EvalError> + 'a;

fn cached_translate<'a>(
    translate: &mut TranslateFn<'a>,
    cache: &mut BTreeMap<(usize, usize), Array3<f32>>,
    inputs: &[Array3<f32>],
    references: &[Array3<f32>],
    i: usize,
    r: usize,
) -> Result<Array3<f32>, EvalError> {
    if let Some(hit) = cache.get(&(i, r)) {
        return Ok(hit.clone());
    }
    let out = translate(&inputs[i], &references[r])?;
    cache.insert((i, r), out.clone());
    Ok(out)
}

/// Average perceptual distance between pairs of outputs translated from the
/// same input with two different references.
pub fn diversity_score(
    translate: &mut TranslateFn<'_>,
    inputs: &[Array3<f32>],
    references: &[Array3<f32>],
    cfg: &MetricConfig,
) -> Result<f64, EvalError> {
    if references.len() < 2 {
        return Err(EvalError::Config("reference pool needs at least 2 images".into()));
    }
    if inputs.is_empty() {
        return Err(EvalError::Config("empty test set".into()));
    }
    let extractor = FeatureExtractor::<f32>::from_config(&cfg.extractor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_inputs = cfg.n_inputs.min(inputs.len());
    let mut cache = BTreeMap::new();
    let mut acc = KahanSum::default();
    let mut count = 0usize;
    for i in 0..n_inputs {
        for _ in 0..cfg.pairs_per_input {
            let r1 = rng.gen_range(0..references.len());
            let mut r2 = rng.gen_range(0..references.len());
            while r2 == r1 {
                r2 = rng.gen_range(0..references.len());
            }
            let o1 = cached_translate(translate, &mut cache, inputs, references, i, r1)?;
            let o2 = cached_translate(translate, &mut cache, inputs, references, i, r2)?;
            acc.add(perceptual_distance(&o1, &o2, &extractor)?);
            count += 1;
        }
    }
    Ok(acc.value() / count as f64)
}

/// Average perceptual distance between outputs and the references that guided
/// them, over a seeded sample of (input, reference) pairs.
pub fn similarity_to_reference(
    translate: &mut TranslateFn<'_>,
    inputs: &[Array3<f32>],
    references: &[Array3<f32>],
    cfg: &MetricConfig,
) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::Config("empty reference pool".into()));
    }
    if inputs.is_empty() {
        return Err(EvalError::Config("empty test set".into()));
    }
    let extractor = FeatureExtractor::<f32>::from_config(&cfg.extractor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_inputs = cfg.n_inputs.min(inputs.len());
    let mut acc = KahanSum::default();
    let mut count = 0usize;
    for i in 0..n_inputs {
        for _ in 0..cfg.n_references {
            let r = rng.gen_range(0..references.len());
            let out = translate(&inputs[i], &references[r])?;
            acc.add(perceptual_distance(&out, &references[r], &extractor)?);
            count += 1;
        }
    }
    Ok(acc.value() / count as f64)
}

/// Translate each of the first `n_inputs` inputs against a seeded reference
/// draw; the resulting set feeds the distribution-match score.
pub fn generate_outputs(
    translate: &mut TranslateFn<'_>,
    inputs: &[Array3<f32>],
    references: &[Array3<f32>],
    cfg: &MetricConfig,
) -> Result<Vec<Array3<f32>>, EvalError> {
    if references.is_empty() {
        return Err(EvalError::Config("empty reference pool".into()));
    }
    if inputs.is_empty() {
        return Err(EvalError::Config("empty test set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let n_inputs = cfg.n_inputs.min(inputs.len());
    let mut out = Vec::with_capacity(n_inputs);
    for x in inputs.iter().take(n_inputs) {
        let r = rng.gen_range(0..references.len());
        out.push(translate(x, &references[r])?);
    }
    Ok(out)
}

/// Average perceptual distance between outputs guided by the ground truth and
/// that ground truth.
pub fn reconstruction_score(
    translate: &mut TranslateFn<'_>,
    pairs: &[(Array3<f32>, Array3<f32>)],
    cfg: &MetricConfig,
) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Config("empty paired test set".into()));
    }
    let extractor = FeatureExtractor::<f32>::from_config(&cfg.extractor);
    let n_inputs = cfg.n_inputs.min(pairs.len());
    let mut acc = KahanSum::default();
    for (x, y) in pairs.iter().take(n_inputs) {
        let out = translate(x, y)?;
        acc.add(perceptual_distance(&out, y, &extractor)?);
    }
    Ok(acc.value() / n_inputs as f64)
}

/// One metric result as written to disk.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub extractor: String,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, n: usize, cfg: &MetricConfig) -> Self {
        MetricReport {
            metric: metric.to_string(),
            value,
            n,
            seed: cfg.seed,
            extractor: format!("{:?}", cfg.extractor.kind),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body).map_err(|e| EvalError::Config(format!("cannot write report: {e}")))
    }
}
