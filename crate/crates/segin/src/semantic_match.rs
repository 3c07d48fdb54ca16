//! Semantic patch matching between an input and a reference image.
//!
//! Features of both images are unfolded into lists of k-by-k patch vectors;
//! each input patch is matched to the reference patch with the highest cosine
//! similarity, and the winning indices drive a block-copy reconstruction of an
//! auxiliary image that carries the reference's local appearance at the
//! input's positions.

use ndarray::{Array1, Array2, Array3, s};
use thiserror::Error;

use crate::data_pipeline::{extract_foreground_mask, ForegroundPolicy};
use crate::features::{FeatureError, FeatureExtractor, FeatureExtractorConfig, FeatureMap, Side};

/// Fill value for auxiliary pixels that carry no reference content.
pub const AUX_FILL: f32 = 1.0;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("patch side must be odd and >= 1, got {0}")]
    BadPatchSize(usize),
    #[error("stride must be >= 1")]
    BadStride,
    #[error("patch side {k} exceeds reflect-padding limit {limit} for a {h}x{w} grid")]
    PatchTooLarge { k: usize, limit: usize, h: usize, w: usize },
    #[error("channel counts differ: input {0}, reference {1}")]
    ChannelMismatch(usize, usize),
    #[error("image size {h}x{w} is not a multiple of delta {delta}")]
    BadDelta { h: usize, w: usize, delta: usize },
    #[error("correspondence has {got} entries but the grid has {expected} positions")]
    GridMismatch { expected: usize, got: usize },
    #[error("correspondence references {got} patches but the reference grid has {expected}")]
    ReferenceMismatch { expected: usize, got: usize },
    #[error("correspondence index {index} out of range for {n_r} reference patches")]
    IndexOutOfRange { index: usize, n_r: usize },
    #[error("foreground mask is {got:?}, expected {expected:?}")]
    MaskShape { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Border handling when gathering patch neighborhoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    #[default]
    Reflect,
}

/// Patch geometry for the matching stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    /// Patch side length in feature cells; odd.
    pub k: usize,
    pub stride: usize,
    pub padding: PadPolicy,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { k: 3, stride: 1, padding: PadPolicy::Reflect }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), MatchError> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(MatchError::BadPatchSize(self.k));
        }
        if self.stride == 0 {
            return Err(MatchError::BadStride);
        }
        Ok(())
    }
}

/// Per-input-position match result: the winning reference patch index and its
/// cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub xi: Vec<usize>,
    pub score: Vec<f32>,
    pub n_r: usize,
}

/// Auxiliary image assembled from reference blocks, with a mask marking the
/// pixels actually copied (the rest are the white fill). The mask is constant
/// within each `delta`-by-`delta` block.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliarySample {
    pub aux: Array3<f32>,
    pub valid_mask: Array2<u8>,
    pub delta: usize,
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    let n = n as isize;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        } else {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

/// Unfold a feature map into a `(n, k*k*C)` matrix of patch vectors, row
/// priority over grid positions and within each neighborhood.
pub fn vectorize_patches(fm: &FeatureMap, spec: &PatchSpec) -> Result<Array2<f32>, MatchError> {
    spec.validate()?;
    let (hf, wf) = fm.grid();
    let c = fm.channels();
    let limit = 2 * hf.min(wf) - 1;
    if spec.k > limit {
        return Err(MatchError::PatchTooLarge { k: spec.k, limit, h: hf, w: wf });
    }
    let rows: Vec<usize> = (0..hf).step_by(spec.stride).collect();
    let cols: Vec<usize> = (0..wf).step_by(spec.stride).collect();
    let d = spec.k * spec.k * c;
    let half = (spec.k / 2) as isize;
    let mut out = Array2::zeros((rows.len() * cols.len(), d));
    let mut row = 0;
    for &i in &rows {
        for &j in &cols {
            let mut col = 0;
            for di in -half..=half {
                let ii = reflect(i as isize + di, hf);
                for dj in -half..=half {
                    let jj = reflect(j as isize + dj, wf);
                    for ch in 0..c {
                        out[(row, col)] = fm.data[(ii, jj, ch)];
                        col += 1;
                    }
                }
            }
            row += 1;
        }
    }
    Ok(out)
}

/// Cosine similarity with the zero-norm convention: one-sided zero pairs are
/// ranked below everything (-inf), double-zero pairs count as identical (1).
fn cosine(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => f64::NEG_INFINITY,
        (false, false) => {
            let mut dot = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                dot += x * y;
            }
            dot / (na * nb)
        }
    }
}

fn norms(p: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(p.rows().into_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()))
}

/// For every input patch, find the reference patch with the highest cosine
/// similarity. Ties break to the lowest reference index; similarities are
/// accumulated in f64.
pub fn compute_correspondence(
    fx: &FeatureMap,
    fr: &FeatureMap,
    spec: &PatchSpec,
) -> Result<CorrespondenceMap, MatchError> {
    if fx.channels() != fr.channels() {
        return Err(MatchError::ChannelMismatch(fx.channels(), fr.channels()));
    }
    let px = vectorize_patches(fx, spec)?.mapv(f64::from);
    let pr = vectorize_patches(fr, spec)?.mapv(f64::from);
    let nx = norms(&px);
    let nr = norms(&pr);
    let n_r = pr.nrows();

    let mut xi = Vec::with_capacity(px.nrows());
    let mut score = Vec::with_capacity(px.nrows());
    for i in 0..px.nrows() {
        let a = px.row(i);
        let a = a.as_slice().unwrap();
        let mut best_j = 0usize;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n_r {
            let b = pr.row(j);
            let cos = cosine(a, b.as_slice().unwrap(), nx[i], nr[j]);
            if cos > best {
                best = cos;
                best_j = j;
            }
        }
        xi.push(best_j);
        score.push(best.clamp(-1.0, 1.0) as f32);
    }
    Ok(CorrespondenceMap { xi, score, n_r })
}

/// Assemble the auxiliary image: for every foreground grid position, copy the
/// `delta`-block of the reference image at the matched position; background
/// blocks are white with a zero mask. Every pixel is written exactly once.
pub fn build_auxiliary(
    input_shape: (usize, usize),
    r_image: &Array3<f32>,
    corr: &CorrespondenceMap,
    delta: usize,
    fg_mask: Option<&Array2<u8>>,
) -> Result<AuxiliarySample, MatchError> {
    let (h, w) = input_shape;
    if delta == 0 || h % delta != 0 || w % delta != 0 {
        return Err(MatchError::BadDelta { h, w, delta });
    }
    let (hr, wr, _) = r_image.dim();
    if hr % delta != 0 || wr % delta != 0 {
        return Err(MatchError::BadDelta { h: hr, w: wr, delta });
    }
    let (hf, wf) = (h / delta, w / delta);
    if corr.xi.len() != hf * wf {
        return Err(MatchError::GridMismatch { expected: hf * wf, got: corr.xi.len() });
    }
    let (hrf, wrf) = (hr / delta, wr / delta);
    if corr.n_r != hrf * wrf {
        return Err(MatchError::ReferenceMismatch { expected: hrf * wrf, got: corr.n_r });
    }
    if let Some(m) = fg_mask {
        if m.dim() != (hf, wf) {
            return Err(MatchError::MaskShape { expected: (hf, wf), got: m.dim() });
        }
    }

    let mut aux = Array3::from_elem((h, w, 3), AUX_FILL);
    let mut valid = Array2::zeros((hf * delta, wf * delta));
    for i in 0..hf {
        for j in 0..wf {
            let pos = i * wf + j;
            let fg = fg_mask.map_or(1, |m| m[(i, j)]);
            if fg == 0 {
                continue;
            }
            let target = corr.xi[pos];
            if target >= corr.n_r {
                return Err(MatchError::IndexOutOfRange { index: target, n_r: corr.n_r });
            }
            let (ri, rj) = (target / wrf, target % wrf);
            let src = r_image.slice(s![ri * delta..(ri + 1) * delta, rj * delta..(rj + 1) * delta, ..]);
            aux.slice_mut(s![i * delta..(i + 1) * delta, j * delta..(j + 1) * delta, ..])
                .assign(&src);
            valid
                .slice_mut(s![i * delta..(i + 1) * delta, j * delta..(j + 1) * delta])
                .fill(1);
        }
    }
    Ok(AuxiliarySample { aux, valid_mask: valid, delta })
}

/// Reduce a pixel mask to the feature grid: a cell is foreground when at
/// least half of its block pixels are. Ties count as foreground.
pub fn downsample_mask(mask: &Array2<u8>, delta: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let (hf, wf) = (h / delta, w / delta);
    let block = delta * delta;
    Array2::from_shape_fn((hf, wf), |(i, j)| {
        let fg: usize = mask
            .slice(s![i * delta..(i + 1) * delta, j * delta..(j + 1) * delta])
            .iter()
            .map(|&v| v as usize)
            .sum();
        u8::from(2 * fg >= block)
    })
}

/// End-to-end matching: extract features from both images, compute the
/// correspondence, and copy reference blocks onto the input's foreground.
pub fn semantic_match(
    x: &Array3<f32>,
    r: &Array3<f32>,
    cfg: &FeatureExtractorConfig,
    spec: &PatchSpec,
    fg_policy: &ForegroundPolicy,
) -> Result<AuxiliarySample, MatchError> {
    let extractor = FeatureExtractor::<f32>::from_config(cfg);
    let fx = extractor.feature_map(x, Side::Input)?;
    let fr = extractor.feature_map(r, Side::Reference)?;
    let corr = compute_correspondence(&fx, &fr, spec)?;
    let delta = fx.delta();
    let fg_full = extract_foreground_mask(x, fg_policy);
    let fg = downsample_mask(&fg_full, delta);
    build_auxiliary((x.dim().0, x.dim().1), r, &corr, delta, Some(&fg))
}

/// As [`semantic_match`] but returning the correspondence map alongside the
/// auxiliary sample, for callers that post-process or dump it.
pub fn semantic_match_full(
    x: &Array3<f32>,
    r: &Array3<f32>,
    cfg: &FeatureExtractorConfig,
    spec: &PatchSpec,
    fg_policy: &ForegroundPolicy,
) -> Result<(AuxiliarySample, CorrespondenceMap), MatchError> {
    let extractor = FeatureExtractor::<f32>::from_config(cfg);
    let fx = extractor.feature_map(x, Side::Input)?;
    let fr = extractor.feature_map(r, Side::Reference)?;
    let corr = compute_correspondence(&fx, &fr, spec)?;
    let delta = fx.delta();
    let fg_full = extract_foreground_mask(x, fg_policy);
    let fg = downsample_mask(&fg_full, delta);
    let aux = build_auxiliary((x.dim().0, x.dim().1), r, &corr, delta, Some(&fg))?;
    Ok((aux, corr))
}
