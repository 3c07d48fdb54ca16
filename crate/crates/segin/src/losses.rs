//! Training objectives: self-reconstruction, feature reconstruction,
//! adversarial (both sides), total variation, segmentation, and
//! segmentation-attention, plus their weighted total.
//!
//! Every loss comes with its analytic gradient so the same code drives both
//! the training loop (f32) and the finite-difference checks (f64).

use ndarray::{Array3, ArrayD, ArrayViewD, Axis, NdFloat};
use thiserror::Error;

use crate::features::{FeatureError, FeatureExtractor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite value in loss term `{0}`")]
    NonFinite(&'static str),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Floor keeping probabilities away from 0/1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub w1_recon: f64,
    pub w2_feature: f64,
    pub w3_gan: f64,
    pub w4_seg: f64,
    pub w5_seg_att: f64,
    pub w6_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1_recon: 100.0,
            w2_feature: 5e-6,
            w3_gan: 1.0,
            w4_seg: 100.0,
            w5_seg_att: 10.0,
            w6_tv: 10.0,
        }
    }
}

/// Per-step loss readout. `gan_d` is reported alongside but is not part of
/// the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub recon: f64,
    pub feature: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub seg: f64,
    pub seg_att: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,recon,feature,gan_g,gan_d,seg,seg_att,tv,total";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.recon, self.feature, self.gan_g, self.gan_d, self.seg, self.seg_att,
            self.tv, self.total
        )
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("recon", self.recon),
            ("feature", self.feature),
            ("gan_g", self.gan_g),
            ("gan_d", self.gan_d),
            ("seg", self.seg),
            ("seg_att", self.seg_att),
            ("tv", self.tv),
            ("total", self.total),
        ];
        terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

fn check_shapes<F>(a: &ArrayViewD<F>, b: &ArrayViewD<F>) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
fn l1_mean<F: NdFloat>(a: &ArrayViewD<F>, b: &ArrayViewD<F>) -> F {
    let n = F::from(a.len()).unwrap();
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        acc = acc + (*x - *y).abs();
    }
    acc / n
}

/// Gradient of [`l1_mean`] with respect to `a` (sign convention: 0 at ties).
fn l1_mean_grad<F: NdFloat>(a: &ArrayViewD<F>, b: &ArrayViewD<F>) -> ArrayD<F> {
    let n = F::from(a.len()).unwrap();
    let mut g = ArrayD::zeros(a.raw_dim());
    for ((x, y), o) in a.iter().zip(b.iter()).zip(g.iter_mut()) {
        let d = *x - *y;
        *o = if d > F::zero() {
            F::one() / n
        } else if d < F::zero() {
            -F::one() / n
        } else {
            F::zero()
        };
    }
    g
}

/// L1 self-reconstruction loss.
pub fn recon_loss<F: NdFloat>(y_hat: &ArrayViewD<F>, y: &ArrayViewD<F>) -> Result<F, LossError> {
    check_shapes(y_hat, y)?;
    Ok(l1_mean(y_hat, y))
}

pub fn recon_loss_grad<F: NdFloat>(y_hat: &ArrayViewD<F>, y: &ArrayViewD<F>) -> Result<ArrayD<F>, LossError> {
    check_shapes(y_hat, y)?;
    Ok(l1_mean_grad(y_hat, y))
}

/// L1 distance between extractor features of the two images.
pub fn feature_loss<F: NdFloat>(
    y_hat: &Array3<F>,
    y: &Array3<F>,
    extractor: &FeatureExtractor<F>,
) -> Result<F, LossError> {
    if y_hat.dim() != y.dim() {
        return Err(LossError::ShapeMismatch(y_hat.shape().to_vec(), y.shape().to_vec()));
    }
    let fa = extractor.features(y_hat)?;
    let fb = extractor.features(y)?;
    Ok(l1_mean(&fa.view().into_dyn(), &fb.view().into_dyn()))
}

/// Gradient of [`feature_loss`] with respect to `y_hat`, flowing through the
/// frozen extractor.
pub fn feature_loss_grad<F: NdFloat>(
    y_hat: &Array3<F>,
    y: &Array3<F>,
    extractor: &FeatureExtractor<F>,
) -> Result<Array3<F>, LossError> {
    if y_hat.dim() != y.dim() {
        return Err(LossError::ShapeMismatch(y_hat.shape().to_vec(), y.shape().to_vec()));
    }
    let fa = extractor.features(y_hat)?;
    let fb = extractor.features(y)?;
    let g = l1_mean_grad(&fa.view().into_dyn(), &fb.view().into_dyn())
        .into_dimensionality::<ndarray::Ix3>()
        .expect("feature grad is 3-d");
    Ok(extractor.backward(y_hat, &g)?)
}

fn clamp_prob<F: NdFloat>(p: F) -> Result<F, LossError> {
    if !p.is_finite() {
        return Err(LossError::NonFinite("gan probability"));
    }
    let lo = F::from(PROB_CLAMP).unwrap();
    let hi = F::one() - lo;
    Ok(p.max(lo).min(hi))
}

/// Discriminator BCE over patch probabilities. With `labels_flipped` the
/// real/fake targets swap (real: 0, fake: 1).
pub fn gan_loss_d<F: NdFloat>(
    d_real: &ArrayViewD<F>,
    d_fake: &ArrayViewD<F>,
    labels_flipped: bool,
) -> Result<F, LossError> {
    let n_real = F::from(d_real.len()).unwrap();
    let n_fake = F::from(d_fake.len()).unwrap();
    let mut acc_real = F::zero();
    for &p in d_real.iter() {
        let p = clamp_prob(p)?;
        acc_real = acc_real + if labels_flipped { -(F::one() - p).ln() } else { -p.ln() };
    }
    let mut acc_fake = F::zero();
    for &p in d_fake.iter() {
        let p = clamp_prob(p)?;
        acc_fake = acc_fake + if labels_flipped { -p.ln() } else { -(F::one() - p).ln() };
    }
    Ok(acc_real / n_real + acc_fake / n_fake)
}

/// Gradients of [`gan_loss_d`] with respect to both probability maps.
pub fn gan_loss_d_grad<F: NdFloat>(
    d_real: &ArrayViewD<F>,
    d_fake: &ArrayViewD<F>,
    labels_flipped: bool,
) -> Result<(ArrayD<F>, ArrayD<F>), LossError> {
    let n_real = F::from(d_real.len()).unwrap();
    let n_fake = F::from(d_fake.len()).unwrap();
    let mut g_real = ArrayD::zeros(d_real.raw_dim());
    for (&p, o) in d_real.iter().zip(g_real.iter_mut()) {
        let p = clamp_prob(p)?;
        *o = if labels_flipped {
            F::one() / ((F::one() - p) * n_real)
        } else {
            -F::one() / (p * n_real)
        };
    }
    let mut g_fake = ArrayD::zeros(d_fake.raw_dim());
    for (&p, o) in d_fake.iter().zip(g_fake.iter_mut()) {
        let p = clamp_prob(p)?;
        *o = if labels_flipped {
            -F::one() / (p * n_fake)
        } else {
            F::one() / ((F::one() - p) * n_fake)
        };
    }
    Ok((g_real, g_fake))
}

/// Non-saturating generator loss: mean of `-log D(fake)`.
pub fn gan_loss_g<F: NdFloat>(d_fake: &ArrayViewD<F>) -> Result<F, LossError> {
    let n = F::from(d_fake.len()).unwrap();
    let mut acc = F::zero();
    for &p in d_fake.iter() {
        acc = acc - clamp_prob(p)?.ln();
    }
    Ok(acc / n)
}

pub fn gan_loss_g_grad<F: NdFloat>(d_fake: &ArrayViewD<F>) -> Result<ArrayD<F>, LossError> {
    let n = F::from(d_fake.len()).unwrap();
    let mut g = ArrayD::zeros(d_fake.raw_dim());
    for (&p, o) in d_fake.iter().zip(g.iter_mut()) {
        *o = -F::one() / (clamp_prob(p)? * n);
    }
    Ok(g)
}

/// Isotropic total variation of an `(H, W, C)` image: per pixel
/// `sqrt(h^2 + v^2)` with missing-neighbor differences zeroed, summed over
/// channels and averaged over pixels.
pub fn tv_loss<F: NdFloat>(y_hat: &Array3<F>) -> F {
    let (h, w, c) = y_hat.dim();
    let n = F::from(h * w).unwrap();
    let mut acc = F::zero();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let dv = if i + 1 < h { y_hat[(i + 1, j, ch)] - y_hat[(i, j, ch)] } else { F::zero() };
                let dh = if j + 1 < w { y_hat[(i, j + 1, ch)] - y_hat[(i, j, ch)] } else { F::zero() };
                acc = acc + (dv * dv + dh * dh).sqrt();
            }
        }
    }
    acc / n
}

/// Gradient of [`tv_loss`]; the subgradient at `h = v = 0` is zero.
pub fn tv_loss_grad<F: NdFloat>(y_hat: &Array3<F>) -> Array3<F> {
    let (h, w, c) = y_hat.dim();
    let n = F::from(h * w).unwrap();
    let mut g = Array3::zeros((h, w, c));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let dv = if i + 1 < h { y_hat[(i + 1, j, ch)] - y_hat[(i, j, ch)] } else { F::zero() };
                let dh = if j + 1 < w { y_hat[(i, j + 1, ch)] - y_hat[(i, j, ch)] } else { F::zero() };
                let mag = (dv * dv + dh * dh).sqrt();
                if mag == F::zero() {
                    continue;
                }
                g[(i, j, ch)] = g[(i, j, ch)] - (dv + dh) / (mag * n);
                if i + 1 < h {
                    g[(i + 1, j, ch)] = g[(i + 1, j, ch)] + dv / (mag * n);
                }
                if j + 1 < w {
                    g[(i, j + 1, ch)] = g[(i, j + 1, ch)] + dh / (mag * n);
                }
            }
        }
    }
    g
}

/// L1 segmentation loss.
pub fn seg_loss<F: NdFloat>(seg_hat: &ArrayViewD<F>, y_seg: &ArrayViewD<F>) -> Result<F, LossError> {
    check_shapes(seg_hat, y_seg)?;
    Ok(l1_mean(seg_hat, y_seg))
}

pub fn seg_loss_grad<F: NdFloat>(seg_hat: &ArrayViewD<F>, y_seg: &ArrayViewD<F>) -> Result<ArrayD<F>, LossError> {
    check_shapes(seg_hat, y_seg)?;
    Ok(l1_mean_grad(seg_hat, y_seg))
}

fn broadcast_mul<F: NdFloat>(img: &Array3<F>, mask: &Array3<F>) -> Array3<F> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(i, j, ch)| img[(i, j, ch)] * mask[(i, j, 0)])
}

/// Segmentation-attention loss: L1 between the predicted mask applied to the
/// prediction and the true mask applied to the ground truth. Masks have a
/// single channel and broadcast over the image channels.
pub fn seg_att_loss<F: NdFloat>(
    seg_hat: &Array3<F>,
    y_hat: &Array3<F>,
    y_seg: &Array3<F>,
    y: &Array3<F>,
) -> Result<F, LossError> {
    seg_att_check(seg_hat, y_hat, y_seg, y)?;
    let a = broadcast_mul(y_hat, seg_hat);
    let b = broadcast_mul(y, y_seg);
    Ok(l1_mean(&a.view().into_dyn(), &b.view().into_dyn()))
}

fn seg_att_check<F: NdFloat>(
    seg_hat: &Array3<F>,
    y_hat: &Array3<F>,
    y_seg: &Array3<F>,
    y: &Array3<F>,
) -> Result<(), LossError> {
    let (h, w, c) = y_hat.dim();
    if y.dim() != (h, w, c) {
        return Err(LossError::ShapeMismatch(y_hat.shape().to_vec(), y.shape().to_vec()));
    }
    if seg_hat.dim() != (h, w, 1) || y_seg.dim() != (h, w, 1) {
        return Err(LossError::ShapeMismatch(seg_hat.shape().to_vec(), vec![h, w, 1]));
    }
    Ok(())
}

/// Gradients of [`seg_att_loss`] with respect to `seg_hat` and `y_hat`.
pub fn seg_att_loss_grad<F: NdFloat>(
    seg_hat: &Array3<F>,
    y_hat: &Array3<F>,
    y_seg: &Array3<F>,
    y: &Array3<F>,
) -> Result<(Array3<F>, Array3<F>), LossError> {
    seg_att_check(seg_hat, y_hat, y_seg, y)?;
    let (h, w, c) = y_hat.dim();
    let n = F::from(h * w * c).unwrap();
    let mut g_seg = Array3::zeros((h, w, 1));
    let mut g_img = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let d = seg_hat[(i, j, 0)] * y_hat[(i, j, ch)] - y_seg[(i, j, 0)] * y[(i, j, ch)];
                let s = if d > F::zero() {
                    F::one()
                } else if d < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                g_seg[(i, j, 0)] = g_seg[(i, j, 0)] + s * y_hat[(i, j, ch)] / n;
                g_img[(i, j, ch)] = s * seg_hat[(i, j, 0)] / n;
            }
        }
    }
    Ok((g_seg, g_img))
}

/// Weighted sum of the generator-side components.
pub fn total_loss(report: &LossReport, w: &LossWeights) -> Result<f64, LossError> {
    let total = w.w1_recon * report.recon
        + w.w2_feature * report.feature
        + w.w3_gan * report.gan_g
        + w.w4_seg * report.seg
        + w.w5_seg_att * report.seg_att
        + w.w6_tv * report.tv;
    if !total.is_finite() {
        return Err(LossError::NonFinite("total"));
    }
    Ok(total)
}

/// Convert a batched `(N, C, H, W)` tensor view into per-sample `(H, W, C)`
/// images; used to bridge the network layout and the image-space losses.
pub fn nchw_to_hwc<F: NdFloat>(batch: &ndarray::Array4<F>, n: usize) -> Array3<F> {
    let (_, c, h, w) = batch.dim();
    let sample = batch.index_axis(Axis(0), n);
    Array3::from_shape_fn((h, w, c), |(i, j, ch)| sample[(ch, i, j)])
}

/// Inverse of [`nchw_to_hwc`] for gradients.
pub fn hwc_to_nchw_slice<F: NdFloat>(img: &Array3<F>, batch: &mut ndarray::Array4<F>, n: usize) {
    let (h, w, c) = img.dim();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                batch[(n, ch, i, j)] = img[(i, j, ch)];
            }
        }
    }
}
