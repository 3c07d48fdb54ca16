//! Spectral normalization: divide a weight matrix by its largest singular
//! value, estimated by power iteration with persistent `u` state.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv_backward, conv_forward};
use super::{ParamRef, StateRef};

const SIGMA_EPS: f32 = 1e-12;

/// Result of a normalization pass: the scaled weight, the singular-value
/// estimate, and the right singular vector used to compute it.
#[derive(Debug, Clone)]
pub struct SpectralNormOut {
    pub normalized: Array2<f32>,
    pub sigma: f32,
    pub v: Array1<f32>,
}

/// Run `iters` power-iteration steps on `weight` (updating `u` in place) and
/// return `weight / sigma_hat` with `sigma_hat = u^T W v`. A zero matrix is
/// returned unchanged with `sigma_hat` clamped to epsilon.
pub fn spectral_normalize(weight: ArrayView2<f32>, u: &mut Array1<f32>, iters: usize) -> SpectralNormOut {
    assert_eq!(u.len(), weight.nrows(), "u must match the output dimension");
    let mut v = Array1::zeros(weight.ncols());
    for _ in 0..iters {
        let mut vn = weight.t().dot(u);
        let norm_v = vn.dot(&vn).sqrt();
        if norm_v <= SIGMA_EPS {
            return SpectralNormOut { normalized: weight.to_owned(), sigma: SIGMA_EPS, v };
        }
        vn.mapv_inplace(|x| x / norm_v);
        let mut un = weight.dot(&vn);
        let norm_u = un.dot(&un).sqrt();
        if norm_u <= SIGMA_EPS {
            return SpectralNormOut { normalized: weight.to_owned(), sigma: SIGMA_EPS, v };
        }
        un.mapv_inplace(|x| x / norm_u);
        *u = un;
        v = vn;
    }
    let sigma = u.dot(&weight.dot(&v)).max(SIGMA_EPS);
    SpectralNormOut { normalized: weight.map(|x| x / sigma), sigma, v }
}

/// Convolution whose weight is spectrally normalized (as a
/// `(cout, cin*k*k)` matrix) before every use.
#[derive(Debug)]
pub struct SpectralConv2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub gw: Array4<f32>,
    pub gb: Array1<f32>,
    pub u: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<SnCache>,
}

#[derive(Debug)]
struct SnCache {
    x: Array4<f32>,
    w_sn: Array4<f32>,
    sigma: f32,
    u: Array1<f32>,
    v: Array1<f32>,
}

impl SpectralConv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let w = Array4::from_shape_simple_fn((cout, cin, k, k), || normal.sample(rng));
        let mut u = Array1::from_shape_simple_fn(cout, || normal.sample(rng));
        let norm = u.dot(&u).sqrt().max(SIGMA_EPS);
        u.mapv_inplace(|x| x / norm);
        SpectralConv2d {
            w,
            b: Array1::zeros(cout),
            gw: Array4::zeros((cout, cin, k, k)),
            gb: Array1::zeros(cout),
            u,
            stride,
            pad,
            cache: None,
        }
    }

    fn w_mat(&self) -> Array2<f32> {
        let (cout, cin, kh, kw) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("standard layout")
            .to_owned()
    }

    /// Forward pass. `iters` power-iteration steps run on the persistent `u`
    /// state when `update_state` is set, or on a scratch copy otherwise (the
    /// frozen mode used for evaluation).
    pub fn forward(&mut self, x: &Array4<f32>, iters: usize, update_state: bool, train: bool) -> Array4<f32> {
        let wm = self.w_mat();
        let (out, u_used) = if update_state {
            let out = spectral_normalize(wm.view(), &mut self.u, iters);
            (out, self.u.clone())
        } else {
            let mut scratch = self.u.clone();
            let out = spectral_normalize(wm.view(), &mut scratch, iters);
            (out, scratch)
        };
        let dims = self.w.dim();
        let w_sn = out
            .normalized
            .into_shape_with_order(dims)
            .expect("weight reshape");
        let y = conv_forward(x, &w_sn, &self.b, self.stride, self.pad);
        if train {
            self.cache = Some(SnCache { x: x.clone(), w_sn, sigma: out.sigma, u: u_used, v: out.v });
        }
        y
    }

    /// Backward pass through both the convolution and the normalization;
    /// `u`, `v` are treated as constants, matching the usual implementation.
    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.as_ref().expect("spectral conv backward before forward");
        let (gx, gw_sn, gb) = conv_backward(&cache.x, &cache.w_sn, gy, self.stride, self.pad);
        let (cout, cin, kh, kw) = self.w.dim();
        let gw_sn_mat = gw_sn
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("standard layout");
        let w_sn_mat = cache
            .w_sn
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("standard layout");
        // d(W/sigma)/dW with sigma = u^T W v:
        //   gW = (gWsn - (sum gWsn . Wsn) u v^T) / sigma
        let inner: f32 = gw_sn_mat.iter().zip(w_sn_mat.iter()).map(|(a, b)| a * b).sum();
        let mut gw_mat = gw_sn_mat.to_owned();
        for i in 0..cout {
            for j in 0..cin * kh * kw {
                gw_mat[(i, j)] = (gw_mat[(i, j)] - inner * cache.u[i] * cache.v[j]) / cache.sigma;
            }
        }
        self.gw += &gw_mat.into_shape_with_order((cout, cin, kh, kw)).unwrap();
        self.gb += &gb;
        gx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }

    pub fn collect_state<'a>(&'a mut self, prefix: &str, out: &mut Vec<StateRef<'a>>) {
        out.push(StateRef {
            name: format!("{prefix}.u"),
            shape: self.u.shape().to_vec(),
            value: self.u.as_slice_mut().unwrap(),
        });
    }
}
