//! Batch normalization over `(N, H, W)` per channel. Statistics always come
//! from the current batch, so single-image inference normalizes with that
//! image's own statistics; everything stays deterministic.

use ndarray::{Array1, Array4, Axis};

use super::ParamRef;

const EPS: f32 = 1e-5;

#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub ggamma: Array1<f32>,
    pub gbeta: Array1<f32>,
    cache: Option<(Array4<f32>, Array1<f32>)>, // (xhat, inv_std)
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f32;
        let mut out = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let mean = ch.sum() / m;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / m;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[ci] = is;
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (x[(ni, ci, i, j)] - mean) * is;
                        xhat[(ni, ci, i, j)] = xh;
                        out[(ni, ci, i, j)] = g * xh + b;
                    }
                }
            }
        }
        if train {
            self.cache = Some((xhat, inv_std));
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (xhat, inv_std) = self.cache.as_ref().expect("batchnorm backward before forward");
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f32;
        let mut gx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let mut sum_gy = 0.0f32;
            let mut sum_gy_xhat = 0.0f32;
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let g = gy[(ni, ci, i, j)];
                        sum_gy += g;
                        sum_gy_xhat += g * xhat[(ni, ci, i, j)];
                    }
                }
            }
            self.gbeta[ci] += sum_gy;
            self.ggamma[ci] += sum_gy_xhat;
            let scale = self.gamma[ci] * inv_std[ci] / m;
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let g = gy[(ni, ci, i, j)];
                        let xh = xhat[(ni, ci, i, j)];
                        gx[(ni, ci, i, j)] = scale * (m * g - sum_gy - xh * sum_gy_xhat);
                    }
                }
            }
        }
        gx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.gamma"),
            shape: self.gamma.shape().to_vec(),
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.ggamma.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.beta"),
            shape: self.beta.shape().to_vec(),
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.gbeta.as_slice_mut().unwrap(),
        });
    }
}
