//! Minimal training stack: layers with explicit forward/backward passes over
//! `(N, C, H, W)` f32 tensors, an Adam optimizer, and the generator and
//! discriminator assembled from them.

pub mod adam;
pub mod attention;
pub mod conv;
pub mod discriminator;
pub mod generator;
pub mod norm;
pub mod spectral;

use ndarray::Array4;
use thiserror::Error;

pub use adam::Adam;
pub use attention::{NonLocal2d, NonLocalBlock};
pub use conv::Conv2d;
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, NonLocalPlacement};
pub use norm::BatchNorm2d;
pub use spectral::{spectral_normalize, SpectralConv2d, SpectralNormOut};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("spatial size {h}x{w} not divisible by 2^{blocks}")]
    BadSpatialSize { h: usize, w: usize, blocks: usize },
    #[error("expected {expected} input channels, got {got}")]
    BadChannels { expected: usize, got: usize },
    #[error("input sizes differ: {0:?} vs {1:?}")]
    SizeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
}

/// A named view over one parameter tensor and its gradient accumulator.
/// All parameters are standard-layout, so flat slices are always available.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
}

/// Non-trained state that still belongs in checkpoints (power-iteration
/// vectors).
pub struct StateRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f32],
}

/// Rectified linear unit with cached mask.
#[derive(Debug, Default)]
pub struct Relu {
    mask: Option<Array4<f32>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let y = x * &mask;
        if train {
            self.mask = Some(mask);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        gy * self.mask.as_ref().expect("relu backward before forward")
    }
}

/// Leaky rectifier (negative slope 0.2), the discriminator's activation.
#[derive(Debug, Default)]
pub struct LeakyRelu {
    mask: Option<Array4<f32>>,
}

pub const LEAKY_SLOPE: f32 = 0.2;

impl LeakyRelu {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE });
        let y = x * &mask;
        if train {
            self.mask = Some(mask);
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        gy * self.mask.as_ref().expect("leaky relu backward before forward")
    }
}

/// Logistic output with cached activation.
#[derive(Debug, Default)]
pub struct Sigmoid {
    out: Option<Array4<f32>>,
}

impl Sigmoid {
    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        if train {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let y = self.out.as_ref().expect("sigmoid backward before forward");
        gy * &y.mapv(|v| v * (1.0 - v))
    }
}

/// Nearest-neighbor 2x upsample.
pub fn upsample2x(x: &Array4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * 2, w * 2), |(ni, ci, i, j)| x[(ni, ci, i / 2, j / 2)])
}

/// Backward of [`upsample2x`]: each input cell collects its four children.
pub fn upsample2x_backward(gy: &Array4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    gx[(ni, ci, i / 2, j / 2)] += gy[(ni, ci, i, j)];
                }
            }
        }
    }
    gx
}

/// Concatenate two batches along the channel axis.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Array4<f32>, first: usize) -> (Array4<f32>, Array4<f32>) {
    let a = g.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = g.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_round_trip_gradient() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f32);
        let y = upsample2x(&x);
        assert_eq!(y[(0, 0, 0, 0)], 0.0);
        assert_eq!(y[(0, 0, 3, 3)], 3.0);
        let gx = upsample2x_backward(&Array4::ones((1, 1, 4, 4)));
        assert!(gx.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_split_inverse() {
        let a = Array4::from_elem((1, 2, 2, 2), 1.0);
        let b = Array4::from_elem((1, 3, 2, 2), 2.0);
        let c = concat_channels(&a, &b);
        assert_eq!(c.dim(), (1, 5, 2, 2));
        let (ga, gb) = split_channels(&c, 2);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}
