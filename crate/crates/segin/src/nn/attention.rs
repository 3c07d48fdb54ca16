//! Non-local blocks: every position aggregates all positions weighted by
//! embedded-Gaussian affinities `exp(theta(x_i)^T phi(x_j))`, normalized by a
//! softmax over positions, projected back and added residually.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ParamRef;

/// Embedding projections over `(P, C)` position-major features. The
/// embedding dimension is `max(C / 2, 1)`.
#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    pub theta: Array2<f32>,    // (ce, c)
    pub phi: Array2<f32>,      // (ce, c)
    pub g: Array2<f32>,        // (ce, c)
    pub out_proj: Array2<f32>, // (c, ce)
    pub gtheta: Array2<f32>,
    pub gphi: Array2<f32>,
    pub gg: Array2<f32>,
    pub gout: Array2<f32>,
}

impl NonLocalBlock {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let ce = (channels / 2).max(1);
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let mut init = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || normal.sample(rng));
        NonLocalBlock {
            theta: init(ce, channels),
            phi: init(ce, channels),
            g: init(ce, channels),
            out_proj: init(channels, ce),
            gtheta: Array2::zeros((ce, channels)),
            gphi: Array2::zeros((ce, channels)),
            gg: Array2::zeros((ce, channels)),
            gout: Array2::zeros((channels, ce)),
        }
    }

    /// Identity-projection block, useful for tests and hand calculations.
    pub fn identity(channels: usize) -> Self {
        let eye = Array2::eye(channels);
        NonLocalBlock {
            theta: eye.clone(),
            phi: eye.clone(),
            g: eye.clone(),
            out_proj: eye,
            gtheta: Array2::zeros((channels, channels)),
            gphi: Array2::zeros((channels, channels)),
            gg: Array2::zeros((channels, channels)),
            gout: Array2::zeros((channels, channels)),
        }
    }

    /// Row-stochastic attention matrix `softmax(theta(x) phi(x)^T)`, computed
    /// with max subtraction.
    pub fn attention_matrix(&self, feats: &Array2<f32>) -> Array2<f32> {
        let q = feats.dot(&self.theta.t());
        let k = feats.dot(&self.phi.t());
        softmax_rows(&q.dot(&k.t()))
    }

    /// Pre-residual aggregation `softmax(theta phi^T) g(x)`, shape `(P, ce)`.
    pub fn attention(&self, feats: &Array2<f32>) -> Array2<f32> {
        let v = feats.dot(&self.g.t());
        self.attention_matrix(feats).dot(&v)
    }

    /// Full block: residual add of the projected aggregation.
    pub fn forward(&self, feats: &Array2<f32>) -> Array2<f32> {
        feats + &self.attention(feats).dot(&self.out_proj.t())
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        let items: [(&str, &mut Array2<f32>, &mut Array2<f32>); 4] = [
            ("theta", &mut self.theta, &mut self.gtheta),
            ("phi", &mut self.phi, &mut self.gphi),
            ("g", &mut self.g, &mut self.gg),
            ("out", &mut self.out_proj, &mut self.gout),
        ];
        for (name, value, grad) in items {
            out.push(ParamRef {
                name: format!("{prefix}.{name}"),
                shape: value.shape().to_vec(),
                value: value.as_slice_mut().unwrap(),
                grad: grad.as_slice_mut().unwrap(),
            });
        }
    }
}

fn softmax_rows(s: &Array2<f32>) -> Array2<f32> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

struct SampleCache {
    x: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    a: Array2<f32>,
}

/// Batched non-local layer over `(N, C, H, W)` maps; attention runs within
/// each sample over its `H*W` positions.
#[derive(Debug)]
pub struct NonLocal2d {
    pub block: NonLocalBlock,
    cache: Vec<SampleCache>,
}

impl std::fmt::Debug for SampleCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SampleCache(P={})", self.x.nrows())
    }
}

impl NonLocal2d {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        NonLocal2d { block: NonLocalBlock::new(channels, rng), cache: Vec::new() }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let p = h * w;
        let mut out = Array4::zeros((n, c, h, w));
        self.cache.clear();
        for ni in 0..n {
            let sample = x.index_axis(Axis(0), ni);
            let flat = sample
                .into_shape_with_order((c, p))
                .expect("contiguous sample");
            let xm = flat.t().to_owned(); // (P, C)
            let q = xm.dot(&self.block.theta.t());
            let k = xm.dot(&self.block.phi.t());
            let v = xm.dot(&self.block.g.t());
            let a = softmax_rows(&q.dot(&k.t()));
            let z = &xm + &a.dot(&v).dot(&self.block.out_proj.t());
            for ci in 0..c {
                for pi in 0..p {
                    out[(ni, ci, pi / w, pi % w)] = z[(pi, ci)];
                }
            }
            if train {
                self.cache.push(SampleCache { x: xm, q, k, v, a });
            }
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = gy.dim();
        let p = h * w;
        let mut gx_out = Array4::zeros((n, c, h, w));
        assert_eq!(self.cache.len(), n, "attention backward before forward");
        for ni in 0..n {
            let cache = &self.cache[ni];
            let mut gz = Array2::zeros((p, c));
            for ci in 0..c {
                for pi in 0..p {
                    gz[(pi, ci)] = gy[(ni, ci, pi / w, pi % w)];
                }
            }
            let y = cache.a.dot(&cache.v); // (P, ce)
            let gyp = gz.dot(&self.block.out_proj); // (P, ce)
            self.block.gout += &gz.t().dot(&y);
            let ga = gyp.dot(&cache.v.t()); // (P, P)
            let gv = cache.a.t().dot(&gyp); // (P, ce)
            // Softmax backward, row-wise.
            let mut gs = Array2::zeros((p, p));
            for i in 0..p {
                let mut dot = 0.0f32;
                for j in 0..p {
                    dot += ga[(i, j)] * cache.a[(i, j)];
                }
                for j in 0..p {
                    gs[(i, j)] = cache.a[(i, j)] * (ga[(i, j)] - dot);
                }
            }
            let gq = gs.dot(&cache.k);
            let gk = gs.t().dot(&cache.q);
            self.block.gtheta += &gq.t().dot(&cache.x);
            self.block.gphi += &gk.t().dot(&cache.x);
            self.block.gg += &gv.t().dot(&cache.x);
            let gx = &gz
                + &gq.dot(&self.block.theta)
                + &gk.dot(&self.block.phi)
                + &gv.dot(&self.block.g);
            for ci in 0..c {
                for pi in 0..p {
                    gx_out[(ni, ci, pi / w, pi % w)] = gx[(pi, ci)];
                }
            }
        }
        gx_out
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.block.collect_params(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn single_position_identity_doubles() {
        let block = NonLocalBlock::identity(3);
        let x = arr2(&[[0.5f32, -1.0, 2.0]]);
        let y = block.forward(&x);
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_positions_average_to_themselves() {
        let block = NonLocalBlock::identity(2);
        let x = arr2(&[[1.0f32, -0.5], [1.0, -0.5], [1.0, -0.5]]);
        let att = block.attention(&x);
        for i in 0..3 {
            assert!((att[(i, 0)] - 1.0).abs() < 1e-6);
            assert!((att[(i, 1)] + 0.5).abs() < 1e-6);
        }
        let a = block.attention_matrix(&x);
        assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn two_position_hand_case() {
        let block = NonLocalBlock::identity(1);
        let x = arr2(&[[1.0f32], [2.0]]);
        let att = block.attention(&x);
        assert!((att[(0, 0)] - 1.7311).abs() < 1e-3, "got {}", att[(0, 0)]);
        assert!((att[(1, 0)] - 1.8808).abs() < 1e-3, "got {}", att[(1, 0)]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = NonLocalBlock::new(6, &mut rng);
        let x = Array2::from_shape_fn((10, 6), |(i, j)| ((i * 7 + j * 3) % 11) as f32 * 0.2 - 1.0);
        let a = block.attention_matrix(&x);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn position_permutation_covariance() {
        // The pre-residual aggregation is position-agnostic: permuting the
        // rows of the input permutes the output rows identically.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = NonLocalBlock::new(3, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 4 + j * 7) % 11) as f32 * 0.3 - 1.2);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Array2::zeros((5, 3));
        for (row, &src) in perm.iter().enumerate() {
            xp.row_mut(row).assign(&x.row(src));
        }
        let base = block.attention(&x);
        let permuted = block.attention(&xp);
        for (row, &src) in perm.iter().enumerate() {
            for col in 0..base.ncols() {
                assert!(
                    (permuted[(row, col)] - base[(src, col)]).abs() < 1e-6,
                    "row {row} col {col}"
                );
            }
        }
    }

    #[test]
    fn batched_layer_matches_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = NonLocal2d::new(4, &mut rng);
        let x = Array4::from_shape_fn((2, 4, 2, 3), |(n, c, i, j)| {
            ((n * 13 + c * 5 + i * 3 + j) % 9) as f32 * 0.25 - 1.0
        });
        let y = layer.forward(&x, false);
        for ni in 0..2 {
            let flat = x
                .index_axis(Axis(0), ni)
                .into_shape_with_order((4, 6))
                .unwrap()
                .t()
                .to_owned();
            let z = layer.block.forward(&flat);
            for ci in 0..4 {
                for pi in 0..6 {
                    assert!((y[(ni, ci, pi / 3, pi % 3)] - z[(pi, ci)]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = NonLocal2d::new(2, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, i, j)| ((c * 4 + i * 2 + j) % 5) as f32 * 0.3 - 0.6);
        let wts = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, i, j)| ((c + i + 2 * j) % 3) as f32 - 1.0);
        let _ = layer.forward(&x, true);
        let gx = layer.backward(&wts);
        let h = 1e-3f32;
        for idx in [(0, 0, 0, 0), (0, 1, 1, 1), (0, 0, 1, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fp = (&layer.forward(&xp, false) * &wts).sum();
            let fm = (&layer.forward(&xm, false) * &wts).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-2, "fd {fd} vs {}", gx[idx]);
        }
    }
}
