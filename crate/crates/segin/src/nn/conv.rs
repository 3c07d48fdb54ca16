//! 2-D convolution via im2col and a single GEMM per batch.

use ndarray::{Array1, Array2, Array4, ArrayView4};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ParamRef;

pub(crate) fn out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold `(N, C, H, W)` into `(C*k*k, N*Ho*Wo)` patch columns.
fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let mut cols = Array2::zeros((c * k * k, n * ho * wo));
    for ni in 0..n {
        let base = ni * ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[(row, base + oi * wo + oj)] = x[(ni, ci, ii as usize, jj as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of [`im2col`]'s transpose: fold patch-column gradients back
/// onto the input.
fn col2im(
    gcols: &Array2<f32>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, c, h, w) = dims;
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        let base = ni * ho * wo;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            gx[(ni, ci, ii as usize, jj as usize)] += gcols[(row, base + oi * wo + oj)];
                        }
                    }
                }
            }
        }
    }
    gx
}

fn weight_as_mat(w: &Array4<f32>) -> Array2<f32> {
    let (cout, cin, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("conv weight is standard layout")
        .to_owned()
}

pub(crate) fn conv_forward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    b: &Array1<f32>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, _, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let cols = im2col(&x.view(), k, stride, pad);
    let out_mat = weight_as_mat(w).dot(&cols);
    let mut out = Array4::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for ci in 0..cout {
            let bias = b[ci];
            for oi in 0..ho {
                for oj in 0..wo {
                    out[(ni, ci, oi, oj)] = out_mat[(ci, ni * ho * wo + oi * wo + oj)] + bias;
                }
            }
        }
    }
    out
}

/// Returns `(gx, gw, gb)` for the given upstream gradient.
pub(crate) fn conv_backward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    gy: &Array4<f32>,
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, k, _) = w.dim();
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));

    let mut g_mat = Array2::zeros((cout, n * ho * wo));
    let mut gb = Array1::zeros(cout);
    for ni in 0..n {
        for ci in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let v = gy[(ni, ci, oi, oj)];
                    g_mat[(ci, ni * ho * wo + oi * wo + oj)] = v;
                    gb[ci] += v;
                }
            }
        }
    }

    let cols = im2col(&x.view(), k, stride, pad);
    let gw_mat = g_mat.dot(&cols.t());
    let gw = gw_mat
        .into_shape_with_order((cout, cin, k, k))
        .expect("gw reshape");
    let gcols = weight_as_mat(w).t().dot(&g_mat);
    let gx = col2im(&gcols, (n, cin, h, wd), k, stride, pad);
    (gx, gw, gb)
}

/// Convolution layer with owned parameters and gradient accumulators.
#[derive(Debug)]
pub struct Conv2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub gw: Array4<f32>,
    pub gb: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let w = Array4::from_shape_simple_fn((cout, cin, k, k), || normal.sample(rng));
        Conv2d {
            w,
            b: Array1::zeros(cout),
            gw: Array4::zeros((cout, cin, k, k)),
            gb: Array1::zeros(cout),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        if train {
            self.cache = Some(x.clone());
        }
        conv_forward(x, &self.w, &self.b, self.stride, self.pad)
    }

    pub fn backward(&mut self, gy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache.as_ref().expect("conv backward before forward");
        let (gx, gw, gb) = conv_backward(x, &self.w, gy, self.stride, self.pad);
        self.gw += &gw;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct convolution used as an oracle for the im2col path.
    fn conv_naive(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, stride: usize, pad: usize) -> Array4<f32> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
        let mut out = Array4::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    let jj = (oj * stride + kj) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    acc += x[(ni, ci, ii as usize, jj as usize)] * w[(co, ci, ki, kj)];
                                }
                            }
                        }
                        out[(ni, co, oi, oj)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let conv = Conv2d::new(3, 4, 3, stride, pad, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 6, 6), |(a, b, c, d)| {
                ((a * 31 + b * 17 + c * 7 + d) % 13) as f32 * 0.1 - 0.5
            });
            let fast = conv_forward(&x, &conv.w, &conv.b, stride, pad);
            let slow = conv_naive(&x, &conv.w, &conv.b, stride, pad);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, b, c, d)| ((b * 5 + c * 3 + d) % 7) as f32 * 0.2 - 0.5);
        let y = conv.forward(&x, true);
        let gy = Array4::from_elem(y.dim(), 1.0);
        let gx = conv.backward(&gy);

        let h = 1e-3f32;
        // Input gradient.
        let idx = (0, 1, 2, 3);
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let fd = (conv_forward(&xp, &conv.w, &conv.b, 2, 1).sum()
            - conv_forward(&xm, &conv.w, &conv.b, 2, 1).sum())
            / (2.0 * h);
        assert!((fd - gx[idx]).abs() < 1e-2, "fd {fd} vs {}", gx[idx]);

        // Weight gradient.
        let widx = (2, 1, 0, 2);
        let mut wp = conv.w.clone();
        wp[widx] += h;
        let mut wm = conv.w.clone();
        wm[widx] -= h;
        let fd = (conv_forward(&x, &wp, &conv.b, 2, 1).sum() - conv_forward(&x, &wm, &conv.b, 2, 1).sum())
            / (2.0 * h);
        assert!((fd - conv.gw[widx]).abs() < 1e-2, "fd {fd} vs {}", conv.gw[widx]);
    }
}
