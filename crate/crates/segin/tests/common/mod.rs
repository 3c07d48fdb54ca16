//! Independent oracles and helpers shared by the integration and acceptance
//! suites. Everything here re-derives expected values from first principles
//! and stays off the library's implementation paths.

#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segin::FeatureMap;

/// Mirror-without-edge-repeat index reflection.
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

/// Gather the k-by-k neighborhood of every grid position, row priority, as
/// f64 vectors. Independent re-derivation of the patch unfolding.
pub fn naive_patches(fm: &FeatureMap, k: usize) -> Vec<Vec<f64>> {
    let (hf, wf) = fm.grid();
    let c = fm.channels();
    let half = (k / 2) as isize;
    let mut out = Vec::with_capacity(hf * wf);
    for i in 0..hf {
        for j in 0..wf {
            let mut row = Vec::with_capacity(k * k * c);
            for di in -half..=half {
                for dj in -half..=half {
                    let ii = reflect(i as isize + di, hf);
                    let jj = reflect(j as isize + dj, wf);
                    for ch in 0..c {
                        row.push(fm.data[(ii, jj, ch)] as f64);
                    }
                }
            }
            out.push(row);
        }
    }
    out
}

/// Brute-force cosine argmax with the same tie-break and zero-norm rules the
/// contract states: ties to the lowest index, one-sided zero pairs at -inf,
/// double-zero pairs at 1.
pub fn oracle_correspondence(fx: &FeatureMap, fr: &FeatureMap, k: usize) -> (Vec<usize>, Vec<f64>) {
    let px = naive_patches(fx, k);
    let pr = naive_patches(fr, k);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nx: Vec<f64> = px.iter().map(|v| norm(v)).collect();
    let nr: Vec<f64> = pr.iter().map(|v| norm(v)).collect();
    let mut xi = Vec::with_capacity(px.len());
    let mut scores = Vec::with_capacity(px.len());
    for i in 0..px.len() {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0usize;
        for j in 0..pr.len() {
            let cos = if nx[i] == 0.0 && nr[j] == 0.0 {
                1.0
            } else if nx[i] == 0.0 || nr[j] == 0.0 {
                f64::NEG_INFINITY
            } else {
                let mut dot = 0.0;
                for (a, b) in px[i].iter().zip(pr[j].iter()) {
                    dot += a * b;
                }
                dot / (nx[i] * nr[j])
            };
            if cos > best {
                best = cos;
                best_j = j;
            }
        }
        xi.push(best_j);
        scores.push(best);
    }
    (xi, scores)
}

/// Dense softmax attention in f64: `softmax(X theta^T (X phi^T)^T) (X g^T)`.
pub fn oracle_attention(
    x: &Array2<f64>,
    theta: &Array2<f64>,
    phi: &Array2<f64>,
    g: &Array2<f64>,
) -> Array2<f64> {
    let p = x.nrows();
    let q = x.dot(&theta.t());
    let k = x.dot(&phi.t());
    let v = x.dot(&g.t());
    let s = q.dot(&k.t());
    let mut out = Array2::zeros((p, v.ncols()));
    for i in 0..p {
        let max = s.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = s.row(i).iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for col in 0..v.ncols() {
            let mut acc = 0.0;
            for j in 0..p {
                acc += exps[j] / z * v[(j, col)];
            }
            out[(i, col)] = acc;
        }
    }
    out
}

/// Central finite differences of a scalar function, f64.
pub fn finite_diff<F: FnMut(&ArrayD<f64>) -> f64>(x: &ArrayD<f64>, step: f64, mut f: F) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let flat = probe.as_slice_mut().unwrap();
        let orig = flat[idx];
        flat[idx] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Feature map filled with standard-normal values.
pub fn random_feature_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, delta: usize) -> FeatureMap {
    let data = Array3::from_shape_simple_fn((h, w, c), || {
        // Box-Muller keeps this independent of rand_distr.
        let u1: f64 = rng.gen_range(1e-9..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    });
    FeatureMap { data, source_image_shape: (h * delta, w * delta) }
}

/// Image whose every pixel is an independent random color; nearly every
/// pixel satisfies the colored-foreground rule.
pub fn random_color_image(rng: &mut ChaCha8Rng, size: usize) -> Array3<f32> {
    Array3::from_shape_simple_fn((size, size, 3), || rng.gen_range(0.0..0.9f32))
}

/// Spectral norm of a matrix via many f64 power iterations; used to check
/// the f32 implementation from the outside.
pub fn oracle_spectral_norm(w: &Array2<f32>, iters: usize) -> f64 {
    let (r, c) = w.dim();
    let wd = w.mapv(|v| v as f64);
    let mut v = ndarray::Array1::from_elem(c, 1.0 / (c as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = wd.dot(&v);
        let nu = u.dot(&u).sqrt();
        if nu == 0.0 {
            return 0.0;
        }
        let u = u / nu;
        let vt = wd.t().dot(&u);
        let nv = vt.dot(&vt).sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v = vt / nv;
        sigma = nv;
    }
    let _ = r;
    sigma
}
