//! Test support: seeded RNG helpers and independent numerical oracles.
//!
//! The oracles here (naive DFT, central finite differences) deliberately
//! avoid the production FFT/backward code paths so tests can use them as
//! independent references.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Spectrum, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `[c, h, w]` tensor with entries uniform in [-1, 1).
pub fn uniform_grid(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[c, h, w], data).expect("uniform_grid shape")
}

/// Random batch `[n, c, h, w]` tensor with entries uniform in [-1, 1).
pub fn uniform_batch(r: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[n, c, h, w], data).expect("uniform_batch shape")
}

/// Direct-summation 2D DFT with the zero-frequency bin at `(h/2, w/2)`.
///
/// Works with signed frequencies `f = index - floor(n/2)`; periodicity of the
/// DFT kernel makes that equivalent to the wrapped convention without
/// reusing any shift arithmetic from the production path. O((HW)^2):
/// only for tiny grids.
pub fn naive_dft2_centered(x: &Tensor) -> Spectrum {
    let (c, h, w) = (x.c3(), x.h3(), x.w3());
    let mut out = Spectrum::zeros(c, h, w);
    for ch in 0..c {
        for cy in 0..h {
            let fy = cy as f64 - (h / 2) as f64;
            for cx in 0..w {
                let fx = cx as f64 - (w / 2) as f64;
                let mut re = 0.0;
                let mut im = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * (fy * y as f64 / h as f64 + fx * xx as f64 / w as f64);
                        let v = x.at3(ch, y, xx);
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                }
                let k = out.idx(ch, cy, cx);
                out.re[k] = re;
                out.im[k] = im;
            }
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`, over `coords`.
pub fn central_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    delta: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = work[i];
        work[i] = orig + delta;
        let hi = f(&work);
        work[i] = orig - delta;
        let lo = f(&work);
        work[i] = orig;
        out.push((hi - lo) / (2.0 * delta));
    }
    out
}

/// Relative error between two gradient entries; both-near-zero passes.
pub fn grad_rel_err(a: f64, b: f64) -> f64 {
    if a.abs() < 1e-7 && b.abs() < 1e-7 {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Max relative error over paired gradient entries.
pub fn max_grad_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| grad_rel_err(a, b))
        .fold(0.0, f64::max)
}

/// Max relative error with the denominator floored at 1e-3 of the
/// gradient's own largest entry. Components that many orders of magnitude
/// below the dominant ones carry only finite-difference noise, which a
/// plain relative comparison would amplify.
pub fn max_grad_rel_err_scaled(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let scale = analytic
        .iter()
        .chain(fd)
        .map(|v| v.abs())
        .fold(1e-12, f64::max);
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

/// Evenly spread sample of `take` coordinate indices out of `len`.
pub fn sample_coords(len: usize, take: usize) -> Vec<usize> {
    if len <= take {
        (0..len).collect()
    } else {
        (0..take).map(|j| j * len / take).collect()
    }
}
