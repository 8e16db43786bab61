//! Raw layer kernels: 2D convolution, nearest upsampling, channel statistics.
//!
//! Forward and backward passes are plain functions over `[N, C, H, W]`
//! tensors; the gradient tape wires them into recorded ops.

use crate::error::{DynaError, Result};
use crate::tensor::Tensor;

/// Cross-correlation with zero padding `k/2`, stride 1 or 2.
///
/// `x`: `[N, C, H, W]`, `w`: `[O, C, k, k]` with odd `k`, `b`: `[O]`.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, h, wid) = conv_check(x, w, b, stride)?;
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wid + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);

    for bn in 0..n {
        for oc in 0..o {
            let bias = b.data()[oc];
            let obase = (bn * o + oc) * ho * wo;
            out.data_mut()[obase..obase + ho * wo].fill(bias);
            for ic in 0..c {
                let xbase = (bn * c + ic) * h * wid;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                        accumulate_shifted(
                            &mut out.data_mut()[obase..obase + ho * wo],
                            &x.data()[xbase..xbase + h * wid],
                            wv,
                            (h, wid),
                            (ho, wo),
                            (ky, kx),
                            pad,
                            stride,
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, kernel, and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, wid) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, k) = (w.dims()[0], w.dims()[2]);
    let pad = k / 2;
    let (ho, wo) = (gout.dims()[2], gout.dims()[3]);
    let mut gx = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(w.dims());
    let mut gb = Tensor::zeros(&[o]);

    for bn in 0..n {
        for oc in 0..o {
            let gbase = (bn * o + oc) * ho * wo;
            let gplane = &gout.data()[gbase..gbase + ho * wo];
            gb.data_mut()[oc] += gplane.iter().sum::<f64>();
            for ic in 0..c {
                let xbase = (bn * c + ic) * h * wid;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        gw.data_mut()[widx] += dot_shifted(
                            gplane,
                            &x.data()[xbase..xbase + h * wid],
                            (h, wid),
                            (ho, wo),
                            (ky, kx),
                            pad,
                            stride,
                        );
                        let wv = w.data()[widx];
                        scatter_shifted(
                            gplane,
                            &mut gx.data_mut()[xbase..xbase + h * wid],
                            wv,
                            (h, wid),
                            (ho, wo),
                            (ky, kx),
                            pad,
                            stride,
                        );
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn conv_check(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(DynaError::Shape(format!(
            "conv2d expects x [N,C,H,W] and w [O,C,k,k], got {:?} / {:?}",
            x.dims(),
            w.dims()
        )));
    }
    let (n, c, h, wid) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (o, wc, k0, k1) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
    if wc != c {
        return Err(DynaError::Shape(format!("conv2d: input has {c} channels, kernel expects {wc}")));
    }
    if k0 != k1 || k0 % 2 == 0 {
        return Err(DynaError::Shape(format!("conv2d: kernel must be square and odd, got {k0}x{k1}")));
    }
    if !(stride == 1 || stride == 2) {
        return Err(DynaError::Shape(format!("conv2d: stride must be 1 or 2, got {stride}")));
    }
    if b.len() != o {
        return Err(DynaError::Shape(format!("conv2d: bias length {} vs {o} output channels", b.len())));
    }
    Ok((n, c, h, wid))
}

/// Valid output-row/column window so that `iy = oy*stride + ky - pad` stays in range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, koff: usize, pad: usize, stride: usize) -> (usize, usize, isize) {
    let off = koff as isize - pad as isize;
    let lo = if off < 0 { ((-off) as usize).div_ceil(stride) } else { 0 };
    let hi_in = in_len as isize - off; // exclusive bound on oy*stride
    let hi = if hi_in <= 0 { 0 } else { ((hi_in - 1) as usize / stride + 1).min(out_len) };
    (lo, hi.max(lo), off)
}

/// out[oy, ox] += wv * x[oy*s. + ky - pad, ox*s + kx - pad] over the valid window.
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out: &mut [f64],
    x: &[f64],
    wv: f64,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (ky, kx): (usize, usize),
    pad: usize,
    stride: usize,
) {
    let (ylo, yhi, yoff) = valid_range(ho, h, ky, pad, stride);
    let (xlo, xhi, xoff) = valid_range(wo, w, kx, pad, stride);
    for oy in ylo..yhi {
        let iy = (oy * stride) as isize + yoff;
        let xrow = &x[iy as usize * w..iy as usize * w + w];
        let orow = &mut out[oy * wo..oy * wo + wo];
        if stride == 1 {
            let ix0 = (xlo as isize + xoff) as usize;
            let len = xhi - xlo;
            for (ov, xv) in orow[xlo..xhi].iter_mut().zip(&xrow[ix0..ix0 + len]) {
                *ov += wv * xv;
            }
        } else {
            for ox in xlo..xhi {
                let ix = ((ox * stride) as isize + xoff) as usize;
                orow[ox] += wv * xrow[ix];
            }
        }
    }
}

/// Σ g[oy, ox] * x[oy*s + ky - pad, ox*s + kx - pad] over the valid window.
fn dot_shifted(
    g: &[f64],
    x: &[f64],
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (ky, kx): (usize, usize),
    pad: usize,
    stride: usize,
) -> f64 {
    let (ylo, yhi, yoff) = valid_range(ho, h, ky, pad, stride);
    let (xlo, xhi, xoff) = valid_range(wo, w, kx, pad, stride);
    let mut acc = 0.0;
    for oy in ylo..yhi {
        let iy = (oy * stride) as isize + yoff;
        let xrow = &x[iy as usize * w..iy as usize * w + w];
        let grow = &g[oy * wo..oy * wo + wo];
        if stride == 1 {
            let ix0 = (xlo as isize + xoff) as usize;
            let len = xhi - xlo;
            for (gv, xv) in grow[xlo..xhi].iter().zip(&xrow[ix0..ix0 + len]) {
                acc += gv * xv;
            }
        } else {
            for ox in xlo..xhi {
                let ix = ((ox * stride) as isize + xoff) as usize;
                acc += grow[ox] * xrow[ix];
            }
        }
    }
    acc
}

/// gx[oy*s + ky - pad, ox*s + kx - pad] += wv * g[oy, ox] over the valid window.
#[allow(clippy::too_many_arguments)]
fn scatter_shifted(
    g: &[f64],
    gx: &mut [f64],
    wv: f64,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (ky, kx): (usize, usize),
    pad: usize,
    stride: usize,
) {
    let (ylo, yhi, yoff) = valid_range(ho, h, ky, pad, stride);
    let (xlo, xhi, xoff) = valid_range(wo, w, kx, pad, stride);
    for oy in ylo..yhi {
        let iy = (oy * stride) as isize + yoff;
        let gxrow = &mut gx[iy as usize * w..iy as usize * w + w];
        let grow = &g[oy * wo..oy * wo + wo];
        if stride == 1 {
            let ix0 = (xlo as isize + xoff) as usize;
            let len = xhi - xlo;
            for (xv, gv) in gxrow[ix0..ix0 + len].iter_mut().zip(&grow[xlo..xhi]) {
                *xv += wv * gv;
            }
        } else {
            for ox in xlo..xhi {
                let ix = ((ox * stride) as isize + xoff) as usize;
                gxrow[ix] += wv * grow[ox];
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of a `[N, C, H, W]` tensor.
pub fn upsample2_fwd(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        let ibase = plane * h * w;
        let obase = plane * 4 * h * w;
        for y in 0..h {
            for xx in 0..w {
                let v = x.data()[ibase + y * w + xx];
                let o = obase + 2 * y * 2 * w + 2 * xx;
                out.data_mut()[o] = v;
                out.data_mut()[o + 1] = v;
                out.data_mut()[o + 2 * w] = v;
                out.data_mut()[o + 2 * w + 1] = v;
            }
        }
    }
    out
}

/// Backward of [`upsample2_fwd`]: sum each 2x2 block.
pub fn upsample2_bwd(g: &Tensor) -> Tensor {
    let (n, c, h2, w2) = (g.dims()[0], g.dims()[1], g.dims()[2], g.dims()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let obase = plane * h * w;
        let gbase = plane * h2 * w2;
        for y in 0..h {
            for xx in 0..w {
                let gidx = gbase + 2 * y * w2 + 2 * xx;
                out.data_mut()[obase + y * w + xx] =
                    g.data()[gidx] + g.data()[gidx + 1] + g.data()[gidx + w2] + g.data()[gidx + w2 + 1];
            }
        }
    }
    out
}

/// Per-channel mean and `sqrt(biased var + eps)` over batch and spatial axes.
pub fn channel_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let count = (n * h * w) as f64;
    let mut mu = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bn in 0..n {
        for ch in 0..c {
            let base = (bn * c + ch) * h * w;
            mu[ch] += x.data()[base..base + h * w].iter().sum::<f64>();
        }
    }
    for m in mu.iter_mut() {
        *m /= count;
    }
    for bn in 0..n {
        for ch in 0..c {
            let base = (bn * c + ch) * h * w;
            var[ch] += x.data()[base..base + h * w]
                .iter()
                .map(|v| (v - mu[ch]) * (v - mu[ch]))
                .sum::<f64>();
        }
    }
    let sigma = var.iter().map(|v| (v / count + eps).sqrt()).collect();
    (mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform_batch};

    #[test]
    fn identity_1x1_kernel() {
        let mut r = rng(21);
        let x = uniform_batch(&mut r, 2, 1, 5, 5);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &w, &b, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_on_constant_interior() {
        let v = 0.6;
        let x = Tensor::full(&[1, 1, 6, 6], v);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &w, &b, 1).unwrap();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.data()[yy * 6 + xx] - 9.0 * v).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 patch
        assert!((y.data()[0] - 4.0 * v).abs() < 1e-12);
    }

    #[test]
    fn stride2_shape() {
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let b = Tensor::zeros(&[5]);
        let y = conv2d_fwd(&x, &w, &b, 2).unwrap();
        assert_eq!(y.dims(), &[1, 5, 4, 4]);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d_fwd(&x, &w, &b, 1).is_err());
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let mut r = rng(22);
        let x = uniform_batch(&mut r, 1, 2, 3, 4);
        let up = upsample2_fwd(&x);
        assert_eq!(up.dims(), &[1, 2, 6, 8]);
        assert_eq!(up.data()[0], x.data()[0]);
        let back = upsample2_bwd(&up);
        // each input pixel was replicated 4x, so the block-sum is 4x the value
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_stats_constant_input() {
        let x = Tensor::full(&[2, 3, 4, 4], 2.5);
        let (mu, sigma) = channel_stats(&x, 1e-5);
        for c in 0..3 {
            assert!((mu[c] - 2.5).abs() < 1e-12);
            assert!((sigma[c] - 1e-5f64.sqrt()).abs() < 1e-12);
        }
    }
}
