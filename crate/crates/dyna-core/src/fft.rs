//! Centered 2D Fourier transforms over `[C, H, W]` tensors.
//!
//! Forward transforms are unnormalized; the inverse carries the full
//! `1/(H*W)` factor. The zero-frequency bin is shifted to `(H/2, W/2)`
//! so low frequencies live at the spatial center of the grid. Arbitrary
//! grid sizes are supported (rustfft falls back to mixed-radix/Bluestein
//! plans for awkward lengths).

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{DynaError, Result};
use crate::tensor::{Spectrum, Tensor};

/// Largest |imag| tolerated when an inverse transform is asked for a real image.
pub const IMAG_RESIDUE_LIMIT: f64 = 1e-6;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place 2D transform of one `h*w` plane: rows first, then columns.
fn fft2_plane(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row_fft = plan(w, inverse);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Centered index -> raw index along one axis.
#[inline]
fn unshift_idx(centered: usize, n: usize) -> usize {
    (centered + n.div_ceil(2)) % n
}

/// Raw index -> centered index along one axis.
#[inline]
fn shift_idx(raw: usize, n: usize) -> usize {
    (raw + n / 2) % n
}

/// Per-channel 2D DFT with the zero-frequency bin at the spatial center.
pub fn fft2_centered(x: &Tensor) -> Result<Spectrum> {
    if x.rank() != 3 {
        return Err(DynaError::Shape(format!("fft2_centered expects [C,H,W], got {:?}", x.dims())));
    }
    x.ensure_finite("fft2_centered input")?;
    let (c, h, w) = (x.c3(), x.h3(), x.w3());
    let mut out = Spectrum::zeros(c, h, w);
    let mut buf = vec![Complex64::default(); h * w];
    for ch in 0..c {
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(x.data()[ch * h * w + k], 0.0);
        }
        fft2_plane(&mut buf, h, w, false);
        for cy in 0..h {
            let ry = unshift_idx(cy, h);
            for cx in 0..w {
                let rx = unshift_idx(cx, w);
                let v = buf[ry * w + rx];
                let o = out.idx(ch, cy, cx);
                out.re[o] = v.re;
                out.im[o] = v.im;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`fft2_centered`] for spectra of real images.
///
/// The imaginary residue is asserted below [`IMAG_RESIDUE_LIMIT`] and then
/// discarded; spectra that were modified asymmetrically fail this check.
pub fn ifft2_centered(z: &Spectrum) -> Result<Tensor> {
    let (real, residue) = ifft2_split(z);
    if residue >= IMAG_RESIDUE_LIMIT {
        return Err(DynaError::SpectralResidue { residue, limit: IMAG_RESIDUE_LIMIT });
    }
    Ok(real)
}

/// Inverse transform keeping only the real part, with no residue check.
///
/// Amplitude-modified spectra are generally not conjugate-symmetric; the
/// real part is exactly the inverse of the Hermitian part of the spectrum.
pub fn ifft2_real_part(z: &Spectrum) -> Tensor {
    ifft2_split(z).0
}

fn ifft2_split(z: &Spectrum) -> (Tensor, f64) {
    let (c, h, w) = (z.c, z.h, z.w);
    let scale = 1.0 / (h * w) as f64;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut buf = vec![Complex64::default(); h * w];
    let mut residue = 0.0f64;
    for ch in 0..c {
        for ry in 0..h {
            let cy = shift_idx(ry, h);
            for rx in 0..w {
                let cx = shift_idx(rx, w);
                let k = z.idx(ch, cy, cx);
                buf[ry * w + rx] = Complex64::new(z.re[k], z.im[k]);
            }
        }
        fft2_plane(&mut buf, h, w, true);
        for (k, v) in buf.iter().enumerate() {
            out.data_mut()[ch * h * w + k] = v.re * scale;
            residue = residue.max((v.im * scale).abs());
        }
    }
    (out, residue)
}
