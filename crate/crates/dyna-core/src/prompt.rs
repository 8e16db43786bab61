//! Low-frequency visual prompts: amplitude/phase decomposition, spectral
//! key extraction, and prompt application.
//!
//! A prompt is a small `[C, h_p, w_p]` multiplier on the centered amplitude
//! spectrum of an image. Applying it pads the multiplier with ones to full
//! size, scales the amplitude, keeps the original phase, and inverts back
//! to image space.

use crate::error::{DynaError, Result};
use crate::fft::{fft2_centered, ifft2_real_part};
use crate::tape::{GradTape, Var};
use crate::tensor::{Spectrum, Tensor};

/// Learnable multiplier on the centered low-frequency amplitude block.
#[derive(Clone, Debug, PartialEq)]
pub struct LowFreqPrompt {
    /// `[C, h_p, w_p]` multiplier values; unconstrained reals.
    pub values: Tensor,
}

impl LowFreqPrompt {
    /// The identity prompt: all ones.
    pub fn ones(c: usize, hp: usize, wp: usize) -> Self {
        LowFreqPrompt { values: Tensor::full(&[c, hp, wp], 1.0) }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.values.c3(), self.values.h3(), self.values.w3())
    }
}

/// Flattened low-frequency amplitude crop used for bank retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralKey {
    pub values: Vec<f64>,
    pub image_id: u64,
}

impl SpectralKey {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SpectralKey) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(DynaError::Shape(format!(
                "cosine: key lengths {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        // identical vectors score exactly 1; the float path would lose an ulp
        if self.values == other.values {
            return Ok(1.0);
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(dot / (self.norm() * other.norm()))
    }
}

/// Prompt/crop side lengths: `max(1, round(beta * dim))`.
pub fn prompt_dims(beta: f64, h: usize, w: usize) -> (usize, usize) {
    let side = |dim: usize| ((beta * dim as f64).round() as usize).clamp(1, dim);
    (side(h), side(w))
}

/// Top-left corner of a centered `size`-long window along an axis of `n`
/// bins, so the window always contains the DC bin at `n/2`.
#[inline]
fn crop_start(n: usize, size: usize) -> usize {
    n / 2 - size / 2
}

/// Centered amplitude and phase planes of an image.
///
/// Recombining them with [`Spectrum::from_polar`] and inverting reproduces
/// the image.
pub fn spectral_decompose(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = fft2_centered(x)?;
    Ok((z.amplitude(), z.phase()))
}

/// Center crop of the amplitude plane, flattened channel-major.
pub fn low_freq_key(amplitude: &Tensor, beta: f64, image_id: u64) -> Result<SpectralKey> {
    if !(0.0 < beta && beta < 1.0) {
        return Err(DynaError::Domain(format!("low_freq_key: beta must be in (0,1), got {beta}")));
    }
    let (c, h, w) = (amplitude.c3(), amplitude.h3(), amplitude.w3());
    let (hp, wp) = prompt_dims(beta, h, w);
    if hp > h || wp > w {
        return Err(DynaError::Shape(format!("low_freq_key: crop {hp}x{wp} exceeds grid {h}x{w}")));
    }
    let (y0, x0) = (crop_start(h, hp), crop_start(w, wp));
    let mut values = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for dy in 0..hp {
            for dx in 0..wp {
                values.push(amplitude.at3(ch, y0 + dy, x0 + dx));
            }
        }
    }
    let key = SpectralKey { values, image_id };
    if key.norm() == 0.0 {
        return Err(DynaError::Domain("low_freq_key: zero-norm key".into()));
    }
    Ok(key)
}

fn check_prompt_fits(p: &LowFreqPrompt, c: usize, h: usize, w: usize) -> Result<()> {
    let (pc, ph, pw) = p.shape();
    if pc != c || ph > h || pw > w {
        return Err(DynaError::Shape(format!(
            "prompt [{pc},{ph},{pw}] does not fit spectrum [{c},{h},{w}]"
        )));
    }
    Ok(())
}

/// Multiply the centered spectrum by the ones-padded prompt.
fn scale_spectrum(z: &Spectrum, prompt: &Tensor) -> Spectrum {
    let (c, h, w) = (z.c, z.h, z.w);
    let (hp, wp) = (prompt.h3(), prompt.w3());
    let (y0, x0) = (crop_start(h, hp), crop_start(w, wp));
    let mut out = z.clone();
    for ch in 0..c {
        for dy in 0..hp {
            for dx in 0..wp {
                let m = prompt.at3(ch, dy, dx);
                let k = out.idx(ch, y0 + dy, x0 + dx);
                out.re[k] *= m;
                out.im[k] *= m;
            }
        }
    }
    out
}

/// Apply a prompt to an image: scale the low-frequency amplitude block,
/// keep the phase, invert. The identity prompt reproduces the image.
pub fn apply_prompt(x: &Tensor, p: &LowFreqPrompt) -> Result<Tensor> {
    p.values.ensure_finite("prompt values")?;
    let z = fft2_centered(x)?;
    apply_prompt_to_spectrum(&z, p)
}

/// Same as [`apply_prompt`] when the spectrum is already available.
pub fn apply_prompt_to_spectrum(z: &Spectrum, p: &LowFreqPrompt) -> Result<Tensor> {
    p.values.ensure_finite("prompt values")?;
    check_prompt_fits(p, z.c, z.h, z.w)?;
    Ok(ifft2_real_part(&scale_spectrum(z, &p.values)))
}

/// Differentiable prompt application against a fixed image spectrum.
///
/// The map from prompt to output image is linear; its adjoint is a forward
/// FFT of the output gradient followed by a pointwise product with the
/// conjugate spectrum and a gather of the prompt window.
pub fn apply_prompt_taped(tape: &mut GradTape, z: &Spectrum, prompt: Var) -> Result<Var> {
    let pv = tape.value(prompt);
    pv.ensure_finite("prompt values")?;
    check_prompt_fits(&LowFreqPrompt { values: pv.clone() }, z.c, z.h, z.w)?;
    let (pc, ph, pw) = (pv.c3(), pv.h3(), pv.w3());
    let out = ifft2_real_part(&scale_spectrum(z, pv));

    let zc = z.clone();
    Ok(tape.record_unary(out, prompt, move |g: &Tensor| {
        // grad wrt the full multiplier M: (1/HW) * Re(Z .* conj(FFT(g)))
        let gz = fft2_centered(g).expect("finite gradient");
        let scale = 1.0 / (zc.h * zc.w) as f64;
        let (y0, x0) = (crop_start(zc.h, ph), crop_start(zc.w, pw));
        let mut gp = Tensor::zeros(&[pc, ph, pw]);
        for ch in 0..pc {
            for dy in 0..ph {
                for dx in 0..pw {
                    let k = zc.idx(ch, y0 + dy, x0 + dx);
                    let v = scale * (zc.re[k] * gz.re[k] + zc.im[k] * gz.im[k]);
                    gp.set3(ch, dy, dx, v);
                }
            }
        }
        gp
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff_grad, max_grad_rel_err, rng, uniform_grid};

    fn positive_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut r = rng(seed);
        uniform_grid(&mut r, c, h, w).map(|v| 0.5 + 0.45 * v)
    }

    #[test]
    fn constant_image_decomposition() {
        let x = Tensor::full(&[1, 8, 8], 0.4);
        let (amp, pha) = spectral_decompose(&x).unwrap();
        for y in 0..8 {
            for xx in 0..8 {
                if (y, xx) == (4, 4) {
                    assert!((amp.at3(0, y, xx) - 64.0 * 0.4).abs() < 1e-9);
                    assert!(pha.at3(0, y, xx).abs() < 1e-12);
                } else {
                    assert!(amp.at3(0, y, xx) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn decompose_recombine_roundtrip() {
        let x = positive_image(51, 1, 12, 10);
        let (amp, pha) = spectral_decompose(&x).unwrap();
        let z = Spectrum::from_polar(&amp, &pha).unwrap();
        let back = crate::fft::ifft2_centered(&z).unwrap();
        assert!(x.max_abs_diff(&back) < 1e-9);
    }

    #[test]
    fn amplitude_is_invariant_under_circular_shift() {
        // shift theorem: only the phase moves
        let x = positive_image(52, 1, 8, 8);
        let mut shifted = Tensor::zeros(&[1, 8, 8]);
        for y in 0..8 {
            for xx in 0..8 {
                shifted.set3(0, (y + 3) % 8, (xx + 5) % 8, x.at3(0, y, xx));
            }
        }
        let (a1, _) = spectral_decompose(&x).unwrap();
        let (a2, _) = spectral_decompose(&shifted).unwrap();
        assert!(a1.max_abs_diff(&a2) < 1e-9);
    }

    #[test]
    fn crop_sizes_follow_rounding_rule() {
        assert_eq!(prompt_dims(0.01, 512, 512), (5, 5));
        assert_eq!(prompt_dims(0.05, 64, 64), (3, 3));
        assert_eq!(prompt_dims(0.01, 64, 64), (1, 1));
    }

    #[test]
    fn key_of_constant_image_has_single_nonzero() {
        let x = Tensor::full(&[1, 64, 64], 0.3);
        let (amp, _) = spectral_decompose(&x).unwrap();
        let key = low_freq_key(&amp, 0.05, 0).unwrap();
        assert_eq!(key.values.len(), 9);
        let nonzero = key.values.iter().filter(|v| v.abs() > 1e-9).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn key_rejects_bad_beta() {
        let amp = Tensor::full(&[1, 8, 8], 1.0);
        assert!(low_freq_key(&amp, 0.0, 0).is_err());
        assert!(low_freq_key(&amp, 1.0, 0).is_err());
    }

    #[test]
    fn identity_prompt_is_a_noop() {
        let x = positive_image(53, 1, 16, 16);
        let p = LowFreqPrompt::ones(1, 3, 3);
        let y = apply_prompt(&x, &p).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn full_spectrum_doubling_doubles_the_image() {
        let x = positive_image(54, 1, 8, 8);
        let p = LowFreqPrompt { values: Tensor::full(&[1, 8, 8], 2.0) };
        let y = apply_prompt(&x, &p).unwrap();
        let twice = x.map(|v| 2.0 * v);
        assert!(twice.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn dc_only_doubling_adds_the_mean() {
        // Doubling just the DC bin adds the image mean everywhere; cross-check
        // against a naive-DFT reconstruction of the modified spectrum.
        let x = positive_image(55, 1, 8, 8);
        let p = LowFreqPrompt { values: Tensor::full(&[1, 1, 1], 2.0) };
        let y = apply_prompt(&x, &p).unwrap();
        let expect = x.map(|v| v + x.mean());
        assert!(expect.max_abs_diff(&y) < 1e-9);

        let slow = crate::testutil::naive_dft2_centered(&x);
        let mut modified = slow.clone();
        let k = modified.idx(0, 4, 4);
        modified.re[k] *= 2.0;
        modified.im[k] *= 2.0;
        let back = crate::fft::ifft2_centered(&modified).unwrap();
        assert!(back.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn prompt_never_alters_phase() {
        let x = positive_image(56, 1, 16, 16);
        let p = LowFreqPrompt {
            values: Tensor::from_vec(&[1, 3, 3], vec![1.4, 0.8, 1.1, 0.9, 2.0, 1.2, 0.7, 1.3, 1.0])
                .unwrap(),
        };
        let y = apply_prompt(&x, &p).unwrap();
        let (ax, px) = spectral_decompose(&x).unwrap();
        let (ay, py) = spectral_decompose(&y).unwrap();
        for k in 0..ax.len() {
            if ax.data()[k] > 1e-12 && ay.data()[k] > 1e-12 {
                let mut d = (px.data()[k] - py.data()[k]).abs();
                d = d.min((d - std::f64::consts::TAU).abs());
                assert!(d < 1e-9, "phase moved at bin {k}: {d}");
            }
        }
    }

    #[test]
    fn rejects_nonfinite_prompt_and_oversized_prompt() {
        let x = positive_image(57, 1, 8, 8);
        let mut bad = LowFreqPrompt::ones(1, 3, 3);
        bad.values.data_mut()[0] = f64::INFINITY;
        assert!(apply_prompt(&x, &bad).is_err());
        let big = LowFreqPrompt::ones(1, 9, 9);
        assert!(apply_prompt(&x, &big).is_err());
    }

    #[test]
    fn taped_apply_matches_plain_and_gradient_matches_finite_differences() {
        let x = positive_image(58, 1, 12, 12);
        let z = fft2_centered(&x).unwrap();
        let p0 = Tensor::from_vec(&[1, 3, 3], vec![1.1, 0.9, 1.2, 0.8, 1.5, 1.0, 1.3, 0.7, 1.05])
            .unwrap();

        let mut tape = GradTape::new();
        let p = tape.leaf(p0.clone());
        let out = apply_prompt_taped(&mut tape, &z, p).unwrap();
        let plain = apply_prompt(&x, &LowFreqPrompt { values: p0.clone() }).unwrap();
        assert!(tape.value(out).max_abs_diff(&plain) < 1e-12);

        let mut r = rng(59);
        let proj = crate::testutil::uniform_grid(&mut r, 1, 12, 12);
        let loss = {
            let pr = tape.mul_const(out, &proj);
            tape.mean_all(pr)
        };
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(p).unwrap().data().to_vec();

        let mut eval = |flat: &[f64]| {
            let prompt = LowFreqPrompt {
                values: Tensor::from_vec(&[1, 3, 3], flat.to_vec()).unwrap(),
            };
            let y = apply_prompt_to_spectrum(&z, &prompt).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>() / y.len() as f64
        };
        let coords: Vec<usize> = (0..9).collect();
        let fd = central_diff_grad(&mut eval, p0.data(), 1e-5, &coords);
        assert!(max_grad_rel_err(&analytic, &fd) < 1e-5);
    }
}
