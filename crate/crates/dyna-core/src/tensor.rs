//! Dense tensors and complex spectra, all 64-bit floats, row-major.
//!
//! Rank conventions used across the crate:
//! `[C, H, W]` for images/masks/prompts, `[N, C, H, W]` for batches,
//! `[C]` for per-channel vectors, `[]` for scalars.

use crate::error::{DynaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { dims: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(DynaError::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                expect
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_all_finite() {
            Ok(())
        } else {
            Err(DynaError::NonFinite(what.to_string()))
        }
    }

    // ── Rank-3 image helpers ([C, H, W]) ─────────────────────────────

    pub fn c3(&self) -> usize {
        self.dims[0]
    }

    pub fn h3(&self) -> usize {
        self.dims[1]
    }

    pub fn w3(&self) -> usize {
        self.dims[2]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.dims[1] + y) * self.dims[2] + x] = v;
    }

    /// `[C, H, W]` -> `[1, C, H, W]`, sharing the same data.
    pub fn unsqueeze0(&self) -> Tensor {
        let mut dims = Vec::with_capacity(self.dims.len() + 1);
        dims.push(1);
        dims.extend_from_slice(&self.dims);
        Tensor { dims, data: self.data.clone() }
    }

    /// `[1, ...]` -> `[...]`, sharing the same data.
    pub fn squeeze0(&self) -> Tensor {
        debug_assert_eq!(self.dims[0], 1, "squeeze0 needs leading dim 1");
        Tensor { dims: self.dims[1..].to_vec(), data: self.data.clone() }
    }

    /// Stack rank-3 tensors of identical shape into a `[N, C, H, W]` batch.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| DynaError::Empty("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims() != first.dims() {
                return Err(DynaError::Shape(format!(
                    "stack: {:?} vs {:?}",
                    t.dims(),
                    first.dims()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let mut dims = Vec::with_capacity(first.dims.len() + 1);
        dims.push(items.len());
        dims.extend_from_slice(&first.dims);
        Ok(Tensor { dims, data })
    }

    /// Slice sample `n` out of a `[N, ...]` batch.
    pub fn unstack(&self, n: usize) -> Tensor {
        let per: usize = self.dims[1..].iter().product();
        Tensor {
            dims: self.dims[1..].to_vec(),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    // ── Elementwise arithmetic ───────────────────────────────────────

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += k * other`
    pub fn add_scaled_assign(&mut self, k: f64, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for a in self.data.iter_mut() {
            *a *= k;
        }
    }

    pub fn ew_binary(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(DynaError::Shape(format!(
                "elementwise op: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Centered complex spectrum of a `[C, H, W]` real image.
///
/// The zero-frequency bin of each channel sits at `(H/2, W/2)`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Spectrum { c, h, w, re: vec![0.0; c * h * w], im: vec![0.0; c * h * w] }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn idx(&self, ch: usize, y: usize, x: usize) -> usize {
        (ch * self.h + y) * self.w + x
    }

    /// `|F|` per bin, as a `[C, H, W]` tensor.
    pub fn amplitude(&self) -> Tensor {
        let data = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r * r + i * i).sqrt())
            .collect();
        Tensor::from_vec(&[self.c, self.h, self.w], data).expect("amplitude shape")
    }

    /// `arg F` per bin, as a `[C, H, W]` tensor.
    pub fn phase(&self) -> Tensor {
        let data = self.re.iter().zip(&self.im).map(|(&r, &i)| i.atan2(r)).collect();
        Tensor::from_vec(&[self.c, self.h, self.w], data).expect("phase shape")
    }

    /// Rebuild a spectrum from amplitude and phase planes.
    pub fn from_polar(amplitude: &Tensor, phase: &Tensor) -> Result<Spectrum> {
        if amplitude.dims() != phase.dims() || amplitude.rank() != 3 {
            return Err(DynaError::Shape(format!(
                "from_polar: amplitude {:?} vs phase {:?}",
                amplitude.dims(),
                phase.dims()
            )));
        }
        let (c, h, w) = (amplitude.c3(), amplitude.h3(), amplitude.w3());
        let mut out = Spectrum::zeros(c, h, w);
        for k in 0..amplitude.len() {
            let a = amplitude.data()[k];
            let p = phase.data()[k];
            out.re[k] = a * p.cos();
            out.im[k] = a * p.sin();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_and_unstack_roundtrip() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let batch = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(batch.dims(), &[2, 1, 2, 2]);
        assert_eq!(batch.unstack(0), a);
        assert_eq!(batch.unstack(1), b);
    }

    #[test]
    fn polar_roundtrip() {
        let amp = Tensor::from_vec(&[1, 1, 2], vec![2.0, 3.0]).unwrap();
        let pha = Tensor::from_vec(&[1, 1, 2], vec![0.5, -1.2]).unwrap();
        let z = Spectrum::from_polar(&amp, &pha).unwrap();
        assert!((z.amplitude().data()[0] - 2.0).abs() < 1e-12);
        assert!((z.phase().data()[1] + 1.2).abs() < 1e-12);
    }
}
