//! Segmentation metrics.

use crate::error::{DynaError, Result};
use crate::tensor::Tensor;

/// Dice score coefficient between a probability map and a binary mask.
///
/// The prediction is binarized at `threshold`; DSC = 2|A∩B| / (|A| + |B|),
/// with the both-empty case defined as 1.0.
pub fn dice(pred: &Tensor, gt: &Tensor, threshold: f64) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(DynaError::Shape(format!(
            "dice: prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let pa = *p > threshold;
        let gb = *g > 0.5;
        a += usize::from(pa);
        b += usize::from(gb);
        inter += usize::from(pa && gb);
    }
    if a + b == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / (a + b) as f64)
    }
}
