//! FIFO memory bank of (spectral key, trained prompt) pairs, with cosine
//! retrieval and similarity-weighted prompt initialization.

use std::collections::VecDeque;

use crate::error::{DynaError, Result};
use crate::prompt::{LowFreqPrompt, SpectralKey};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct BankEntry {
    key: SpectralKey,
    prompt: LowFreqPrompt,
    seq: u64,
}

/// Bounded first-in-first-out store; pushing past capacity evicts the
/// oldest entry. All stored prompts share one shape.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
    next_seq: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "bank capacity must be at least 1");
        MemoryBank { capacity, entries: VecDeque::new(), next_seq: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append an entry, evicting the oldest one at capacity.
    pub fn push(&mut self, key: SpectralKey, prompt: LowFreqPrompt) -> Result<()> {
        if let Some(front) = self.entries.front() {
            if front.prompt.values.dims() != prompt.values.dims() {
                return Err(DynaError::Shape(format!(
                    "bank push: prompt {:?} vs stored {:?}",
                    prompt.values.dims(),
                    front.prompt.values.dims()
                )));
            }
            if front.key.values.len() != key.values.len() {
                return Err(DynaError::Shape(format!(
                    "bank push: key length {} vs stored {}",
                    key.values.len(),
                    front.key.values.len()
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry { key, prompt, seq: self.next_seq });
        self.next_seq += 1;
        Ok(())
    }

    /// The `min(m, len)` most similar stored prompts, by cosine similarity
    /// against every stored key, descending; ties go to the most recent
    /// insertion.
    pub fn retrieve_support(
        &self,
        key: &SpectralKey,
        m: usize,
    ) -> Result<Vec<(LowFreqPrompt, f64)>> {
        if m < 1 {
            return Err(DynaError::Domain("retrieve_support: m must be >= 1".into()));
        }
        if key.norm() == 0.0 {
            return Err(DynaError::Domain("retrieve_support: zero-norm query key".into()));
        }
        let mut scored: Vec<(f64, u64, &BankEntry)> = self
            .entries
            .iter()
            .map(|e| key.cosine(&e.key).map(|sim| (sim, e.seq, e)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).expect("finite similarity").then(b.1.cmp(&a.1))
        });
        Ok(scored
            .into_iter()
            .take(m)
            .map(|(sim, _, e)| (e.prompt.clone(), sim))
            .collect())
    }

    /// Iterate stored (key, prompt) pairs in insertion order, for persistence.
    pub fn iter(&self) -> impl Iterator<Item = (&SpectralKey, &LowFreqPrompt)> {
        self.entries.iter().map(|e| (&e.key, &e.prompt))
    }
}

/// Softmax weights over support similarities, then the weighted prompt sum.
///
/// Empty support yields the all-ones identity prompt of the given shape.
pub fn init_prompt(
    support: &[(LowFreqPrompt, f64)],
    shape: (usize, usize, usize),
) -> Result<LowFreqPrompt> {
    let (c, hp, wp) = shape;
    if support.is_empty() {
        return Ok(LowFreqPrompt::ones(c, hp, wp));
    }
    for (p, _) in support {
        if p.shape() != shape {
            return Err(DynaError::Shape(format!(
                "init_prompt: support prompt {:?} vs expected {:?}",
                p.values.dims(),
                [c, hp, wp]
            )));
        }
    }
    let weights = softmax(&support.iter().map(|(_, s)| *s).collect::<Vec<_>>());
    let mut acc = Tensor::zeros(&[c, hp, wp]);
    for ((p, _), w) in support.iter().zip(&weights) {
        acc.add_scaled_assign(*w, &p.values);
    }
    Ok(LowFreqPrompt { values: acc })
}

/// Numerically stable softmax (max-shifted; value-identical to the plain form).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
