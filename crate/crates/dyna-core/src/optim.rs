//! The two optimizers the pipeline uses: Adam for prompts and source
//! training, plain SGD for the night student.

use crate::error::{DynaError, Result};

/// Per-parameter optimizer state aligned to a flat parameter vector.
#[derive(Clone, Debug)]
pub enum OptimState {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<f64>,
        v: Vec<f64>,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimState {
    /// Adam with the usual defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn adam(lr: f64, n_params: usize) -> Self {
        OptimState::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimState::Sgd { lr }
    }

    /// One update in place. Adam uses bias correction; SGD is plain
    /// `theta -= lr * g` (no momentum, no weight decay).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(DynaError::Shape(format!(
                "optimizer step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        match self {
            OptimState::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *lr * g;
                }
            }
            OptimState::Adam { lr, beta1, beta2, eps, step, m, v } => {
                if m.len() != params.len() {
                    return Err(DynaError::Shape(format!(
                        "optimizer step: state sized for {} params, got {}",
                        m.len(),
                        params.len()
                    )));
                }
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}
