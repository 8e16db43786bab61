//! Reverse-mode gradient tape over whole tensors.
//!
//! Every differentiable operation records its saved inputs and a backward
//! closure at forward time. `backward` replays the records once each, in
//! reverse creation order — a valid reverse topological order because an
//! op's inputs always precede it on the tape. A tape is single-owner
//! state; values are immutable once recorded.

use crate::error::{DynaError, Result};
use crate::nn;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut [Option<Tensor>])>;

pub struct GradTape {
    values: Vec<Tensor>,
    records: Vec<Option<BackwardFn>>,
}

/// Per-variable gradients produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accum(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// y[n,c,...] = f(x[n,c,...], per[c]) over a `[N, C, H, W]` tensor.
fn bc_map(x: &Tensor, per: &[f64], f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(x.rank(), 4);
    debug_assert_eq!(x.dims()[1], per.len());
    let (n, c, hw) = (x.dims()[0], x.dims()[1], x.dims()[2] * x.dims()[3]);
    let mut out = Tensor::zeros(x.dims());
    for bn in 0..n {
        for ch in 0..c {
            let base = (bn * c + ch) * hw;
            let p = per[ch];
            for k in base..base + hw {
                out.data_mut()[k] = f(x.data()[k], p);
            }
        }
    }
    out
}

/// per-channel Σ f(a[n,c,...], b[n,c,...]) over batch and spatial axes.
fn bc_reduce(a: &Tensor, b: Option<&Tensor>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (n, c, hw) = (a.dims()[0], a.dims()[1], a.dims()[2] * a.dims()[3]);
    let mut out = vec![0.0; c];
    for bn in 0..n {
        for ch in 0..c {
            let base = (bn * c + ch) * hw;
            let acc: f64 = match b {
                Some(bt) => (base..base + hw).map(|k| f(a.data()[k], bt.data()[k])).sum(),
                None => (base..base + hw).map(|k| f(a.data()[k], 0.0)).sum(),
            };
            out[ch] += acc;
        }
    }
    out
}

/// Batch-mode batch normalization outputs: the normalized tensor plus the
/// batch statistics it normalized with (all differentiable).
pub struct BatchNormOut {
    pub y: Var,
    pub mu: Var,
    pub sigma: Var,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { values: Vec::new(), records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register an input or parameter; leaves have no backward record.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.records.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub(crate) fn record(&mut self, value: Tensor, backward: BackwardFn) -> Var {
        self.values.push(value);
        self.records.push(Some(backward));
        Var(self.values.len() - 1)
    }

    /// Record a custom unary op with an explicit gradient map from the
    /// output gradient to the input gradient.
    pub(crate) fn record_unary(
        &mut self,
        value: Tensor,
        input: Var,
        backward: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var {
        let ii = input.0;
        self.record(value, Box::new(move |g, grads| accum(grads, ii, backward(g))))
    }

    /// Reverse sweep from a scalar root. Each recorded op is visited
    /// exactly once, in reverse recording order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.values[root.0].rank() != 0 {
            return Err(DynaError::Domain(format!(
                "backward root must be a scalar, got {:?}",
                self.values[root.0].dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.values.len());
        grads.resize_with(self.values.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(f) = &self.records[i] {
                let g = grads[i].take().expect("gradient present");
                f(&g, &mut grads);
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    // ── Elementwise ops ─────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].ew_binary(&self.values[b.0], |x, y| x + y).expect("add shapes");
        let (ai, bi) = (a.0, b.0);
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].ew_binary(&self.values[b.0], |x, y| x - y).expect("sub shapes");
        let (ai, bi) = (a.0, b.0);
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, ai, g.clone());
                accum(grads, bi, g.map(|x| -x));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].clone();
        let bv = self.values[b.0].clone();
        let v = av.ew_binary(&bv, |x, y| x * y).expect("mul shapes");
        let (ai, bi) = (a.0, b.0);
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, ai, g.ew_binary(&bv, |gv, y| gv * y).expect("mul bwd"));
                accum(grads, bi, g.ew_binary(&av, |gv, x| gv * x).expect("mul bwd"));
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.values[a.0].map(|x| k * x);
        let ai = a.0;
        self.record(v, Box::new(move |g, grads| accum(grads, ai, g.map(|x| k * x))))
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.values[a.0].ew_binary(c, |x, y| x * y).expect("mul_const shapes");
        let cc = c.clone();
        let ai = a.0;
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, ai, g.ew_binary(&cc, |gv, y| gv * y).expect("mul_const bwd"))
            }),
        )
    }

    /// `c - a` with a constant minuend.
    pub fn const_sub(&mut self, c: &Tensor, a: Var) -> Var {
        let v = c.ew_binary(&self.values[a.0], |x, y| x - y).expect("const_sub shapes");
        let ai = a.0;
        self.record(v, Box::new(move |g, grads| accum(grads, ai, g.map(|x| -x))))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let xv = self.values[a.0].clone();
        let v = xv.map(f64::abs);
        let ai = a.0;
        self.record(
            v,
            Box::new(move |g, grads| {
                let ga = g
                    .ew_binary(&xv, |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .expect("abs bwd");
                accum(grads, ai, ga);
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let xv = self.values[a.0].clone();
        let v = xv.map(|x| x.max(0.0));
        let ai = a.0;
        self.record(
            v,
            Box::new(move |g, grads| {
                let ga = g.ew_binary(&xv, |gv, x| if x > 0.0 { gv } else { 0.0 }).expect("relu bwd");
                accum(grads, ai, ga);
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.values[a.0].map(|x| 1.0 / (1.0 + (-x).exp()));
        let ysave = y.clone();
        let ai = a.0;
        self.record(
            y,
            Box::new(move |g, grads| {
                let ga = g.ew_binary(&ysave, |gv, yv| gv * yv * (1.0 - yv)).expect("sigmoid bwd");
                accum(grads, ai, ga);
            }),
        )
    }

    /// `sqrt(x + eps)`, the batch-norm standard-deviation map.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let y = self.values[a.0].map(|x| (x + eps).sqrt());
        let ysave = y.clone();
        let ai = a.0;
        self.record(
            y,
            Box::new(move |g, grads| {
                let ga = g.ew_binary(&ysave, |gv, yv| gv * 0.5 / yv).expect("sqrt bwd");
                accum(grads, ai, ga);
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Var {
        let old_dims = self.values[a.0].dims().to_vec();
        let v = Tensor::from_vec(dims, self.values[a.0].data().to_vec()).expect("reshape size");
        let ai = a.0;
        self.record(
            v,
            Box::new(move |g, grads| {
                let gr = Tensor::from_vec(&old_dims, g.data().to_vec()).expect("reshape bwd");
                accum(grads, ai, gr);
            }),
        )
    }

    // ── Channel-broadcast ops over [N, C, H, W] ─────────────────────

    /// Per-channel mean over batch and spatial axes: `[N,C,H,W] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        debug_assert_eq!(xv.rank(), 4);
        let dims = xv.dims().to_vec();
        let count = (dims[0] * dims[2] * dims[3]) as f64;
        let sums = bc_reduce(xv, None, |a, _| a);
        let v = Tensor::from_vec(&[dims[1]], sums.iter().map(|s| s / count).collect())
            .expect("channel_mean");
        let xi = x.0;
        self.record(
            v,
            Box::new(move |g, grads| {
                let mut gx = Tensor::zeros(&dims);
                let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
                for bn in 0..n {
                    for ch in 0..c {
                        let gv = g.data()[ch] / count;
                        let base = (bn * c + ch) * hw;
                        gx.data_mut()[base..base + hw].fill(gv);
                    }
                }
                accum(grads, xi, gx);
            }),
        )
    }

    /// `x - m[c]` with a differentiable per-channel vector.
    pub fn sub_bc(&mut self, x: Var, m: Var) -> Var {
        let v = bc_map(&self.values[x.0], self.values[m.0].data(), |a, b| a - b);
        let (xi, mi) = (x.0, m.0);
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, xi, g.clone());
                let gm = bc_reduce(g, None, |a, _| a).iter().map(|s| -s).collect();
                accum(grads, mi, Tensor::from_vec(&[g.dims()[1]], gm).expect("sub_bc bwd"));
            }),
        )
    }

    /// `x - m[c]` with a constant per-channel vector.
    pub fn sub_bc_const(&mut self, x: Var, m: &[f64]) -> Var {
        let v = bc_map(&self.values[x.0], m, |a, b| a - b);
        let xi = x.0;
        self.record(v, Box::new(move |g, grads| accum(grads, xi, g.clone())))
    }

    /// `x / s[c]` with a differentiable per-channel vector.
    pub fn div_bc(&mut self, x: Var, s: Var) -> Var {
        let xv = self.values[x.0].clone();
        let sv = self.values[s.0].data().to_vec();
        let v = bc_map(&xv, &sv, |a, b| a / b);
        let (xi, si) = (x.0, s.0);
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, xi, bc_map(g, &sv, |gv, b| gv / b));
                let mut gs = bc_reduce(g, Some(&xv), |gv, x| gv * x);
                for (gsv, s0) in gs.iter_mut().zip(&sv) {
                    *gsv = -*gsv / (s0 * s0);
                }
                accum(grads, si, Tensor::from_vec(&[g.dims()[1]], gs).expect("div_bc bwd"));
            }),
        )
    }

    /// `x / s[c]` with a constant per-channel vector.
    pub fn div_bc_const(&mut self, x: Var, s: &[f64]) -> Var {
        let v = bc_map(&self.values[x.0], s, |a, b| a / b);
        let sv = s.to_vec();
        let xi = x.0;
        self.record(
            v,
            Box::new(move |g, grads| accum(grads, xi, bc_map(g, &sv, |gv, b| gv / b))),
        )
    }

    /// `gamma[c] * x + beta[c]` with differentiable scale and shift.
    pub fn affine_bc(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.values[x.0].clone();
        let gv = self.values[gamma.0].data().to_vec();
        let bv = self.values[beta.0].data().to_vec();
        let mut v = bc_map(&xv, &gv, |a, b| a * b);
        let (n, c, hw) = (v.dims()[0], v.dims()[1], v.dims()[2] * v.dims()[3]);
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * hw;
                for k in base..base + hw {
                    v.data_mut()[k] += bv[ch];
                }
            }
        }
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        self.record(
            v,
            Box::new(move |g, grads| {
                accum(grads, xi, bc_map(g, &gv, |gr, ga| gr * ga));
                let ggamma = bc_reduce(g, Some(&xv), |gr, x| gr * x);
                accum(grads, gi, Tensor::from_vec(&[g.dims()[1]], ggamma).expect("affine bwd"));
                let gbeta = bc_reduce(g, None, |gr, _| gr);
                accum(grads, bi, Tensor::from_vec(&[g.dims()[1]], gbeta).expect("affine bwd"));
            }),
        )
    }

    // ── Layers ──────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xv = self.values[x.0].clone();
        let wv = self.values[w.0].clone();
        let v = nn::conv2d_fwd(&xv, &wv, &self.values[b.0], stride)?;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.record(
            v,
            Box::new(move |g, grads| {
                let (gx, gw, gb) = nn::conv2d_bwd(&xv, &wv, stride, g);
                accum(grads, xi, gx);
                accum(grads, wi, gw);
                accum(grads, bi, gb);
            }),
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = nn::upsample2_fwd(&self.values[x.0]);
        let xi = x.0;
        self.record(v, Box::new(move |g, grads| accum(grads, xi, nn::upsample2_bwd(g))))
    }

    // ── Reductions and losses ───────────────────────────────────────

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let dims = xv.dims().to_vec();
        let len = xv.len() as f64;
        let v = Tensor::scalar(xv.data().iter().sum::<f64>() / len);
        let xi = x.0;
        self.record(
            v,
            Box::new(move |g, grads| {
                let gv = g.scalar_value() / len;
                accum(grads, xi, Tensor::full(&dims, gv));
            }),
        )
    }

    /// Binary cross-entropy against a constant probability target, averaged
    /// over all entries. Predictions are clamped to `[1e-7, 1 - 1e-7]`
    /// before the logs; clamped entries get zero gradient.
    pub fn bce_mean(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let pv = self.values[p.0].clone();
        if pv.dims() != target.dims() {
            return Err(DynaError::Shape(format!(
                "bce_mean: prediction {:?} vs target {:?}",
                pv.dims(),
                target.dims()
            )));
        }
        let bad = |v: f64| !(-1e-12..=1.0 + 1e-12).contains(&v);
        if pv.data().iter().any(|&v| bad(v)) || target.data().iter().any(|&v| bad(v)) {
            return Err(DynaError::Domain("bce_mean: probabilities must lie in [0, 1]".into()));
        }
        let (lo, hi) = (1e-7, 1.0 - 1e-7);
        let len = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&praw, &t)| {
                let pc = praw.clamp(lo, hi);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / len;
        let tv = target.clone();
        let pi = p.0;
        Ok(self.record(
            Tensor::scalar(loss),
            Box::new(move |g, grads| {
                let gs = g.scalar_value() / len;
                let gp = pv
                    .ew_binary(&tv, |praw, t| {
                        if praw < lo || praw > hi {
                            0.0
                        } else {
                            gs * (praw - t) / (praw * (1.0 - praw))
                        }
                    })
                    .expect("bce bwd");
                accum(grads, pi, gp);
            }),
        ))
    }

    // ── Batch normalization composites ──────────────────────────────

    /// Batch-mode BN: normalizes with this batch's statistics (biased
    /// variance over batch and spatial positions, `sigma = sqrt(var + eps)`)
    /// and differentiates through them.
    pub fn batch_norm_batch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> BatchNormOut {
        let mu = self.channel_mean(x);
        let xc = self.sub_bc(x, mu);
        let sq = self.mul(xc, xc);
        let var = self.channel_mean(sq);
        let sigma = self.sqrt_eps(var, eps);
        let xhat = self.div_bc(xc, sigma);
        let y = self.affine_bc(xhat, gamma, beta);
        BatchNormOut { y, mu, sigma }
    }

    /// BN with externally supplied statistics, which are constants w.r.t.
    /// the tape: `y = gamma * (x - mu) / sigma + beta`.
    pub fn batch_norm_injected(
        &mut self,
        x: Var,
        mu: &[f64],
        sigma: &[f64],
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        let c = self.values[x.0].dims()[1];
        if mu.len() != c || sigma.len() != c {
            return Err(DynaError::Shape(format!(
                "batch_norm: {c} channels vs mu/sigma lengths {}/{}",
                mu.len(),
                sigma.len()
            )));
        }
        if self.values[gamma.0].len() != c || self.values[beta.0].len() != c {
            return Err(DynaError::Shape(format!(
                "batch_norm: {c} channels vs gamma/beta lengths {}/{}",
                self.values[gamma.0].len(),
                self.values[beta.0].len()
            )));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(DynaError::Domain("batch_norm: sigma must be > 0".into()));
        }
        let xc = self.sub_bc_const(x, mu);
        let xhat = self.div_bc_const(xc, sigma);
        Ok(self.affine_bc(xhat, gamma, beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff_grad, max_grad_rel_err, rng, uniform_batch};
    use rand::Rng;

    /// FD-check d(loss)/d(x) for a loss built from a single leaf.
    fn fd_check(
        build: impl Fn(&mut GradTape, Var) -> Var,
        x0: &Tensor,
        tol: f64,
    ) {
        let mut tape = GradTape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).expect("input gradient").data().to_vec();

        let dims = x0.dims().to_vec();
        let mut eval = |flat: &[f64]| {
            let mut t = GradTape::new();
            let xv = t.leaf(Tensor::from_vec(&dims, flat.to_vec()).unwrap());
            let l = build(&mut t, xv);
            t.value(l).scalar_value()
        };
        let coords: Vec<usize> = (0..x0.len()).collect();
        let fd = central_diff_grad(&mut eval, x0.data(), 1e-5, &coords);
        let err = max_grad_rel_err(&analytic, &fd);
        assert!(err < tol, "max relative grad error {err}");
    }

    /// Loss with well-scaled gradients: random projection then mean.
    fn projected_mean(tape: &mut GradTape, y: Var, proj: &Tensor) -> Var {
        let p = tape.mul_const(y, proj);
        tape.mean_all(p)
    }

    #[test]
    fn backward_visits_each_record_once_and_accumulates_fan_out() {
        // loss = mean(x*x + x*x) -> d/dx = 4x/len
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(x, x);
        let two = tape.add(sq, sq);
        let loss = tape.mean_all(two);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-12);
        assert!((g.data()[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut r = rng(31);
        let x0 = uniform_batch(&mut r, 1, 2, 3, 3);
        let proj = uniform_batch(&mut r, 1, 2, 3, 3);
        fd_check(
            |t, x| {
                let s = t.sigmoid(x);
                let a = t.abs(s);
                projected_mean(t, a, &proj)
            },
            &x0,
            1e-6,
        );
        fd_check(
            |t, x| {
                let s = t.scale(x, 1.7);
                let m = t.mul(s, x);
                projected_mean(t, m, &proj)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn relu_grad_matches_finite_differences_off_kink() {
        let mut r = rng(32);
        // keep values away from 0 so the FD step does not cross the kink
        let data: Vec<f64> =
            (0..18).map(|_| {
                let v: f64 = r.random_range(0.1..1.0);
                if r.random_bool(0.5) { v } else { -v }
            }).collect();
        let x0 = Tensor::from_vec(&[1, 2, 3, 3], data).unwrap();
        let proj = uniform_batch(&mut r, 1, 2, 3, 3);
        fd_check(
            |t, x| {
                let y = t.relu(x);
                projected_mean(t, y, &proj)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        // spec example: random 1x6x6 input, 3x3 kernel
        let mut r = rng(33);
        let x0 = uniform_batch(&mut r, 1, 1, 6, 6);
        let w0 = uniform_batch(&mut r, 2, 1, 3, 3);
        let b0 = Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap();
        let proj = uniform_batch(&mut r, 1, 2, 6, 6);

        // w.r.t. input
        fd_check(
            |t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                let y = t.conv2d(x, w, b, 1).unwrap();
                projected_mean(t, y, &proj)
            },
            &x0,
            1e-5,
        );

        // w.r.t. kernel and bias
        let mut tape = GradTape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let loss = projected_mean(&mut tape, y, &proj);
        let grads = tape.backward(loss).unwrap();

        let mut eval_w = |flat: &[f64]| {
            let mut t = GradTape::new();
            let xv = t.leaf(x0.clone());
            let wv = t.leaf(Tensor::from_vec(&[2, 1, 3, 3], flat.to_vec()).unwrap());
            let bv = t.leaf(b0.clone());
            let y = t.conv2d(xv, wv, bv, 1).unwrap();
            let l = projected_mean(&mut t, y, &proj);
            t.value(l).scalar_value()
        };
        let coords: Vec<usize> = (0..w0.len()).collect();
        let fd_w = central_diff_grad(&mut eval_w, w0.data(), 1e-5, &coords);
        assert!(max_grad_rel_err(grads.get(w).unwrap().data(), &fd_w) < 1e-5);

        let mut eval_b = |flat: &[f64]| {
            let mut t = GradTape::new();
            let xv = t.leaf(x0.clone());
            let wv = t.leaf(w0.clone());
            let bv = t.leaf(Tensor::from_vec(&[2], flat.to_vec()).unwrap());
            let y = t.conv2d(xv, wv, bv, 1).unwrap();
            let l = projected_mean(&mut t, y, &proj);
            t.value(l).scalar_value()
        };
        let fd_b = central_diff_grad(&mut eval_b, b0.data(), 1e-5, &[0, 1]);
        assert!(max_grad_rel_err(grads.get(b).unwrap().data(), &fd_b) < 1e-5);
    }

    #[test]
    fn strided_conv_and_upsample_grads_match_finite_differences() {
        let mut r = rng(34);
        let x0 = uniform_batch(&mut r, 1, 2, 4, 4);
        let w0 = uniform_batch(&mut r, 3, 2, 3, 3);
        let b0 = Tensor::zeros(&[3]);
        let proj = uniform_batch(&mut r, 1, 3, 4, 4);
        fd_check(
            |t, x| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                let y = t.conv2d(x, w, b, 2).unwrap();
                let up = t.upsample2(y);
                projected_mean(t, up, &proj)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn batch_norm_batch_grad_matches_finite_differences() {
        let mut r = rng(35);
        let x0 = uniform_batch(&mut r, 2, 3, 4, 4);
        let proj = uniform_batch(&mut r, 2, 3, 4, 4);
        let gamma0 = Tensor::from_vec(&[3], vec![1.2, 0.8, -0.5]).unwrap();
        let beta0 = Tensor::from_vec(&[3], vec![0.1, -0.3, 0.0]).unwrap();
        fd_check(
            |t, x| {
                let gamma = t.leaf(gamma0.clone());
                let beta = t.leaf(beta0.clone());
                let out = t.batch_norm_batch(x, gamma, beta, 1e-5);
                projected_mean(t, out.y, &proj)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn batch_norm_identity_and_affine_values() {
        // mu=0 sigma=1 gamma=1 beta=0 -> y = x
        let mut tape = GradTape::new();
        let x0 = Tensor::from_vec(&[1, 1, 1, 2], vec![0.7, -0.3]).unwrap();
        let x = tape.leaf(x0.clone());
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.batch_norm_injected(x, &[0.0], &[1.0], gamma, beta).unwrap();
        assert_eq!(tape.value(y), &x0);

        // x=5, mu=2, sigma=3, gamma=2, beta=1 -> 3
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 1], 5.0));
        let gamma = tape.leaf(Tensor::full(&[1], 2.0));
        let beta = tape.leaf(Tensor::full(&[1], 1.0));
        let y = tape.batch_norm_injected(x, &[2.0], &[3.0], gamma, beta).unwrap();
        assert!((tape.value(y).data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_constant_input_yields_beta() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::full(&[2, 2, 4, 4], 3.3));
        let gamma = tape.leaf(Tensor::full(&[2], 1.5));
        let beta = tape.leaf(Tensor::from_vec(&[2], vec![0.25, -1.0]).unwrap());
        let out = tape.batch_norm_batch(x, gamma, beta, 1e-5);
        let y = tape.value(out.y);
        for c in 0..2 {
            let expect = [0.25, -1.0][c];
            for bn in 0..2 {
                for k in 0..16 {
                    let v = y.data()[(bn * 2 + c) * 16 + k];
                    assert!((v - expect).abs() < 1e-12, "channel {c}: {v}");
                }
            }
        }
    }

    #[test]
    fn batch_norm_rejects_nonpositive_sigma() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.batch_norm_injected(x, &[0.0], &[0.0], gamma, beta),
            Err(DynaError::Domain(_))
        ));
    }

    #[test]
    fn bce_known_value_and_grad() {
        // p = t = 0.5 everywhere -> ln 2 per pixel
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let t = Tensor::full(&[1, 1, 2, 2], 0.5);
        let loss = tape.bce_mean(p, &t).unwrap();
        assert!((tape.value(loss).scalar_value() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut r = rng(36);
        let p0data: Vec<f64> = (0..8).map(|_| r.random_range(0.05..0.95)).collect();
        let p0 = Tensor::from_vec(&[1, 2, 2, 2], p0data).unwrap();
        let tdata: Vec<f64> = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
        let target = Tensor::from_vec(&[1, 2, 2, 2], tdata).unwrap();
        fd_check(|tape, p| tape.bce_mean(p, &target).unwrap(), &p0, 1e-6);
    }

    #[test]
    fn bce_rejects_out_of_range() {
        let mut tape = GradTape::new();
        let p = tape.leaf(Tensor::full(&[1, 1, 1, 1], 1.5));
        let t = Tensor::full(&[1, 1, 1, 1], 0.5);
        assert!(matches!(tape.bce_mean(p, &t), Err(DynaError::Domain(_))));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
