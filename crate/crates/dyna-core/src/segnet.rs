//! The fixed tiny encoder-decoder segmentation network.
//!
//! Architecture (exactly 5 BN layers):
//!   encoder: 3 x (conv3x3 - BN - ReLU), widths 8 -> 16 -> 32, stride 2 on
//!   blocks 2-3; decoder: 2 x (nearest-upsample x2 - conv3x3 - BN - ReLU)
//!   back to width 8; head: conv1x1 + sigmoid.
//!
//! Model states carry both the parameters and the per-BN running
//! statistics; `weights_axpy` treats the whole state as one flat vector,
//! which is what the night-phase model averaging operates on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DynaError, Result};
use crate::nn::channel_stats;
use crate::optim::OptimState;
use crate::seeds::mix;
use crate::synth::LabeledSample;
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::Tensor;

pub const BN_LAYERS: usize = 5;
pub const ENCODER_BN_LAYERS: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.1;

const WIDTHS: [usize; 5] = [8, 16, 32, 16, 8];
const STRIDES: [usize; 5] = [1, 2, 2, 1, 1];
const UPSAMPLE_BEFORE: [bool; 5] = [false, false, false, true, true];
const BLOCK_NAMES: [&str; 5] = ["enc1", "enc2", "enc3", "dec1", "dec2"];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mu: Tensor,
    pub running_sigma: Tensor,
}

/// Which statistics each BN layer normalizes with.
#[derive(Clone, Debug)]
pub enum StatsMode {
    /// The model's running (source) statistics.
    Running,
    /// This batch's own statistics, differentiated through.
    Batch,
    /// Externally supplied per-layer (mu, sigma), constants w.r.t. the tape.
    Injected(Vec<(Vec<f64>, Vec<f64>)>),
}

/// Batch statistics observed at one BN layer, next to the running ones.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceLayer {
    pub mu_t: Vec<f64>,
    pub sigma_t: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub sigma_s: Vec<f64>,
}

/// Per-BN-layer statistics of one forward pass, in layer order.
///
/// Always carries the presented batch's statistics, regardless of which
/// statistics were used for normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<TraceLayer>,
}

/// Handles into the tape for one recorded forward pass.
pub struct TapedForward {
    pub probs: Var,
    pub trace: ForwardTrace,
    /// (mu, sigma) tape handles per BN layer; present in Batch mode only.
    pub bn_stat_vars: Vec<Option<(Var, Var)>>,
    /// Parameter leaves in `flat_trainable` order.
    pub param_vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModelState {
    arch: String,
    in_ch: usize,
    out_ch: usize,
    pub convs: Vec<ConvParams>,
    pub bns: Vec<BnParams>,
}

fn arch_tag(in_ch: usize, out_ch: usize) -> String {
    format!("tiny5bn-v1/in{in_ch}/out{out_ch}")
}

pub fn parse_arch_tag(tag: &str) -> Result<(usize, usize)> {
    let rest = tag
        .strip_prefix("tiny5bn-v1/in")
        .ok_or_else(|| DynaError::Format(format!("unknown architecture tag {tag:?}")))?;
    let (inp, outp) = rest
        .split_once("/out")
        .ok_or_else(|| DynaError::Format(format!("unknown architecture tag {tag:?}")))?;
    let in_ch = inp.parse().map_err(|_| DynaError::Format(format!("bad arch tag {tag:?}")))?;
    let out_ch = outp.parse().map_err(|_| DynaError::Format(format!("bad arch tag {tag:?}")))?;
    Ok((in_ch, out_ch))
}

impl SegModelState {
    /// Fresh model with He-initialized kernels, unit BN scale, and
    /// (0, 1) running statistics. Deterministic in `seed`.
    pub fn new(in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1217));
        let mut convs = Vec::with_capacity(6);
        let mut bns = Vec::with_capacity(BN_LAYERS);
        let mut prev = in_ch;
        for (i, &width) in WIDTHS.iter().enumerate() {
            convs.push(Self::he_conv(&mut rng, width, prev, 3));
            bns.push(BnParams {
                gamma: Tensor::full(&[width], 1.0),
                beta: Tensor::zeros(&[width]),
                running_mu: Tensor::zeros(&[width]),
                running_sigma: Tensor::full(&[width], 1.0),
            });
            prev = width;
            let _ = i;
        }
        convs.push(Self::he_conv(&mut rng, out_ch, prev, 1));
        SegModelState { arch: arch_tag(in_ch, out_ch), in_ch, out_ch, convs, bns }
    }

    fn he_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvParams {
        let std = (2.0 / (inp * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..out * inp * k * k).map(|_| dist.sample(rng)).collect();
        ConvParams {
            w: Tensor::from_vec(&[out, inp, k, k], data).expect("kernel shape"),
            b: Tensor::zeros(&[out]),
        }
    }

    /// All-zero skeleton used by the checkpoint loader before filling.
    pub(crate) fn skeleton(in_ch: usize, out_ch: usize) -> Self {
        let mut m = Self::new(in_ch, out_ch, 0);
        for c in &mut m.convs {
            c.w = Tensor::zeros(c.w.dims());
        }
        m
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    // ── Named/flat views ────────────────────────────────────────────

    /// Stable (name, tensor) listing covering parameters and running stats.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, name) in BLOCK_NAMES.iter().enumerate() {
            out.push((format!("{name}.conv.w"), &self.convs[i].w));
            out.push((format!("{name}.conv.b"), &self.convs[i].b));
            out.push((format!("{name}.bn.gamma"), &self.bns[i].gamma));
            out.push((format!("{name}.bn.beta"), &self.bns[i].beta));
            out.push((format!("{name}.bn.running_mu"), &self.bns[i].running_mu));
            out.push((format!("{name}.bn.running_sigma"), &self.bns[i].running_sigma));
        }
        out.push(("head.conv.w".into(), &self.convs[5].w));
        out.push(("head.conv.b".into(), &self.convs[5].b));
        out
    }

    pub(crate) fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let (block, field) = name.split_once('.')?;
        let head = block == "head";
        let idx = BLOCK_NAMES.iter().position(|b| *b == block);
        match (head, idx, field) {
            (true, _, "conv.w") => Some(&mut self.convs[5].w),
            (true, _, "conv.b") => Some(&mut self.convs[5].b),
            (false, Some(i), "conv.w") => Some(&mut self.convs[i].w),
            (false, Some(i), "conv.b") => Some(&mut self.convs[i].b),
            (false, Some(i), "bn.gamma") => Some(&mut self.bns[i].gamma),
            (false, Some(i), "bn.beta") => Some(&mut self.bns[i].beta),
            (false, Some(i), "bn.running_mu") => Some(&mut self.bns[i].running_mu),
            (false, Some(i), "bn.running_sigma") => Some(&mut self.bns[i].running_sigma),
            _ => None,
        }
    }

    /// Whole state (parameters + running stats) as one flat vector.
    pub fn flat_all(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat_all(&mut self, flat: &[f64]) -> Result<()> {
        let names: Vec<String> = self.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        let lens: Vec<usize> = self.named_tensors().iter().map(|(_, t)| t.len()).collect();
        if flat.len() != lens.iter().sum::<usize>() {
            return Err(DynaError::Shape(format!(
                "flat vector length {} does not match model size {}",
                flat.len(),
                lens.iter().sum::<usize>()
            )));
        }
        let mut off = 0;
        for (name, len) in names.iter().zip(lens) {
            let t = self.tensor_by_name_mut(name).expect("known name");
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Trainable parameters only (no running statistics), flat.
    pub fn flat_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..BN_LAYERS {
            out.extend_from_slice(self.convs[i].w.data());
            out.extend_from_slice(self.convs[i].b.data());
            out.extend_from_slice(self.bns[i].gamma.data());
            out.extend_from_slice(self.bns[i].beta.data());
        }
        out.extend_from_slice(self.convs[5].w.data());
        out.extend_from_slice(self.convs[5].b.data());
        out
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut write = |t: &mut Tensor| {
            let len = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        };
        for i in 0..BN_LAYERS {
            // split borrows: convs and bns are distinct fields
            write(&mut self.convs[i].w);
            write(&mut self.convs[i].b);
            write(&mut self.bns[i].gamma);
            write(&mut self.bns[i].beta);
        }
        write(&mut self.convs[5].w);
        write(&mut self.convs[5].b);
        debug_assert_eq!(off, flat.len());
    }

    /// `a*W1 + b*W2` over every parameter and every running statistic.
    pub fn weights_axpy(a: f64, w1: &SegModelState, b: f64, w2: &SegModelState) -> Result<SegModelState> {
        if w1.arch != w2.arch {
            return Err(DynaError::Shape(format!(
                "weights_axpy: architecture mismatch {:?} vs {:?}",
                w1.arch, w2.arch
            )));
        }
        let mut out = w1.clone();
        let flat: Vec<f64> = w1
            .flat_all()
            .iter()
            .zip(w2.flat_all())
            .map(|(x, y)| a * x + b * y)
            .collect();
        out.set_flat_all(&flat)?;
        Ok(out)
    }

    // ── Forward ─────────────────────────────────────────────────────

    /// Record a forward pass of `input` (a `[N, C, H, W]` Var already on
    /// `tape`) and return the probability output plus per-layer statistics.
    pub fn forward(&self, tape: &mut GradTape, input: Var, mode: &StatsMode) -> Result<TapedForward> {
        let dims = tape.value(input).dims().to_vec();
        if dims.len() != 4 || dims[1] != self.in_ch {
            return Err(DynaError::Shape(format!(
                "forward expects [N,{},H,W], got {:?}",
                self.in_ch, dims
            )));
        }
        let (h, w) = (dims[2], dims[3]);
        if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
            return Err(DynaError::Shape(format!(
                "forward: spatial size {h}x{w} must be >= 16x16 and divisible by 4"
            )));
        }
        if let StatsMode::Injected(stats) = mode {
            if stats.len() != BN_LAYERS {
                return Err(DynaError::Shape(format!(
                    "Injected mode needs {BN_LAYERS} (mu, sigma) pairs, got {}",
                    stats.len()
                )));
            }
        }

        let mut param_vars = Vec::new();
        let conv_vars: Vec<(Var, Var)> = {
            let mut v = Vec::new();
            for i in 0..BN_LAYERS {
                let w = tape.leaf(self.convs[i].w.clone());
                let b = tape.leaf(self.convs[i].b.clone());
                let gamma = tape.leaf(self.bns[i].gamma.clone());
                let beta = tape.leaf(self.bns[i].beta.clone());
                param_vars.extend([w, b, gamma, beta]);
                v.push((w, b));
            }
            let w = tape.leaf(self.convs[5].w.clone());
            let b = tape.leaf(self.convs[5].b.clone());
            param_vars.extend([w, b]);
            v.push((w, b));
            v
        };

        let mut layers = Vec::with_capacity(BN_LAYERS);
        let mut bn_stat_vars = Vec::with_capacity(BN_LAYERS);
        let mut x = input;
        for i in 0..BN_LAYERS {
            if UPSAMPLE_BEFORE[i] {
                x = tape.upsample2(x);
            }
            let (wv, bv) = conv_vars[i];
            x = tape.conv2d(x, wv, bv, STRIDES[i])?;
            let gamma = param_vars[i * 4 + 2];
            let beta = param_vars[i * 4 + 3];
            let (mu_t, sigma_t);
            match mode {
                StatsMode::Batch => {
                    let out = tape.batch_norm_batch(x, gamma, beta, BN_EPS);
                    mu_t = tape.value(out.mu).data().to_vec();
                    sigma_t = tape.value(out.sigma).data().to_vec();
                    bn_stat_vars.push(Some((out.mu, out.sigma)));
                    x = out.y;
                }
                StatsMode::Running => {
                    let (m, s) = channel_stats(tape.value(x), BN_EPS);
                    mu_t = m;
                    sigma_t = s;
                    bn_stat_vars.push(None);
                    x = tape.batch_norm_injected(
                        x,
                        self.bns[i].running_mu.data(),
                        self.bns[i].running_sigma.data(),
                        gamma,
                        beta,
                    )?;
                }
                StatsMode::Injected(stats) => {
                    let (m, s) = channel_stats(tape.value(x), BN_EPS);
                    mu_t = m;
                    sigma_t = s;
                    bn_stat_vars.push(None);
                    x = tape.batch_norm_injected(x, &stats[i].0, &stats[i].1, gamma, beta)?;
                }
            }
            layers.push(TraceLayer {
                mu_t,
                sigma_t,
                mu_s: self.bns[i].running_mu.data().to_vec(),
                sigma_s: self.bns[i].running_sigma.data().to_vec(),
            });
            x = tape.relu(x);
        }
        let (hw, hb) = conv_vars[5];
        let logits = tape.conv2d(x, hw, hb, 1)?;
        let probs = tape.sigmoid(logits);

        Ok(TapedForward { probs, trace: ForwardTrace { layers }, bn_stat_vars, param_vars })
    }

    /// Plain inference: same code path as [`Self::forward`] on a throwaway
    /// tape, returning the probability tensor and the trace.
    pub fn forward_eval(&self, batch: &Tensor, mode: &StatsMode) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = GradTape::new();
        let input = tape.leaf(batch.clone());
        let fw = self.forward(&mut tape, input, mode)?;
        Ok((tape.value(fw.probs).clone(), fw.trace))
    }

    /// Blend this batch's statistics into the running ones:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, trace: &ForwardTrace, momentum: f64) {
        debug_assert_eq!(trace.layers.len(), BN_LAYERS);
        for (bn, layer) in self.bns.iter_mut().zip(&trace.layers) {
            for (r, t) in bn.running_mu.data_mut().iter_mut().zip(&layer.mu_t) {
                *r = (1.0 - momentum) * *r + momentum * t;
            }
            for (r, t) in bn.running_sigma.data_mut().iter_mut().zip(&layer.sigma_t) {
                *r = (1.0 - momentum) * *r + momentum * t;
            }
        }
    }

    /// Gradients for every trainable parameter, flattened in
    /// `flat_trainable` order (zeros where no gradient flowed).
    pub fn collect_param_grads(&self, fw: &TapedForward, grads: &mut Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        let shapes: Vec<usize> = {
            let mut v = Vec::new();
            for i in 0..BN_LAYERS {
                v.push(self.convs[i].w.len());
                v.push(self.convs[i].b.len());
                v.push(self.bns[i].gamma.len());
                v.push(self.bns[i].beta.len());
            }
            v.push(self.convs[5].w.len());
            v.push(self.convs[5].b.len());
            v
        };
        for (var, len) in fw.param_vars.iter().zip(shapes) {
            match grads.take(*var) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, len)),
            }
        }
        out
    }
}

/// Source training output: the model plus its per-epoch mean loss curve.
pub struct TrainedSource {
    pub model: SegModelState,
    pub epoch_losses: Vec<f64>,
}

/// Pre-train on labeled source data: pixelwise BCE, Batch-mode BN with
/// running-stat updates, Adam. Deterministic given `seed`.
pub fn train_source(
    dataset: &[LabeledSample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainedSource> {
    use rand::seq::SliceRandom;

    if dataset.is_empty() {
        return Err(DynaError::Empty("train_source: dataset is empty".into()));
    }
    let in_ch = dataset[0].image.c3();
    let out_ch = dataset[0].mask.c3();
    let mut model = SegModelState::new(in_ch, out_ch, seed);
    let mut flat = model.flat_trainable();
    let mut opt = OptimState::adam(lr, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x0DD5));
    let batch_size = 8;

    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &dataset[i].image).collect();
            let masks: Vec<&Tensor> = chunk.iter().map(|&i| &dataset[i].mask).collect();
            let batch = Tensor::stack(&images)?;
            let target = Tensor::stack(&masks)?;

            let mut tape = GradTape::new();
            let input = tape.leaf(batch);
            let fw = model.forward(&mut tape, input, &StatsMode::Batch)?;
            model.update_running(&fw.trace, RUNNING_MOMENTUM);
            let loss = tape.bce_mean(fw.probs, &target)?;
            let loss_v = tape.value(loss).scalar_value();
            let mut grads = tape.backward(loss)?;
            let g = model.collect_param_grads(&fw, &mut grads);
            opt.step(&mut flat, &g)?;
            model.set_flat_trainable(&flat);

            loss_sum += loss_v * chunk.len() as f64;
            n_seen += chunk.len();
        }
        epoch_losses.push(loss_sum / n_seen as f64);
    }
    Ok(TrainedSource { model, epoch_losses })
}
