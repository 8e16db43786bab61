//! The daytime per-sample loop: prompt initialization from the bank,
//! warm-up statistics, one statistics-alignment step on the prompt,
//! inference, and pseudo-label capture. The source model is frozen
//! throughout the day; only the prompt, the bank, and the warm-up counter
//! change.

use crate::bank::{init_prompt, MemoryBank};
use crate::error::{DynaError, Result};
use crate::fft::fft2_centered;
use crate::optim::OptimState;
use crate::prompt::{
    apply_prompt_taped, apply_prompt_to_spectrum, low_freq_key, prompt_dims, LowFreqPrompt,
};
use crate::segnet::{ForwardTrace, SegModelState, StatsMode, TapedForward, ENCODER_BN_LAYERS};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Warm-up state: temperature plus the global test-sample counter, which
/// starts at 1 and never resets within a deployment.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub tau: f64,
    pub i: u64,
}

impl WarmupSchedule {
    pub fn new(tau: f64) -> Self {
        WarmupSchedule { tau, i: 1 }
    }

    pub fn advance(&mut self) {
        self.i += 1;
    }
}

/// `lambda = 1 / (sqrt(i)/tau + 1)`: the blend weight on test statistics,
/// strictly decreasing in `i`.
pub fn lambda(i: u64, tau: f64) -> f64 {
    1.0 / ((i as f64).sqrt() / tau + 1.0)
}

/// Per-layer warm-up targets: `mu_w = lambda*mu_t + (1-lambda)*mu_s` and
/// likewise for sigma. Plain values, constants w.r.t. any gradient tape.
pub fn warmup_statistics(i: u64, tau: f64, trace: &ForwardTrace) -> Vec<(Vec<f64>, Vec<f64>)> {
    let lam = lambda(i, tau);
    trace
        .layers
        .iter()
        .map(|layer| {
            let mu = layer
                .mu_t
                .iter()
                .zip(&layer.mu_s)
                .map(|(t, s)| lam * t + (1.0 - lam) * s)
                .collect();
            let sigma = layer
                .sigma_t
                .iter()
                .zip(&layer.sigma_s)
                .map(|(t, s)| lam * t + (1.0 - lam) * s)
                .collect();
            (mu, sigma)
        })
        .collect()
}

fn loss_layer_count(total: usize, encoder_only: bool) -> usize {
    if encoder_only {
        ENCODER_BN_LAYERS.min(total)
    } else {
        total
    }
}

/// Statistics-alignment loss as a plain value: mean over BN layers of
/// [mean over channels of |mu_w - mu_t| + |sigma_w - sigma_t|].
pub fn prompt_alignment_loss(
    trace: &ForwardTrace,
    warm: &[(Vec<f64>, Vec<f64>)],
    encoder_only: bool,
) -> Result<f64> {
    if trace.layers.len() != warm.len() {
        return Err(DynaError::Shape(format!(
            "alignment loss: {} trace layers vs {} warm targets",
            trace.layers.len(),
            warm.len()
        )));
    }
    let used = loss_layer_count(trace.layers.len(), encoder_only);
    let mut total = 0.0;
    for (layer, (mu_w, sigma_w)) in trace.layers.iter().take(used).zip(warm) {
        let c = layer.mu_t.len() as f64;
        let dmu: f64 = layer.mu_t.iter().zip(mu_w).map(|(t, w)| (w - t).abs()).sum();
        let dsigma: f64 = layer.sigma_t.iter().zip(sigma_w).map(|(t, w)| (w - t).abs()).sum();
        total += dmu / c + dsigma / c;
    }
    Ok(total / used as f64)
}

/// Taped form of [`prompt_alignment_loss`] over a Batch-mode forward,
/// differentiable through the batch statistics.
pub fn prompt_alignment_loss_taped(
    tape: &mut GradTape,
    fw: &TapedForward,
    warm: &[(Vec<f64>, Vec<f64>)],
    encoder_only: bool,
) -> Result<Var> {
    if fw.bn_stat_vars.len() != warm.len() {
        return Err(DynaError::Shape(format!(
            "alignment loss: {} BN layers vs {} warm targets",
            fw.bn_stat_vars.len(),
            warm.len()
        )));
    }
    let used = loss_layer_count(fw.bn_stat_vars.len(), encoder_only);
    let mut total: Option<Var> = None;
    for (stats, (mu_w, sigma_w)) in fw.bn_stat_vars.iter().take(used).zip(warm) {
        let (mu_var, sigma_var) = stats.ok_or_else(|| {
            DynaError::Domain("alignment loss needs a Batch-mode forward".into())
        })?;
        let mu_w_t = Tensor::from_vec(&[mu_w.len()], mu_w.clone())?;
        let sigma_w_t = Tensor::from_vec(&[sigma_w.len()], sigma_w.clone())?;
        let dmu = tape.const_sub(&mu_w_t, mu_var);
        let amu = tape.abs(dmu);
        let lmu = tape.mean_all(amu);
        let dsg = tape.const_sub(&sigma_w_t, sigma_var);
        let asg = tape.abs(dsg);
        let lsg = tape.mean_all(asg);
        let layer = tape.add(lmu, lsg);
        total = Some(match total {
            Some(t) => tape.add(t, layer),
            None => layer,
        });
    }
    let total = total.expect("at least one BN layer");
    Ok(tape.scale(total, 1.0 / used as f64))
}

/// Day-phase knobs; the bank and warm-up schedule are owned by the caller
/// because they outlive single samples.
#[derive(Clone, Debug)]
pub struct DayConfig {
    pub prompt_lr: f64,
    pub beta: f64,
    pub support_size: usize,
    pub encoder_only_loss: bool,
    /// Ablation: run the final inference with the warm-up statistics
    /// injected instead of the running (source) statistics.
    pub infer_with_warmup: bool,
    /// Re-measure the alignment loss after the prompt step (costs one extra
    /// forward per sample); used by the one-step-descent checks.
    pub track_descent: bool,
}

/// One adapted sample: the raw image, the trained (post-step) prompt, and
/// the pseudo-label probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct DayRecord {
    pub image: Tensor,
    pub prompt: LowFreqPrompt,
    pub pseudo: Tensor,
    pub loss_before: f64,
    pub loss_after: Option<f64>,
}

/// Process one test image: initialize the prompt from the bank, train it
/// for exactly one Adam step against the warm-up targets, run inference,
/// and bank the trained prompt.
pub fn adapt_one(
    model: &SegModelState,
    bank: &mut MemoryBank,
    sched: &mut WarmupSchedule,
    x: &Tensor,
    cfg: &DayConfig,
) -> Result<DayRecord> {
    let z = fft2_centered(x)?;
    let amplitude = z.amplitude();
    let key = low_freq_key(&amplitude, cfg.beta, sched.i)?;
    let (hp, wp) = prompt_dims(cfg.beta, x.h3(), x.w3());
    let support = bank.retrieve_support(&key, cfg.support_size)?;
    let prompt0 = init_prompt(&support, (x.c3(), hp, wp))?;

    // trace pass with the initialized prompt to form the warm-up targets
    let x0 = apply_prompt_to_spectrum(&z, &prompt0)?;
    let (_, pre_trace) = model.forward_eval(&x0.unsqueeze0(), &StatsMode::Batch)?;
    let warm = warmup_statistics(sched.i, sched.tau, &pre_trace);

    // taped pass: normalize with batch statistics, align them to the targets
    let mut tape = GradTape::new();
    let p_var = tape.leaf(prompt0.values.clone());
    let adapted = apply_prompt_taped(&mut tape, &z, p_var)?;
    let batch = tape.reshape(adapted, &[1, x.c3(), x.h3(), x.w3()]);
    let fw = model.forward(&mut tape, batch, &StatsMode::Batch)?;
    let loss = prompt_alignment_loss_taped(&mut tape, &fw, &warm, cfg.encoder_only_loss)?;
    let loss_before = tape.value(loss).scalar_value();
    let mut grads = tape.backward(loss)?;
    let gp = grads
        .take(p_var)
        .unwrap_or_else(|| Tensor::zeros(prompt0.values.dims()));

    // exactly one optimizer step, fresh Adam state per sample
    let mut flat = prompt0.values.data().to_vec();
    let mut opt = OptimState::adam(cfg.prompt_lr, flat.len());
    opt.step(&mut flat, gp.data())?;
    let trained = LowFreqPrompt { values: Tensor::from_vec(prompt0.values.dims(), flat)? };

    // inference on the re-prompted image; source statistics by default
    let x_fin = apply_prompt_to_spectrum(&z, &trained)?;
    let mode = if cfg.infer_with_warmup {
        StatsMode::Injected(warm.clone())
    } else {
        StatsMode::Running
    };
    let (probs, _) = model.forward_eval(&x_fin.unsqueeze0(), &mode)?;
    let pseudo = probs.squeeze0();

    let loss_after = if cfg.track_descent {
        let (_, post_trace) = model.forward_eval(&x_fin.unsqueeze0(), &StatsMode::Batch)?;
        Some(prompt_alignment_loss(&post_trace, &warm, cfg.encoder_only_loss)?)
    } else {
        None
    };

    bank.push(key, trained.clone())?;
    sched.advance();

    Ok(DayRecord { image: x.clone(), prompt: trained, pseudo, loss_before, loss_after })
}
