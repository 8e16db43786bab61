//! Command-line surface for the day-night adaptation pipeline.
//!
//! Subcommands: `train-source`, `deploy`, `eval`, `selftest`.
//! Exit codes: 0 success, 1 usage error, 2 data/format error,
//! 3 invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dyna_core::checkpoint::{load_model, read_model, save_model, write_model};
use dyna_core::error::DynaError;
use dyna_core::harness::{deploy_to_dir, eval_model, load_config, RunConfig, Target};
use dyna_core::segnet::train_source;
use dyna_core::synth::benchmark_suite;

#[derive(Parser)]
#[command(name = "dyna", about = "Day-night test-time adaptation for segmentation", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the source model on the synthetic source domain.
    TrainSource {
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a day-night deployment over a target stream.
    Deploy {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Test-data ratio per day: 0.1, 0.2, or 0.5.
        #[arg(long)]
        ratio: Option<f64>,
        /// Target domain: A or B.
        #[arg(long)]
        target: Option<String>,
        /// Output directory for report.csv / report.json / final_model.ckpt / state.bin.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Day-only ablation: skip night self-training.
        #[arg(long)]
        no_night: bool,
        /// Ablation: final inference uses warm-up statistics.
        #[arg(long)]
        infer_with_warmup: bool,
        /// Ablation: binarize pseudo-labels before the night losses.
        #[arg(long)]
        binarize_pseudo: bool,
        /// Restrict the alignment loss to encoder BN layers.
        #[arg(long)]
        encoder_only_loss: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Offline Dice of a checkpoint over a full target domain.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the fast invariant suite and report one line per check.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DynaError::Usage(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn base_config(config: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, DynaError> {
    let mut cfg = match config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, DynaError> {
    match cli.cmd {
        Cmd::TrainSource { out, seed, config } => {
            let cfg = base_config(&config, seed)?;
            let suite = benchmark_suite(cfg.seed);
            let trained =
                train_source(&suite.source_train, cfg.source_epochs, cfg.source_lr, cfg.seed)?;
            save_model(&out, &trained.model)?;
            let val_dice = eval_model(&trained.model, &suite.source_val)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": out,
                    "epochs": cfg.source_epochs,
                    "first_epoch_loss": trained.epoch_losses.first(),
                    "final_epoch_loss": trained.epoch_losses.last(),
                    "source_val_dice": val_dice,
                    "seed": cfg.seed,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Deploy {
            ckpt,
            ratio,
            target,
            out,
            seed,
            no_night,
            infer_with_warmup,
            binarize_pseudo,
            encoder_only_loss,
            config,
        } => {
            let mut cfg = base_config(&config, seed)?;
            if let Some(c) = ckpt {
                cfg.ckpt = Some(c);
            }
            if let Some(r) = ratio {
                cfg.test_ratio = r;
            }
            if let Some(t) = &target {
                cfg.target = t.parse::<Target>()?;
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            cfg.no_night |= no_night;
            cfg.infer_with_warmup |= infer_with_warmup;
            cfg.binarize_pseudo |= binarize_pseudo;
            cfg.encoder_only_loss |= encoder_only_loss;
            cfg.validate()?;

            let outcome = deploy_to_dir(&cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "out_dir": cfg.out_dir,
                    "days": outcome.summary.days,
                    "overall_dyna": outcome.summary.overall_dyna,
                    "overall_source_only": outcome.summary.overall_source_only,
                    "offline_dice_final_model": outcome.summary.offline_dice_final_model,
                    "offline_dice_source_model": outcome.summary.offline_dice_source_model,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { ckpt, target, seed, config } => {
            let cfg = base_config(&config, seed)?;
            let target: Target = target.parse()?;
            let model = load_model(&ckpt)?;
            let suite = benchmark_suite(cfg.seed);
            let samples = match target {
                Target::A => &suite.target_a,
                Target::B => &suite.target_b,
            };
            let mean = eval_model(&model, samples)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": ckpt,
                    "target": format!("{target:?}"),
                    "samples": samples.len(),
                    "mean_dice": mean,
                    "seed": cfg.seed,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Selftest => {
            if selftest() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

// ── Invariant suite ─────────────────────────────────────────────────

fn selftest() -> bool {
    let mut ok = true;
    let mut check = |name: &str, result: Result<(), String>| match result {
        Ok(()) => println!("ok   {name}"),
        Err(msg) => {
            ok = false;
            println!("FAIL {name}: {msg}");
        }
    };

    check("fft roundtrip and parseval", fft_invariants());
    check("identity prompt is a no-op", prompt_identity());
    check("dc prompt adds the mean", prompt_dc());
    check("warm-up lambda schedule", lambda_schedule());
    check("agreement mask truth table", agreement_truth_table());
    check("bank fifo and retrieval", bank_invariants());
    check("adam first-step closed form", adam_first_step());
    check("weights_axpy linearity", axpy_linearity());
    check("conv gradient vs finite differences", conv_gradcheck());
    check("checkpoint roundtrip", checkpoint_roundtrip());
    ok
}

fn fft_invariants() -> Result<(), String> {
    use dyna_core::fft::{fft2_centered, ifft2_centered};
    use dyna_core::testutil::{rng, uniform_grid};
    let mut r = rng(1001);
    let x = uniform_grid(&mut r, 1, 48, 36);
    let z = fft2_centered(&x).map_err(|e| e.to_string())?;
    let back = ifft2_centered(&z).map_err(|e| e.to_string())?;
    let err = x.max_abs_diff(&back);
    if err >= 1e-9 {
        return Err(format!("roundtrip error {err}"));
    }
    let spatial: f64 = x.data().iter().map(|v| v * v).sum();
    let spectral: f64 =
        z.re.iter().zip(&z.im).map(|(a, b)| a * a + b * b).sum::<f64>() / (48.0 * 36.0);
    let rel = (spatial - spectral).abs() / spatial;
    if rel >= 1e-9 {
        return Err(format!("parseval relative error {rel}"));
    }
    Ok(())
}

fn prompt_identity() -> Result<(), String> {
    use dyna_core::prompt::{apply_prompt, LowFreqPrompt};
    use dyna_core::testutil::{rng, uniform_grid};
    let mut r = rng(1002);
    let x = uniform_grid(&mut r, 1, 32, 32).map(|v| 0.5 + 0.4 * v);
    let y = apply_prompt(&x, &LowFreqPrompt::ones(1, 3, 3)).map_err(|e| e.to_string())?;
    let err = x.max_abs_diff(&y);
    if err >= 1e-9 {
        return Err(format!("no-op error {err}"));
    }
    Ok(())
}

fn prompt_dc() -> Result<(), String> {
    use dyna_core::prompt::{apply_prompt, LowFreqPrompt};
    use dyna_core::tensor::Tensor;
    use dyna_core::testutil::{rng, uniform_grid};
    let mut r = rng(1003);
    let x = uniform_grid(&mut r, 1, 8, 8).map(|v| 0.5 + 0.4 * v);
    let p = LowFreqPrompt { values: Tensor::full(&[1, 1, 1], 2.0) };
    let y = apply_prompt(&x, &p).map_err(|e| e.to_string())?;
    let expect = x.map(|v| v + x.mean());
    let err = expect.max_abs_diff(&y);
    if err >= 1e-9 {
        return Err(format!("dc example error {err}"));
    }
    Ok(())
}

fn lambda_schedule() -> Result<(), String> {
    use dyna_core::day::lambda;
    if (lambda(1, 5.0) - 5.0 / 6.0).abs() >= 1e-15 {
        return Err(format!("lambda(1, 5) = {}", lambda(1, 5.0)));
    }
    let mut prev = f64::INFINITY;
    for i in 1..=10_000u64 {
        let l = lambda(i, 5.0);
        if l >= prev {
            return Err(format!("not strictly decreasing at i = {i}"));
        }
        prev = l;
    }
    Ok(())
}

fn agreement_truth_table() -> Result<(), String> {
    use dyna_core::night::agreement_mask;
    use dyna_core::tensor::Tensor;
    for bits in 0..8u8 {
        let v = |b: bool| if b { 0.9 } else { 0.1 };
        let y = Tensor::full(&[1, 1, 1], v(bits & 1 != 0));
        let pg = Tensor::full(&[1, 1, 1], v(bits & 2 != 0));
        let pt = Tensor::full(&[1, 1, 1], v(bits & 4 != 0));
        let mask = agreement_mask(&y, &pg, &pt, 0.5).map_err(|e| e.to_string())?;
        let expect = if bits == 0 || bits == 7 { 1.0 } else { 0.0 };
        if mask.data()[0] != expect {
            return Err(format!("case {bits:03b}"));
        }
    }
    Ok(())
}

fn bank_invariants() -> Result<(), String> {
    use dyna_core::bank::{init_prompt, softmax, MemoryBank};
    use dyna_core::prompt::{LowFreqPrompt, SpectralKey};
    use dyna_core::tensor::Tensor;
    let mut bank = MemoryBank::new(2);
    for i in 0..3u64 {
        bank.push(
            SpectralKey { values: vec![1.0, i as f64], image_id: i },
            LowFreqPrompt { values: Tensor::full(&[1, 1, 1], i as f64) },
        )
        .map_err(|e| e.to_string())?;
    }
    if bank.len() != 2 {
        return Err(format!("capacity violated: {}", bank.len()));
    }
    let w = softmax(&[0.3, 0.3, 0.9]);
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() >= 1e-12 || w.iter().any(|&x| x < 0.0) {
        return Err("softmax weights not a distribution".into());
    }
    let support = vec![
        (LowFreqPrompt { values: Tensor::full(&[1, 1, 1], 2.0) }, 0.5),
        (LowFreqPrompt { values: Tensor::full(&[1, 1, 1], 4.0) }, 0.5),
    ];
    let p = init_prompt(&support, (1, 1, 1)).map_err(|e| e.to_string())?;
    let v = p.values.data()[0];
    if !(2.0..=4.0).contains(&v) {
        return Err(format!("init prompt {v} escaped the convex hull"));
    }
    Ok(())
}

fn adam_first_step() -> Result<(), String> {
    use dyna_core::optim::OptimState;
    let mut adam = OptimState::adam(0.05, 1);
    let mut p = vec![1.0];
    adam.step(&mut p, &[0.4]).map_err(|e| e.to_string())?;
    let expect = 1.0 - 0.05 * 0.4 / (0.4 + 1e-8);
    if (p[0] - expect).abs() >= 1e-14 {
        return Err(format!("{} vs {expect}", p[0]));
    }
    Ok(())
}

fn axpy_linearity() -> Result<(), String> {
    use dyna_core::segnet::SegModelState;
    let w = SegModelState::new(1, 1, 2024);
    let a = SegModelState::weights_axpy(0.25, &w, 0.5, &w).map_err(|e| e.to_string())?;
    let b = SegModelState::weights_axpy(0.75, &w, 0.0, &w).map_err(|e| e.to_string())?;
    let diff = a
        .flat_all()
        .iter()
        .zip(b.flat_all())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if diff >= 1e-15 {
        return Err(format!("axpy linearity violated by {diff}"));
    }
    Ok(())
}

fn conv_gradcheck() -> Result<(), String> {
    use dyna_core::tape::GradTape;
    use dyna_core::tensor::Tensor;
    use dyna_core::testutil::{central_diff_grad, max_grad_rel_err, rng, uniform_batch};
    let mut r = rng(1004);
    let x0 = uniform_batch(&mut r, 1, 1, 6, 6);
    let w0 = uniform_batch(&mut r, 1, 1, 3, 3);
    let proj = uniform_batch(&mut r, 1, 1, 6, 6);

    let mut tape = GradTape::new();
    let x = tape.leaf(x0.clone());
    let w = tape.leaf(w0.clone());
    let b = tape.leaf(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, w, b, 1).map_err(|e| e.to_string())?;
    let pr = tape.mul_const(y, &proj);
    let loss = tape.mean_all(pr);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic = grads.get(x).expect("input grad").data().to_vec();

    let mut eval = |flat: &[f64]| {
        let mut t = GradTape::new();
        let xv = t.leaf(Tensor::from_vec(&[1, 1, 6, 6], flat.to_vec()).unwrap());
        let wv = t.leaf(w0.clone());
        let bv = t.leaf(Tensor::zeros(&[1]));
        let y = t.conv2d(xv, wv, bv, 1).unwrap();
        let pr = t.mul_const(y, &proj);
        let l = t.mean_all(pr);
        t.value(l).scalar_value()
    };
    let coords: Vec<usize> = (0..36).collect();
    let fd = central_diff_grad(&mut eval, x0.data(), 1e-5, &coords);
    let err = max_grad_rel_err(&analytic, &fd);
    if err >= 1e-5 {
        return Err(format!("gradient error {err}"));
    }
    Ok(())
}

fn checkpoint_roundtrip() -> Result<(), String> {
    use dyna_core::segnet::SegModelState;
    let model = SegModelState::new(1, 1, 77);
    let mut blob = Vec::new();
    write_model(&mut blob, &model).map_err(|e| e.to_string())?;
    let back = read_model(&mut blob.as_slice()).map_err(|e| e.to_string())?;
    if back != model {
        return Err("roundtrip mismatch".into());
    }
    Ok(())
}
