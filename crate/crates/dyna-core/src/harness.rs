//! Deployment orchestration: day-night cycles over a simulated target
//! stream, online metrics, persistence, and report files.
//!
//! Per-sample Dice is recorded at prediction time with whatever model and
//! bank state existed when the sample arrived — night training never
//! re-scores earlier samples. A source-only control pass scores the exact
//! same stream with the untouched source model.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::checkpoint::{load_model, read_model, save_model, write_model};
use crate::day::{adapt_one, DayConfig, DayRecord, WarmupSchedule};
use crate::error::{DynaError, Result};
use crate::metrics::dice;
use crate::night::{run_night, NightConfig};
use crate::prompt::{LowFreqPrompt, SpectralKey};
use crate::seeds::mix;
use crate::segnet::{SegModelState, StatsMode};
use crate::synth::{benchmark_suite, LabeledSample};
use crate::tensor::Tensor;

pub const STATE_MAGIC: &[u8; 4] = b"DYST";
pub const STATE_VERSION: u32 = 1;

const TAG_NIGHT: u64 = 0x7219;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    A,
    B,
}

impl std::str::FromStr for Target {
    type Err = DynaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Target::A),
            "B" | "b" => Ok(Target::B),
            other => Err(DynaError::Usage(format!("unknown target {other:?}, expected A or B"))),
        }
    }
}

/// Full run configuration. Defaults carry the pipeline's standard
/// hyperparameters; a JSON config file mirrors this struct and CLI flags
/// override file values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    // day
    pub beta: f64,
    pub bank_capacity: usize,
    pub support_size: usize,
    pub tau: f64,
    pub prompt_lr: f64,
    pub encoder_only_loss: bool,
    pub infer_with_warmup: bool,
    // night
    pub night_epochs: usize,
    pub night_batch: usize,
    pub night_lr: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub binarize_pseudo: bool,
    pub no_night: bool,
    // source training
    pub source_epochs: usize,
    pub source_lr: f64,
    // deployment
    pub test_ratio: f64,
    pub cycles: Option<usize>,
    pub target: Target,
    pub seed: u64,
    pub ckpt: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            beta: 0.05,
            bank_capacity: 40,
            support_size: 16,
            tau: 5.0,
            prompt_lr: 0.05,
            encoder_only_loss: false,
            infer_with_warmup: false,
            night_epochs: 10,
            night_batch: 4,
            night_lr: 0.001,
            alpha: 0.995,
            threshold: 0.5,
            binarize_pseudo: false,
            no_night: false,
            source_epochs: 20,
            source_lr: 1e-3,
            test_ratio: 0.2,
            cycles: None,
            target: Target::B,
            seed: 0,
            ckpt: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        const RATIOS: [f64; 3] = [0.1, 0.2, 0.5];
        if !RATIOS.contains(&self.test_ratio) {
            return Err(DynaError::Usage(format!(
                "test_ratio {} must be one of {RATIOS:?}",
                self.test_ratio
            )));
        }
        if !(0.0 < self.beta && self.beta < 1.0) {
            return Err(DynaError::Usage(format!("beta {} must be in (0,1)", self.beta)));
        }
        if self.bank_capacity == 0 || self.support_size == 0 || self.night_batch == 0 {
            return Err(DynaError::Usage("bank/support/batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn day_config(&self, track_descent: bool) -> DayConfig {
        DayConfig {
            prompt_lr: self.prompt_lr,
            beta: self.beta,
            support_size: self.support_size,
            encoder_only_loss: self.encoder_only_loss,
            infer_with_warmup: self.infer_with_warmup,
            track_descent,
        }
    }

    pub fn night_config(&self) -> NightConfig {
        NightConfig {
            epochs: self.night_epochs,
            batch: self.night_batch,
            lr: self.night_lr,
            alpha: self.alpha,
            threshold: self.threshold,
            binarize_pseudo: self.binarize_pseudo,
        }
    }
}

/// Load a JSON config file mirroring [`RunConfig`].
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub day: usize,
    pub index: usize,
    pub dice_dyna: f64,
    pub dice_source_only: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DayReport {
    pub day: usize,
    pub samples: usize,
    pub dyna_mean: f64,
    pub source_only_mean: f64,
    pub night_skipped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config: RunConfig,
    pub seed: u64,
    pub target: Target,
    pub days: usize,
    pub per_day: Vec<DayReport>,
    pub overall_dyna: f64,
    pub overall_source_only: f64,
    pub offline_dice_final_model: f64,
    pub offline_dice_source_model: f64,
}

/// Everything a deployment produces before hitting the filesystem.
pub struct DeployOutcome {
    pub summary: ReportSummary,
    pub csv: String,
    pub log: Vec<SampleLog>,
    pub final_model: SegModelState,
    pub state: DeploymentState,
}

/// Mean offline Dice of a model over labeled samples (plain Running-mode
/// forwards on raw images).
pub fn eval_model(model: &SegModelState, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(DynaError::Empty("eval_model: no samples".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let (probs, _) = model.forward_eval(&s.image.unsqueeze0(), &StatsMode::Running)?;
        sum += dice(&probs.squeeze0(), &s.mask, 0.5)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Split `n` samples into `days` contiguous chunks as evenly as possible.
fn day_boundaries(n: usize, days: usize) -> Vec<(usize, usize)> {
    let base = n / days;
    let extra = n % days;
    let mut out = Vec::with_capacity(days);
    let mut start = 0;
    for d in 0..days {
        let len = base + usize::from(d < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Run the full deployment described by `cfg`: load the checkpoint, stream
/// the chosen target domain over `ceil(1/test_ratio)` days with night
/// self-training between them, and assemble the reports.
pub fn run_deployment(cfg: &RunConfig) -> Result<DeployOutcome> {
    cfg.validate()?;
    let ckpt = cfg
        .ckpt
        .as_ref()
        .ok_or_else(|| DynaError::Usage("deploy needs a checkpoint path".into()))?;
    if !ckpt.exists() {
        return Err(DynaError::Format(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let source_model = load_model(ckpt)?;

    let suite = benchmark_suite(cfg.seed);
    let stream = match cfg.target {
        Target::A => &suite.target_a,
        Target::B => &suite.target_b,
    };

    let days_total = (1.0 / cfg.test_ratio).ceil() as usize;
    let days_run = cfg.cycles.map_or(days_total, |c| c.min(days_total));
    let bounds = day_boundaries(stream.len(), days_total);

    let mut model = source_model.clone();
    let mut bank = MemoryBank::new(cfg.bank_capacity);
    let mut sched = WarmupSchedule::new(cfg.tau);
    let day_cfg = cfg.day_config(false);
    let night_cfg = cfg.night_config();

    let mut log: Vec<SampleLog> = Vec::with_capacity(stream.len());
    let mut per_day = Vec::with_capacity(days_run);
    let mut cycle = 0usize;

    for (day_idx, &(start, end)) in bounds.iter().take(days_run).enumerate() {
        let day_no = day_idx + 1;
        let mut records: Vec<DayRecord> = Vec::with_capacity(end - start);
        let mut dyna_sum = 0.0;
        let mut source_sum = 0.0;
        for (index, sample) in stream[start..end].iter().enumerate() {
            let rec = adapt_one(&model, &mut bank, &mut sched, &sample.image, &day_cfg)?;
            let dice_dyna = dice(&rec.pseudo, &sample.mask, 0.5)?;
            let (src_probs, _) =
                source_model.forward_eval(&sample.image.unsqueeze0(), &StatsMode::Running)?;
            let dice_source_only = dice(&src_probs.squeeze0(), &sample.mask, 0.5)?;
            dyna_sum += dice_dyna;
            source_sum += dice_source_only;
            log.push(SampleLog {
                day: day_no,
                index: start + index,
                dice_dyna,
                dice_source_only,
            });
            records.push(rec);
        }

        let night_skipped = cfg.no_night || records.is_empty();
        if !night_skipped {
            let night_seed = mix(cfg.seed, TAG_NIGHT.wrapping_add(day_no as u64));
            model = run_night(&model, &records, &night_cfg, night_seed)?;
        }
        // records (the per-day set) are dropped here: reset for each night
        let n = end - start;
        per_day.push(DayReport {
            day: day_no,
            samples: n,
            dyna_mean: if n > 0 { dyna_sum / n as f64 } else { 0.0 },
            source_only_mean: if n > 0 { source_sum / n as f64 } else { 0.0 },
            night_skipped,
        });
        cycle = day_no;
    }

    let seen = log.len();
    let overall_dyna = log.iter().map(|l| l.dice_dyna).sum::<f64>() / seen as f64;
    let overall_source_only =
        log.iter().map(|l| l.dice_source_only).sum::<f64>() / seen as f64;
    let evaluated: Vec<LabeledSample> = stream[..bounds[days_run - 1].1].to_vec();
    let offline_dice_final_model = eval_model(&model, &evaluated)?;
    let offline_dice_source_model = eval_model(&source_model, &evaluated)?;

    let mut csv = String::from("day,index,dice_dyna,dice_source_only\n");
    for l in &log {
        csv.push_str(&format!("{},{},{},{}\n", l.day, l.index, l.dice_dyna, l.dice_source_only));
    }

    let summary = ReportSummary {
        config: cfg.clone(),
        seed: cfg.seed,
        target: cfg.target,
        days: days_run,
        per_day,
        overall_dyna,
        overall_source_only,
        offline_dice_final_model,
        offline_dice_source_model,
    };
    let state = DeploymentState { cycle, model: model.clone(), bank, sched, log: log.clone() };
    Ok(DeployOutcome { summary, csv, log, final_model: model, state })
}

/// Run a deployment and write `report.csv`, `report.json`,
/// `final_model.ckpt`, and `state.bin` into `cfg.out_dir`.
pub fn deploy_to_dir(cfg: &RunConfig) -> Result<DeployOutcome> {
    let out_dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| DynaError::Usage("deploy needs an output directory".into()))?
        .clone();
    fs::create_dir_all(&out_dir)?;
    let outcome = run_deployment(cfg)?;
    fs::write(out_dir.join("report.csv"), &outcome.csv)?;
    let json = serde_json::to_string_pretty(&outcome.summary)?;
    fs::write(out_dir.join("report.json"), json)?;
    save_model(&out_dir.join("final_model.ckpt"), &outcome.final_model)?;
    save_state(&out_dir.join("state.bin"), &outcome.state)?;
    Ok(outcome)
}

// ── Deployment state persistence ────────────────────────────────────

/// Resumable deployment state: cycle index, current model, prompt bank,
/// warm-up counter, and the append-only metric log.
#[derive(Clone, Debug)]
pub struct DeploymentState {
    pub cycle: usize,
    pub model: SegModelState,
    pub bank: MemoryBank,
    pub sched: WarmupSchedule,
    pub log: Vec<SampleLog>,
}

impl PartialEq for DeploymentState {
    fn eq(&self, other: &Self) -> bool {
        self.cycle == other.cycle
            && self.model == other.model
            && self.sched == other.sched
            && self.log == other.log
            && self.bank.capacity() == other.bank.capacity()
            && self.bank.len() == other.bank.len()
            && self
                .bank
                .iter()
                .zip(other.bank.iter())
                .all(|((k1, p1), (k2, p2))| k1 == k2 && p1 == p2)
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn save_state(path: &Path, state: &DeploymentState) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(STATE_MAGIC)?;
    write_u32(&mut w, STATE_VERSION)?;
    write_u32(&mut w, state.cycle as u32)?;
    write_f64(&mut w, state.sched.tau)?;
    write_u64(&mut w, state.sched.i)?;

    let mut blob = Vec::new();
    write_model(&mut blob, &state.model)?;
    write_u64(&mut w, blob.len() as u64)?;
    w.write_all(&blob)?;

    write_u32(&mut w, state.bank.capacity() as u32)?;
    write_u32(&mut w, state.bank.len() as u32)?;
    for (key, prompt) in state.bank.iter() {
        write_u32(&mut w, key.values.len() as u32)?;
        for v in &key.values {
            write_f64(&mut w, *v)?;
        }
        write_u64(&mut w, key.image_id)?;
        let dims = prompt.values.dims();
        write_u32(&mut w, dims[0] as u32)?;
        write_u32(&mut w, dims[1] as u32)?;
        write_u32(&mut w, dims[2] as u32)?;
        for v in prompt.values.data() {
            write_f64(&mut w, *v)?;
        }
    }

    write_u32(&mut w, state.log.len() as u32)?;
    for l in &state.log {
        write_u32(&mut w, l.day as u32)?;
        write_u32(&mut w, l.index as u32)?;
        write_f64(&mut w, l.dice_dyna)?;
        write_f64(&mut w, l.dice_source_only)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<DeploymentState> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(DynaError::Format(format!("bad state magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != STATE_VERSION {
        return Err(DynaError::Format(format!(
            "unsupported state version {version} (this build reads {STATE_VERSION})"
        )));
    }
    let cycle = read_u32(&mut r)? as usize;
    let tau = read_f64(&mut r)?;
    let i = read_u64(&mut r)?;

    let blob_len = read_u64(&mut r)? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)?;
    let model = read_model(&mut blob.as_slice())?;

    let capacity = read_u32(&mut r)? as usize;
    let len = read_u32(&mut r)? as usize;
    if len > capacity {
        return Err(DynaError::Format(format!("bank length {len} exceeds capacity {capacity}")));
    }
    let mut bank = MemoryBank::new(capacity);
    for _ in 0..len {
        let klen = read_u32(&mut r)? as usize;
        let mut values = vec![0.0; klen];
        for v in values.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let image_id = read_u64(&mut r)?;
        let c = read_u32(&mut r)? as usize;
        let hp = read_u32(&mut r)? as usize;
        let wp = read_u32(&mut r)? as usize;
        let mut pdata = vec![0.0; c * hp * wp];
        for v in pdata.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        bank.push(
            SpectralKey { values, image_id },
            LowFreqPrompt { values: Tensor::from_vec(&[c, hp, wp], pdata)? },
        )?;
    }

    let rows = read_u32(&mut r)? as usize;
    let mut log = Vec::with_capacity(rows);
    for _ in 0..rows {
        let day = read_u32(&mut r)? as usize;
        let index = read_u32(&mut r)? as usize;
        let dice_dyna = read_f64(&mut r)?;
        let dice_source_only = read_f64(&mut r)?;
        log.push(SampleLog { day, index, dice_dyna, dice_source_only });
    }

    Ok(DeploymentState { cycle, model, bank, sched: WarmupSchedule { tau, i }, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_boundaries_are_even_and_cover() {
        assert_eq!(day_boundaries(100, 2), vec![(0, 50), (50, 100)]);
        assert_eq!(day_boundaries(100, 5).len(), 5);
        assert_eq!(day_boundaries(10, 3), vec![(0, 4), (4, 7), (7, 10)]);
        // streams shorter than the day count leave trailing empty days
        let short = day_boundaries(3, 10);
        assert_eq!(&short[..3], &[(0, 1), (1, 2), (2, 3)]);
        assert!(short[3..].iter().all(|&(s, e)| s == e));
    }

    #[test]
    fn ratio_validation() {
        let mut cfg = RunConfig::default();
        cfg.test_ratio = 0.3;
        assert!(cfg.validate().is_err());
        cfg.test_ratio = 0.5;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_roundtrips_through_json_and_defaults_fill_in() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        // partial config files rely on defaults
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 9, "alpha": 0.9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.alpha, 0.9);
        assert_eq!(partial.bank_capacity, 40);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let mut cfg = RunConfig::default();
        cfg.ckpt = Some(PathBuf::from("/nonexistent/model.ckpt"));
        assert!(run_deployment(&cfg).is_err());
    }

    #[test]
    fn state_roundtrip_and_corruption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let model = SegModelState::new(1, 1, 31);
        let mut bank = MemoryBank::new(4);
        bank.push(
            SpectralKey { values: vec![1.0, 2.0, 3.0], image_id: 7 },
            LowFreqPrompt { values: Tensor::full(&[1, 1, 3], 1.5) },
        )
        .unwrap();
        let state = DeploymentState {
            cycle: 3,
            model,
            bank,
            sched: WarmupSchedule { tau: 5.0, i: 42 },
            log: vec![SampleLog { day: 1, index: 0, dice_dyna: 0.5, dice_source_only: 0.25 }],
        };
        let path = dir.path().join("state.bin");
        save_state(&path, &state).unwrap();
        let loaded = load_state(&path).unwrap();
        assert_eq!(state, loaded);

        // truncation
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        assert!(load_state(&path).is_err());

        // version bump
        let mut bumped = bytes.clone();
        bumped[4] = 9;
        fs::write(&path, &bumped).unwrap();
        let err = load_state(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
