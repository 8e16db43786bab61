//! Nighttime self-training on the day's collected records.
//!
//! Student, global student, and teacher all start from the incoming source
//! model. Each iteration the student trains on a strongly-augmented batch
//! against an agreement-masked ensemble of pseudo-label, global-student,
//! and teacher predictions; the global student then takes the running mean
//! of student snapshots, and the teacher follows it by EMA. The teacher is
//! the handoff to the next day. Prompts are frozen: records are read-only
//! here.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::day::DayRecord;
use crate::error::{DynaError, Result};
use crate::prompt::apply_prompt;
use crate::seeds::mix;
use crate::segnet::{SegModelState, StatsMode, RUNNING_MOMENTUM};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Weak augmentations: exact index permutations on the pixel grid, so each
/// has an exact inverse and no interpolation error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeoTransform {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl GeoTransform {
    pub const ALL: [GeoTransform; 6] = [
        GeoTransform::Identity,
        GeoTransform::HFlip,
        GeoTransform::VFlip,
        GeoTransform::Rot90,
        GeoTransform::Rot180,
        GeoTransform::Rot270,
    ];

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    pub fn inverse(&self) -> GeoTransform {
        match self {
            GeoTransform::Rot90 => GeoTransform::Rot270,
            GeoTransform::Rot270 => GeoTransform::Rot90,
            other => *other,
        }
    }

    /// Apply to a `[C, H, W]` tensor. Rotations require square grids.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        let (c, h, w) = (t.c3(), t.h3(), t.w3());
        if matches!(self, GeoTransform::Rot90 | GeoTransform::Rot270) {
            assert_eq!(h, w, "rotations need square grids");
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match self {
                        GeoTransform::Identity => (y, x),
                        GeoTransform::HFlip => (y, w - 1 - x),
                        GeoTransform::VFlip => (h - 1 - y, x),
                        GeoTransform::Rot90 => (x, w - 1 - y),
                        GeoTransform::Rot180 => (h - 1 - y, w - 1 - x),
                        GeoTransform::Rot270 => (h - 1 - x, y),
                    };
                    out.set3(ch, y, x, t.at3(ch, sy, sx));
                }
            }
        }
        out
    }
}

/// Strong augmentations: intensity-only, so they never move pixels and the
/// geometric alignment between branches survives.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoParams {
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub gamma: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub blur_sigma: Option<f64>,
}

impl PhotoParams {
    /// Each op joins the subset independently with probability 1/2.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut pick = |lo: f64, hi: f64| {
            let on = rng.random_bool(0.5);
            let v = rng.random_range(lo..hi);
            on.then_some(v)
        };
        PhotoParams {
            brightness: pick(-0.2, 0.2),
            contrast: pick(0.8, 1.2),
            gamma: pick(0.7, 1.5),
            noise_sigma: pick(0.005, 0.05),
            blur_sigma: pick(0.2, 1.0),
        }
    }

    pub fn apply(&self, t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        let mut x = t.clone();
        if let Some(b) = self.brightness {
            x = x.map(|v| v + b);
        }
        if let Some(c) = self.contrast {
            x.scale_in_place(c);
        }
        if let Some(g) = self.gamma {
            x = x.map(|v| v.max(0.0).powf(g));
        }
        if let Some(sigma) = self.noise_sigma {
            let dist = Normal::new(0.0, sigma).expect("positive sigma");
            for v in x.data_mut() {
                *v += dist.sample(rng);
            }
        }
        if let Some(sigma) = self.blur_sigma {
            x = gaussian_blur(&x, sigma);
        }
        x
    }
}

/// Separable Gaussian blur with edge replication, radius `ceil(2*sigma)`.
fn gaussian_blur(t: &Tensor, sigma: f64) -> Tensor {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-0.5 * (d as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (c, h, w) = (t.c3(), t.h3(), t.w3());
    let mut mid = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * t.at3(ch, y, sx as usize);
                }
                mid.set3(ch, y, x, acc);
            }
        }
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * mid.at3(ch, sy as usize, x);
                }
                out.set3(ch, y, x, acc);
            }
        }
    }
    out
}

/// One sampled augmentation pair: a shared geometric transform plus the
/// student-only photometric stack.
#[derive(Clone, Debug)]
pub struct AugmentSpec {
    pub geometric: GeoTransform,
    pub photometric: PhotoParams,
}

impl AugmentSpec {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugmentSpec { geometric: GeoTransform::sample(rng), photometric: PhotoParams::sample(rng) }
    }
}

/// Pixelwise agreement: 1 where pseudo-label, global prediction, and
/// teacher prediction all exceed the threshold or all fall at/below it.
pub fn agreement_mask(y: &Tensor, pg: &Tensor, pt: &Tensor, threshold: f64) -> Result<Tensor> {
    if y.dims() != pg.dims() || y.dims() != pt.dims() {
        return Err(DynaError::Shape(format!(
            "agreement_mask: {:?} / {:?} / {:?}",
            y.dims(),
            pg.dims(),
            pt.dims()
        )));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(DynaError::Domain(format!("agreement threshold {threshold} outside (0,1)")));
    }
    let mut mask = Tensor::zeros(y.dims());
    for k in 0..y.len() {
        let (a, b, c) = (y.data()[k], pg.data()[k], pt.data()[k]);
        let all_above = a > threshold && b > threshold && c > threshold;
        let all_below = a <= threshold && b <= threshold && c <= threshold;
        if all_above || all_below {
            mask.data_mut()[k] = 1.0;
        }
    }
    Ok(mask)
}

fn check_mask_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(DynaError::Domain("mask must be binary".into()));
    }
    Ok(())
}

fn bce_value(p: &Tensor, t: &Tensor) -> f64 {
    let (lo, hi) = (1e-7, 1.0 - 1e-7);
    p.data()
        .iter()
        .zip(t.data())
        .map(|(&praw, &tv)| {
            let pc = praw.clamp(lo, hi);
            -(tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}

/// Student loss value: masked soft-target BCE against the global student,
/// the teacher, and the pseudo-label.
pub fn student_loss(
    ps: &Tensor,
    pg: &Tensor,
    pt: &Tensor,
    pseudo: &Tensor,
    mask: &Tensor,
) -> Result<f64> {
    for t in [pg, pt, pseudo, mask] {
        if t.dims() != ps.dims() {
            return Err(DynaError::Shape("student_loss: shape mismatch".into()));
        }
    }
    check_mask_binary(mask)?;
    let in_range =
        |t: &Tensor| t.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v));
    if ![ps, pg, pt, pseudo].into_iter().all(in_range) {
        return Err(DynaError::Domain("student_loss: probabilities outside [0, 1]".into()));
    }
    let m = |t: &Tensor| t.ew_binary(mask, |a, b| a * b).expect("checked shapes");
    let mps = m(ps);
    Ok(bce_value(&mps, &m(pg)) + bce_value(&mps, &m(pt)) + bce_value(&mps, &m(pseudo)))
}

/// Taped form of [`student_loss`]; targets and mask are gradient-constants.
pub fn student_loss_taped(
    tape: &mut GradTape,
    ps: Var,
    pg: &Tensor,
    pt: &Tensor,
    pseudo: &Tensor,
    mask: &Tensor,
) -> Result<Var> {
    check_mask_binary(mask)?;
    let masked_ps = tape.mul_const(ps, mask);
    let mut total: Option<Var> = None;
    for target in [pg, pt, pseudo] {
        let mt = target.ew_binary(mask, |a, b| a * b)?;
        let term = tape.bce_mean(masked_ps, &mt)?;
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("three loss terms"))
}

/// The three night models plus the iteration counter (starting at 1) and
/// the teacher's EMA rate.
#[derive(Clone, Debug)]
pub struct TrioModels {
    pub stu: SegModelState,
    pub glo: SegModelState,
    pub tea: SegModelState,
    pub r: u64,
    pub alpha: f64,
}

impl TrioModels {
    pub fn new(source: &SegModelState, alpha: f64) -> Self {
        TrioModels { stu: source.clone(), glo: source.clone(), tea: source.clone(), r: 1, alpha }
    }
}

#[derive(Clone, Debug)]
pub struct NightConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub threshold: f64,
    /// Binarize the day's pseudo-labels at 0.5 before masking and loss.
    pub binarize_pseudo: bool,
}

/// One record prepared for the night: the prompt-adapted image and its
/// (possibly binarized) pseudo-label.
pub struct NightItem {
    pub adapted: Tensor,
    pub pseudo: Tensor,
}

pub fn prepare_items(records: &[DayRecord], binarize: bool) -> Result<Vec<NightItem>> {
    records
        .iter()
        .map(|r| {
            let adapted = apply_prompt(&r.image, &r.prompt)?;
            let pseudo = if binarize {
                r.pseudo.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
            } else {
                r.pseudo.clone()
            };
            Ok(NightItem { adapted, pseudo })
        })
        .collect()
}

/// One optimization iteration over a batch of prepared records:
/// augment, forward all three models, mask, one SGD step on the student,
/// then the global-average and EMA model updates.
pub fn night_iteration(
    trio: &mut TrioModels,
    items: &[&NightItem],
    cfg: &NightConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if items.is_empty() {
        return Err(DynaError::Empty("night_iteration: empty batch".into()));
    }
    let mut strong = Vec::with_capacity(items.len());
    let mut weak = Vec::with_capacity(items.len());
    let mut pseudo = Vec::with_capacity(items.len());
    for item in items {
        let aug = AugmentSpec::sample(rng);
        let weak_img = aug.geometric.apply(&item.adapted);
        strong.push(aug.photometric.apply(&weak_img, rng));
        weak.push(weak_img);
        pseudo.push(aug.geometric.apply(&item.pseudo));
    }
    let strong_batch = Tensor::stack(&strong.iter().collect::<Vec<_>>())?;
    let weak_batch = Tensor::stack(&weak.iter().collect::<Vec<_>>())?;
    let pseudo_batch = Tensor::stack(&pseudo.iter().collect::<Vec<_>>())?;

    let (pg, _) = trio.glo.forward_eval(&weak_batch, &StatsMode::Running)?;
    let (pt, _) = trio.tea.forward_eval(&weak_batch, &StatsMode::Running)?;
    let mask = agreement_mask(&pseudo_batch, &pg, &pt, cfg.threshold)?;

    let mut tape = GradTape::new();
    let input = tape.leaf(strong_batch);
    let fw = trio.stu.forward(&mut tape, input, &StatsMode::Batch)?;
    trio.stu.update_running(&fw.trace, RUNNING_MOMENTUM);
    let loss = student_loss_taped(&mut tape, fw.probs, &pg, &pt, &pseudo_batch, &mask)?;
    let mut grads = tape.backward(loss)?;
    let g = trio.stu.collect_param_grads(&fw, &mut grads);
    let mut flat = trio.stu.flat_trainable();
    crate::optim::OptimState::sgd(cfg.lr).step(&mut flat, &g)?;
    trio.stu.set_flat_trainable(&flat);

    let r = trio.r as f64;
    trio.glo = SegModelState::weights_axpy(r / (r + 1.0), &trio.glo, 1.0 / (r + 1.0), &trio.stu)?;
    trio.tea = SegModelState::weights_axpy(trio.alpha, &trio.tea, 1.0 - trio.alpha, &trio.glo)?;
    trio.r += 1;
    Ok(())
}

/// Run the whole night: initialize the trio from the source model, train
/// `epochs` passes over the shuffled records, and return the teacher as
/// the next day's model.
pub fn run_night(
    source: &SegModelState,
    records: &[DayRecord],
    cfg: &NightConfig,
    seed: u64,
) -> Result<SegModelState> {
    use rand::seq::SliceRandom;

    if records.is_empty() {
        return Err(DynaError::Empty("run_night: no day records".into()));
    }
    let items = prepare_items(records, cfg.binarize_pseudo)?;
    let mut trio = TrioModels::new(source, cfg.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x417));
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&NightItem> = chunk.iter().map(|&i| &items[i]).collect();
            night_iteration(&mut trio, &batch, cfg, &mut rng)?;
        }
    }
    Ok(trio.tea)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::MemoryBank;
    use crate::day::{adapt_one, DayConfig, WarmupSchedule};
    use crate::synth::{gen_domain, DomainSpec};
    use crate::testutil::{rng, uniform_grid};
    use rand::Rng;

    fn night_cfg() -> NightConfig {
        NightConfig {
            epochs: 1,
            batch: 2,
            lr: 0.001,
            alpha: 0.995,
            threshold: 0.5,
            binarize_pseudo: false,
        }
    }

    fn some_records(n: usize, seed: u64) -> Vec<DayRecord> {
        let model = SegModelState::new(1, 1, seed);
        let mut bank = MemoryBank::new(40);
        let mut sched = WarmupSchedule::new(5.0);
        let cfg = DayConfig {
            prompt_lr: 0.05,
            beta: 0.05,
            support_size: 16,
            encoder_only_loss: false,
            infer_with_warmup: false,
            track_descent: false,
        };
        gen_domain(n, &DomainSpec { gamma: 0.8, ..DomainSpec::identity(seed) })
            .iter()
            .map(|s| adapt_one(&model, &mut bank, &mut sched, &s.image, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn geometric_transforms_invert_exactly() {
        let mut r = rng(81);
        let x = uniform_grid(&mut r, 2, 6, 6);
        for g in GeoTransform::ALL {
            let back = g.inverse().apply(&g.apply(&x));
            assert_eq!(back, x, "{g:?}");
        }
    }

    #[test]
    fn agreement_mask_truth_table() {
        // all 8 above/below combinations; 1 only for (>,>,>) and (<=,<=,<=)
        let t = 0.5;
        for bits in 0..8u8 {
            let v = |b: bool| if b { 0.8 } else { 0.2 };
            let y = Tensor::full(&[1, 1, 1], v(bits & 1 != 0));
            let pg = Tensor::full(&[1, 1, 1], v(bits & 2 != 0));
            let pt = Tensor::full(&[1, 1, 1], v(bits & 4 != 0));
            let mask = agreement_mask(&y, &pg, &pt, t).unwrap();
            let expect = if bits == 0b111 || bits == 0 { 1.0 } else { 0.0 };
            assert_eq!(mask.data()[0], expect, "bits {bits:03b}");
        }
    }

    #[test]
    fn agreement_mask_boundary_counts_as_below() {
        let at = Tensor::full(&[1, 1, 1], 0.5);
        let mask = agreement_mask(&at, &at, &at, 0.5).unwrap();
        assert_eq!(mask.data()[0], 1.0);
        let above = Tensor::full(&[1, 1, 1], 0.6);
        let mask = agreement_mask(&at, &above, &at, 0.5).unwrap();
        assert_eq!(mask.data()[0], 0.0);
    }

    #[test]
    fn agreement_mask_matches_bruteforce_on_random_maps() {
        let mut r = rng(82);
        let rand_probs = |r: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
            Tensor::from_vec(&[1, 8, 8], data).unwrap()
        };
        for _ in 0..10 {
            let (y, pg, pt) = (rand_probs(&mut r), rand_probs(&mut r), rand_probs(&mut r));
            let t = r.random_range(0.2..0.8);
            let mask = agreement_mask(&y, &pg, &pt, t).unwrap();
            for k in 0..64 {
                let (a, b, c) = (y.data()[k], pg.data()[k], pt.data()[k]);
                let expect = f64::from(
                    (a > t && b > t && c > t) || (a <= t && b <= t && c <= t),
                );
                assert_eq!(mask.data()[k], expect);
            }
        }
    }

    #[test]
    fn student_loss_fully_masked_is_constant_with_zero_grad() {
        let mut r = rng(83);
        let ps0 = uniform_grid(&mut r, 1, 4, 4).map(|v| 0.5 + 0.45 * v).unsqueeze0();
        let pg = Tensor::full(&[1, 1, 4, 4], 0.7);
        let pt = Tensor::full(&[1, 1, 4, 4], 0.3);
        let pseudo = Tensor::full(&[1, 1, 4, 4], 0.9);
        let mask = Tensor::zeros(&[1, 1, 4, 4]);

        let v = student_loss(&ps0, &pg, &pt, &pseudo, &mask).unwrap();
        // every term is BCE(0, 0): -ln(1 - 1e-7) per pixel
        let per = -(1.0f64 - 1e-7).ln();
        assert!((v - 3.0 * per).abs() < 1e-15);

        let mut tape = GradTape::new();
        let ps = tape.leaf(ps0);
        let loss = student_loss_taped(&mut tape, ps, &pg, &pt, &pseudo, &mask).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(ps).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn student_loss_at_half_is_three_ln_two() {
        let half = Tensor::full(&[1, 1, 4, 4], 0.5);
        let ones = Tensor::full(&[1, 1, 4, 4], 1.0);
        let v = student_loss(&half, &half, &half, &half, &ones).unwrap();
        assert!((v - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn student_loss_rejects_bad_inputs() {
        let p = Tensor::full(&[1, 1, 2, 2], 0.5);
        let bad = Tensor::full(&[1, 1, 2, 2], 1.5);
        let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert!(student_loss(&p, &bad, &p, &p, &ones).is_err());
        let nonbinary = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(student_loss(&p, &p, &p, &p, &nonbinary).is_err());
        let wrong = Tensor::full(&[1, 1, 2, 3], 0.5);
        assert!(student_loss(&p, &wrong, &p, &p, &ones).is_err());
    }

    #[test]
    fn taped_student_loss_matches_value() {
        let mut r = rng(84);
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f64> = (0..32).map(|_| r.random_range(0.05..0.95)).collect();
            Tensor::from_vec(&[2, 1, 4, 4], data).unwrap()
        };
        let (ps0, pg, pt, pseudo) = (mk(&mut r), mk(&mut r), mk(&mut r), mk(&mut r));
        let mask = agreement_mask(&pseudo, &pg, &pt, 0.5).unwrap();
        let plain = student_loss(&ps0, &pg, &pt, &pseudo, &mask).unwrap();
        let mut tape = GradTape::new();
        let ps = tape.leaf(ps0);
        let loss = student_loss_taped(&mut tape, ps, &pg, &pt, &pseudo, &mask).unwrap();
        assert!((tape.value(loss).scalar_value() - plain).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_freezes_the_teacher() {
        let records = some_records(3, 90);
        let source = SegModelState::new(1, 1, 90);
        let cfg = NightConfig { alpha: 1.0, epochs: 2, ..night_cfg() };
        let out = run_night(&source, &records, &cfg, 1).unwrap();
        assert_eq!(out, source);
    }

    #[test]
    fn zero_epochs_returns_source_bit_exactly() {
        let records = some_records(2, 91);
        let source = SegModelState::new(1, 1, 91);
        let cfg = NightConfig { epochs: 0, ..night_cfg() };
        let out = run_night(&source, &records, &cfg, 1).unwrap();
        assert_eq!(out, source);
    }

    #[test]
    fn empty_records_are_rejected() {
        let source = SegModelState::new(1, 1, 92);
        assert!(run_night(&source, &[], &night_cfg(), 1).is_err());
    }

    #[test]
    fn run_night_is_deterministic_and_freezes_prompts() {
        let records = some_records(4, 93);
        let prompts_before: Vec<_> = records.iter().map(|r| r.prompt.clone()).collect();
        let source = SegModelState::new(1, 1, 93);
        let a = run_night(&source, &records, &night_cfg(), 7).unwrap();
        let b = run_night(&source, &records, &night_cfg(), 7).unwrap();
        assert_eq!(a, b);
        let c = run_night(&source, &records, &night_cfg(), 8).unwrap();
        assert!(a != c, "different seeds should differ");
        for (before, after) in prompts_before.iter().zip(&records) {
            assert_eq!(before, &after.prompt);
        }
    }

    #[test]
    fn global_average_and_ema_match_closed_forms_over_short_run() {
        let records = some_records(4, 94);
        let items = prepare_items(&records, false).unwrap();
        let source = SegModelState::new(1, 1, 94);
        let cfg = night_cfg();
        let mut trio = TrioModels::new(&source, cfg.alpha);
        let mut rng = rng(95);

        let mut stu_snapshots = Vec::new();
        let mut glo_snapshots = Vec::new();
        for it in 0..6 {
            let batch: Vec<&NightItem> =
                items.iter().skip(it % 2).take(2).collect();
            night_iteration(&mut trio, &batch, &cfg, &mut rng).unwrap();
            stu_snapshots.push(trio.stu.flat_all());
            glo_snapshots.push(trio.glo.flat_all());
        }

        // running mean of {source, student snapshots}
        let f0 = source.flat_all();
        let n = stu_snapshots.len() as f64;
        let glo = trio.glo.flat_all();
        for k in 0..f0.len() {
            let mean = (f0[k] + stu_snapshots.iter().map(|s| s[k]).sum::<f64>()) / (n + 1.0);
            let rel = (glo[k] - mean).abs() / mean.abs().max(1e-12);
            assert!(rel < 1e-10, "global mean mismatch at {k}");
        }

        // EMA unrolling over the recorded global snapshots
        let tea = trio.tea.flat_all();
        let a = cfg.alpha;
        let steps = glo_snapshots.len();
        for k in 0..f0.len() {
            let mut expect = a.powi(steps as i32) * f0[k];
            for (j, glo_j) in glo_snapshots.iter().enumerate() {
                expect += (1.0 - a) * a.powi((steps - 1 - j) as i32) * glo_j[k];
            }
            let rel = (tea[k] - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-10, "EMA mismatch at {k}");
        }
    }

    #[test]
    fn student_weight_gradients_match_finite_differences() {
        // loss-level FD on a 16x16 toy, sampled coordinates
        let model = SegModelState::new(1, 1, 96);
        let mut r = rng(97);
        let x = uniform_grid(&mut r, 1, 16, 16).map(|v| 0.5 + 0.4 * v).unsqueeze0();
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<f64> = (0..256).map(|_| r.random_range(0.05..0.95)).collect();
            Tensor::from_vec(&[1, 1, 16, 16], data).unwrap()
        };
        let (pg, pt, pseudo) = (mk(&mut r), mk(&mut r), mk(&mut r));
        let mask = agreement_mask(&pseudo, &pg, &pt, 0.5).unwrap();

        let mut tape = GradTape::new();
        let input = tape.leaf(x.clone());
        let fw = model.forward(&mut tape, input, &StatsMode::Batch).unwrap();
        let loss = student_loss_taped(&mut tape, fw.probs, &pg, &pt, &pseudo, &mask).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let analytic = model.collect_param_grads(&fw, &mut grads);

        let flat0 = model.flat_trainable();
        let coords = crate::testutil::sample_coords(flat0.len(), 60);
        let mut eval = |flat: &[f64]| {
            let mut m = model.clone();
            m.set_flat_trainable(flat);
            let (ps, _) = m.forward_eval(&x, &StatsMode::Batch).unwrap();
            student_loss(&ps, &pg, &pt, &pseudo, &mask).unwrap()
        };
        let fd = crate::testutil::central_diff_grad(&mut eval, &flat0, 1e-5, &coords);
        let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        let err = crate::testutil::max_grad_rel_err(&picked, &fd);
        assert!(err < 1e-4, "student-loss weight gradient error {err}");
    }
}
