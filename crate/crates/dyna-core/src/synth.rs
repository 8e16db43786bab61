//! Deterministic synthetic segmentation benchmark: a source domain of
//! soft-edged ellipses on textured backgrounds, plus parameterized shifted
//! target domains. Masks depend only on (seed, index), never on the shift,
//! so every domain shares ground truth with its source counterpart.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DynaError, Result};
use crate::fft::{fft2_centered, ifft2_real_part};
use crate::seeds::mix3;
use crate::tensor::Tensor;

pub const IMG_SIZE: usize = 64;
/// Side of the centered spectrum block scaled by `lowfreq_gain`.
pub const LOWFREQ_BLOCK: usize = 5;

const TAG_BASE: u64 = 0xBA5E;
const TAG_NOISE: u64 = 0x0153;

/// Intensity/spectral shift applied on top of the base renderer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub gamma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub lowfreq_gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn identity(seed: u64) -> Self {
        DomainSpec {
            gamma: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            lowfreq_gain: 1.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0
            && self.brightness == 0.0
            && self.contrast == 1.0
            && self.lowfreq_gain == 1.0
            && self.noise_sigma == 0.0
    }
}

/// One synthetic case: image in [0, 1] and its binary mask, both `[1, 64, 64]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub image: Tensor,
    pub mask: Tensor,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f64,
    softness: f64,
}

impl Ellipse {
    /// Normalized quadratic form; <= 1 inside the ellipse.
    fn q(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }
}

fn sample_ellipses(rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let n = IMG_SIZE as f64;
    let count = rng.random_range(1..=3usize);
    (0..count)
        .map(|_| Ellipse {
            cy: rng.random_range(0.25 * n..0.75 * n),
            cx: rng.random_range(0.25 * n..0.75 * n),
            a: rng.random_range(5.0..14.0),
            b: rng.random_range(5.0..14.0),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(0.62..0.88),
            softness: rng.random_range(0.05..0.12),
        })
        .collect()
}

fn coverage(ellipses: &[Ellipse]) -> f64 {
    let mut hits = 0usize;
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            if ellipses.iter().any(|e| e.q(y as f64, x as f64) <= 1.0) {
                hits += 1;
            }
        }
    }
    hits as f64 / (IMG_SIZE * IMG_SIZE) as f64
}

/// Render the unshifted sample `(seed, idx)`: textured background plus
/// 1-3 soft-edged ellipses with foreground fraction in [0.05, 0.40].
fn render_base(seed: u64, idx: u64) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, TAG_BASE, idx));
    let n = IMG_SIZE;
    let nf = n as f64;

    // background: level + gradient + two low-frequency waves + fine noise
    let level = rng.random_range(0.18..0.32);
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.01..0.04),
                rng.random_range(1.0..4.0),
                rng.random_range(1.0..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let mut img = Tensor::zeros(&[1, n, n]);
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64 / nf, x as f64 / nf);
            let mut v = level + gx * (xf - 0.5) + gy * (yf - 0.5);
            for &(amp, fy, fx, phase) in &waves {
                v += amp * (std::f64::consts::TAU * (fy * yf + fx * xf) + phase).cos();
            }
            img.set3(0, y, x, v);
        }
    }
    for k in 0..img.len() {
        img.data_mut()[k] += rng.random_range(-0.015..0.015);
    }

    // ellipse geometry, rejected until the foreground fraction lands in range
    let mut ellipses = sample_ellipses(&mut rng);
    let mut tries = 0;
    while !(0.05..=0.40).contains(&coverage(&ellipses)) {
        tries += 1;
        if tries > 64 {
            ellipses = vec![Ellipse {
                cy: nf / 2.0,
                cx: nf / 2.0,
                a: 11.0,
                b: 11.0,
                theta: 0.0,
                value: 0.75,
                softness: 0.08,
            }];
            break;
        }
        ellipses = sample_ellipses(&mut rng);
    }

    let mut mask = Tensor::zeros(&[1, n, n]);
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            let mut alpha = 0.0f64;
            let mut fg_value = 0.0;
            let mut inside = false;
            for e in &ellipses {
                let q = e.q(yf, xf);
                let a = 1.0 / (1.0 + ((q - 1.0) / e.softness).exp());
                if a > alpha {
                    alpha = a;
                    fg_value = e.value;
                }
                inside |= q <= 1.0;
            }
            let bg = img.at3(0, y, x);
            img.set3(0, y, x, (bg * (1.0 - alpha) + fg_value * alpha).clamp(0.0, 1.0));
            if inside {
                mask.set3(0, y, x, 1.0);
            }
        }
    }
    LabeledSample { image: img, mask }
}

/// Shift chain: contrast -> brightness -> gamma -> low-frequency spectral
/// gain -> additive noise -> clamp. Ops at identity parameters are skipped,
/// so the identity spec reproduces the base renderer bit-exactly.
fn apply_shift(spec: &DomainSpec, image: &Tensor, idx: u64) -> Tensor {
    if spec.is_identity() {
        return image.clone();
    }
    let mut x = image.clone();
    if spec.contrast != 1.0 {
        x.scale_in_place(spec.contrast);
    }
    if spec.brightness != 0.0 {
        let b = spec.brightness;
        x = x.map(|v| v + b);
    }
    if spec.gamma != 1.0 {
        let g = spec.gamma;
        x = x.map(|v| v.max(0.0).powf(g));
    }
    if spec.lowfreq_gain != 1.0 {
        let mut z = fft2_centered(&x).expect("finite image");
        let (h, w) = (z.h, z.w);
        let half = LOWFREQ_BLOCK / 2;
        for dy in 0..LOWFREQ_BLOCK {
            for dx in 0..LOWFREQ_BLOCK {
                let k = z.idx(0, h / 2 - half + dy, w / 2 - half + dx);
                z.re[k] *= spec.lowfreq_gain;
                z.im[k] *= spec.lowfreq_gain;
            }
        }
        x = ifft2_real_part(&z);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(spec.seed, TAG_NOISE, idx));
        let dist = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
        for v in x.data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Render `n` samples of the domain. Geometry and masks depend only on
/// `(spec.seed, index)`; the shift chain touches images alone.
pub fn gen_domain(n: usize, spec: &DomainSpec) -> Vec<LabeledSample> {
    (0..n as u64)
        .map(|idx| {
            let base = render_base(spec.seed, idx);
            LabeledSample { image: apply_shift(spec, &base.image, idx), mask: base.mask }
        })
        .collect()
}

/// The full desk-scale benchmark: identity source (train/val split) and two
/// shifted target streams in seeded arrival order.
pub struct BenchmarkSuite {
    pub source_train: Vec<LabeledSample>,
    pub source_val: Vec<LabeledSample>,
    pub target_a: Vec<LabeledSample>,
    pub target_b: Vec<LabeledSample>,
    pub spec_a: DomainSpec,
    pub spec_b: DomainSpec,
}

const TAG_SRC: u64 = 0x51C;
const TAG_TGT: u64 = 0x717;
const TAG_ORDER_A: u64 = 0x0DA;
const TAG_ORDER_B: u64 = 0x0DB;

pub fn benchmark_suite(seed: u64) -> BenchmarkSuite {
    use rand::seq::SliceRandom;

    let src_spec = DomainSpec::identity(mix3(seed, TAG_SRC, 0));
    let tgt_seed = mix3(seed, TAG_TGT, 0);
    let spec_a = DomainSpec {
        gamma: 1.4,
        brightness: 0.1,
        contrast: 1.0,
        lowfreq_gain: 1.5,
        noise_sigma: 0.0,
        seed: tgt_seed,
    };
    // Strong but non-saturating: darkening keeps the whole chain inside
    // [0, 1], so the low-frequency shift stays invertible by a prompt.
    let spec_b = DomainSpec {
        gamma: 2.0,
        brightness: 0.0,
        contrast: 0.7,
        lowfreq_gain: 1.9,
        noise_sigma: 0.02,
        seed: tgt_seed,
    };

    let mut source = gen_domain(250, &src_spec);
    let source_val = source.split_off(200);
    let mut target_a = gen_domain(100, &spec_a);
    let mut target_b = gen_domain(100, &spec_b);
    target_a.shuffle(&mut ChaCha8Rng::seed_from_u64(mix3(seed, TAG_ORDER_A, 0)));
    target_b.shuffle(&mut ChaCha8Rng::seed_from_u64(mix3(seed, TAG_ORDER_B, 0)));

    BenchmarkSuite { source_train: source, source_val, target_a, target_b, spec_a, spec_b }
}

// ── Sample dump format ──────────────────────────────────────────────
// Per-sample file: magic "DSMP", H u32 LE, W u32 LE, image f64 LE, mask u8.

const SAMPLE_MAGIC: &[u8; 4] = b"DSMP";

pub fn save_samples(dir: &Path, samples: &[LabeledSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.image.h3(), s.image.w3());
        let mut buf = Vec::with_capacity(12 + h * w * 9);
        buf.extend_from_slice(SAMPLE_MAGIC);
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in s.mask.data() {
            buf.push(if *v > 0.5 { 1 } else { 0 });
        }
        fs::write(dir.join(format!("sample_{i:04}.dsmp")), buf)?;
    }
    Ok(())
}

pub fn load_samples(dir: &Path) -> Result<Vec<LabeledSample>> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "dsmp"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for path in names {
        let mut f = fs::File::open(&path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != SAMPLE_MAGIC {
            return Err(DynaError::Format(format!("{}: bad magic", path.display())));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        let h = u32::from_le_bytes(word) as usize;
        f.read_exact(&mut word)?;
        let w = u32::from_le_bytes(word) as usize;
        let mut img = vec![0.0; h * w];
        let mut fbuf = [0u8; 8];
        for v in img.iter_mut() {
            f.read_exact(&mut fbuf)?;
            *v = f64::from_le_bytes(fbuf);
        }
        let mut mbuf = vec![0u8; h * w];
        f.read_exact(&mut mbuf)?;
        out.push(LabeledSample {
            image: Tensor::from_vec(&[1, h, w], img)?,
            mask: Tensor::from_vec(&[1, h, w], mbuf.iter().map(|&b| f64::from(b)).collect())?,
        });
    }
    Ok(out)
}

impl LabeledSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_spec_is_deterministic_and_matches_renderer() {
        let spec = DomainSpec::identity(42);
        let a = gen_domain(5, &spec);
        let b = gen_domain(5, &spec);
        assert_eq!(a, b);
        for (i, s) in a.iter().enumerate() {
            let base = render_base(42, i as u64);
            assert_eq!(s.image, base.image);
            assert_eq!(s.mask, base.mask);
        }
    }

    #[test]
    fn masks_are_shift_invariant() {
        let ident = DomainSpec::identity(7);
        let shifted = DomainSpec { gamma: 0.6, contrast: 1.3, lowfreq_gain: 2.0, noise_sigma: 0.02, ..ident };
        let a = gen_domain(6, &ident);
        let b = gen_domain(6, &shifted);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.mask, sb.mask);
            assert!(sa.image != sb.image, "shift should move the image");
        }
    }

    #[test]
    fn foreground_fraction_in_range() {
        for s in gen_domain(40, &DomainSpec::identity(3)) {
            let f = s.foreground_fraction();
            assert!((0.05..=0.40).contains(&f), "fraction {f}");
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn benchmark_sizes_and_order_determinism() {
        let s1 = benchmark_suite(9);
        let s2 = benchmark_suite(9);
        assert_eq!(s1.source_train.len(), 200);
        assert_eq!(s1.source_val.len(), 50);
        assert_eq!(s1.target_a.len(), 100);
        assert_eq!(s1.target_b.len(), 100);
        assert_eq!(s1.target_b, s2.target_b);
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_domain(3, &DomainSpec::identity(5));
        save_samples(dir.path(), &samples).unwrap();
        let loaded = load_samples(dir.path()).unwrap();
        assert_eq!(samples.len(), loaded.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("sample_0000.dsmp"), b"NOPE....").unwrap();
        assert!(load_samples(dir.path()).is_err());
    }
}
