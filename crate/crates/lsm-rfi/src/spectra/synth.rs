//! Synthetic spectrogram generator.
//!
//! Produces HERA-like single-baseline magnitude spectrograms: a smooth
//! astrophysical background (sum of broad Gaussian blobs over a noise floor)
//! with interference injected from four parametric families — persistent
//! narrowband carriers, short narrowband bursts, single-time-step wideband
//! streaks, and periodically repeating bursts. The mask marks exactly the
//! cells an injected component painted.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectra::{RFIMask, Spectrogram};
use crate::util::{mix_seed, rng_from};

/// Relative weights of the four interference families. They must be
/// non-negative and either sum to 1 or be all zero (all zero = inject
/// nothing, useful for clean-background controls).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RfiMix {
    pub narrowband_persistent: f64,
    pub narrowband_burst: f64,
    pub wideband_transient: f64,
    pub periodic: f64,
}

impl Default for RfiMix {
    fn default() -> Self {
        RfiMix {
            narrowband_persistent: 0.25,
            narrowband_burst: 0.25,
            wideband_transient: 0.25,
            periodic: 0.25,
        }
    }
}

impl RfiMix {
    pub fn none() -> Self {
        RfiMix {
            narrowband_persistent: 0.0,
            narrowband_burst: 0.0,
            wideband_transient: 0.0,
            periodic: 0.0,
        }
    }

    fn weights(&self) -> [f64; 4] {
        [
            self.narrowband_persistent,
            self.narrowband_burst,
            self.wideband_transient,
            self.periodic,
        ]
    }

    fn sum(&self) -> f64 {
        self.weights().iter().sum()
    }
}

/// Smooth-background shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackgroundConfig {
    /// Number of broad Gaussian blobs added over the floor.
    pub blob_count: usize,
    /// Blob width scale as a fraction of the spectrogram edge.
    pub blob_scale: f64,
    /// Baseline magnitude level everywhere.
    pub noise_floor: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            blob_count: 6,
            blob_scale: 0.25,
            noise_floor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_spectrograms: usize,
    pub size: usize,
    /// Target fraction of flagged cells per spectrogram, in (0,1).
    pub target_contamination: f64,
    pub rfi_mix: RfiMix,
    pub background: BackgroundConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_spectrograms: 1,
            size: 512,
            target_contamination: 0.03,
            rfi_mix: RfiMix::default(),
            background: BackgroundConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_spectrograms == 0 {
            return Err(Error::Config("n_spectrograms must be ≥ 1".into()));
        }
        if self.size == 0 {
            return Err(Error::Config("size must be ≥ 1".into()));
        }
        if !(self.target_contamination > 0.0 && self.target_contamination < 1.0) {
            return Err(Error::Config(format!(
                "target_contamination must be in (0,1), got {}",
                self.target_contamination
            )));
        }
        let w = self.rfi_mix.weights();
        if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Config("rfi_mix weights must be finite and ≥ 0".into()));
        }
        let sum = self.rfi_mix.sum();
        if sum != 0.0 && (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "rfi_mix weights must sum to 1 (or all be 0), got {sum}"
            )));
        }
        if self.background.blob_scale <= 0.0 || self.background.noise_floor <= 0.0 {
            return Err(Error::Config("background scale and floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Generate `config.n_spectrograms` spectrogram/mask pairs. Deterministic in
/// `config.seed`: each spectrogram gets its own RNG stream derived from
/// (seed, index), so the result is identical no matter how the work is
/// scheduled across threads.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<(Spectrogram, RFIMask)>> {
    config.validate()?;
    (0..config.n_spectrograms)
        .into_par_iter()
        .map(|i| generate_one(config, i as u64))
        .collect()
}

fn generate_one(cfg: &SynthConfig, index: u64) -> Result<(Spectrogram, RFIMask)> {
    let mut rng = rng_from(mix_seed(cfg.seed, index));
    let n = cfg.size;
    let mut data = background(cfg, &mut rng);
    let rms = (data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / data.len() as f64).sqrt();

    let mut mask = Array2::<bool>::from_elem((n, n), false);
    if cfg.rfi_mix.sum() > 0.0 {
        let budget = ((n * n) as f64 * cfg.target_contamination).round() as usize;
        let mut painter = Painter {
            data: &mut data,
            mask: &mut mask,
            remaining: budget,
            amp_jitter: Normal::new(1.0, 0.1).unwrap(),
        };
        let mut attempts = 0usize;
        while painter.remaining > 0 && attempts < 10_000 {
            attempts += 1;
            match pick_family(&cfg.rfi_mix, &mut rng) {
                Family::NarrowbandPersistent => paint_narrowband(&mut painter, &mut rng, rms, n * 3 / 5, n),
                Family::NarrowbandBurst => paint_narrowband(&mut painter, &mut rng, rms, 3, 20),
                Family::WidebandTransient => paint_wideband(&mut painter, &mut rng, rms),
                Family::Periodic => paint_periodic(&mut painter, &mut rng, rms),
            }
        }
    }
    Ok((Spectrogram::new(data)?, RFIMask { flags: mask }))
}

/// Smooth field: noise floor + broad Gaussian blobs + small positive noise.
fn background(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let n = cfg.size;
    let floor = cfg.background.noise_floor;
    let mut field = Array2::<f64>::from_elem((n, n), floor);
    for _ in 0..cfg.background.blob_count {
        let ct = rng.random_range(0.0..n as f64);
        let cf = rng.random_range(0.0..n as f64);
        let sigma = cfg.background.blob_scale * n as f64 * rng.random_range(0.3..1.0);
        let amp = floor * rng.random_range(0.5..2.0);
        // A 2-D Gaussian is the outer product of two 1-D profiles.
        let prof = |c: f64| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let d = i as f64 - c;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        };
        let row = prof(ct);
        let col = prof(cf);
        for t in 0..n {
            if row[t] < 1e-12 {
                continue;
            }
            for f in 0..n {
                field[[t, f]] += amp * row[t] * col[f];
            }
        }
    }
    let noise = Normal::new(0.0, 0.05 * floor).unwrap();
    Array2::from_shape_fn((n, n), |(t, f)| {
        (field[[t, f]] + noise.sample(rng)).max(0.0) as f32
    })
}

enum Family {
    NarrowbandPersistent,
    NarrowbandBurst,
    WidebandTransient,
    Periodic,
}

fn pick_family(mix: &RfiMix, rng: &mut ChaCha8Rng) -> Family {
    let w = mix.weights();
    let total = mix.sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return match i {
                0 => Family::NarrowbandPersistent,
                1 => Family::NarrowbandBurst,
                2 => Family::WidebandTransient,
                _ => Family::Periodic,
            };
        }
        u -= wi;
    }
    Family::Periodic
}

/// Paints cells and tracks the remaining flag budget so the achieved
/// contamination lands on target instead of overshooting.
struct Painter<'a> {
    data: &'a mut Array2<f32>,
    mask: &'a mut Array2<bool>,
    remaining: usize,
    amp_jitter: Normal<f64>,
}

impl Painter<'_> {
    fn full(&self) -> bool {
        self.remaining == 0
    }

    fn cell(&mut self, t: usize, f: usize, amp: f64, rng: &mut ChaCha8Rng) {
        if self.remaining == 0 {
            return;
        }
        let jitter = self.amp_jitter.sample(rng).max(0.25);
        self.data[[t, f]] += (amp * jitter) as f32;
        if !self.mask[[t, f]] {
            self.mask[[t, f]] = true;
            self.remaining -= 1;
        }
    }
}

fn draw_amp(rng: &mut ChaCha8Rng, rms: f64) -> f64 {
    rng.random_range(2.0..10.0) * rms
}

/// Vertical line in time at one frequency: both the persistent carrier
/// (long) and the burst (short) are this shape with different length ranges.
fn paint_narrowband(p: &mut Painter, rng: &mut ChaCha8Rng, rms: f64, min_len: usize, max_len: usize) {
    let (t_total, f_total) = p.data.dim();
    let width = rng.random_range(1..=2usize).min(f_total);
    let min_len = min_len.clamp(1, t_total);
    let max_len = max_len.clamp(min_len, t_total);
    let natural = rng.random_range(min_len..=max_len);
    let len = natural.min((p.remaining / width).max(1)).max(1);
    let t0 = rng.random_range(0..=t_total - len);
    let f0 = rng.random_range(0..=f_total - width);
    let amp = draw_amp(rng, rms);
    'outer: for t in t0..t0 + len {
        for f in f0..f0 + width {
            if p.full() {
                break 'outer;
            }
            p.cell(t, f, amp, rng);
        }
    }
}

/// Horizontal streak: one or two time steps covering a wide frequency span.
fn paint_wideband(p: &mut Painter, rng: &mut ChaCha8Rng, rms: f64) {
    let (t_total, f_total) = p.data.dim();
    let height = rng.random_range(1..=2usize).min(t_total);
    let natural = rng.random_range(f_total / 2..=f_total).max(1);
    let span = natural.min((p.remaining / height).max(1)).max(1);
    let t0 = rng.random_range(0..=t_total - height);
    let f0 = rng.random_range(0..=f_total - span);
    let amp = draw_amp(rng, rms);
    'outer: for t in t0..t0 + height {
        for f in f0..f0 + span {
            if p.full() {
                break 'outer;
            }
            p.cell(t, f, amp, rng);
        }
    }
}

/// Bursts of a few time steps repeating with a fixed period at one frequency.
fn paint_periodic(p: &mut Painter, rng: &mut ChaCha8Rng, rms: f64) {
    let (t_total, f_total) = p.data.dim();
    let width = rng.random_range(1..=2usize).min(f_total);
    let period = rng.random_range(20..=60usize).min(t_total.max(1));
    let burst_len = rng.random_range(2..=6usize).min(period);
    let phase = rng.random_range(0..period);
    let f0 = rng.random_range(0..=f_total - width);
    let amp = draw_amp(rng, rms);
    let mut t = phase;
    'outer: while t < t_total {
        for dt in 0..burst_len.min(t_total - t) {
            for f in f0..f0 + width {
                if p.full() {
                    break 'outer;
                }
                p.cell(t + dt, f, amp, rng);
            }
        }
        t += period;
    }
}
