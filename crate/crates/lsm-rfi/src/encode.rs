//! Input encoders and output decoders.
//!
//! Encoders expand each patch time step into `e` exposure steps of per-channel
//! drive (binary spikes or real currents); decoders compress readout activity
//! over the same window back to one score per original cell. Frequency
//! channels map to input channels, so a 32×32 patch becomes a 32-channel
//! sequence of 32·e steps.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::Patch;

/// Binary spike raster, axes [time × exposure × channel].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTrain {
    pub spikes: Array3<u8>,
}

impl SpikeTrain {
    /// Channels that fire at exposure slot (t, j).
    pub fn active(&self, t: usize, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.spikes
            .index_axis(ndarray::Axis(0), t)
            .index_axis_move(ndarray::Axis(0), j)
            .into_iter()
            .enumerate()
            .filter(|(_, &s)| s != 0)
            .map(|(c, _)| c)
            .collect::<Vec<_>>()
            .into_iter()
    }
}

/// Real driving currents in [0,1], axes [time × exposure × channel].
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentTrain {
    pub currents: Array3<f32>,
}

/// Per-cell scores in [0,1], axes [time × channel] — same shape as the patch
/// the drive was encoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Array2<f32>,
}

/// What actually drives the liquid: spikes for latency/rate encodings,
/// currents for direct encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Drive {
    Spikes(SpikeTrain),
    Currents(CurrentTrain),
}

impl Drive {
    pub fn dim(&self) -> (usize, usize, usize) {
        match self {
            Drive::Spikes(s) => s.spikes.dim(),
            Drive::Currents(c) => c.currents.dim(),
        }
    }

    pub fn time_steps(&self) -> usize {
        self.dim().0
    }

    pub fn exposure(&self) -> usize {
        self.dim().1
    }

    pub fn channels(&self) -> usize {
        self.dim().2
    }

    /// Fraction of nonzero drive entries; the input-gain rule scales by it.
    pub fn density(&self) -> f64 {
        let total = self.dim().0 * self.dim().1 * self.dim().2;
        if total == 0 {
            return 0.0;
        }
        let nz = match self {
            Drive::Spikes(s) => s.spikes.iter().filter(|&&v| v != 0).count(),
            Drive::Currents(c) => c.currents.iter().filter(|&&v| v != 0.0).count(),
        };
        nz as f64 / total as f64
    }
}

/// The three input encodings of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Latency,
    Rate,
    Direct,
}

impl Encoding {
    pub const ALL: [Encoding; 3] = [Encoding::Latency, Encoding::Rate, Encoding::Direct];

    pub fn name(&self) -> &'static str {
        match self {
            Encoding::Latency => "latency",
            Encoding::Rate => "rate",
            Encoding::Direct => "direct",
        }
    }

    pub fn encode(&self, p: &Patch, e: usize) -> Result<Drive> {
        match self {
            Encoding::Latency => Ok(Drive::Spikes(encode_latency(p, e)?)),
            Encoding::Rate => Ok(Drive::Spikes(encode_rate(p, e)?)),
            Encoding::Direct => Ok(Drive::Currents(encode_direct(p, e)?)),
        }
    }
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latency" => Ok(Encoding::Latency),
            "rate" => Ok(Encoding::Rate),
            "direct" => Ok(Encoding::Direct),
            other => Err(Error::Config(format!(
                "unknown encoding {other:?}, expected latency|rate|direct"
            ))),
        }
    }
}

fn check_encode_args(p: &Patch, e: usize) -> Result<(usize, usize)> {
    if e == 0 {
        return Err(Error::Config("exposure must be ≥ 1".into()));
    }
    if let Some(bad) = p.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("encode: patch value {bad} outside [0,1]")));
    }
    Ok(p.data.dim())
}

/// Latency code: each cell fires exactly once, earlier for larger values —
/// at exposure step round((1−v)·(e−1)) — and not at all for v = 0.
pub fn encode_latency(p: &Patch, e: usize) -> Result<SpikeTrain> {
    let (t_total, channels) = check_encode_args(p, e)?;
    let mut spikes = Array3::<u8>::zeros((t_total, e, channels));
    for t in 0..t_total {
        for c in 0..channels {
            let v = p.data[[t, c]] as f64;
            if v > 0.0 {
                let j = ((1.0 - v) * (e as f64 - 1.0)).round() as usize;
                spikes[[t, j, c]] = 1;
            }
        }
    }
    Ok(SpikeTrain { spikes })
}

/// Deterministic rate code: n = round(v·e) spikes at the n most evenly
/// spaced of the e slots (slot j fires iff ⌊(j+1)n/e⌋ > ⌊jn/e⌋).
pub fn encode_rate(p: &Patch, e: usize) -> Result<SpikeTrain> {
    let (t_total, channels) = check_encode_args(p, e)?;
    let mut spikes = Array3::<u8>::zeros((t_total, e, channels));
    for t in 0..t_total {
        for c in 0..channels {
            let v = p.data[[t, c]] as f64;
            let n = (v * e as f64).round() as usize;
            if n == 0 {
                continue;
            }
            for j in 0..e {
                if (j + 1) * n / e > j * n / e {
                    spikes[[t, j, c]] = 1;
                }
            }
        }
    }
    Ok(SpikeTrain { spikes })
}

/// Direct encoding: the cell value itself is the driving current, repeated
/// for every exposure step.
pub fn encode_direct(p: &Patch, e: usize) -> Result<CurrentTrain> {
    let (t_total, channels) = check_encode_args(p, e)?;
    let currents = Array3::from_shape_fn((t_total, e, channels), |(t, _, c)| p.data[[t, c]]);
    Ok(CurrentTrain { currents })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let ex = x.exp();
        ex / (1.0 + ex)
    }
}

/// Rate decoding: mean readout pre-activation over each exposure window,
/// squashed through a sigmoid. Used for training under every encoding.
pub fn decode_rate(readout: &Array3<f64>) -> Result<ScoreMap> {
    let (t_total, e, channels) = readout.dim();
    if e == 0 {
        return Err(Error::Config("exposure axis must be ≥ 1".into()));
    }
    if readout.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite readout pre-activation".into()));
    }
    let mut scores = Array2::<f32>::zeros((t_total, channels));
    for t in 0..t_total {
        for c in 0..channels {
            let mean = (0..e).map(|j| readout[[t, j, c]]).sum::<f64>() / e as f64;
            scores[[t, c]] = sigmoid(mean) as f32;
        }
    }
    Ok(ScoreMap { scores })
}

/// Latency decoding: 1 − (first spike step)/(e−1), or 0 if the window is
/// silent. Evaluation-only; training always goes through [`decode_rate`].
pub fn decode_latency(spikes_out: &SpikeTrain) -> ScoreMap {
    let (t_total, e, channels) = spikes_out.spikes.dim();
    let denom = (e.max(2) - 1) as f64; // max(e−1, 1)
    let mut scores = Array2::<f32>::zeros((t_total, channels));
    for t in 0..t_total {
        for c in 0..channels {
            let first = (0..e).find(|&j| spikes_out.spikes[[t, j, c]] != 0);
            scores[[t, c]] = match first {
                Some(j) => (1.0 - j as f64 / denom) as f32,
                None => 0.0,
            };
        }
    }
    ScoreMap { scores }
}

/// Interpret readout pre-activations as output spikes (spike ⇔ value > 0),
/// the front half of latency decoding.
pub fn threshold_to_spikes(readout: &Array3<f64>) -> SpikeTrain {
    SpikeTrain {
        spikes: readout.mapv(|v| u8::from(v > 0.0)),
    }
}
