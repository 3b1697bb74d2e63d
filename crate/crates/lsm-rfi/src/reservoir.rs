//! The frozen liquid: construction and simulation of a recurrent network of
//! second-order leaky integrate-and-fire neurons.
//!
//! Build once from a seed, then only ever run forward. Per step, in this
//! pinned order:
//!
//! 1. `i_syn += w_inᵀ·input + w_recᵀ·s_prev`   (accumulate before decay)
//! 2. `i_syn *= exp(−dt/τ_syn)`
//! 3. `v_mem *= exp(−dt/τ_mem)`
//! 4. `v_mem += i_syn + b + σ·ζ`               (ζ i.i.d. standard normal)
//! 5. spike where `v_mem ≥ θ`
//! 6. `v_mem −= θ` where spiked                (reset by subtraction)
//!
//! Recurrent drive uses the previous step's spikes (synchronous update).
//! Weights are quantized to f32 at build time so serialization round-trips
//! bit-exactly; all state arithmetic runs in f64.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{ByteReader, ByteWriter};
use crate::encode::Drive;
use crate::error::{Error, Result};
use crate::util::{atomic_write, rng_from, sha256_hex};

const MAGIC: &[u8] = b"LSMRES1\0";

/// Default firing threshold θ.
pub const DEFAULT_THRESHOLD: f64 = 1.0;
/// Default integration step in seconds.
pub const DEFAULT_DT: f64 = 1e-3;
/// Default spectral radius the recurrent weights are rescaled to.
///
/// Calibrated, not theoretical. The classical echo-state heuristic (ρ just
/// under 1) assumes weights with zero mean; here rows are sign-assigned
/// 80/20 excitatory/inhibitory with equal magnitudes, so the mean column
/// drive is strongly positive and anything much above ρ ≈ 0.3 self-ignites:
/// once most neurons fire, recurrent input alone keeps the whole liquid at
/// saturation regardless of the stimulus, and the readout sees a constant.
/// ρ = 0.1 keeps the liquid input-driven while leaving enough recurrence
/// for state to carry across steps.
pub const DEFAULT_RHO: f64 = 0.1;
/// Input gain numerator: nonzero input weights are uniform on
/// [0, INPUT_GAIN/√(s·C_in)), so the expected total drive to a neuron from a
/// full-scale input column is INPUT_GAIN/2·√(s·C_in) ≈ a few thresholds —
/// enough to fire within one exposure window, not enough to pin every
/// neuron at its maximum rate. Calibrated on the synthetic corpus jointly
/// with [`DEFAULT_RHO`].
pub const INPUT_GAIN: f64 = 2.5;
/// Time constants are drawn uniformly from this range (seconds).
pub const TAU_RANGE: (f64, f64) = (0.001, 0.01);

/// Per-neuron time constants and bias plus the shared scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronParams {
    pub tau_syn: Vec<f32>,
    pub tau_mem: Vec<f32>,
    pub bias: Vec<f32>,
    pub threshold: f64,
    pub dt: f64,
    pub noise_sigma: f64,
}

impl NeuronParams {
    fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [("tau_syn", &self.tau_syn), ("tau_mem", &self.tau_mem), ("bias", &self.bias)] {
            if v.len() != n {
                return Err(Error::Config(format!("{name} has {} entries, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        if self.tau_syn.iter().chain(&self.tau_mem).any(|&t| t <= 0.0) {
            return Err(Error::Config("time constants must be > 0".into()));
        }
        if !(self.dt > 0.0) || !(self.threshold > 0.0) || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "need dt > 0, θ > 0, σ ≥ 0; got dt={} θ={} σ={}",
                self.dt, self.threshold, self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Per-neuron synaptic decay factor exp(−dt/τ_syn).
    pub fn decay_syn(&self) -> Vec<f64> {
        self.tau_syn.iter().map(|&t| (-self.dt / t as f64).exp()).collect()
    }

    /// Per-neuron membrane decay factor exp(−dt/τ_mem).
    pub fn decay_mem(&self) -> Vec<f64> {
        self.tau_mem.iter().map(|&t| (-self.dt / t as f64).exp()).collect()
    }
}

/// A built liquid. Immutable in use; the only mutable thing downstream is
/// the readout head.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    pub c_in: usize,
    /// Input weights, [c_in × n], sparsified and gain-scaled.
    pub w_in: Array2<f32>,
    /// Recurrent weights, [n × n]; row i holds the outgoing weights of
    /// neuron i, every entry carrying ei_sign[i] (or zero).
    pub w_rec: Array2<f32>,
    /// +1 excitatory, −1 inhibitory; exactly round(0.8·n) are +1.
    pub ei_sign: Vec<i8>,
    pub params: NeuronParams,
    /// Spectral radius |w_rec| was rescaled to at build time.
    pub rho: f64,
    /// Build seed. 0 for reservoirs loaded from disk: the file format does
    /// not record the seed, and nothing downstream needs it.
    pub seed: u64,
}

impl Reservoir {
    pub fn n(&self) -> usize {
        self.ei_sign.len()
    }

    pub fn n_excitatory(&self) -> usize {
        self.ei_sign.iter().filter(|&&s| s > 0).count()
    }

    /// Sign structure, self-connection, and E/I-count invariants. Run after
    /// build and after every deserialization.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.n();
        if self.w_rec.dim() != (n, n) || self.w_in.dim() != (self.c_in, n) {
            return Err(Error::Data(format!(
                "inconsistent reservoir shapes: w_in {:?}, w_rec {:?}, n {n}",
                self.w_in.dim(),
                self.w_rec.dim()
            )));
        }
        if self.ei_sign.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Data("ei_sign entries must be ±1".into()));
        }
        let expect_exc = (0.8 * n as f64).round() as usize;
        if self.n_excitatory() != expect_exc {
            return Err(Error::Data(format!(
                "expected {expect_exc} excitatory neurons for n={n}, found {}",
                self.n_excitatory()
            )));
        }
        for i in 0..n {
            if self.w_rec[[i, i]] != 0.0 {
                return Err(Error::Data(format!("self-connection at neuron {i}")));
            }
            let sign = self.ei_sign[i] as f32;
            for j in 0..n {
                let w = self.w_rec[[i, j]];
                if !w.is_finite() || (w != 0.0 && w.signum() != sign) {
                    return Err(Error::Data(format!(
                        "outgoing weight [{i},{j}]={w} violates E/I sign {sign}"
                    )));
                }
            }
        }
        if self.w_in.iter().any(|w| !w.is_finite()) {
            return Err(Error::Data("non-finite input weight".into()));
        }
        self.params.validate(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC)
            .u32(self.n() as u32)
            .u32(self.c_in as u32)
            .f64(self.params.dt)
            .f64(self.params.threshold)
            .f64(self.rho)
            .f64(self.params.noise_sigma);
        w.f32_slice(self.w_in.as_slice().expect("standard layout"));
        w.f32_slice(self.w_rec.as_slice().expect("standard layout"));
        w.f32_slice(&self.params.tau_syn);
        w.f32_slice(&self.params.tau_mem);
        w.f32_slice(&self.params.bias);
        w.i8_slice(&self.ei_sign);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let n_at = r.offset();
        let n = r.u32()? as usize;
        let c_in = r.u32()? as usize;
        if n == 0 || c_in == 0 {
            return Err(Error::format(n_at, "reservoir with zero neurons or channels"));
        }
        let dt = r.f64()?;
        let threshold = r.f64()?;
        let rho = r.f64()?;
        let noise_sigma = r.f64()?;
        let w_in = Array2::from_shape_vec((c_in, n), r.f32_vec(c_in * n)?).expect("shape");
        let w_rec = Array2::from_shape_vec((n, n), r.f32_vec(n * n)?).expect("shape");
        let tau_syn = r.f32_vec(n)?;
        let tau_mem = r.f32_vec(n)?;
        let bias = r.f32_vec(n)?;
        let ei_sign = r.i8_vec(n)?;
        r.finish()?;
        let res = Reservoir {
            c_in,
            w_in,
            w_rec,
            ei_sign,
            params: NeuronParams { tau_syn, tau_mem, bias, threshold, dt, noise_sigma },
            rho,
            seed: 0,
        };
        res.check_invariants()?;
        Ok(res)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hash of the serialized reservoir; keys the liquid-output cache and
    /// backs the frozen-liquid check (training must not change it).
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Build a liquid from a seed. Deterministic: same arguments, same bytes.
/// Draw order is part of the format — input weights (value and keep-draw per
/// entry), recurrent weights, τ_syn, τ_mem. `overrides`, when given, replaces
/// the drawn neuron parameters after the draws, so the weight matrices are
/// unaffected by it.
pub fn build_reservoir(
    n: usize,
    c_in: usize,
    input_sparsity: f64,
    seed: u64,
    overrides: Option<NeuronParams>,
) -> Result<Reservoir> {
    build_reservoir_with_rho(n, c_in, input_sparsity, seed, overrides, DEFAULT_RHO)
}

/// [`build_reservoir`] with an explicit spectral-radius target.
pub fn build_reservoir_with_rho(
    n: usize,
    c_in: usize,
    input_sparsity: f64,
    seed: u64,
    overrides: Option<NeuronParams>,
    rho: f64,
) -> Result<Reservoir> {
    if n == 0 || c_in == 0 {
        return Err(Error::Config(format!("need n ≥ 1 and c_in ≥ 1, got n={n} c_in={c_in}")));
    }
    if !(0.0..=1.0).contains(&input_sparsity) {
        return Err(Error::Config(format!("input_sparsity must be in [0,1], got {input_sparsity}")));
    }
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::Config(format!("spectral radius must be > 0, got {rho}")));
    }
    let mut rng = rng_from(seed);

    // Input weights: nonzero with probability input_sparsity, uniform values
    // scaled by the input gain. The 1/√(s·C_in) factor keeps the expected
    // per-neuron drive constant as sparsity and channel count vary.
    let gain = if input_sparsity > 0.0 {
        INPUT_GAIN / (input_sparsity * c_in as f64).sqrt()
    } else {
        0.0
    };
    let mut w_in = Array2::<f32>::zeros((c_in, n));
    for c in 0..c_in {
        for j in 0..n {
            let value: f64 = rng.random();
            let keep: f64 = rng.random();
            if keep < input_sparsity {
                w_in[[c, j]] = (value * gain) as f32;
            }
        }
    }

    // Recurrent weights: dense uniform [0,1), zero diagonal, rescaled so
    // |w_rec| has spectral radius rho, then row-signed 80/20.
    let mut abs_rec: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    for i in 0..n {
        abs_rec[i * n + i] = 0.0;
    }
    let radius = spectral_radius(&abs_rec, n);
    let scale = if radius > 1e-12 { rho / radius } else { 1.0 };

    let n_exc = (0.8 * n as f64).round() as usize;
    let ei_sign: Vec<i8> = (0..n).map(|i| if i < n_exc { 1 } else { -1 }).collect();
    let mut w_rec = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        let sign = ei_sign[i] as f64;
        for j in 0..n {
            w_rec[[i, j]] = (sign * abs_rec[i * n + j] * scale) as f32;
        }
    }
    drop(abs_rec);

    let lo = TAU_RANGE.0;
    let hi = TAU_RANGE.1;
    let tau_syn: Vec<f32> = (0..n).map(|_| rng.random_range(lo..=hi) as f32).collect();
    let tau_mem: Vec<f32> = (0..n).map(|_| rng.random_range(lo..=hi) as f32).collect();
    let params = match overrides {
        Some(p) => {
            p.validate(n)?;
            p
        }
        None => NeuronParams {
            tau_syn,
            tau_mem,
            bias: vec![0.0; n],
            threshold: DEFAULT_THRESHOLD,
            dt: DEFAULT_DT,
            noise_sigma: 0.0,
        },
    };

    let res = Reservoir { c_in, w_in, w_rec, ei_sign, params, rho, seed };
    res.check_invariants()?;
    Ok(res)
}

/// Largest eigenvalue modulus of the non-negative matrix `a` (row-major
/// n×n) by 100 power iterations. Iterates with aᵀ, which has the same
/// spectrum and walks rows contiguously.
fn spectral_radius(a: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut u = vec![0.0f64; n];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &a[i * n..(i + 1) * n];
            for (uj, &w) in u.iter_mut().zip(row) {
                *uj += w * vi;
            }
        }
        lambda = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lambda <= 1e-300 {
            return 0.0;
        }
        for (vj, uj) in v.iter_mut().zip(&u) {
            *vj = uj / lambda;
        }
    }
    lambda
}

/// Mutable per-sequence simulation state. `prev_spikes` carries the indices
/// of the neurons that fired on the previous step (synchronous update).
#[derive(Debug, Clone, PartialEq)]
pub struct LiquidState {
    pub i_syn: Vec<f64>,
    pub v_mem: Vec<f64>,
    pub prev_spikes: Vec<usize>,
}

impl LiquidState {
    pub fn zero(n: usize) -> Self {
        LiquidState {
            i_syn: vec![0.0; n],
            v_mem: vec![0.0; n],
            prev_spikes: Vec::new(),
        }
    }
}

/// One step of external drive: indices of spiking channels, or a dense
/// per-channel current vector.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    Spikes(&'a [usize]),
    Currents(&'a [f32]),
}

/// Advance the liquid one step. Returns the indices of neurons that spiked.
/// `rng` is only consumed when noise_sigma > 0.
pub fn step(
    r: &Reservoir,
    st: &mut LiquidState,
    input: StepInput,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let decay_syn = r.params.decay_syn();
    let decay_mem = r.params.decay_mem();
    step_inner(r, st, input, rng, &decay_syn, &decay_mem).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} (single step)")),
        other => other,
    })
}

fn step_inner(
    r: &Reservoir,
    st: &mut LiquidState,
    input: StepInput,
    rng: &mut ChaCha8Rng,
    decay_syn: &[f64],
    decay_mem: &[f64],
) -> Result<Vec<usize>> {
    let n = r.n();
    // (1) accumulate input and recurrent drive
    match input {
        StepInput::Spikes(channels) => {
            for &c in channels {
                if c >= r.c_in {
                    return Err(Error::Data(format!("input channel {c} out of range (c_in={})", r.c_in)));
                }
                let row = r.w_in.row(c);
                let row = row.as_slice().expect("standard layout");
                for (acc, &w) in st.i_syn.iter_mut().zip(row) {
                    *acc += w as f64;
                }
            }
        }
        StepInput::Currents(x) => {
            if x.len() != r.c_in {
                return Err(Error::Data(format!("input has {} channels, expected {}", x.len(), r.c_in)));
            }
            for (c, &xc) in x.iter().enumerate() {
                if xc == 0.0 {
                    continue;
                }
                let row = r.w_in.row(c);
                let row = row.as_slice().expect("standard layout");
                let xc = xc as f64;
                for (acc, &w) in st.i_syn.iter_mut().zip(row) {
                    *acc += w as f64 * xc;
                }
            }
        }
    }
    for &i in &st.prev_spikes {
        let row = r.w_rec.row(i);
        let row = row.as_slice().expect("standard layout");
        for (acc, &w) in st.i_syn.iter_mut().zip(row) {
            *acc += w as f64;
        }
    }
    // (2)–(4) decay, integrate
    let sigma = r.params.noise_sigma;
    for i in 0..n {
        st.i_syn[i] *= decay_syn[i];
        let mut v = st.v_mem[i] * decay_mem[i] + st.i_syn[i] + r.params.bias[i] as f64;
        if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v += sigma * z;
        }
        st.v_mem[i] = v;
    }
    // (5)–(6) spike and reset by subtraction
    let theta = r.params.threshold;
    let mut spikes = Vec::new();
    for i in 0..n {
        if st.v_mem[i] >= theta {
            st.v_mem[i] -= theta;
            spikes.push(i);
        }
    }
    for i in 0..n {
        if !st.v_mem[i].is_finite() || !st.i_syn[i].is_finite() {
            return Err(Error::Numeric(format!("non-finite liquid state at neuron {i}")));
        }
    }
    st.prev_spikes = spikes.clone();
    Ok(spikes)
}

/// Bit-packed binary raster of reservoir spikes, [steps × n].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeRaster {
    steps: usize,
    n: usize,
    words_per_step: usize,
    words: Vec<u64>,
}

impl SpikeRaster {
    pub fn empty(steps: usize, n: usize) -> Self {
        let words_per_step = n.div_ceil(64);
        SpikeRaster {
            steps,
            n,
            words_per_step,
            words: vec![0; steps * words_per_step],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, t: usize, i: usize) {
        debug_assert!(t < self.steps && i < self.n);
        self.words[t * self.words_per_step + i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, t: usize, i: usize) -> bool {
        self.words[t * self.words_per_step + i / 64] >> (i % 64) & 1 == 1
    }

    /// Neuron indices active at step t, appended to `out` (cleared first).
    pub fn active_into(&self, t: usize, out: &mut Vec<usize>) {
        out.clear();
        let row = &self.words[t * self.words_per_step..(t + 1) * self.words_per_step];
        for (wi, &word) in row.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                out.push(wi * 64 + b);
                bits &= bits - 1;
            }
        }
    }

    /// Total number of spikes in the raster.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Mean spikes per neuron per step.
    pub fn density(&self) -> f64 {
        if self.steps == 0 || self.n == 0 {
            return 0.0;
        }
        self.count() as f64 / (self.steps * self.n) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.steps as u32).u32(self.n as u32);
        for &word in &self.words {
            w.u64(word);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let steps = r.u32()? as usize;
        let n = r.u32()? as usize;
        let words_per_step = n.div_ceil(64);
        let mut words = Vec::with_capacity(steps * words_per_step);
        for _ in 0..steps * words_per_step {
            words.push(r.u64()?);
        }
        r.finish()?;
        Ok(SpikeRaster { steps, n, words_per_step, words })
    }
}

/// Drive the liquid through a whole encoded patch: T_time·e steps, state
/// carried across exposure windows, starting from `initial` (zero state by
/// default). Fresh sequences should use fresh states — nothing carries over
/// between patches.
pub fn run(
    r: &Reservoir,
    drive: &Drive,
    initial: Option<LiquidState>,
    rng: &mut ChaCha8Rng,
) -> Result<SpikeRaster> {
    let (t_time, e, channels) = drive.dim();
    if channels != r.c_in {
        return Err(Error::Data(format!(
            "drive has {channels} channels, reservoir expects {}",
            r.c_in
        )));
    }
    let n = r.n();
    let mut st = initial.unwrap_or_else(|| LiquidState::zero(n));
    if st.i_syn.len() != n || st.v_mem.len() != n {
        return Err(Error::Data(format!("initial state sized {} for n={n}", st.v_mem.len())));
    }
    let decay_syn = r.params.decay_syn();
    let decay_mem = r.params.decay_mem();
    let total = t_time * e;
    let mut raster = SpikeRaster::empty(total, n);
    let mut active = Vec::new();
    for t in 0..t_time {
        for j in 0..e {
            let idx = t * e + j;
            let spikes = match drive {
                Drive::Spikes(s) => {
                    active.clear();
                    let row = s.spikes.index_axis(ndarray::Axis(0), t);
                    let row = row.index_axis(ndarray::Axis(0), j);
                    for (c, &v) in row.iter().enumerate() {
                        if v != 0 {
                            active.push(c);
                        }
                    }
                    step_inner(r, &mut st, StepInput::Spikes(&active), rng, &decay_syn, &decay_mem)
                }
                Drive::Currents(c) => {
                    let row = c.currents.index_axis(ndarray::Axis(0), t);
                    let row = row.index_axis(ndarray::Axis(0), j);
                    let row = row.as_slice().expect("standard layout");
                    step_inner(r, &mut st, StepInput::Currents(row), rng, &decay_syn, &decay_mem)
                }
            };
            let spikes = spikes.map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} at step {idx}")),
                other => other,
            })?;
            for i in spikes {
                raster.set(idx, i);
            }
        }
    }
    Ok(raster)
}
