//! Readout training: weighted binary cross-entropy, Adam, a
//! reduce-on-plateau learning-rate schedule, and the epoch loop itself.
//!
//! Only the readout head has trainable parameters — the reservoir is frozen
//! and enters training purely through its cached spike rasters. Training
//! always scores through the rate decode (sigmoid of the mean pre-activation
//! over each exposure window), which is differentiable; the latency decode is
//! an evaluation-time alternative.
//!
//! Every random choice (validation split, epoch shuffles, head init) derives
//! from `TrainConfig::seed`, so a fixed seed reproduces the run bit for bit.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::cache;
use crate::encode::{Encoding, ScoreMap};
use crate::error::{Error, Result};
use crate::readout::tape::{Id, Scalar, Tape};
use crate::readout::{self, GraphSpec, ReadoutHead, Variant};
use crate::reservoir::{Reservoir, SpikeRaster};
use crate::spectra::Patch;
use crate::util;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const PLATEAU_FACTOR: f64 = 0.5;
pub const PLATEAU_PATIENCE: usize = 10;
pub const PLATEAU_REL_THRESHOLD: f64 = 1e-4;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

const SALT_VAL_SPLIT: u64 = 0x5641_4c53_504c_4954; // "VALSPLIT"
const SALT_HEAD_INIT: u64 = 0x4845_4144_494e_4954; // "HEADINIT"
const SALT_EPOCH: u64 = 0x4550_4f43_4853_4846; // "EPOCHSHF"

/// Everything that defines one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub encoding: Encoding,
    pub exposure: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight on the positive (RFI) term of the loss; `None` means 1. RFI is
    /// rare, so up-weighting it trades precision for recall.
    pub pos_weight: Option<f64>,
    pub val_fraction: f64,
    pub seed: u64,
    /// Directory for cached spike rasters; `None` recomputes every run.
    pub cache_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Linear,
            encoding: Encoding::Direct,
            exposure: 1,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            pos_weight: None,
            val_fraction: DEFAULT_VAL_FRACTION,
            seed: 0,
            cache_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exposure == 0 {
            return Err(Error::Config("exposure must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(w) = self.pos_weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("pos_weight must be positive, got {w}")));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// One row of the per-epoch training log. Wall-clock time is carried for
/// live logging only and is deliberately kept out of the persisted CSV:
/// report files must be byte-identical across equal runs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    #[serde(skip)]
    pub seconds: f64,
}

/// End-of-run facts, written next to the per-epoch CSV as JSON. Like the
/// CSV, the persisted form carries no wall-clock fields, so two runs with
/// equal inputs write byte-equal files; `total_seconds` lives on the side
/// for logging.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub encoding: Encoding,
    pub exposure: usize,
    pub epochs: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub pos_weight: f64,
    pub lr_final: f64,
    pub train_loss_final: Option<f64>,
    pub val_loss_final: Option<f64>,
    pub val_loss_best: Option<f64>,
    pub reservoir_hash: String,
    pub head_hash: String,
    #[serde(skip)]
    pub total_seconds: f64,
}

/// A trained head plus its training log.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub head: ReadoutHead,
    pub reports: Vec<TrainReport>,
    pub summary: TrainSummary,
}

/// Render the per-epoch log as CSV. Floats use Rust's shortest round-trip
/// formatting and wall-clock time is excluded, so equal runs produce
/// byte-equal files.
pub fn reports_to_csv(reports: &[TrainReport]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in reports {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    out
}

pub fn reports_from_csv(text: &str) -> Result<Vec<TrainReport>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "epoch,train_loss,val_loss,lr" {
        return Err(Error::Data(format!("unexpected training CSV header {header:?}")));
    }
    let mut reports = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!("training CSV row {} has {} fields", i + 2, fields.len())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Data(format!("training CSV row {}: bad number {s:?}", i + 2)))
        };
        reports.push(TrainReport {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("training CSV row {}: bad epoch", i + 2)))?,
            train_loss: parse(fields[1])?,
            val_loss: parse(fields[2])?,
            lr: parse(fields[3])?,
            seconds: 0.0,
        });
    }
    Ok(reports)
}

/// Mean binary cross-entropy between a score map and the ground-truth mask,
/// with scores clamped to [ε, 1−ε], ε = 1e-7.
pub fn loss_bce(scores: &ScoreMap, mask: &Array2<bool>) -> Result<f64> {
    loss_bce_weighted(scores, mask, 1.0)
}

/// [`loss_bce`] with the positive term multiplied by `pos_weight`.
pub fn loss_bce_weighted(scores: &ScoreMap, mask: &Array2<bool>, pos_weight: f64) -> Result<f64> {
    if !(pos_weight.is_finite() && pos_weight > 0.0) {
        return Err(Error::Config(format!("pos_weight must be positive, got {pos_weight}")));
    }
    let s = &scores.scores;
    if s.dim() != mask.dim() {
        return Err(Error::Data(format!(
            "score map {:?} does not match mask {:?}",
            s.dim(),
            mask.dim()
        )));
    }
    if s.is_empty() {
        return Err(Error::Data("cannot take the loss of an empty score map".into()));
    }
    let eps = crate::readout::tape::BCE_EPS;
    let mut total = 0.0f64;
    for (&score, &flag) in s.iter().zip(mask.iter()) {
        let sf = f64::from(score);
        if !sf.is_finite() {
            return Err(Error::Data(format!("score map contains non-finite value {sf}")));
        }
        let sc = sf.clamp(eps, 1.0 - eps);
        total -= if flag { pos_weight * sc.ln() } else { (1.0 - sc).ln() };
    }
    Ok(total / s.len() as f64)
}

/// First- and second-moment accumulators for Adam, keyed like the gradients.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    t: u64,
    m: BTreeMap<String, Array2<S>>,
    v: BTreeMap<String, Array2<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState { t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected Adam update:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², p ← p − lr·m̂/(√v̂ + ε).
pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    params: &mut BTreeMap<String, Array2<S>>,
    grads: &BTreeMap<String, Array2<S>>,
    lr: f64,
) {
    state.t += 1;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let corr1 = S::from_f64(1.0 - ADAM_BETA1.powi(state.t as i32));
    let corr2 = S::from_f64(1.0 - ADAM_BETA2.powi(state.t as i32));
    let lr_s = S::from_f64(lr);
    let one = S::one();
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        let m = state.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
        for ((pe, &ge), (me, ve)) in
            p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *me = b1 * *me + (one - b1) * ge;
            *ve = b2 * *ve + (one - b2) * ge * ge;
            let m_hat = *me / corr1;
            let v_hat = *ve / corr2;
            *pe = *pe - lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Reduce-on-plateau: halve the learning rate after `PLATEAU_PATIENCE`
/// consecutive epochs without a relative improvement of at least
/// `PLATEAU_REL_THRESHOLD` over the best validation loss seen so far.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr0: f64) -> Self {
        PlateauSchedule { lr: lr0, best: f64::INFINITY, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's validation loss; returns the learning rate to use
    /// from the next epoch on.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - PLATEAU_REL_THRESHOLD) {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= PLATEAU_PATIENCE {
                self.lr *= PLATEAU_FACTOR;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Deterministic train/validation split: a seeded shuffle of `0..n`, with the
/// first `round(fraction·n)` indices (at least one, when n ≥ 2) held out.
pub fn val_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = util::rng_from(util::mix_seed(seed, SALT_VAL_SPLIT));
    order.shuffle(&mut rng);
    let mut n_val = (fraction * n as f64).round() as usize;
    if n >= 2 && fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

/// The differentiable scoring path used everywhere in training: logits over
/// every liquid step, mean-pooled per exposure window, squashed by the
/// sigmoid (the rate decode), then weighted BCE against the mask.
fn patch_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    spec: &GraphSpec,
    ids: &BTreeMap<String, Id>,
    x: Id,
    targets: Id,
    exposure: usize,
    pos_weight: S,
) -> Id {
    let logits = readout::logits_graph(tape, spec, ids, x);
    let pooled = tape.mean_pool_rows(logits, exposure);
    let scores = tape.sigmoid(pooled);
    tape.bce_mean(scores, targets, pos_weight)
}

struct PatchTensors {
    x: Array2<f32>,
    targets: Array2<f32>,
}

fn patch_tensors(raster: &SpikeRaster, patch: &Patch) -> PatchTensors {
    let targets = patch.mask.mapv(|b| f32::from(b));
    PatchTensors { x: readout::raster_rows(raster), targets }
}

/// Loss and parameter gradients for one patch under the current parameters.
fn patch_loss_and_grads(
    spec: &GraphSpec,
    params: &BTreeMap<String, Array2<f32>>,
    tensors: &PatchTensors,
    exposure: usize,
    pos_weight: f32,
) -> Result<(f64, BTreeMap<String, Array2<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let mut ids = BTreeMap::new();
    for (name, p) in params {
        ids.insert(name.clone(), tape.param(name, p.clone()));
    }
    let x = tape.constant(tensors.x.clone());
    let targets = tape.constant(tensors.targets.clone());
    let loss = patch_loss_graph(&mut tape, spec, &ids, x, targets, exposure, pos_weight);
    let grads = tape.backward(loss)?;
    Ok((f64::from(tape.value(loss)[[0, 0]]), grads))
}

/// Loss only (validation path): same graph, no backward pass.
fn patch_loss(
    spec: &GraphSpec,
    params: &BTreeMap<String, Array2<f32>>,
    tensors: &PatchTensors,
    exposure: usize,
    pos_weight: f32,
) -> f64 {
    let mut tape = Tape::<f32>::new();
    let mut ids = BTreeMap::new();
    for (name, p) in params {
        ids.insert(name.clone(), tape.constant(p.clone()));
    }
    let x = tape.constant(tensors.x.clone());
    let targets = tape.constant(tensors.targets.clone());
    let loss = patch_loss_graph(&mut tape, spec, &ids, x, targets, exposure, pos_weight);
    f64::from(tape.value(loss)[[0, 0]])
}

/// Train a fresh readout head on `patches` against the frozen `reservoir`.
///
/// The liquid pass runs once per patch (through the raster cache when
/// configured); epochs then iterate purely over rasters. `epochs = 0` returns
/// the freshly initialized head untouched. Gradients within a batch are
/// averaged; batch items evaluate in parallel but reduce in index order, so
/// results do not depend on thread count.
pub fn fit(reservoir: &Reservoir, patches: &[Patch], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let shape = patches[0].data.dim();
    for (i, p) in patches.iter().enumerate() {
        if p.data.dim() != shape || p.mask.dim() != shape {
            return Err(Error::Data(format!(
                "patch {i} has shape {:?}/{:?}, expected {shape:?}",
                p.data.dim(),
                p.mask.dim()
            )));
        }
    }
    let started = Instant::now();
    let head_seed = util::mix_seed(cfg.seed, SALT_HEAD_INIT);
    let mut head = readout::init_head_with(
        cfg.variant,
        reservoir.n(),
        shape.1,
        readout::DEFAULT_HIDDEN,
        readout::AttentionConfig::default(),
        head_seed,
    )?;
    let spec = head.graph_spec();
    let pos_weight = cfg.pos_weight.unwrap_or(1.0) as f32;

    let rasters = cache::patch_rasters(
        reservoir,
        patches,
        cfg.encoding,
        cfg.exposure,
        cfg.cache_dir.as_deref(),
    )?;
    let tensors: Vec<PatchTensors> =
        rasters.iter().zip(patches).map(|(r, p)| patch_tensors(r, p)).collect();

    let (train_idx, val_idx) = val_split(patches.len(), cfg.val_fraction, cfg.seed);
    let mut params: BTreeMap<String, Array2<f32>> =
        head.parameters().map(|(name, t)| (name.to_string(), t.clone())).collect();
    let mut adam = AdamState::<f32>::new();
    let mut schedule = PlateauSchedule::new(cfg.lr);
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let epoch_started = Instant::now();
        let mut order = train_idx.clone();
        let mut rng = util::rng_from(util::mix_seed(
            util::mix_seed(cfg.seed, SALT_EPOCH),
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        let lr = schedule.lr();
        let mut train_loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, BTreeMap<String, Array2<f32>>)> = batch
                .par_iter()
                .map(|&i| patch_loss_and_grads(&spec, &params, &tensors[i], cfg.exposure, pos_weight))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            let mut avg: BTreeMap<String, Array2<f32>> = BTreeMap::new();
            for (loss, grads) in results {
                train_loss_sum += loss / train_idx.len() as f64;
                for (name, g) in grads {
                    match avg.get_mut(&name) {
                        Some(acc) => *acc += &g,
                        None => {
                            avg.insert(name, g);
                        }
                    }
                }
            }
            for g in avg.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            adam_step(&mut adam, &mut params, &avg, lr);
        }

        // Empty validation folds fall back to the training loss so the
        // schedule still sees a signal.
        let val_loss = if val_idx.is_empty() {
            train_loss_sum
        } else {
            let losses: Vec<f64> = val_idx
                .par_iter()
                .map(|&i| patch_loss(&spec, &params, &tensors[i], cfg.exposure, pos_weight))
                .collect();
            losses.iter().sum::<f64>() / val_idx.len() as f64
        };
        if !train_loss_sum.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {epoch} (train {train_loss_sum}, val {val_loss})"
            )));
        }
        schedule.observe(val_loss);
        reports.push(TrainReport {
            epoch: epoch as u32,
            train_loss: train_loss_sum,
            val_loss,
            lr,
            seconds: epoch_started.elapsed().as_secs_f64(),
        });
    }

    for (name, p) in &params {
        *head.parameter_mut(name) = p.clone();
    }
    head.check_invariants()?;

    let summary = TrainSummary {
        variant: cfg.variant,
        encoding: cfg.encoding,
        exposure: cfg.exposure,
        epochs: cfg.epochs,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        pos_weight: f64::from(pos_weight),
        lr_final: schedule.lr(),
        train_loss_final: reports.last().map(|r| r.train_loss),
        val_loss_final: reports.last().map(|r| r.val_loss),
        val_loss_best: reports
            .iter()
            .map(|r| r.val_loss)
            .min_by(|a, b| a.total_cmp(b)),
        reservoir_hash: reservoir.content_hash(),
        head_hash: head.content_hash(),
        total_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(FitResult { head, reports, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::build_reservoir;
    use crate::spectra::PatchOrigin;
    use proptest::prelude::*;
    use rand::Rng;

    fn score_map(values: Vec<f32>, rows: usize, cols: usize) -> ScoreMap {
        ScoreMap { scores: Array2::from_shape_vec((rows, cols), values).unwrap() }
    }

    #[test]
    fn bce_hand_cases() {
        // Constant 0.5 scores give ln 2 whatever the mask says.
        let s = score_map(vec![0.5; 4], 2, 2);
        let mask = Array2::from_shape_vec((2, 2), vec![true, false, true, true]).unwrap();
        assert!((loss_bce(&s, &mask).unwrap() - (2.0f64).ln()).abs() < 1e-12);

        // Perfect confident scores clamp to ε and cost −ln(1−ε) ≈ 1e-7.
        let s = score_map(vec![1.0, 0.0], 1, 2);
        let mask = Array2::from_shape_vec((1, 2), vec![true, false]).unwrap();
        let loss = loss_bce(&s, &mask).unwrap();
        assert!((loss - -(1.0 - 1e-7f64).ln()).abs() < 1e-15);
        assert!(loss <= 1e-6);

        // [0.9, 0.2] against [1, 0]: −(ln 0.9 + ln 0.8)/2 ≈ 0.16425.
        let s = score_map(vec![0.9, 0.2], 1, 2);
        let loss = loss_bce(&s, &mask).unwrap();
        assert!((loss - 0.16425).abs() < 1e-5);
    }

    #[test]
    fn bce_pos_weight_scales_only_the_positive_term() {
        let s = score_map(vec![0.9, 0.2], 1, 2);
        let mask = Array2::from_shape_vec((1, 2), vec![true, false]).unwrap();
        let w = loss_bce_weighted(&s, &mask, 3.0).unwrap();
        // Expected value goes through the same f32 score storage.
        let expect = -(3.0 * f64::from(0.9f32).ln() + (1.0 - f64::from(0.2f32)).ln()) / 2.0;
        assert!((w - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_inputs() {
        let s = score_map(vec![0.5; 4], 2, 2);
        let mask = Array2::from_elem((2, 3), false);
        assert!(matches!(loss_bce(&s, &mask), Err(Error::Data(_))));
        let nan = score_map(vec![0.5, f32::NAN], 1, 2);
        let mask = Array2::from_elem((1, 2), false);
        assert!(matches!(loss_bce(&nan, &mask), Err(Error::Data(_))));
        let s = score_map(vec![0.5; 2], 1, 2);
        assert!(matches!(loss_bce_weighted(&s, &mask, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Array2::<f64>::from_elem((2, 2), 0.7));
        let grads = BTreeMap::from([("w".to_string(), Array2::<f64>::zeros((2, 2)))]);
        let mut state = AdamState::new();
        adam_step(&mut state, &mut params, &grads, 0.1);
        assert_eq!(params["w"], Array2::from_elem((2, 2), 0.7));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Array2::<f64>::zeros((1, 3)));
        let grads = BTreeMap::from([(
            "w".to_string(),
            Array2::from_shape_vec((1, 3), vec![0.3, -2.0, 5.0]).unwrap(),
        )]);
        let mut state = AdamState::new();
        adam_step(&mut state, &mut params, &grads, 1e-3);
        for (j, sign) in [1.0, -1.0, 1.0].iter().enumerate() {
            let step = params["w"][[0, j]];
            assert!(
                (step + 1e-3 * sign).abs() < 1e-6,
                "entry {j} stepped {step}, expected ≈ {}",
                -1e-3 * sign
            );
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(p) = ½‖p − target‖²; gradient p − target.
        let target = Array2::from_shape_vec((1, 4), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Array2::<f64>::zeros((1, 4)));
        let mut state = AdamState::new();
        let f = |p: &Array2<f64>| (p - &target).mapv(|d| d * d).sum() / 2.0;
        let initial = f(&params["p"]);
        let mut last = initial;
        for _ in 0..500 {
            let g = (&params["p"] - &target).to_owned();
            let grads = BTreeMap::from([("p".to_string(), g)]);
            adam_step(&mut state, &mut params, &grads, 0.05);
            last = f(&params["p"]);
        }
        assert!(last < initial / 100.0, "loss went {initial} → {last}");
    }

    #[test]
    fn plateau_halves_after_eleven_identical_losses() {
        let mut s = PlateauSchedule::new(1e-4);
        for i in 0..11 {
            let lr = s.observe(0.3);
            if i < 10 {
                assert_eq!(lr, 1e-4, "observation {i}");
            }
        }
        assert_eq!(s.lr(), 5e-5);
        // Ten more stale epochs halve again.
        for _ in 0..10 {
            s.observe(0.3);
        }
        assert_eq!(s.lr(), 2.5e-5);
    }

    #[test]
    fn plateau_requires_relative_improvement() {
        let mut s = PlateauSchedule::new(1e-4);
        s.observe(1.0);
        // 5e-5 relative improvement is below the 1e-4 threshold: stale.
        for _ in 0..10 {
            s.observe(0.99995);
        }
        assert_eq!(s.lr(), 5e-5);

        let mut s = PlateauSchedule::new(1e-4);
        s.observe(1.0);
        // 2e-4 relative improvement resets the counter every time.
        let mut loss = 1.0;
        for _ in 0..50 {
            loss *= 1.0 - 2e-4;
            s.observe(loss);
        }
        assert_eq!(s.lr(), 1e-4);
    }

    proptest! {
        #[test]
        fn plateau_lr_is_always_a_halving_of_lr0(losses in proptest::collection::vec(0.0f64..10.0, 0..64)) {
            let mut s = PlateauSchedule::new(1e-4);
            let mut prev = s.lr();
            for loss in losses {
                let lr = s.observe(loss);
                prop_assert!(lr <= prev);
                let k = (1e-4 / lr).log2().round();
                prop_assert!((lr - 1e-4 * 0.5f64.powi(k as i32)).abs() < 1e-20);
                prev = lr;
            }
        }

        #[test]
        fn val_split_is_a_partition(n in 1usize..200, seed in 0u64..1000) {
            let (train, val) = val_split(n, DEFAULT_VAL_FRACTION, seed);
            let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n >= 2 {
                prop_assert!(!val.is_empty());
                prop_assert!(!train.is_empty());
            }
            let (train2, val2) = val_split(n, DEFAULT_VAL_FRACTION, seed);
            prop_assert_eq!(train, train2);
            prop_assert_eq!(val, val2);
        }
    }

    fn toy_patches(count: usize, seed: u64) -> Vec<Patch> {
        let mut rng = util::rng_from(seed);
        (0..count)
            .map(|i| {
                // A vertical stripe of hot pixels makes the task learnable.
                let col = rng.random_range(0..8usize);
                let data = Array2::from_shape_fn((8, 8), |(_, f)| {
                    if f == col {
                        0.9
                    } else {
                        rng.random_range(0.0..0.2f32)
                    }
                });
                let mask = Array2::from_shape_fn((8, 8), |(_, f)| f == col);
                Patch {
                    data,
                    mask,
                    origin: PatchOrigin { time_offset: 0, freq_offset: 0, source_id: i as u32 },
                }
            })
            .collect()
    }

    fn toy_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            variant: Variant::Linear,
            encoding: Encoding::Direct,
            exposure: 1,
            epochs,
            batch_size: 4,
            lr: 1e-2,
            pos_weight: None,
            val_fraction: 0.25,
            seed: 11,
            cache_dir: None,
        }
    }

    #[test]
    fn fit_reduces_loss_and_freezes_the_reservoir() {
        let res = build_reservoir(64, 8, 0.3, 3, None).unwrap();
        let before = res.content_hash();
        let patches = toy_patches(16, 5);
        let result = fit(&res, &patches, &toy_config(12)).unwrap();
        assert_eq!(res.content_hash(), before);
        assert_eq!(result.reports.len(), 12);
        let first = result.reports.first().unwrap().train_loss;
        let last = result.reports.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} → {last}");
        assert!(result.reports.iter().all(|r| r.train_loss.is_finite()));
        assert_eq!(result.summary.n_train + result.summary.n_val, 16);
        assert_eq!(result.summary.head_hash, result.head.content_hash());
        assert_eq!(result.reports[0].lr, 1e-2);
    }

    #[test]
    fn fit_is_bit_identical_for_a_fixed_seed() {
        let res = build_reservoir(48, 8, 0.3, 9, None).unwrap();
        let patches = toy_patches(10, 7);
        let cfg = toy_config(5);
        let a = fit(&res, &patches, &cfg).unwrap();
        let b = fit(&res, &patches, &cfg).unwrap();
        assert_eq!(a.head.to_bytes(), b.head.to_bytes());
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.epoch, rb.epoch);
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
            assert_eq!(ra.lr, rb.lr);
        }
    }

    #[test]
    fn fit_with_cache_matches_fit_without() {
        let res = build_reservoir(48, 8, 0.3, 9, None).unwrap();
        let patches = toy_patches(10, 7);
        let cfg = toy_config(4);
        let plain = fit(&res, &patches, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cached_cfg = cfg.clone();
        cached_cfg.cache_dir = Some(dir.path().to_path_buf());
        let cold = fit(&res, &patches, &cached_cfg).unwrap();
        let warm = fit(&res, &patches, &cached_cfg).unwrap();
        assert_eq!(plain.head.to_bytes(), cold.head.to_bytes());
        assert_eq!(plain.head.to_bytes(), warm.head.to_bytes());
        for (a, b) in plain.reports.iter().zip(&warm.reports) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialized_head() {
        let res = build_reservoir(48, 8, 0.3, 2, None).unwrap();
        let patches = toy_patches(4, 3);
        let cfg = toy_config(0);
        let result = fit(&res, &patches, &cfg).unwrap();
        assert!(result.reports.is_empty());
        let expected = crate::readout::init_head_with(
            cfg.variant,
            res.n(),
            8,
            crate::readout::DEFAULT_HIDDEN,
            crate::readout::AttentionConfig::default(),
            util::mix_seed(cfg.seed, SALT_HEAD_INIT),
        )
        .unwrap();
        assert_eq!(result.head.to_bytes(), expected.to_bytes());
        assert_eq!(result.summary.train_loss_final, None);
    }

    #[test]
    fn fit_rejects_empty_and_invalid_configs() {
        let res = build_reservoir(32, 8, 0.3, 2, None).unwrap();
        assert!(matches!(fit(&res, &[], &toy_config(1)), Err(Error::Config(_))));
        let mut bad = toy_config(1);
        bad.exposure = 0;
        assert!(matches!(fit(&res, &toy_patches(2, 1), &bad), Err(Error::Config(_))));
        let mut bad = toy_config(1);
        bad.lr = -1.0;
        assert!(matches!(fit(&res, &toy_patches(2, 1), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trips() {
        let reports = vec![
            TrainReport { epoch: 1, train_loss: 0.5, val_loss: 0.625, lr: 1e-4, seconds: 0.25 },
            TrainReport {
                epoch: 2,
                train_loss: 0.111_111_111_111,
                val_loss: std::f64::consts::PI / 7.0,
                lr: 5e-5,
                seconds: 1.0,
            },
        ];
        let text = reports_to_csv(&reports);
        assert!(!text.contains("0.25"), "wall-clock time must stay out of the CSV");
        let back = reports_from_csv(&text).unwrap();
        assert_eq!(reports.len(), back.len());
        for (a, b) in reports.iter().zip(&back) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            assert_eq!(a.lr.to_bits(), b.lr.to_bits());
            assert_eq!(b.seconds, 0.0, "timing is not persisted, so it reads back as zero");
        }
        assert!(reports_from_csv("nonsense\n1,2,3").is_err());
    }
}
