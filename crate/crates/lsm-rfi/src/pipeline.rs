//! End-to-end orchestration: dataset preparation, training a model into a
//! directory on disk, scoring and evaluating held-out patches, and the
//! objective function used by the hyper-parameter search.
//!
//! A *model directory* holds everything needed to reproduce and reuse a
//! trained detector:
//!
//! ```text
//! model/
//! ├── reservoir.bin   frozen liquid (weights, time constants, signs)
//! ├── head.bin        trained readout parameters
//! ├── model.json      the full ModelConfig
//! ├── report.csv      per-epoch training log
//! └── report.json     training summary (losses, hashes, wall time)
//! ```
//!
//! The CLI adds a `manifest.json` alongside these for provenance; the library
//! functions here neither read nor write it.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::cache;
use crate::encode::{self, Encoding, ScoreMap};
use crate::error::{Error, Result};
use crate::hpo::TrialConfig;
use crate::metrics::{self, EvalResult};
use crate::readout::{self, ReadoutHead, Variant};
use crate::reservoir::{build_reservoir, Reservoir, SpikeRaster};
use crate::spectra::{self, Patch, SynthConfig, PATCH_SIZE};
use crate::train::{self, TrainConfig, TrainReport, TrainSummary};
use crate::util;

pub const RESERVOIR_FILE: &str = "reservoir.bin";
pub const HEAD_FILE: &str = "head.bin";
pub const CONFIG_FILE: &str = "model.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Trial protocol defaults: train on this fraction of the dataset…
pub const HPO_SUBSET_FRACTION: f64 = 0.1;
/// …holding out this fraction of the subset for the objective.
pub const HPO_HOLDOUT_FRACTION: f64 = 0.2;
pub const HPO_EPOCHS: usize = 50;

const SALT_RESERVOIR: u64 = 0x5245_5342_5549_4c44; // "RESBUILD"
const SALT_SUBSET: u64 = 0x5355_4253_4554_534c; // "SUBSETSL"

/// How per-pixel scores are decoded from readout pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    /// Sigmoid of the mean pre-activation over the exposure window — what
    /// training optimizes.
    #[default]
    Rate,
    /// Time-to-first-spike within the window after thresholding at zero.
    Latency,
}

impl Decode {
    pub const ALL: [Decode; 2] = [Decode::Rate, Decode::Latency];

    pub fn name(&self) -> &'static str {
        match self {
            Decode::Rate => "rate",
            Decode::Latency => "latency",
        }
    }
}

impl std::fmt::Display for Decode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Decode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rate" => Ok(Decode::Rate),
            "latency" => Ok(Decode::Latency),
            other => Err(Error::Config(format!(
                "unknown decode '{other}' (expected rate|latency)"
            ))),
        }
    }
}

/// Everything that defines a trained model, as stored in `model.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoding: Encoding,
    pub exposure: usize,
    pub liquid_size: usize,
    pub input_sparsity: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    /// Extra weight on positive (RFI) pixels in the loss; `None` means 1.
    pub pos_weight: Option<f64>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelConfig {
            variant: t.variant,
            encoding: t.encoding,
            exposure: t.exposure,
            liquid_size: 512,
            input_sparsity: 0.5,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.lr,
            val_fraction: t.val_fraction,
            pos_weight: t.pos_weight,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.liquid_size == 0 {
            return Err(Error::Config("liquid size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.input_sparsity) {
            return Err(Error::Config(format!(
                "input sparsity {} outside [0, 1]",
                self.input_sparsity
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        self.train_config(None).validate()
    }

    /// The trainer settings this model configuration implies.
    pub fn train_config(&self, cache_dir: Option<&Path>) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            encoding: self.encoding,
            exposure: self.exposure,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.learning_rate,
            pos_weight: self.pos_weight,
            val_fraction: self.val_fraction,
            seed: self.seed,
            cache_dir: cache_dir.map(Path::to_path_buf),
        }
    }
}

/// Seed for the frozen liquid, derived from the run seed so that dataset
/// shuffling, head init, and reservoir wiring never share a stream.
pub fn reservoir_seed(seed: u64) -> u64 {
    util::mix_seed(seed, SALT_RESERVOIR)
}

/// Generate a synthetic dataset and cut it into training patches: each
/// spectrogram is divisively normalized, then tiled into PATCH_SIZE² cells
/// tagged with its index as the source id.
pub fn generate_dataset(
    count: usize,
    size: usize,
    contamination: f64,
    seed: u64,
) -> Result<Vec<Patch>> {
    let config = SynthConfig {
        n_spectrograms: count,
        size,
        target_contamination: contamination,
        seed,
        ..SynthConfig::default()
    };
    let pairs = spectra::generate_synthetic(&config)?;
    let mut patches = Vec::new();
    for (i, (spec, mask)) in pairs.iter().enumerate() {
        let normed = spectra::normalize_default(spec)?;
        patches.extend(spectra::chunk(&normed, mask, PATCH_SIZE, i as u32)?);
    }
    Ok(patches)
}

/// A trained model plus its training artifacts.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub reservoir: Reservoir,
    pub head: ReadoutHead,
    pub config: ModelConfig,
    pub reports: Vec<TrainReport>,
    pub summary: TrainSummary,
}

/// Build the frozen liquid for `config` and fit its readout on `patches`.
pub fn train_model(
    patches: &[Patch],
    config: &ModelConfig,
    cache_dir: Option<&Path>,
) -> Result<TrainedModel> {
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let c_in = patches[0].data.dim().1;
    let reservoir = build_reservoir(
        config.liquid_size,
        c_in,
        config.input_sparsity,
        reservoir_seed(config.seed),
        None,
    )?;
    let fit = train::fit(&reservoir, patches, &config.train_config(cache_dir))?;
    Ok(TrainedModel {
        reservoir,
        head: fit.head,
        config: config.clone(),
        reports: fit.reports,
        summary: fit.summary,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    util::atomic_write(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Write a model directory (creating it if needed).
pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.reservoir.save(&dir.join(RESERVOIR_FILE))?;
    model.head.save(&dir.join(HEAD_FILE))?;
    write_json(&dir.join(CONFIG_FILE), &model.config)?;
    util::atomic_write(
        &dir.join(REPORT_CSV_FILE),
        train::reports_to_csv(&model.reports).as_bytes(),
    )?;
    write_json(&dir.join(REPORT_JSON_FILE), &model.summary)
}

/// The parts of a model directory needed for inference.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub reservoir: Reservoir,
    pub head: ReadoutHead,
    pub config: ModelConfig,
}

/// Load a model directory, checking that liquid, head, and configuration
/// actually belong together.
pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let reservoir = Reservoir::load(&dir.join(RESERVOIR_FILE))?;
    let head = ReadoutHead::load(&dir.join(HEAD_FILE))?;
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    if head.in_dim() != reservoir.n() {
        return Err(Error::Data(format!(
            "head expects {} liquid neurons but the reservoir has {}",
            head.in_dim(),
            reservoir.n()
        )));
    }
    if config.liquid_size != reservoir.n() {
        return Err(Error::Data(format!(
            "model.json says liquid_size {} but the reservoir has {} neurons",
            config.liquid_size,
            reservoir.n()
        )));
    }
    if config.variant != head.variant() {
        return Err(Error::Data(format!(
            "model.json says readout '{}' but the head file holds '{}'",
            config.variant,
            head.variant()
        )));
    }
    Ok(LoadedModel { reservoir, head, config })
}

fn decode_raster(
    head: &ReadoutHead,
    raster: &SpikeRaster,
    exposure: usize,
    decode: Decode,
) -> Result<ScoreMap> {
    let rows = readout::raster_rows::<f64>(raster);
    let logits = readout::forward_sequence_f64(head, &rows)?;
    let (total, channels) = logits.dim();
    if exposure == 0 || total % exposure != 0 {
        return Err(Error::Data(format!(
            "raster of {total} steps does not divide into exposure windows of {exposure}"
        )));
    }
    let cube = Array3::from_shape_vec(
        (total / exposure, exposure, channels),
        logits.iter().copied().collect(),
    )
    .expect("row-major reshape of [t·e × c] into [t, e, c]");
    match decode {
        Decode::Rate => encode::decode_rate(&cube),
        Decode::Latency => Ok(encode::decode_latency(&encode::threshold_to_spikes(&cube))),
    }
}

/// Score every patch: drive the liquid (or reuse cached rasters), run the
/// readout over the raster, and decode per-pixel scores. Output order matches
/// the input order regardless of thread count.
pub fn score_patches(
    reservoir: &Reservoir,
    head: &ReadoutHead,
    patches: &[Patch],
    encoding: Encoding,
    exposure: usize,
    decode: Decode,
    cache_dir: Option<&Path>,
) -> Result<Vec<ScoreMap>> {
    let rasters = cache::patch_rasters(reservoir, patches, encoding, exposure, cache_dir)?;
    rasters
        .par_iter()
        .map(|raster| decode_raster(head, raster, exposure, decode))
        .collect()
}

/// Score `patches` and pool per-pixel metrics against their masks.
pub fn evaluate_model(
    model: &LoadedModel,
    patches: &[Patch],
    decode: Decode,
    threshold: f64,
    cache_dir: Option<&Path>,
) -> Result<EvalResult> {
    let scores = score_patches(
        &model.reservoir,
        &model.head,
        patches,
        model.config.encoding,
        model.config.exposure,
        decode,
        cache_dir,
    )?;
    let truth: Vec<Array2<bool>> = patches.iter().map(|p| p.mask.clone()).collect();
    metrics::evaluate(&scores, &truth, threshold)
}

/// Per-threshold confusion sweep rendered as CSV (for ROC / PR curves):
/// `threshold,tp,fp,tn,fn,precision,recall,fpr` over an even grid.
pub fn threshold_sweep_csv(
    scores: &[ScoreMap],
    truth: &[Array2<bool>],
    n_thresholds: usize,
) -> Result<String> {
    if n_thresholds < 2 {
        return Err(Error::Config("threshold sweep needs at least 2 points".into()));
    }
    let mut out = String::from("threshold,tp,fp,tn,fn,precision,recall,fpr\n");
    for k in 0..n_thresholds {
        // Interior grid: (k+1)/(n+1) avoids the degenerate 0/1 endpoints.
        let thr = (k + 1) as f64 / (n_thresholds + 1) as f64;
        let (_, _, c) = metrics::threshold_metrics(scores, truth, thr)?;
        let precision = if c.tp + c.fp > 0 { c.tp as f64 / (c.tp + c.fp) as f64 } else { f64::NAN };
        let recall = if c.tp + c.fn_ > 0 { c.tp as f64 / (c.tp + c.fn_) as f64 } else { f64::NAN };
        let fpr = if c.fp + c.tn > 0 { c.fp as f64 / (c.fp + c.tn) as f64 } else { f64::NAN };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            thr, c.tp, c.fp, c.tn, c.fn_, precision, recall, fpr
        ));
    }
    Ok(out)
}

/// Fixed parts of the HPO trial protocol (the searched dimensions live in
/// [`TrialConfig`]): which readout/encoding to tune, how much data each trial
/// sees, and how long it trains.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrialProtocol {
    pub variant: Variant,
    pub encoding: Encoding,
    pub epochs: usize,
    /// Fraction of the dataset each trial samples (without replacement).
    pub subset_fraction: f64,
    /// Fraction of the subset held out to compute the objective.
    pub holdout_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pos_weight: Option<f64>,
}

impl Default for TrialProtocol {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrialProtocol {
            variant: t.variant,
            encoding: t.encoding,
            epochs: HPO_EPOCHS,
            subset_fraction: HPO_SUBSET_FRACTION,
            holdout_fraction: HPO_HOLDOUT_FRACTION,
            batch_size: t.batch_size,
            learning_rate: t.lr,
            pos_weight: t.pos_weight,
        }
    }
}

impl TrialProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset fraction {} outside (0, 1]",
                self.subset_fraction
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction {} outside (0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// One HPO trial: draw a patch subset from the trial seed, build a fresh
/// reservoir from the sampled configuration, train the readout on the
/// subset's larger part, and return F1 at threshold 0.5 on the held-out part.
pub fn trial_objective(
    patches: &[Patch],
    protocol: &TrialProtocol,
    trial: &TrialConfig,
    trial_seed: u64,
    cache_dir: Option<&Path>,
) -> Result<f64> {
    protocol.validate()?;
    if patches.len() < 2 {
        return Err(Error::Config(format!(
            "HPO needs at least 2 patches, got {}",
            patches.len()
        )));
    }
    let n = patches.len();
    let k = ((protocol.subset_fraction * n as f64).round() as usize).clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::rng_from(util::mix_seed(trial_seed, SALT_SUBSET)));
    let subset: Vec<Patch> = order[..k].iter().map(|&i| patches[i].clone()).collect();
    let n_holdout = ((protocol.holdout_fraction * k as f64).round() as usize).clamp(1, k - 1);
    let (holdout, training) = subset.split_at(n_holdout);

    let c_in = training[0].data.dim().1;
    let reservoir = build_reservoir(
        trial.liquid_size,
        c_in,
        trial.input_sparsity,
        util::mix_seed(trial_seed, SALT_RESERVOIR),
        None,
    )?;
    let train_config = TrainConfig {
        variant: protocol.variant,
        encoding: protocol.encoding,
        exposure: trial.exposure,
        epochs: protocol.epochs,
        batch_size: protocol.batch_size,
        lr: protocol.learning_rate,
        pos_weight: protocol.pos_weight,
        val_fraction: 0.0, // the holdout is the validation; don't split again
        seed: trial_seed,
        cache_dir: cache_dir.map(Path::to_path_buf),
    };
    let fit = train::fit(&reservoir, training, &train_config)?;
    let scores = score_patches(
        &reservoir,
        &fit.head,
        holdout,
        protocol.encoding,
        trial.exposure,
        Decode::Rate,
        cache_dir,
    )?;
    let truth: Vec<Array2<bool>> = holdout.iter().map(|p| p.mask.clone()).collect();
    let (_, f1, _) = metrics::threshold_metrics(&scores, &truth, DEFAULT_THRESHOLD)?;
    Ok(f1)
}

/// Convenience wrapper: the objective closure `run_study` expects, borrowing
/// the dataset and protocol.
pub fn study_objective<'a>(
    patches: &'a [Patch],
    protocol: &'a TrialProtocol,
    cache_dir: Option<&'a Path>,
) -> impl FnMut(&TrialConfig, u64) -> Result<f64> + 'a {
    move |trial, seed| trial_objective(patches, protocol, trial, seed, cache_dir)
}

/// Re-assemble per-patch score maps into a full spectrogram-shaped score
/// array for one source, alongside the input magnitudes and truth mask.
/// Returns (data, scores, truth).
pub fn assemble_scores(
    patches: &[Patch],
    scores: &[ScoreMap],
    source_id: u32,
) -> Result<(Array2<f32>, Array2<f32>, Array2<bool>)> {
    if patches.len() != scores.len() {
        return Err(Error::Data(format!(
            "{} patches vs {} score maps",
            patches.len(),
            scores.len()
        )));
    }
    let chosen: Vec<usize> = (0..patches.len())
        .filter(|&i| patches[i].origin.source_id == source_id)
        .collect();
    if chosen.is_empty() {
        return Err(Error::Data(format!("no patches with source id {source_id}")));
    }
    let mut time_steps = 0;
    let mut freq_channels = 0;
    for &i in &chosen {
        let p = &patches[i];
        let (rows, cols) = p.data.dim();
        time_steps = time_steps.max(p.origin.time_offset as usize + rows);
        freq_channels = freq_channels.max(p.origin.freq_offset as usize + cols);
    }
    let mut data = Array2::<f32>::zeros((time_steps, freq_channels));
    let mut score = Array2::<f32>::zeros((time_steps, freq_channels));
    let mut truth = Array2::<bool>::from_elem((time_steps, freq_channels), false);
    for &i in &chosen {
        let p = &patches[i];
        let (rows, cols) = p.data.dim();
        let (t0, f0) = (p.origin.time_offset as usize, p.origin.freq_offset as usize);
        if scores[i].scores.dim() != (rows, cols) {
            return Err(Error::Data(format!(
                "score map {i} has shape {:?}, patch is {:?}",
                scores[i].scores.dim(),
                (rows, cols)
            )));
        }
        for r in 0..rows {
            for c in 0..cols {
                data[[t0 + r, f0 + c]] = p.data[[r, c]];
                score[[t0 + r, f0 + c]] = scores[i].scores[[r, c]];
                truth[[t0 + r, f0 + c]] = p.mask[[r, c]];
            }
        }
    }
    Ok((data, score, truth))
}

/// Model directory paths that must exist for [`load_model`] to succeed.
pub fn model_files(dir: &Path) -> [PathBuf; 5] {
    [
        dir.join(RESERVOIR_FILE),
        dir.join(HEAD_FILE),
        dir.join(CONFIG_FILE),
        dir.join(REPORT_CSV_FILE),
        dir.join(REPORT_JSON_FILE),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::PatchOrigin;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            variant: Variant::Linear,
            encoding: Encoding::Direct,
            exposure: 2,
            liquid_size: 48,
            input_sparsity: 0.5,
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            val_fraction: 0.2,
            pos_weight: None,
            threshold: 0.5,
            seed: 11,
        }
    }

    fn tiny_patches(n: usize) -> Vec<Patch> {
        // 8×8 patches with a vertical stripe of "RFI" in a fixed column.
        (0..n)
            .map(|i| {
                let mut data = Array2::<f32>::zeros((8, 8));
                let mut mask = Array2::<bool>::from_elem((8, 8), false);
                let col = i % 8;
                for r in 0..8 {
                    data[[r, col]] = 1.0;
                    mask[[r, col]] = true;
                }
                Patch {
                    data,
                    mask,
                    origin: PatchOrigin {
                        time_offset: 0,
                        freq_offset: 0,
                        source_id: i as u32,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn generate_dataset_tiles_every_spectrogram() {
        let patches = generate_dataset(2, 64, 0.05, 3).unwrap();
        // 64/32 = 2 per axis → 4 patches per spectrogram, 2 spectrograms.
        assert_eq!(patches.len(), 8);
        assert!(patches.iter().any(|p| p.origin.source_id == 0));
        assert!(patches.iter().any(|p| p.origin.source_id == 1));
        for p in &patches {
            assert_eq!(p.data.dim(), (PATCH_SIZE, PATCH_SIZE));
        }
        // Some flagged pixels must exist at 5% contamination.
        assert!(patches.iter().map(|p| p.mask.iter().filter(|&&b| b).count()).sum::<usize>() > 0);
    }

    #[test]
    fn model_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model_dir = dir.path().join("model");
        let patches = tiny_patches(12);
        let config = tiny_config();
        let trained = train_model(&patches, &config, None).unwrap();
        save_model(&model_dir, &trained).unwrap();
        for path in model_files(&model_dir) {
            assert!(path.exists(), "{} missing", path.display());
        }

        let loaded = load_model(&model_dir).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.reservoir.content_hash(), trained.reservoir.content_hash());
        assert_eq!(loaded.head.content_hash(), trained.head.content_hash());

        // Inference through the loaded model matches the in-memory one.
        let a = score_patches(
            &trained.reservoir,
            &trained.head,
            &patches[..2],
            config.encoding,
            config.exposure,
            Decode::Rate,
            None,
        )
        .unwrap();
        let b = score_patches(
            &loaded.reservoir,
            &loaded.head,
            &patches[..2],
            config.encoding,
            config.exposure,
            Decode::Rate,
            None,
        )
        .unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scores, y.scores);
        }
    }

    #[test]
    fn load_model_rejects_mismatched_parts() {
        let dir = tempfile::tempdir().unwrap();
        let model_dir = dir.path().join("model");
        let patches = tiny_patches(8);
        let trained = train_model(&patches, &tiny_config(), None).unwrap();
        save_model(&model_dir, &trained).unwrap();

        // Overwrite the head with one sized for a different liquid.
        let other = crate::readout::init_head(Variant::Linear, 99, 7).unwrap();
        other.save(&model_dir.join(HEAD_FILE)).unwrap();
        let err = load_model(&model_dir).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");

        // Restore the head but claim a different variant in model.json.
        trained.head.save(&model_dir.join(HEAD_FILE)).unwrap();
        let mut wrong = trained.config.clone();
        wrong.variant = Variant::Relu;
        write_json(&model_dir.join(CONFIG_FILE), &wrong).unwrap();
        let err = load_model(&model_dir).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn scoring_is_deterministic_and_shape_preserving() {
        let patches = tiny_patches(6);
        let config = tiny_config();
        let trained = train_model(&patches, &config, None).unwrap();
        let once = score_patches(
            &trained.reservoir,
            &trained.head,
            &patches,
            config.encoding,
            config.exposure,
            Decode::Rate,
            None,
        )
        .unwrap();
        let twice = score_patches(
            &trained.reservoir,
            &trained.head,
            &patches,
            config.encoding,
            config.exposure,
            Decode::Rate,
            None,
        )
        .unwrap();
        assert_eq!(once.len(), patches.len());
        for (i, (a, b)) in once.iter().zip(&twice).enumerate() {
            assert_eq!(a.scores.dim(), patches[i].data.dim());
            assert_eq!(a.scores, b.scores, "patch {i} differs between runs");
            for &s in a.scores.iter() {
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn latency_decode_scores_lie_in_unit_interval() {
        let patches = tiny_patches(3);
        let config = tiny_config();
        let trained = train_model(&patches, &config, None).unwrap();
        let scored = score_patches(
            &trained.reservoir,
            &trained.head,
            &patches,
            config.encoding,
            config.exposure,
            Decode::Latency,
            None,
        )
        .unwrap();
        for map in &scored {
            for &s in map.scores.iter() {
                assert!((0.0..=1.0).contains(&s), "latency score {s}");
            }
        }
    }

    #[test]
    fn evaluate_model_pools_pixels() {
        let patches = tiny_patches(10);
        let config = tiny_config();
        let trained = train_model(&patches, &config, None).unwrap();
        let loaded = LoadedModel {
            reservoir: trained.reservoir.clone(),
            head: trained.head.clone(),
            config: config.clone(),
        };
        let result = evaluate_model(&loaded, &patches, Decode::Rate, 0.5, None).unwrap();
        assert_eq!(result.n_pixels, 10 * 64);
        assert_eq!(result.confusion.total(), 10 * 64);
        assert!((0.0..=1.0).contains(&result.accuracy));
        assert!((0.0..=1.0).contains(&result.f1));
        assert!(result.auroc.is_some());
    }

    #[test]
    fn threshold_sweep_has_monotone_recall() {
        let patches = tiny_patches(6);
        let config = tiny_config();
        let trained = train_model(&patches, &config, None).unwrap();
        let scores = score_patches(
            &trained.reservoir,
            &trained.head,
            &patches,
            config.encoding,
            config.exposure,
            Decode::Rate,
            None,
        )
        .unwrap();
        let truth: Vec<Array2<bool>> = patches.iter().map(|p| p.mask.clone()).collect();
        let csv = threshold_sweep_csv(&scores, &truth, 9).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("threshold,tp,fp,tn,fn,precision,recall,fpr"));
        let recalls: Vec<f64> = lines
            .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
            .collect();
        assert_eq!(recalls.len(), 9);
        // Raising the threshold can only shrink the predicted-positive set.
        for pair in recalls.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "recall rose with threshold: {pair:?}");
        }
        assert!(threshold_sweep_csv(&scores, &truth, 1).is_err());
    }

    #[test]
    fn trial_objective_is_deterministic_and_bounded() {
        let patches = tiny_patches(20);
        let protocol = TrialProtocol {
            epochs: 2,
            subset_fraction: 0.5,
            ..TrialProtocol::default()
        };
        let trial = TrialConfig { input_sparsity: 0.5, exposure: 2, liquid_size: 32 };
        let a = trial_objective(&patches, &protocol, &trial, 7, None).unwrap();
        let b = trial_objective(&patches, &protocol, &trial, 7, None).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a), "F1 {a}");
        // A different seed draws a different subset/reservoir.
        let c = trial_objective(&patches, &protocol, &trial, 8, None).unwrap();
        assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn trial_objective_respects_subset_size() {
        // With subset_fraction 0.5 of 20 patches → 10 patches: 2 held out,
        // 8 trained on. Verify via the summary counts train ≤ 8.
        let patches = tiny_patches(4);
        let protocol = TrialProtocol {
            epochs: 1,
            subset_fraction: 0.5,
            ..TrialProtocol::default()
        };
        let trial = TrialConfig { input_sparsity: 0.5, exposure: 1, liquid_size: 24 };
        // 4 patches → subset 2 → holdout 1, train 1: still valid.
        let f1 = trial_objective(&patches, &protocol, &trial, 3, None).unwrap();
        assert!((0.0..=1.0).contains(&f1));
        let err = trial_objective(&patches[..1], &protocol, &trial, 3, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn assemble_scores_rebuilds_the_mosaic() {
        // Two 2×2 patches side by side for source 5, one stray patch for 6.
        let mk = |t0: u16, f0: u16, source_id: u32, fill: f32| Patch {
            data: Array2::from_elem((2, 2), fill),
            mask: Array2::from_elem((2, 2), fill > 1.0),
            origin: PatchOrigin { time_offset: t0, freq_offset: f0, source_id },
        };
        let patches = vec![mk(0, 0, 5, 1.0), mk(0, 2, 5, 2.0), mk(0, 0, 6, 9.0)];
        let scores: Vec<ScoreMap> = (0..3)
            .map(|i| ScoreMap { scores: Array2::from_elem((2, 2), i as f32 / 10.0) })
            .collect();
        let (data, score, truth) = assemble_scores(&patches, &scores, 5).unwrap();
        assert_eq!(data.dim(), (2, 4));
        assert_eq!(data[[0, 0]], 1.0);
        assert_eq!(data[[0, 3]], 2.0);
        assert_eq!(score[[1, 1]], 0.0);
        assert_eq!(score[[1, 2]], 0.1);
        assert!(!truth[[0, 0]]);
        assert!(truth[[0, 2]]);
        assert!(assemble_scores(&patches, &scores, 7).is_err());
        assert!(assemble_scores(&patches, &scores[..2], 5).is_err());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut config = tiny_config();
        config.threshold = 0.0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = tiny_config();
        config.input_sparsity = 1.5;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        let mut config = tiny_config();
        config.liquid_size = 0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        assert!(tiny_config().validate().is_ok());
        assert!("rate".parse::<Decode>().is_ok());
        assert!("latency".parse::<Decode>().is_ok());
        assert!("ratio".parse::<Decode>().is_err());
        assert_eq!(Decode::Rate.to_string(), "rate");
    }
}
