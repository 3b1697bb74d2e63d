//! Hyper-parameter search over the liquid configuration with a minimal
//! tree-structured Parzen estimator.
//!
//! The search space covers input sparsity (continuous), exposure and liquid
//! size (categorical menus). Trials are sequential: each samples a
//! configuration, calls an objective (higher is better — the pipeline uses
//! validation F1), and appends a record to a JSON-lines study file after
//! every trial, so an interrupted study resumes without re-running anything.
//!
//! TPE here is the univariate form: completed trials split into "good"
//! (top γ by objective) and "bad"; each dimension gets a density per group
//! (Gaussian kernels with a max-spacing bandwidth over observed points, or
//! add-one-smoothed counts for menus); candidates are drawn from the good
//! densities and the candidate with the best good/bad ratio wins. The first
//! `n_startup` trials sample uniformly instead.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::util;

pub const TPE_GAMMA: f64 = 0.25;
pub const TPE_CANDIDATES: usize = 24;
pub const TPE_STARTUP: usize = 8;
pub const DEFAULT_BUDGET: usize = 25;

const SALT_TRIAL: u64 = 0x5452_4941_4c53_4545; // "TRIALSEE"
const SALT_SAMPLE: u64 = 0x5341_4d50_4c45_5251; // "SAMPLERQ"

/// The searchable dimensions. The default is the stock menu used by the
/// `hpo` subcommand; tests may restrict it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchSpace {
    /// Inclusive bounds of the continuous input-sparsity dimension.
    pub input_sparsity: (f64, f64),
    pub exposure: Vec<usize>,
    pub liquid_size: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            input_sparsity: (0.0, 1.0),
            exposure: vec![1, 2, 4, 8, 16, 32],
            liquid_size: vec![512, 1024, 2048, 4096, 8192],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.input_sparsity;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("bad input_sparsity interval [{lo}, {hi}]")));
        }
        if self.exposure.is_empty() || self.liquid_size.is_empty() {
            return Err(Error::Config("search space menus must not be empty".into()));
        }
        if self.exposure.contains(&0) || self.liquid_size.contains(&0) {
            return Err(Error::Config("menu entries must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, cfg: &TrialConfig) -> bool {
        let (lo, hi) = self.input_sparsity;
        (lo..=hi).contains(&cfg.input_sparsity)
            && self.exposure.contains(&cfg.exposure)
            && self.liquid_size.contains(&cfg.liquid_size)
    }
}

/// One sampled point of the space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrialConfig {
    pub input_sparsity: f64,
    pub exposure: usize,
    pub liquid_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Complete,
    Failed,
}

/// Record of one executed trial.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: TrialConfig,
    pub status: TrialStatus,
    /// Objective value (higher is better); `None` for failed trials.
    pub objective: Option<f64>,
    pub seed: u64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// An append-only sequence of trials over one space.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub space: SearchSpace,
    pub budget: usize,
    pub seed: u64,
    pub trials: Vec<Trial>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StudyHeader {
    space: SearchSpace,
    budget: usize,
    seed: u64,
}

/// How configurations are proposed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Tpe { gamma: f64, n_candidates: usize, n_startup: usize },
    Uniform,
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Tpe { gamma: TPE_GAMMA, n_candidates: TPE_CANDIDATES, n_startup: TPE_STARTUP }
    }
}

impl Study {
    pub fn new(space: SearchSpace, budget: usize, seed: u64) -> Self {
        Study { space, budget, seed, trials: Vec::new() }
    }

    pub fn completed(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.status == TrialStatus::Complete)
    }

    /// Best completed trial, if any.
    pub fn best(&self) -> Option<&Trial> {
        self.completed()
            .max_by(|a, b| a.objective.unwrap_or(f64::NEG_INFINITY).total_cmp(
                &b.objective.unwrap_or(f64::NEG_INFINITY),
            ))
    }

    /// Running maximum of the objective across the trial sequence (NaN-free,
    /// `None` until the first completed trial).
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        let mut best = None::<f64>;
        self.trials
            .iter()
            .map(|t| {
                if let (TrialStatus::Complete, Some(o)) = (t.status, t.objective) {
                    best = Some(best.map_or(o, |b: f64| b.max(o)));
                }
                best
            })
            .collect()
    }

    /// Serialize as JSON lines: a header line, then one line per trial.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&StudyHeader {
            space: self.space.clone(),
            budget: self.budget,
            seed: self.seed,
        })
        .expect("header serializes");
        out.push('\n');
        for trial in &self.trials {
            out.push_str(&serde_json::to_string(trial).expect("trial serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Data("study file is empty".into()))?;
        let header: StudyHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::Data(format!("bad study header: {e}")))?;
        header.space.validate()?;
        let mut trials = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let trial: Trial = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("bad trial on line {}: {e}", i + 2)))?;
            if trial.index != trials.len() {
                return Err(Error::Data(format!(
                    "trial on line {} has index {}, expected {}",
                    i + 2,
                    trial.index,
                    trials.len()
                )));
            }
            trials.push(trial);
        }
        Ok(Study { space: header.space, budget: header.budget, seed: header.seed, trials })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::atomic_write(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Uniform draw from the space.
pub fn sample_uniform(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Result<TrialConfig> {
    space.validate()?;
    let (lo, hi) = space.input_sparsity;
    let input_sparsity = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    Ok(TrialConfig {
        input_sparsity,
        exposure: space.exposure[rng.random_range(0..space.exposure.len())],
        liquid_size: space.liquid_size[rng.random_range(0..space.liquid_size.len())],
    })
}

/// Gaussian kernel mixture over observed points with per-point max-spacing
/// bandwidths: each kernel's width is the larger of its gaps to the adjacent
/// points, with the domain edges acting as outermost neighbours. Kernels
/// sharpen where observations cluster but stay wide at the fringe, so the
/// estimate exploits without collapsing. Empty point sets degrade to the
/// uniform density over [lo, hi].
struct Kde {
    points: Vec<f64>,
    bandwidths: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Kde {
    fn build(mut points: Vec<f64>, lo: f64, hi: f64) -> Self {
        points.sort_by(f64::total_cmp);
        let span = (hi - lo).max(1e-12);
        let floor = span * 1e-3;
        let k = points.len();
        let bandwidths = (0..k)
            .map(|i| {
                let left = if i == 0 { lo } else { points[i - 1] };
                let right = if i + 1 == k { hi } else { points[i + 1] };
                (points[i] - left).max(right - points[i]).max(floor)
            })
            .collect();
        Kde { points, bandwidths, lo, hi }
    }

    fn pdf(&self, x: f64) -> f64 {
        if self.points.is_empty() {
            return 1.0 / (self.hi - self.lo).max(1e-12);
        }
        let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
        let mut total = 0.0;
        for (&p, &bw) in self.points.iter().zip(&self.bandwidths) {
            let z = (x - p) / bw;
            total += (-0.5 * z * z).exp() / (bw * sqrt_2pi);
        }
        total / self.points.len() as f64
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.points.is_empty() {
            return if self.lo == self.hi {
                self.lo
            } else {
                rng.random_range(self.lo..=self.hi)
            };
        }
        let i = rng.random_range(0..self.points.len());
        let normal = Normal::new(self.points[i], self.bandwidths[i]).expect("positive bandwidth");
        normal.sample(rng).clamp(self.lo, self.hi)
    }
}

/// Add-one-smoothed categorical probabilities in menu order.
fn category_probs(observed: &[usize], menu: &[usize]) -> Vec<f64> {
    let n = observed.len() as f64;
    let k = menu.len() as f64;
    menu.iter()
        .map(|v| {
            let count = observed.iter().filter(|&&o| o == *v).count() as f64;
            (count + 1.0) / (n + k)
        })
        .collect()
}

fn sample_category(menu: &[usize], probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (v, p) in menu.iter().zip(probs) {
        if u < *p {
            return *v;
        }
        u -= p;
    }
    *menu.last().expect("menu is non-empty")
}

struct DimDensities {
    sparsity: Kde,
    exposure_probs: Vec<f64>,
    liquid_probs: Vec<f64>,
}

impl DimDensities {
    fn build(configs: &[&TrialConfig], space: &SearchSpace) -> Self {
        let (lo, hi) = space.input_sparsity;
        let sparsity_points: Vec<f64> = configs.iter().map(|c| c.input_sparsity).collect();
        let exposures: Vec<usize> = configs.iter().map(|c| c.exposure).collect();
        let liquids: Vec<usize> = configs.iter().map(|c| c.liquid_size).collect();
        DimDensities {
            sparsity: Kde::build(sparsity_points, lo, hi),
            exposure_probs: category_probs(&exposures, &space.exposure),
            liquid_probs: category_probs(&liquids, &space.liquid_size),
        }
    }

    fn density(&self, cfg: &TrialConfig, space: &SearchSpace) -> f64 {
        let e_idx = space.exposure.iter().position(|&v| v == cfg.exposure).expect("menu member");
        let l_idx =
            space.liquid_size.iter().position(|&v| v == cfg.liquid_size).expect("menu member");
        self.sparsity.pdf(cfg.input_sparsity)
            * self.exposure_probs[e_idx]
            * self.liquid_probs[l_idx]
    }

    fn draw(&self, space: &SearchSpace, rng: &mut ChaCha8Rng) -> TrialConfig {
        TrialConfig {
            input_sparsity: self.sparsity.draw(rng),
            exposure: sample_category(&space.exposure, &self.exposure_probs, rng),
            liquid_size: sample_category(&space.liquid_size, &self.liquid_probs, rng),
        }
    }
}

/// Propose the next configuration. Fewer than `n_startup` completed trials
/// fall back to a uniform draw; afterwards candidates come from the good
/// density and the best good/bad density ratio wins.
pub fn sample_tpe(
    study: &Study,
    gamma: f64,
    n_candidates: usize,
    n_startup: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrialConfig> {
    study.space.validate()?;
    if !(0.0..=1.0).contains(&gamma) || n_candidates == 0 {
        return Err(Error::Config(format!(
            "bad TPE settings gamma={gamma}, n_candidates={n_candidates}"
        )));
    }
    let mut done: Vec<(&TrialConfig, f64)> = study
        .completed()
        .filter_map(|t| t.objective.map(|o| (&t.config, o)))
        .collect();
    if done.len() < n_startup.max(2) {
        return sample_uniform(&study.space, rng);
    }
    // Highest objective first; the top γ fraction forms the good set.
    done.sort_by(|a, b| b.1.total_cmp(&a.1));
    let n_good = ((gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let good: Vec<&TrialConfig> = done[..n_good].iter().map(|(c, _)| *c).collect();
    let bad: Vec<&TrialConfig> = done[n_good..].iter().map(|(c, _)| *c).collect();
    let good_density = DimDensities::build(&good, &study.space);
    let bad_density = DimDensities::build(&bad, &study.space);

    let mut best: Option<(TrialConfig, f64)> = None;
    for _ in 0..n_candidates {
        let candidate = good_density.draw(&study.space, rng);
        let g = good_density.density(&candidate, &study.space);
        let b = bad_density.density(&candidate, &study.space).max(1e-300);
        let ratio = g / b;
        if best.as_ref().is_none_or(|(_, r)| ratio > *r) {
            best = Some((candidate, ratio));
        }
    }
    Ok(best.expect("n_candidates ≥ 1").0)
}

/// Seed for trial `index` of a study.
pub fn trial_seed(study_seed: u64, index: usize) -> u64 {
    util::mix_seed(util::mix_seed(study_seed, SALT_TRIAL), index as u64)
}

/// Run (or resume) a study until `budget` trials exist.
///
/// The objective receives the sampled configuration and the trial seed and
/// returns a finite value to maximize; an `Err` marks the trial failed and
/// the study continues. When `path` is given the study is persisted after
/// every trial and a pre-existing file is resumed — its header must match
/// `space`/`budget`/`seed` exactly. Sampling for trial i draws from an RNG
/// keyed by (seed, i) and the prior trials only, so a resumed study is
/// bit-identical to an uninterrupted one.
pub fn run_study<F>(
    space: SearchSpace,
    budget: usize,
    seed: u64,
    sampler: Sampler,
    path: Option<&Path>,
    mut objective: F,
) -> Result<Study>
where
    F: FnMut(&TrialConfig, u64) -> Result<f64>,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    let mut study = match path {
        Some(p) if p.exists() => {
            let existing = Study::load(p)?;
            if existing.space != space || existing.budget != budget || existing.seed != seed {
                return Err(Error::Config(format!(
                    "study file {} was created with different settings; \
                     delete it or match its space/budget/seed",
                    p.display()
                )));
            }
            existing
        }
        _ => Study::new(space, budget, seed),
    };
    if study.trials.len() > budget {
        return Err(Error::Data(format!(
            "study holds {} trials, more than the budget {budget}",
            study.trials.len()
        )));
    }

    while study.trials.len() < budget {
        let index = study.trials.len();
        let mut rng = util::rng_from(util::mix_seed(util::mix_seed(seed, SALT_SAMPLE), index as u64));
        let config = match sampler {
            Sampler::Uniform => sample_uniform(&study.space, &mut rng)?,
            Sampler::Tpe { gamma, n_candidates, n_startup } => {
                sample_tpe(&study, gamma, n_candidates, n_startup, &mut rng)?
            }
        };
        let t_seed = trial_seed(seed, index);
        let started = Instant::now();
        let trial = match objective(&config, t_seed) {
            Ok(value) if value.is_finite() => Trial {
                index,
                config,
                status: TrialStatus::Complete,
                objective: Some(value),
                seed: t_seed,
                seconds: started.elapsed().as_secs_f64(),
                error: None,
            },
            Ok(value) => Trial {
                index,
                config,
                status: TrialStatus::Failed,
                objective: None,
                seed: t_seed,
                seconds: started.elapsed().as_secs_f64(),
                error: Some(format!("objective returned non-finite value {value}")),
            },
            Err(e) => Trial {
                index,
                config,
                status: TrialStatus::Failed,
                objective: None,
                seed: t_seed,
                seconds: started.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            },
        };
        study.trials.push(trial);
        if let Some(p) = path {
            study.save(p)?;
        }
    }
    Ok(study)
}

/// Marginal view of one search dimension: best and mean objective per bin.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginalBin {
    pub label: String,
    pub count: usize,
    pub best: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginalSummary {
    pub parameter: String,
    pub bins: Vec<MarginalBin>,
}

const SPARSITY_BINS: usize = 10;

/// Per-parameter marginal summaries over completed trials: a coarse view of
/// which settings pay off, in place of a full importance analysis.
pub fn marginals(study: &Study) -> Vec<MarginalSummary> {
    let done: Vec<(&TrialConfig, f64)> = study
        .completed()
        .filter_map(|t| t.objective.map(|o| (&t.config, o)))
        .collect();
    let (lo, hi) = study.space.input_sparsity;
    let width = ((hi - lo) / SPARSITY_BINS as f64).max(1e-12);
    let sparsity_bins: Vec<MarginalBin> = (0..SPARSITY_BINS)
        .map(|b| {
            let (blo, bhi) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
            let members: Vec<f64> = done
                .iter()
                .filter(|(c, _)| {
                    let last = b == SPARSITY_BINS - 1;
                    c.input_sparsity >= blo && (c.input_sparsity < bhi || last)
                })
                .map(|(_, o)| *o)
                .collect();
            bin_stats(format!("[{blo:.2},{bhi:.2})"), &members)
        })
        .collect();
    let menu_bins = |values: &[usize], pick: fn(&TrialConfig) -> usize| -> Vec<MarginalBin> {
        values
            .iter()
            .map(|&v| {
                let members: Vec<f64> =
                    done.iter().filter(|(c, _)| pick(c) == v).map(|(_, o)| *o).collect();
                bin_stats(v.to_string(), &members)
            })
            .collect()
    };
    vec![
        MarginalSummary { parameter: "input_sparsity".into(), bins: sparsity_bins },
        MarginalSummary {
            parameter: "exposure".into(),
            bins: menu_bins(&study.space.exposure, |c| c.exposure),
        },
        MarginalSummary {
            parameter: "liquid_size".into(),
            bins: menu_bins(&study.space.liquid_size, |c| c.liquid_size),
        },
    ]
}

fn bin_stats(label: String, members: &[f64]) -> MarginalBin {
    if members.is_empty() {
        return MarginalBin { label, count: 0, best: f64::NAN, mean: f64::NAN };
    }
    let best = members.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = members.iter().sum::<f64>() / members.len() as f64;
    MarginalBin { label, count: members.len(), best, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_space() -> SearchSpace {
        SearchSpace {
            input_sparsity: (0.0, 1.0),
            exposure: vec![1, 2, 4],
            liquid_size: vec![32, 64],
        }
    }

    #[test]
    fn uniform_fallback_spreads_over_the_menus() {
        // Before n_startup completed trials, sampling is uniform: each of the
        // six exposure values should appear ≈ 1000/6 times (±3σ ≈ ±35).
        let study = Study::new(SearchSpace::default(), 25, 1);
        let mut counts = std::collections::BTreeMap::new();
        for i in 0..1000u64 {
            let mut rng = util::rng_from(i);
            let cfg = sample_tpe(&study, TPE_GAMMA, TPE_CANDIDATES, TPE_STARTUP, &mut rng).unwrap();
            assert!(study.space.contains(&cfg));
            *counts.entry(cfg.exposure).or_insert(0usize) += 1;
        }
        for (&exposure, &count) in &counts {
            assert!(
                (131..=202).contains(&count),
                "exposure {exposure} drawn {count} times, expected ≈ 167 ± 35"
            );
        }
        assert_eq!(counts.len(), 6);
    }

    fn trial(index: usize, cfg: TrialConfig, objective: f64) -> Trial {
        Trial {
            index,
            config: cfg,
            status: TrialStatus::Complete,
            objective: Some(objective),
            seed: index as u64,
            seconds: 0.0,
            error: None,
        }
    }

    #[test]
    fn tpe_prefers_the_good_category() {
        // Good trials all use exposure 4; bad trials never do. TPE should
        // pick 4 far more often than not.
        let space = SearchSpace::default();
        let mut study = Study::new(space, 100, 3);
        for i in 0..4 {
            study.trials.push(trial(
                i,
                TrialConfig { input_sparsity: 0.5, exposure: 4, liquid_size: 512 },
                0.9,
            ));
        }
        let others = [1, 2, 8, 16, 32];
        for i in 0..12 {
            study.trials.push(trial(
                4 + i,
                TrialConfig {
                    input_sparsity: 0.5,
                    exposure: others[i % others.len()],
                    liquid_size: 512,
                },
                0.1,
            ));
        }
        let mut hits = 0;
        for i in 0..1000u64 {
            let mut rng = util::rng_from(i);
            let cfg = sample_tpe(&study, TPE_GAMMA, TPE_CANDIDATES, TPE_STARTUP, &mut rng).unwrap();
            if cfg.exposure == 4 {
                hits += 1;
            }
        }
        assert!(hits > 500, "exposure 4 chosen {hits}/1000 times");
    }

    #[test]
    fn tpe_with_equal_objectives_stays_spread_out() {
        // All objectives equal ⇒ good and bad densities estimate the same
        // distribution, every candidate's ratio is ≈ 1, and the choice is
        // effectively a draw from the model — not a collapse onto one point.
        let space = SearchSpace::default();
        let mut study = Study::new(space.clone(), 100, 3);
        let mut rng = util::rng_from(99);
        for i in 0..16 {
            let cfg = sample_uniform(&space, &mut rng).unwrap();
            study.trials.push(trial(i, cfg, 0.5));
        }
        let mut exposures = std::collections::BTreeSet::new();
        let mut sparsities = Vec::new();
        for i in 0..200u64 {
            let mut rng = util::rng_from(i);
            let cfg = sample_tpe(&study, TPE_GAMMA, TPE_CANDIDATES, TPE_STARTUP, &mut rng).unwrap();
            exposures.insert(cfg.exposure);
            sparsities.push(cfg.input_sparsity);
        }
        assert!(exposures.len() >= 3, "sampling collapsed to {exposures:?}");
        let spread = sparsities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - sparsities.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.1, "sparsity spread {spread}");
    }

    proptest! {
        #[test]
        fn sampled_configs_lie_in_the_space(seed in 0u64..500, n_trials in 0usize..20) {
            let space = tiny_space();
            let mut study = Study::new(space.clone(), 50, seed);
            let mut rng = util::rng_from(seed ^ 0xabc);
            for i in 0..n_trials {
                let cfg = sample_uniform(&space, &mut rng).unwrap();
                let objective = rng.random_range(0.0..1.0);
                study.trials.push(trial(i, cfg, objective));
            }
            let mut rng = util::rng_from(seed);
            let cfg = sample_tpe(&study, TPE_GAMMA, TPE_CANDIDATES, TPE_STARTUP, &mut rng).unwrap();
            prop_assert!(space.contains(&cfg));
        }

        #[test]
        fn best_so_far_is_monotone(seed in 0u64..200) {
            let space = tiny_space();
            let mut study = Study::new(space.clone(), 64, seed);
            let mut rng = util::rng_from(seed);
            for i in 0..30 {
                let cfg = sample_uniform(&space, &mut rng).unwrap();
                if rng.random_bool(0.2) {
                    study.trials.push(Trial {
                        index: i,
                        config: cfg,
                        status: TrialStatus::Failed,
                        objective: None,
                        seed: 0,
                        seconds: 0.0,
                        error: Some("boom".into()),
                    });
                } else {
                    let objective = rng.random_range(0.0..1.0);
                    study.trials.push(trial(i, cfg, objective));
                }
            }
            let curve = study.best_so_far();
            prop_assert_eq!(curve.len(), study.trials.len());
            let mut prev = None::<f64>;
            for value in curve {
                if let (Some(p), Some(v)) = (prev, value) {
                    prop_assert!(v >= p);
                }
                if value.is_some() {
                    prev = value;
                }
            }
        }
    }

    #[test]
    fn study_file_round_trips() {
        let space = tiny_space();
        let mut study = Study::new(space.clone(), 9, 5);
        let mut rng = util::rng_from(1);
        for i in 0..4 {
            let cfg = sample_uniform(&space, &mut rng).unwrap();
            study.trials.push(trial(i, cfg, 0.25 * i as f64));
        }
        study.trials[2].status = TrialStatus::Failed;
        study.trials[2].objective = None;
        study.trials[2].error = Some("ran out of liquid".into());
        let text = study.to_jsonl();
        let back = Study::from_jsonl(&text).unwrap();
        assert_eq!(study, back);

        assert!(Study::from_jsonl("").is_err());
        assert!(Study::from_jsonl("{\"nope\":1}\n").is_err());
    }

    #[test]
    fn budget_one_runs_exactly_one_trial() {
        let study = run_study(tiny_space(), 1, 7, Sampler::default(), None, |cfg, _| {
            Ok(cfg.input_sparsity)
        })
        .unwrap();
        assert_eq!(study.trials.len(), 1);
        assert_eq!(
            study.best().unwrap().objective,
            study.trials[0].objective
        );
    }

    #[test]
    fn failed_trials_are_recorded_and_the_study_continues() {
        let study = run_study(tiny_space(), 6, 7, Sampler::default(), None, |cfg, seed| {
            if seed % 2 == 0 {
                Err(Error::Numeric("simulated blow-up".into()))
            } else {
                Ok(cfg.input_sparsity)
            }
        })
        .unwrap();
        assert_eq!(study.trials.len(), 6);
        assert!(study.trials.iter().any(|t| t.status == TrialStatus::Failed));
        for t in &study.trials {
            match t.status {
                TrialStatus::Complete => assert!(t.objective.is_some()),
                TrialStatus::Failed => {
                    assert!(t.objective.is_none());
                    assert!(t.error.is_some());
                }
            }
        }
        // Non-finite objectives are failures too.
        let study = run_study(tiny_space(), 2, 7, Sampler::default(), None, |_, _| Ok(f64::NAN))
            .unwrap();
        assert!(study.trials.iter().all(|t| t.status == TrialStatus::Failed));
    }

    #[test]
    fn resume_runs_only_the_remaining_trials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.jsonl");
        let mut calls_first = Vec::new();
        run_study(tiny_space(), 4, 9, Sampler::default(), Some(&path), |cfg, seed| {
            calls_first.push((cfg.clone(), seed));
            Ok(cfg.input_sparsity)
        })
        .unwrap();
        assert_eq!(calls_first.len(), 4);

        let mut calls_second = Vec::new();
        let resumed = run_study(tiny_space(), 10, 9, Sampler::default(), Some(&path), |cfg, seed| {
            calls_second.push((cfg.clone(), seed));
            Ok(cfg.input_sparsity)
        });
        // Budget mismatch with the stored header is refused.
        assert!(matches!(resumed, Err(Error::Config(_))));
        assert!(calls_second.is_empty());

        let resumed = run_study(tiny_space(), 4, 9, Sampler::default(), Some(&path), |cfg, seed| {
            calls_second.push((cfg.clone(), seed));
            Ok(cfg.input_sparsity)
        })
        .unwrap();
        // Fully complete file: nothing re-runs.
        assert!(calls_second.is_empty());
        assert_eq!(resumed.trials.len(), 4);
    }

    #[test]
    fn interrupted_study_resumes_identically() {
        // Run 7 trials straight through; then run the same study with an
        // interrupt after 3 and resume. Same file, same trials, and the
        // resumed run executes exactly 4 objective calls.
        let space = tiny_space();
        let objective = |cfg: &TrialConfig, seed: u64| {
            Ok(cfg.input_sparsity + (seed % 7) as f64 * 1e-6)
        };
        let straight =
            run_study(space.clone(), 7, 42, Sampler::default(), None, objective).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("study.jsonl");
        let mut calls = 0;
        let interrupted = run_study(space.clone(), 7, 42, Sampler::default(), Some(&path), |cfg, seed| {
            if calls == 3 {
                return Err(Error::Numeric("interrupt".into()));
            }
            calls += 1;
            objective(cfg, seed)
        });
        // Simulate a crash instead of a failed trial: truncate the file to
        // its first 4 lines (header + 3 trials).
        drop(interrupted);
        let text = std::fs::read_to_string(&path).unwrap();
        let keep: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&path, format!("{}\n", keep.join("\n"))).unwrap();

        let mut resumed_calls = 0;
        let resumed = run_study(space, 7, 42, Sampler::default(), Some(&path), |cfg, seed| {
            resumed_calls += 1;
            objective(cfg, seed)
        })
        .unwrap();
        assert_eq!(resumed_calls, 4);
        // Timing differs run to run; everything else must match.
        assert_eq!(straight.trials.len(), resumed.trials.len());
        for (a, b) in straight.trials.iter().zip(&resumed.trials) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.config, b.config);
            assert_eq!(a.status, b.status);
            assert_eq!(a.objective, b.objective);
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn deterministic_objective_reruns_identically() {
        let run = || {
            run_study(tiny_space(), 12, 3, Sampler::default(), None, |cfg, seed| {
                Ok(cfg.input_sparsity * 0.5 + (seed % 11) as f64 / 22.0)
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trials.len(), b.trials.len());
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!(x.config, y.config);
            assert_eq!(x.objective, y.objective);
        }
    }

    #[test]
    fn marginals_summarize_by_bin() {
        let space = tiny_space();
        let mut study = Study::new(space, 10, 1);
        study.trials.push(trial(
            0,
            TrialConfig { input_sparsity: 0.05, exposure: 1, liquid_size: 32 },
            0.2,
        ));
        study.trials.push(trial(
            1,
            TrialConfig { input_sparsity: 0.07, exposure: 1, liquid_size: 64 },
            0.4,
        ));
        study.trials.push(trial(
            2,
            TrialConfig { input_sparsity: 0.95, exposure: 4, liquid_size: 32 },
            0.9,
        ));
        let m = marginals(&study);
        assert_eq!(m.len(), 3);
        let sparsity = &m[0];
        assert_eq!(sparsity.bins.len(), 10);
        assert_eq!(sparsity.bins[0].count, 2);
        assert_eq!(sparsity.bins[0].best, 0.4);
        assert!((sparsity.bins[0].mean - 0.3).abs() < 1e-12);
        assert_eq!(sparsity.bins[9].count, 1);
        let exposure = &m[1];
        assert_eq!(exposure.bins[0].count, 2); // exposure 1
        assert_eq!(exposure.bins[2].count, 1); // exposure 4
        assert_eq!(exposure.bins[1].count, 0); // exposure 2 unused
        assert!(exposure.bins[1].best.is_nan());
    }

    #[test]
    fn toy_objective_tpe_beats_uniform_more_often_than_not() {
        // Reduced version of the acceptance comparison: 1-D quadratic with
        // optimum at 0.3; paired best-of-12 over 20 study pairs.
        let space = SearchSpace {
            input_sparsity: (0.0, 1.0),
            exposure: vec![1],
            liquid_size: vec![32],
        };
        let objective =
            |cfg: &TrialConfig, _: u64| Ok(-(cfg.input_sparsity - 0.3).powi(2));
        let mut tpe_wins = 0;
        let mut ties = 0;
        for seed in 0..20 {
            let tpe = run_study(space.clone(), 12, seed, Sampler::default(), None, objective)
                .unwrap();
            let uni = run_study(space.clone(), 12, seed, Sampler::Uniform, None, objective)
                .unwrap();
            let tb = tpe.best().unwrap().objective.unwrap();
            let ub = uni.best().unwrap().objective.unwrap();
            if tb > ub {
                tpe_wins += 1;
            } else if tb == ub {
                ties += 1;
            }
        }
        assert!(
            tpe_wins * 2 > 20 - ties,
            "TPE won only {tpe_wins}/20 paired studies ({ties} ties)"
        );
    }
}
