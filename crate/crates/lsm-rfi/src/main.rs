//! Thin command-line front end over the library: each subcommand wires
//! together pipeline calls, writes a run manifest next to its outputs, and
//! logs `key=value` lines to stderr. Exit codes: 0 success, 2 configuration
//! error, 3 data/format error, 4 numeric divergence.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use lsm_rfi::encode::Encoding;
use lsm_rfi::error::{Error, Result};
use lsm_rfi::hpo::{self, Sampler, SearchSpace};
use lsm_rfi::manifest::{self, RunManifest};
use lsm_rfi::pipeline::{self, Decode, ModelConfig, TrialProtocol};
use lsm_rfi::readout::Variant;
use lsm_rfi::render::{render_figure, RenderOptions};
use lsm_rfi::spectra::{load_dataset, save_dataset};
use lsm_rfi::{cache, metrics};

#[derive(Parser)]
#[command(
    name = "lsm-rfi",
    version,
    about = "Liquid state machine RFI detector: synthesize spectrograms, train \
             spiking-reservoir readouts, evaluate per-pixel flags, and search \
             hyper-parameters.",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 data/format error, \
                  4 numeric divergence.\nEnvironment: LSM_CACHE_DIR sets the spike-raster \
                  cache directory (overridden by --cache-dir)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads (1 = bit-reproducible; 0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Spike-raster cache directory (overrides LSM_CACHE_DIR).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spectrogram dataset and store it as patches.
    Generate(GenerateArgs),
    /// Build a frozen liquid and train a readout head into a model directory.
    Train(TrainArgs),
    /// Score a dataset with a trained model and write an evaluation report.
    Eval(EvalArgs),
    /// Search input sparsity, exposure, and liquid size with TPE.
    Hpo(HpoArgs),
    /// Render input / prediction / truth panels for one source spectrogram.
    Render(RenderArgs),
    /// Re-run a recorded manifest into a fresh directory and verify hashes.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of spectrograms to synthesize.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Spectrogram side length in cells (time steps = frequency channels).
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Target fraction of RFI-flagged cells, in (0,1).
    #[arg(long, default_value_t = 0.03)]
    contamination: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Input encoding: latency, rate, or direct.
    #[arg(long, default_value = "direct")]
    encoding: Encoding,
    /// Steps the liquid sees each spectrogram column: 1, 2, 4, 8, 16, or 32.
    #[arg(long, default_value_t = 4)]
    exposure: usize,
    /// Readout head: linear, relu, or transformer.
    #[arg(long, default_value = "linear")]
    readout: Variant,
    /// Liquid neurons: 512, 1024, 2048, 4096, or 8192 (other sizes allowed).
    #[arg(long, default_value_t = 512)]
    liquid_size: usize,
    /// Fraction of liquid neurons receiving input, in [0,1].
    #[arg(long, default_value_t = 0.5)]
    input_sparsity: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Fraction of patches held out for validation loss.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Extra weight on RFI pixels in the loss (default 1).
    #[arg(long)]
    pos_weight: Option<f64>,
    /// Decision threshold stored with the model.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file to score.
    #[arg(long)]
    data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Score decoding: rate or latency.
    #[arg(long, default_value = "rate")]
    decode: Decode,
    /// Decision threshold (defaults to the model's stored threshold).
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write a per-threshold confusion sweep CSV here.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct HpoArgs {
    /// Dataset file; each trial trains on a seeded subset of it.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "direct")]
    encoding: Encoding,
    #[arg(long, default_value = "linear")]
    readout: Variant,
    /// Total trials, including any already in the study file.
    #[arg(long, default_value_t = 25)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Study file (JSON lines); resumed if it exists.
    #[arg(long)]
    study: PathBuf,
    /// Training epochs per trial.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Fraction of the dataset each trial samples.
    #[arg(long, default_value_t = 0.1)]
    subset_fraction: f64,
    /// Proposal strategy: tpe or uniform.
    #[arg(long, default_value = "tpe")]
    sampler: String,
    /// Restrict the exposure menu (comma-separated, e.g. "1,2,4").
    #[arg(long)]
    exposure_menu: Option<String>,
    /// Restrict the liquid-size menu (comma-separated, e.g. "128,256").
    #[arg(long)]
    liquid_menu: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file containing the source to render.
    #[arg(long)]
    data: PathBuf,
    /// Source spectrogram id within the dataset.
    #[arg(long, default_value_t = 0)]
    source: u32,
    /// Output figure path; .png and .svg are written with this stem.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "rate")]
    decode: Decode,
    /// Decision threshold (defaults to the model's stored threshold).
    #[arg(long)]
    threshold: Option<f64>,
    /// Output pixels per spectrogram cell (default: 4 if ≤ 64 rows, else 1).
    #[arg(long)]
    scale: Option<u32>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Manifest from a previous run.
    #[arg(long)]
    manifest: PathBuf,
    /// Fresh directory for the replayed outputs.
    #[arg(long)]
    out: PathBuf,
}

fn log_kv(event: &str, pairs: &[(&str, String)]) {
    let mut line = format!("event={event}");
    for (k, v) in pairs {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        line.push_str(v);
    }
    eprintln!("{line}");
}

fn main() {
    let cli = Cli::parse();
    if cli.threads != 1 {
        // Ignore failure: the pool can only be set once per process, and the
        // default (1) never needs a custom pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    } else {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match dispatch(&cli) {
        Ok(_) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: &Cli) -> Result<RunManifest> {
    let cache_dir = cache::resolve_cache_dir(cli.cache_dir.clone());
    match &cli.command {
        Command::Generate(args) => cmd_generate(args, cli.threads),
        Command::Train(args) => cmd_train(args, cli.threads, cache_dir.as_deref()),
        Command::Eval(args) => cmd_eval(args, cli.threads, cache_dir.as_deref()),
        Command::Hpo(args) => cmd_hpo(args, cli.threads, cache_dir.as_deref()),
        Command::Render(args) => cmd_render(args, cli.threads, cache_dir.as_deref()),
        Command::Reproduce(args) => cmd_reproduce(args, cli),
    }
}

/// Manifest location: `manifest.json` inside directory outputs, a sibling
/// `<name>.manifest.json` for file outputs.
fn manifest_path_for(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(pipeline::MANIFEST_FILE)
    } else {
        let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        out.with_file_name(format!("{name}.manifest.json"))
    }
}

fn file_name_key(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_generate(args: &GenerateArgs, threads: usize) -> Result<RunManifest> {
    log_kv(
        "generate",
        &[
            ("count", args.count.to_string()),
            ("size", args.size.to_string()),
            ("contamination", args.contamination.to_string()),
            ("seed", args.seed.to_string()),
        ],
    );
    let patches = pipeline::generate_dataset(args.count, args.size, args.contamination, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_dataset(&patches, &args.out)?;
    let flagged: usize = patches.iter().map(|p| p.mask.iter().filter(|&&b| b).count()).sum();
    let total: usize = patches.iter().map(|p| p.mask.len()).sum();
    log_kv(
        "generate_done",
        &[
            ("patches", patches.len().to_string()),
            ("flagged_fraction", format!("{:.4}", flagged as f64 / total as f64)),
            ("out", args.out.display().to_string()),
        ],
    );

    let mut m = RunManifest::new("generate", args.seed, threads);
    m.arg("count", args.count)
        .arg("size", args.size)
        .arg("contamination", args.contamination)
        .arg("seed", args.seed)
        .arg("out", args.out.display());
    m.record_output(&file_name_key(&args.out), &args.out)?;
    m.save(&manifest_path_for(&args.out, false))?;
    Ok(m)
}

fn model_config_from(args: &TrainArgs) -> ModelConfig {
    ModelConfig {
        variant: args.readout,
        encoding: args.encoding,
        exposure: args.exposure,
        liquid_size: args.liquid_size,
        input_sparsity: args.input_sparsity,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        val_fraction: args.val_fraction,
        pos_weight: args.pos_weight,
        threshold: args.threshold,
        seed: args.seed,
    }
}

fn cmd_train(args: &TrainArgs, threads: usize, cache_dir: Option<&Path>) -> Result<RunManifest> {
    let config = model_config_from(args);
    config.validate()?;
    let patches = load_dataset(&args.data)?;
    log_kv(
        "train",
        &[
            ("data", args.data.display().to_string()),
            ("patches", patches.len().to_string()),
            ("encoding", config.encoding.to_string()),
            ("exposure", config.exposure.to_string()),
            ("readout", config.variant.to_string()),
            ("liquid_size", config.liquid_size.to_string()),
            ("input_sparsity", config.input_sparsity.to_string()),
            ("epochs", config.epochs.to_string()),
            ("seed", config.seed.to_string()),
        ],
    );
    let trained = pipeline::train_model(&patches, &config, cache_dir)?;
    for r in &trained.reports {
        log_kv(
            "epoch",
            &[
                ("epoch", r.epoch.to_string()),
                ("train_loss", format!("{:.6}", r.train_loss)),
                ("val_loss", format!("{:.6}", r.val_loss)),
                ("lr", r.lr.to_string()),
                ("seconds", format!("{:.2}", r.seconds)),
            ],
        );
    }
    pipeline::save_model(&args.out, &trained)?;
    log_kv(
        "train_done",
        &[
            ("reservoir_hash", trained.summary.reservoir_hash.clone()),
            ("head_hash", trained.summary.head_hash.clone()),
            ("out", args.out.display().to_string()),
        ],
    );

    let mut m = RunManifest::new("train", args.seed, threads);
    m.arg("data", args.data.display())
        .arg("encoding", args.encoding)
        .arg("exposure", args.exposure)
        .arg("readout", args.readout)
        .arg("liquid-size", args.liquid_size)
        .arg("input-sparsity", args.input_sparsity)
        .arg("epochs", args.epochs)
        .arg("batch-size", args.batch_size)
        .arg("lr", args.lr)
        .arg("val-fraction", args.val_fraction)
        .arg("threshold", args.threshold)
        .arg("seed", args.seed)
        .arg("out", args.out.display());
    if let Some(w) = args.pos_weight {
        m.arg("pos-weight", w);
    }
    m.record_input(&args.data.display().to_string(), &args.data)?;
    for file in pipeline::model_files(&args.out) {
        m.record_output(&file_name_key(&file), &file)?;
    }
    m.save(&manifest_path_for(&args.out, true))?;
    Ok(m)
}

fn cmd_eval(args: &EvalArgs, threads: usize, cache_dir: Option<&Path>) -> Result<RunManifest> {
    let model = pipeline::load_model(&args.model)?;
    let patches = load_dataset(&args.data)?;
    let threshold = args.threshold.unwrap_or(model.config.threshold);
    log_kv(
        "eval",
        &[
            ("model", args.model.display().to_string()),
            ("data", args.data.display().to_string()),
            ("patches", patches.len().to_string()),
            ("decode", args.decode.to_string()),
            ("threshold", threshold.to_string()),
        ],
    );
    let scores = pipeline::score_patches(
        &model.reservoir,
        &model.head,
        &patches,
        model.config.encoding,
        model.config.exposure,
        args.decode,
        cache_dir,
    )?;
    let truth: Vec<ndarray::Array2<bool>> = patches.iter().map(|p| p.mask.clone()).collect();
    let result = metrics::evaluate(&scores, &truth, threshold)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(&result)?;
    text.push('\n');
    lsm_rfi::util::atomic_write(&args.out, text.as_bytes())?;
    if let Some(curves) = &args.curves {
        let csv = pipeline::threshold_sweep_csv(&scores, &truth, 99)?;
        lsm_rfi::util::atomic_write(curves, csv.as_bytes())?;
    }
    log_kv(
        "eval_done",
        &[
            ("accuracy", format!("{:.4}", result.accuracy)),
            ("f1", format!("{:.4}", result.f1)),
            ("auroc", result.auroc.map_or("undefined".into(), |v| format!("{v:.4}"))),
            ("auprc", result.auprc.map_or("undefined".into(), |v| format!("{v:.4}"))),
            ("out", args.out.display().to_string()),
        ],
    );

    let mut m = RunManifest::new("eval", model.config.seed, threads);
    m.arg("model", args.model.display())
        .arg("data", args.data.display())
        .arg("out", args.out.display())
        .arg("decode", args.decode)
        .arg("threshold", threshold);
    m.record_input(&args.data.display().to_string(), &args.data)?;
    for name in [pipeline::RESERVOIR_FILE, pipeline::HEAD_FILE, pipeline::CONFIG_FILE] {
        m.record_input(&args.model.join(name).display().to_string(), &args.model.join(name))?;
    }
    m.record_output(&file_name_key(&args.out), &args.out)?;
    if let Some(curves) = &args.curves {
        m.arg("curves", curves.display());
        m.record_output(&file_name_key(curves), curves)?;
    }
    m.save(&manifest_path_for(&args.out, false))?;
    Ok(m)
}

fn parse_menu(text: &str, flag: &str) -> Result<Vec<usize>> {
    let values: Vec<usize> = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("--{flag} entry '{v}': {e}")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config(format!("--{flag} must list at least one value")));
    }
    Ok(values)
}

fn cmd_hpo(args: &HpoArgs, threads: usize, cache_dir: Option<&Path>) -> Result<RunManifest> {
    let mut space = SearchSpace::default();
    if let Some(menu) = &args.exposure_menu {
        space.exposure = parse_menu(menu, "exposure-menu")?;
    }
    if let Some(menu) = &args.liquid_menu {
        space.liquid_size = parse_menu(menu, "liquid-menu")?;
    }
    let sampler = match args.sampler.as_str() {
        "tpe" => Sampler::default(),
        "uniform" => Sampler::Uniform,
        other => {
            return Err(Error::Config(format!(
                "unknown sampler '{other}' (expected tpe|uniform)"
            )))
        }
    };
    let protocol = TrialProtocol {
        variant: args.readout,
        encoding: args.encoding,
        epochs: args.epochs,
        subset_fraction: args.subset_fraction,
        ..TrialProtocol::default()
    };
    protocol.validate()?;
    let patches = load_dataset(&args.data)?;
    log_kv(
        "hpo",
        &[
            ("data", args.data.display().to_string()),
            ("patches", patches.len().to_string()),
            ("budget", args.budget.to_string()),
            ("seed", args.seed.to_string()),
            ("sampler", args.sampler.clone()),
            ("study", args.study.display().to_string()),
        ],
    );
    if let Some(parent) = args.study.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let objective = pipeline::study_objective(&patches, &protocol, cache_dir);
    let study =
        hpo::run_study(space, args.budget, args.seed, sampler, Some(&args.study), objective)?;
    let best_curve = study.best_so_far();
    for (trial, best) in study.trials.iter().zip(&best_curve) {
        log_kv(
            "trial",
            &[
                ("index", trial.index.to_string()),
                ("status", format!("{:?}", trial.status).to_lowercase()),
                ("input_sparsity", format!("{:.4}", trial.config.input_sparsity)),
                ("exposure", trial.config.exposure.to_string()),
                ("liquid_size", trial.config.liquid_size.to_string()),
                (
                    "objective",
                    trial.objective.map_or("failed".into(), |v| format!("{v:.4}")),
                ),
                ("best_so_far", best.map_or("none".into(), |v| format!("{v:.4}"))),
            ],
        );
    }
    let marginals = hpo::marginals(&study);
    let marginals_path = {
        let name = file_name_key(&args.study);
        args.study.with_file_name(format!("{name}.marginals.json"))
    };
    let mut text = serde_json::to_string_pretty(&marginals)?;
    text.push('\n');
    lsm_rfi::util::atomic_write(&marginals_path, text.as_bytes())?;
    if let Some(best) = study.best() {
        log_kv(
            "hpo_done",
            &[
                ("best_index", best.index.to_string()),
                ("best_objective", format!("{:.4}", best.objective.unwrap_or(f64::NAN))),
                ("input_sparsity", format!("{:.4}", best.config.input_sparsity)),
                ("exposure", best.config.exposure.to_string()),
                ("liquid_size", best.config.liquid_size.to_string()),
            ],
        );
    } else {
        log_kv("hpo_done", &[("best_index", "none".into())]);
    }

    let mut m = RunManifest::new("hpo", args.seed, threads);
    m.arg("data", args.data.display())
        .arg("encoding", args.encoding)
        .arg("readout", args.readout)
        .arg("budget", args.budget)
        .arg("seed", args.seed)
        .arg("study", args.study.display())
        .arg("epochs", args.epochs)
        .arg("subset-fraction", args.subset_fraction)
        .arg("sampler", &args.sampler);
    if let Some(menu) = &args.exposure_menu {
        m.arg("exposure-menu", menu);
    }
    if let Some(menu) = &args.liquid_menu {
        m.arg("liquid-menu", menu);
    }
    m.record_input(&args.data.display().to_string(), &args.data)?;
    m.record_output(&file_name_key(&args.study), &args.study)?;
    m.record_output(&file_name_key(&marginals_path), &marginals_path)?;
    m.save(&manifest_path_for(&args.study, false))?;
    Ok(m)
}

fn cmd_render(args: &RenderArgs, threads: usize, cache_dir: Option<&Path>) -> Result<RunManifest> {
    let model = pipeline::load_model(&args.model)?;
    let patches = load_dataset(&args.data)?;
    let chosen: Vec<_> =
        patches.iter().filter(|p| p.origin.source_id == args.source).cloned().collect();
    if chosen.is_empty() {
        return Err(Error::Data(format!("no patches with source id {}", args.source)));
    }
    let threshold = args.threshold.unwrap_or(model.config.threshold);
    log_kv(
        "render",
        &[
            ("model", args.model.display().to_string()),
            ("source", args.source.to_string()),
            ("patches", chosen.len().to_string()),
            ("decode", args.decode.to_string()),
            ("threshold", threshold.to_string()),
        ],
    );
    let scores = pipeline::score_patches(
        &model.reservoir,
        &model.head,
        &chosen,
        model.config.encoding,
        model.config.exposure,
        args.decode,
        cache_dir,
    )?;
    let (data, score, truth) = pipeline::assemble_scores(&chosen, &scores, args.source)?;
    let options = RenderOptions { threshold, scale: args.scale };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fig = render_figure(&data, &score, &truth, &options, &args.out)?;
    log_kv(
        "render_done",
        &[
            ("png", fig.png.display().to_string()),
            ("svg", fig.svg.display().to_string()),
            ("width", fig.width.to_string()),
            ("height", fig.height.to_string()),
        ],
    );

    let mut m = RunManifest::new("render", model.config.seed, threads);
    m.arg("model", args.model.display())
        .arg("data", args.data.display())
        .arg("source", args.source)
        .arg("out", args.out.display())
        .arg("decode", args.decode)
        .arg("threshold", threshold);
    if let Some(scale) = args.scale {
        m.arg("scale", scale);
    }
    m.record_input(&args.data.display().to_string(), &args.data)?;
    m.record_output(&file_name_key(&fig.png), &fig.png)?;
    m.record_output(&file_name_key(&fig.svg), &fig.svg)?;
    m.save(&manifest_path_for(&args.out, false))?;
    Ok(m)
}

/// Flags whose values are redirected into the fresh output directory when a
/// manifest is replayed.
fn redirected_flags(command: &str) -> &'static [&'static str] {
    match command {
        "generate" | "render" | "train" => &["out"],
        "eval" => &["out", "curves"],
        "hpo" => &["study"],
        _ => &[],
    }
}

fn cmd_reproduce(args: &ReproduceArgs, cli: &Cli) -> Result<RunManifest> {
    let original = RunManifest::load(&args.manifest)?;
    if original.command == "reproduce" {
        return Err(Error::Config("cannot reproduce a reproduce run".into()));
    }
    log_kv(
        "reproduce",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("command", original.command.clone()),
            ("tool_version", original.version.clone()),
            ("out", args.out.display().to_string()),
        ],
    );
    // The replay reads the same inputs; refuse if they changed on disk.
    for (path, expected) in &original.inputs {
        let actual = lsm_rfi::util::sha256_file(Path::new(path))?;
        if &actual != expected {
            return Err(Error::Data(format!(
                "input {path} changed since the original run (hash {actual}, expected {expected})"
            )));
        }
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut argv: Vec<String> = vec!["lsm-rfi".into(), original.command.clone()];
    let redirect = redirected_flags(&original.command);
    for (key, value) in &original.args {
        let value = if redirect.contains(&key.as_str()) {
            let name = Path::new(value)
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("out");
            if original.command == "train" {
                // train's --out is the model directory itself.
                args.out.display().to_string()
            } else {
                args.out.join(name).display().to_string()
            }
        } else {
            value.clone()
        };
        argv.push(format!("--{key}"));
        argv.push(value);
    }
    if let Some(dir) = &cli.cache_dir {
        argv.push("--cache-dir".into());
        argv.push(dir.display().to_string());
    }
    let replay =
        Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("manifest replay: {e}")))?;
    let fresh = dispatch(&replay)?;

    let diffs = manifest::diff_outputs(&original.outputs, &fresh.outputs);
    if diffs.is_empty() {
        log_kv(
            "reproduce_done",
            &[("outputs", original.outputs.len().to_string()), ("status", "identical".into())],
        );
        Ok(fresh)
    } else {
        for diff in &diffs {
            log_kv("reproduce_mismatch", &[("detail", diff.clone())]);
        }
        Err(Error::Numeric(format!(
            "{} of {} outputs differ from the original run",
            diffs.len(),
            original.outputs.len()
        )))
    }
}

// Keep clap's derive in sync with the FromStr impls used above.
const _: fn() = || {
    fn assert_from_str<T: FromStr>() {}
    assert_from_str::<Encoding>();
    assert_from_str::<Variant>();
    assert_from_str::<Decode>();
};
