use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};
use tch::Kind;

use partseg::checkpoint::file_hash;
use partseg::corpus::{ingest_folder, synth_benchmark, BenchmarkSpec, Dataset};
use partseg::distill::{synthesize_pairs, train_segmenter, PairSource, Segmenter};
use partseg::eval::{evaluate, LandmarkNorm, Predictions};
use partseg::experiments::predict;
use partseg::imageio::sample_grid;
use partseg::trainer::{load_model, train_gan_from, TrainOutputs, TrainState};
use partseg::{verify, DatasetPreset, Error, SegConfig, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "partseg", version, about = "Part-segmentation GAN: benchmark, training, distillation and evaluation")]
struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, env = "PARTSEG_WORKSPACE", default_value = ".")]
    workspace: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural benchmark with ground-truth masks and keypoints.
    MakeBenchmark(BenchmarkArgs),
    /// Train the generator/discriminator pair.
    TrainGan(TrainGanArgs),
    /// Write a grid of generated images, masks and part centers.
    Sample(SampleArgs),
    /// Write generated image/mask pairs to disk.
    SynthPairs(SynthArgs),
    /// Distill generated pairs into a segmenter.
    TrainSeg(TrainSegArgs),
    /// Score a segmenter (or stored predictions) against a labeled collection.
    Eval(EvalArgs),
    /// Run the oracle and invariant suite and print one line per check.
    Verify,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML file with configuration keys; command-line overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value`, `--key=value` or a bare `--flag` (true); they must come after the command's own options.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainGanArgs {
    /// A collection written by this tool, or a folder of images.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, losses and samples.
    #[arg(long)]
    out: PathBuf,
    /// Starting values: default, toy, toy_half, tiny, celeba_wild, taichi, cub or flowers.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Use at most this many images from an image folder.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainSegArgs {
    /// Generator checkpoint for streamed pairs.
    #[arg(long, conflicts_with = "pairs")]
    checkpoint: Option<PathBuf>,
    /// Pair archive written by `synth-pairs`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Segmenter file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labeled ground-truth collection.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "predictions")]
    segmenter: Option<PathBuf>,
    /// Collection whose label maps are the predictions for `--data`, image by image.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// `diagonal` or `interocular:A,B` (0-based keypoint indices).
    #[arg(long, default_value = "diagonal")]
    norm: String,
    /// Share of samples used to fit the landmark regression; the rest are scored.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// JSON report to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flat TOML table of `T`'s defaults, the config file and the overrides, in that order.
fn resolve<T: Serialize + DeserializeOwned>(base: &T, args: &ConfigArgs, root: &Path) -> anyhow::Result<T> {
    let mut table = toml::Table::try_from(base).context("serializing defaults")?;
    if let Some(path) = &args.config {
        let path = root.join(path);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<config file>", e.to_string()))?;
        table.extend(file);
        partseg::config::parse_toml::<T>(&toml::to_string(&table)?)?;
    }
    for (key, value) in parse_overrides(&args.overrides)? {
        table.insert(key.clone(), value);
        if let Err(Error::Config { key: bad, reason }) = partseg::config::parse_toml::<T>(&toml::to_string(&table)?) {
            let key = if bad == "<document>" { key } else { bad };
            return Err(Error::config(key, reason).into());
        }
    }
    Ok(partseg::config::parse_toml(&toml::to_string(&table)?)?)
}

fn parse_overrides(raw: &[String]) -> anyhow::Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let Some(flag) = raw[i].strip_prefix("--") else {
            return Err(Error::config(raw[i].clone(), "expected `--key value`").into());
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None if i + 1 < raw.len() && !raw[i + 1].starts_with("--") => {
                i += 1;
                (flag.to_string(), raw[i].clone())
            }
            None => (flag.to_string(), "true".to_string()),
        };
        out.push((key, parse_value(&value)));
        i += 1;
    }
    Ok(out)
}

/// TOML literal if it parses as one (numbers, booleans, arrays), otherwise a string.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn preset(name: &str) -> anyhow::Result<TrainConfig> {
    Ok(match name {
        "default" => TrainConfig::default(),
        "toy" => TrainConfig::toy(),
        "toy_half" => TrainConfig::toy_half(),
        "tiny" => TrainConfig::tiny(),
        "celeba_wild" => TrainConfig::with_preset(DatasetPreset::CelebaWild),
        "taichi" => TrainConfig::with_preset(DatasetPreset::Taichi),
        "cub" => TrainConfig::with_preset(DatasetPreset::Cub),
        "flowers" => TrainConfig::with_preset(DatasetPreset::Flowers),
        other => return Err(Error::config("preset", format!("unknown preset `{other}`")).into()),
    })
}

fn log_resolved<T: Serialize>(what: &str, cfg: &T) -> anyhow::Result<String> {
    let text = toml::to_string(cfg)?;
    log::info!("resolved {what}:\n{text}");
    Ok(text)
}

fn load_data(path: &Path, resolution: usize, limit: Option<usize>) -> anyhow::Result<Dataset> {
    if path.join("manifest.json").exists() {
        Ok(Dataset::load(path)?)
    } else {
        Ok(ingest_folder(path, resolution, limit)?)
    }
}

fn make_benchmark(args: &BenchmarkArgs, root: &Path) -> anyhow::Result<()> {
    let spec: BenchmarkSpec = resolve(&BenchmarkSpec::default(), &args.cfg, root)?;
    spec.validate()?;
    log_resolved("benchmark", &spec)?;
    let ds = synth_benchmark(&spec)?;
    let out = root.join(&args.out);
    ds.save(&out)?;
    println!("wrote {} images to {}", ds.len(), out.display());
    Ok(())
}

fn train_gan(args: &TrainGanArgs, root: &Path) -> anyhow::Result<()> {
    let cfg: TrainConfig = resolve(&preset(&args.preset)?, &args.cfg, root)?;
    for warning in cfg.validate()? {
        log::warn!("{warning}");
    }
    let text = log_resolved("training config", &cfg)?;
    let out = TrainOutputs::in_dir(root.join(&args.out));
    let dir = out.dir.clone().expect("directory set");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), text)?;
    let data = load_data(&root.join(&args.data), cfg.image_size(), args.limit)?;
    let checkpoint = out.checkpoint_path().expect("directory set");
    let state = if args.resume && checkpoint.exists() {
        let mut state = TrainState::load(&checkpoint)?;
        // Only the length of the run and its reporting cadence may change on resume.
        let schedule_only = TrainConfig {
            total_updates: cfg.total_updates,
            log_every: cfg.log_every,
            checkpoint_every: cfg.checkpoint_every,
            sample_every: cfg.sample_every,
            ..state.model.cfg.clone()
        };
        if schedule_only != cfg {
            bail!("checkpoint configuration differs from the resolved configuration beyond the run schedule; refusing to resume");
        }
        state.model.cfg = cfg.clone();
        log::info!("resuming from step {}", state.step);
        state
    } else {
        TrainState::new(&cfg)?
    };
    let state = train_gan_from(state, &data, &out, |_| {})?;
    println!("trained {} updates; checkpoint {}", state.step, checkpoint.display());
    Ok(())
}

fn sample(args: &SampleArgs, root: &Path) -> anyhow::Result<()> {
    let (model, _) = load_model(&root.join(&args.checkpoint))?;
    let out = model.sample(args.seed, 0, args.n)?;
    let centers = out.layout.geometry.as_ref().map(|g| &g.centers);
    let grid = sample_grid(&out.image, Some(&out.masks.probs), centers)?;
    let path = root.join(&args.out);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    grid.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth_pairs(args: &SynthArgs, root: &Path) -> anyhow::Result<()> {
    let path = root.join(&args.checkpoint);
    let (model, _) = load_model(&path)?;
    let ds = synthesize_pairs(&model, Some(file_hash(&path)?), args.n, args.seed)?;
    let out = root.join(&args.out);
    ds.save(&out)?;
    println!("wrote {} pairs to {}", ds.len(), out.display());
    Ok(())
}

fn train_seg(args: &TrainSegArgs, root: &Path) -> anyhow::Result<()> {
    let mut cfg: SegConfig = resolve(&SegConfig::default(), &args.cfg, root)?;
    cfg.validate()?;
    let seg = match (&args.checkpoint, &args.pairs) {
        (Some(ckpt), None) => {
            cfg.streaming = true;
            log_resolved("segmenter config", &cfg)?;
            let (model, _) = load_model(&root.join(ckpt))?;
            train_segmenter(PairSource::Streaming(&model), &cfg, model.cfg.k)?
        }
        (None, Some(pairs)) => {
            cfg.streaming = false;
            log_resolved("segmenter config", &cfg)?;
            let ds = Dataset::load(&root.join(pairs))?;
            train_segmenter(PairSource::Archive(&ds), &cfg, ds.manifest.num_parts)?
        }
        _ => bail!("give exactly one of --checkpoint (streamed pairs) or --pairs (archive)"),
    };
    let out = root.join(&args.out);
    seg.save(&out, cfg.iterations as u64)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn parse_norm(text: &str) -> anyhow::Result<LandmarkNorm> {
    if text == "diagonal" {
        return Ok(LandmarkNorm::Diagonal);
    }
    let pair = text.strip_prefix("interocular:").and_then(|r| r.split_once(','));
    match pair.map(|(a, b)| (a.trim().parse::<usize>(), b.trim().parse::<usize>())) {
        Some((Ok(a), Ok(b))) => Ok(LandmarkNorm::Interocular(a, b)),
        _ => Err(Error::config("norm", format!("expected `diagonal` or `interocular:A,B`, got `{text}`")).into()),
    }
}

fn eval(args: &EvalArgs, root: &Path) -> anyhow::Result<()> {
    let norm = parse_norm(&args.norm)?;
    if !(0.0..=1.0).contains(&args.train_fraction) {
        return Err(Error::config("train_fraction", "must lie in [0, 1]").into());
    }
    let gt = Dataset::load(&root.join(&args.data))?;
    let (pred, hash) = match (&args.segmenter, &args.predictions) {
        (Some(path), None) => {
            let path = root.join(path);
            let seg = Segmenter::load(&path)?;
            (predict(&seg, &gt)?, file_hash(&path)?)
        }
        (None, Some(dir)) => {
            let ds = Dataset::load(&root.join(dir))?;
            let labels = ds.labels.as_ref().context("prediction collection has no label maps")?;
            let pred = Predictions { labels: labels.to_kind(Kind::Int64), probs: None, num_parts: ds.manifest.num_parts };
            (pred, file_hash(&root.join(dir).join("manifest.json"))?)
        }
        _ => bail!("give exactly one of --segmenter or --predictions"),
    };
    let reports = evaluate(&pred, &gt, args.train_fraction, norm, &hash)?;
    for r in &reports {
        println!("{}", r.summary());
    }
    if let Some(out) = &args.out {
        let out = root.join(out);
        let summary: Vec<_> = reports.iter().map(|r| partseg::eval::MetricReport { per_sample: None, ..r.clone() }).collect();
        let tmp = out.with_extension("partial");
        fs::write(&tmp, serde_json::to_string_pretty(&summary)?)?;
        fs::rename(&tmp, &out)?;
    }
    Ok(())
}

fn run_verify() -> anyhow::Result<bool> {
    let results = verify::run_all();
    println!("{:<58} {:>6} {:>8}", "check", "result", "seconds");
    for r in &results {
        println!("{:<58} {:>6} {:>8.1}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.seconds);
    }
    for r in &results {
        println!("  {}: {}", r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let root = cli.workspace.as_path();
    match &cli.command {
        Command::MakeBenchmark(a) => make_benchmark(a, root)?,
        Command::TrainGan(a) => train_gan(a, root)?,
        Command::Sample(a) => sample(a, root)?,
        Command::SynthPairs(a) => synth_pairs(a, root)?,
        Command::TrainSeg(a) => train_seg(a, root)?,
        Command::Eval(a) => eval(a, root)?,
        Command::Verify => return run_verify(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => match e.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            _ => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
