//! `bdinvert` command-line tool.
//!
//! Exit codes: 0 on success, 2 for configuration and input errors, 3 for
//! numeric failures (non-finite losses, degenerate statistics), 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use bdinvert::editor::{self, EditDirection};
use bdinvert::encoder::{self, EncoderConfig, EncoderWeights, TrainConfig};
use bdinvert::generator::{self, GeneratorConfig, GeneratorMode, GeneratorWeights, NoiseMode};
use bdinvert::image_io;
use bdinvert::inversion::{self, InitDetail, InversionConfig, InversionResult};
use bdinvert::perceptual::{Perceptual, PerceptualConfig};
use bdinvert::pipeline::{self, Assets, CheckpointLayout, Grid, RunManifest, RECONSTRUCTION_PNG};
use bdinvert::pnorm;
use bdinvert::tensor::Padding;

#[derive(Parser, Debug)]
#[command(name = "bdinvert", version, about = "Invert transformed images into F/W+ and edit them")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON file with optional "generator", "inversion" and "train" sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Root holding generator/, pnorm/, encoder/ and directions.json.
    #[arg(long, global = true, env = "BDINVERT_CKPT_DIR", default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a randomly initialized generator checkpoint.
    InitGenerator {
        #[arg(long, value_enum, default_value_t = Mode::Stylegan2)]
        mode: Mode,
        /// Comma-separated channel widths, one per scale.
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
        #[arg(long)]
        base_code_resolution: Option<usize>,
        #[arg(long, value_enum)]
        padding: Option<Pad>,
    },
    /// Estimate P-norm statistics of the generator's mapping network.
    EstimatePnorm {
        #[arg(long, default_value_t = pnorm::MIN_SAMPLES)]
        samples: usize,
    },
    /// Train the base-code encoder on generator samples.
    TrainEncoder {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Use the full-scale schedule (batch 16, 10,000 iterations).
        #[arg(long)]
        full_schedule: bool,
    },
    /// Closed-form edit directions from the style-affine weights.
    DiscoverDirections {
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Layer range `lo-hi`; defaults to the whole detail range.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Build the translation/rotation/scaling evaluation suite.
    MakeTransformSuite {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = GridArg::Full)]
        grid: GridArg,
        /// Defaults to the generator's output resolution.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Invert one image or every PNG in a directory.
    Invert {
        input: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        omega_f: Option<f64>,
        #[arg(long, value_enum)]
        init: Option<Init>,
        /// Keep the base code at its initial value.
        #[arg(long)]
        freeze_base: bool,
        /// Parallel inversions for directory inputs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Render an edited or style-mixed result.
    Edit {
        result: PathBuf,
        #[arg(long)]
        direction: Option<String>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        alpha: f64,
        /// Also render -alpha.
        #[arg(long)]
        pair: bool,
        /// Result directory whose detail code replaces ours.
        #[arg(long)]
        style_mix: Option<PathBuf>,
        /// Style-mix layer range `lo-hi`; defaults to the whole detail range.
        #[arg(long)]
        layers: Option<String>,
    },
    /// Per-transform metrics of inversion results against their targets.
    Eval { results: PathBuf, originals: PathBuf },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "BDINVERT_PORT", default_value_t = bdinvert_service::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, env = "BDINVERT_DATA_DIR", default_value = "service-data")]
        data_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Stylegan,
    Stylegan2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pad {
    Zero,
    Circular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GridArg {
    Identity,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    WMean,
    EncoderFree,
}

/// A bad flag, file or config value; exits with code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<bdinvert::Error>() {
            use bdinvert::Error::*;
            return match e {
                NonFinite { .. } | Degenerate(_) => 3,
                Config(_) | Shape { .. } | Incompatible { .. } | LayerRange { .. } | Malformed { .. } | Missing(_) => 2,
                Json(_) | Image(_) => 2,
                Io { .. } => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[derive(Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    generator: Option<Value>,
    inversion: Option<Value>,
    train: Option<Value>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Overlay the keys of `patch` onto `base`; unknown keys are an error.
fn merge<T: Serialize + DeserializeOwned>(base: T, patch: Option<&Value>, section: &str) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let patch = patch
        .as_object()
        .ok_or_else(|| usage(format!("config section {section:?} must be an object")))?;
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("configs serialize to objects");
    for (k, val) in patch {
        if !obj.contains_key(k) {
            return Err(usage(format!("unknown key {k:?} in config section {section:?}")));
        }
        obj.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| usage(format!("config section {section:?}: {e}")))
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('-').ok_or_else(|| usage(format!("expected lo-hi, got {s:?}")))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|_| usage(format!("bad layer index {t:?}")));
    Ok((p(a)?, p(b)?))
}

fn out_dir(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| usage("this command needs --out"))
}

fn load_generator(layout: &CheckpointLayout) -> Result<GeneratorWeights> {
    let dir = layout.generator();
    if !dir.join(bdinvert::checkpoint::MANIFEST).is_file() {
        return Err(usage(format!(
            "no generator checkpoint at {} (run init-generator first)",
            dir.display()
        )));
    }
    Ok(generator::load_weights(&dir, None)?)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg_file = read_config(g.config.as_deref())?;
    let layout = CheckpointLayout::new(&g.checkpoint_dir);
    match &cli.command {
        Command::InitGenerator {
            mode,
            channels,
            base_code_resolution,
            padding,
        } => {
            let mode = match mode {
                Mode::Stylegan => GeneratorMode::StyleGan,
                Mode::Stylegan2 => GeneratorMode::StyleGan2,
            };
            let mut cfg = merge(GeneratorConfig::desk(mode), cfg_file.generator.as_ref(), "generator")?;
            if let Some(c) = channels {
                cfg.channels_per_scale = c.clone();
            }
            if let Some(r) = base_code_resolution {
                cfg.base_code_resolution = *r;
            }
            if let Some(p) = padding {
                cfg.padding_mode = match p {
                    Pad::Zero => Padding::Zero,
                    Pad::Circular => Padding::Circular,
                };
            }
            let mut manifest = RunManifest::start("init-generator", serde_json::to_value(&cfg)?);
            manifest.seeds.insert("generator".into(), g.seed);
            let weights = GeneratorWeights::random(cfg, g.seed)?;
            let dir = layout.generator();
            generator::save_weights(&weights, &dir)?;
            manifest.checkpoints.insert("generator".into(), weights.checksum());
            manifest.finish(json!({}));
            manifest.write(&dir)?;
            println!("generator written to {}", dir.display());
        }
        Command::EstimatePnorm { samples } => {
            let gen = load_generator(&layout)?;
            let mut manifest = RunManifest::start("estimate-pnorm", json!({ "samples": samples }));
            manifest.seeds.insert("pnorm".into(), g.seed);
            let stats = pnorm::estimate_stats(&gen, *samples, g.seed)?;
            let dir = layout.pnorm();
            stats.save(&dir, &gen.checksum())?;
            manifest.checkpoints.insert("generator".into(), gen.checksum());
            manifest.checkpoints.insert("pnorm".into(), stats.checksum());
            manifest.finish(json!({ "min_stddev": stats.stddev.min(), "max_stddev": stats.stddev.max() }));
            manifest.write(&dir)?;
            println!("P-norm statistics from {samples} samples written to {}", dir.display());
        }
        Command::TrainEncoder {
            iterations,
            batch_size,
            full_schedule,
        } => {
            let gen = load_generator(&layout)?;
            let base = if *full_schedule { TrainConfig::default() } else { TrainConfig::desk() };
            let mut tcfg = merge(base, cfg_file.train.as_ref(), "train")?;
            tcfg.seed = g.seed;
            if let Some(n) = iterations {
                tcfg.iterations = *n;
            }
            if let Some(b) = batch_size {
                tcfg.batch_size = *b;
            }
            let per = Perceptual::new(PerceptualConfig::default());
            let init = EncoderWeights::random(EncoderConfig::for_generator(&gen.config), g.seed)?;
            let mut manifest = RunManifest::start("train-encoder", serde_json::to_value(&tcfg)?);
            manifest.seeds.insert("train".into(), g.seed);
            let out = encoder::train_encoder(&gen, &per, init, &tcfg, |step, loss| {
                if step % 100 == 0 {
                    log::info!("step {step}: loss {loss:.5}");
                }
            })?;
            let dir = layout.encoder();
            encoder::save_encoder(&out.weights, &dir, &gen.checksum(), Some(&tcfg))?;
            pipeline::write_atomic(&dir.join("loss_trace.json"), &serde_json::to_vec(&out.loss_trace)?)?;
            manifest.checkpoints.insert("generator".into(), gen.checksum());
            manifest.checkpoints.insert("encoder".into(), out.weights.checksum());
            let n = out.loss_trace.len().min(100);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
            manifest.finish(json!({
                "first_100_mean": mean(&out.loss_trace[..n]),
                "last_100_mean": mean(&out.loss_trace[out.loss_trace.len() - n..]),
            }));
            manifest.write(&dir)?;
            println!("encoder written to {}", dir.display());
        }
        Command::DiscoverDirections { k, layers } => {
            let gen = load_generator(&layout)?;
            let (lo, hi) = match layers {
                Some(s) => parse_range(s)?,
                None => {
                    let r = editor::detail_range(&gen.config);
                    (*r.start(), *r.end())
                }
            };
            let found = editor::sefa_directions(&gen, lo, hi, *k)?;
            let path = layout.directions();
            // keep directions for other layer ranges; same names are replaced
            let mut dirs = if path.is_file() { editor::load_directions(&path)? } else { Vec::new() };
            dirs.retain(|d| found.iter().all(|n| n.name != d.name));
            for d in &found {
                println!("{} layers {}-{}", d.name, d.layer_lo, d.layer_hi);
            }
            dirs.extend(found);
            editor::save_directions(&dirs, &path)?;
            println!("{} directions in {}", dirs.len(), path.display());
        }
        Command::MakeTransformSuite { input, grid, resolution } => {
            let out = out_dir(g)?;
            let res = match resolution {
                Some(r) => *r,
                None => match generator::load_weights(&layout.generator(), None) {
                    Ok(gen) => gen.config.output_resolution,
                    Err(_) => 64,
                },
            };
            let grid = match grid {
                GridArg::Identity => Grid::Identity,
                GridArg::Full => Grid::Full,
            };
            let mut manifest = RunManifest::start("make-transform-suite", json!({ "grid": grid, "resolution": res, "input": input }));
            manifest.seeds.insert("suite".into(), g.seed);
            let summary = pipeline::make_transform_suite(input, out, grid, res, g.seed)?;
            println!("{} suite images written to {}", summary.items.len(), out.display());
            manifest.finish(serde_json::to_value(&summary)?);
            manifest.write(out)?;
        }
        Command::Invert {
            input,
            iterations,
            omega_f,
            init,
            freeze_base,
            jobs,
        } => {
            let out = out_dir(g)?;
            let mut icfg = merge(InversionConfig::default(), cfg_file.inversion.as_ref(), "inversion")?;
            icfg.seed = g.seed;
            if let Some(n) = iterations {
                icfg.iterations = *n;
            }
            if let Some(w) = omega_f {
                icfg.omega_f = *w;
            }
            if let Some(i) = init {
                icfg.init_detail = match i {
                    Init::WMean => InitDetail::WMean,
                    Init::EncoderFree => InitDetail::EncoderFree,
                };
            }
            icfg.freeze_base |= *freeze_base;
            icfg.validate()?;
            let assets = Assets::load(&layout)?;
            let inputs = if input.is_dir() { pipeline::list_pngs(input)? } else { vec![input.clone()] };
            if inputs.is_empty() {
                return Err(usage(format!("no PNG files in {}", input.display())));
            }
            invert_all(&inputs, out, &assets, &icfg, (*jobs).max(1))?;
        }
        Command::Edit {
            result,
            direction,
            alpha,
            pair,
            style_mix,
            layers,
        } => {
            let out = out_dir(g)?;
            let assets = Assets::load(&layout)?;
            edit(&assets, result, direction.as_deref(), *alpha, *pair, style_mix.as_deref(), layers.as_deref(), out)?;
        }
        Command::Eval { results, originals } => {
            let out = out_dir(g)?;
            let per = Perceptual::new(PerceptualConfig::default());
            let mut manifest = RunManifest::start("eval", json!({ "results": results, "originals": originals, "feature_distance": "feature Frechet proxy (random_pyramid)" }));
            let table = pipeline::eval_suite(results, originals, &per)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            pipeline::write_atomic(&out.join("metrics.csv"), table.to_csv().as_bytes())?;
            pipeline::write_atomic(&out.join("metrics.json"), &serde_json::to_vec_pretty(&table)?)?;
            print!("{}", table.to_csv());
            manifest.finish(serde_json::to_value(&table)?);
            manifest.write(out)?;
        }
        Command::Serve { port, workers, data_dir } => {
            let cfg = bdinvert_service::ServiceConfig {
                port: *port,
                checkpoint_dir: g.checkpoint_dir.clone(),
                data_dir: data_dir.clone(),
                workers: *workers,
                ..bdinvert_service::ServiceConfig::from_env()
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(bdinvert_service::serve(cfg))?;
        }
    }
    Ok(())
}

fn invert_one(path: &Path, out: &Path, assets: &Assets, cfg: &InversionConfig) -> Result<f64> {
    let res = assets.generator.config.output_resolution;
    let target = image_io::resize_square(&image_io::load_image(path)?, res)?;
    let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let dir = out.join(&name);
    let mut manifest = RunManifest::start("invert", serde_json::to_value(cfg)?);
    manifest.seeds.insert("inversion".into(), cfg.seed);
    manifest.checkpoints = assets.checksums();
    let result = inversion::invert(&target, &assets.models(), cfg).with_context(|| format!("inverting {}", path.display()))?;
    result.save(&dir, &assets.generator)?;
    let rec = assets.generator.synthesize_from_base(&result.code, NoiseMode::None)?;
    pipeline::write_atomic(&dir.join(RECONSTRUCTION_PNG), &image_io::encode_png(&rec)?)?;
    manifest.finish(json!({ "source": path, "final": serde_json::to_value(result.final_metrics)? }));
    manifest.write(&dir)?;
    Ok(result.final_metrics.psnr)
}

fn invert_all(inputs: &[PathBuf], out: &Path, assets: &Assets, cfg: &InversionConfig, jobs: usize) -> Result<()> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let failures = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(inputs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(path) = inputs.get(i) else { break };
                match invert_one(path, out, assets, cfg) {
                    Ok(psnr) => println!("{}: PSNR {psnr:.2} dB", path.display()),
                    Err(e) => failures.lock().expect("failure list").push(e),
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure list");
    match failures.len() {
        0 => Ok(()),
        1 => Err(failures.remove(0)),
        n => {
            for e in &failures {
                eprintln!("error: {e:#}");
            }
            let first = failures.remove(0);
            Err(first.context(format!("{n} inversions failed")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn edit(
    assets: &Assets,
    result: &Path,
    direction: Option<&str>,
    alpha: f64,
    pair: bool,
    style_mix: Option<&Path>,
    layers: Option<&str>,
    out: &Path,
) -> Result<()> {
    let gen = &assets.generator;
    let cfg = &gen.config;
    let mut code = InversionResult::load(result, gen)?.code;
    if let Some(r) = style_mix {
        let reference = InversionResult::load(r, gen)?.code;
        let range = match layers {
            Some(s) => {
                let (lo, hi) = parse_range(s)?;
                lo..=hi
            }
            None => editor::detail_range(cfg),
        };
        code = editor::style_mix(&code, &reference, range, cfg)?;
    }
    let dir: Option<&EditDirection> = match direction {
        Some(name) => Some(
            assets
                .directions
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| usage(format!("unknown direction {name:?}")))?,
        ),
        None => None,
    };
    if dir.is_none() && (alpha != 0.0 || pair) {
        bail!(usage("--alpha and --pair need --direction"));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let alphas: Vec<(f64, &str)> = if pair { vec![(alpha, "edit_plus"), (-alpha, "edit_minus")] } else { vec![(alpha, "edit")] };
    for (a, name) in alphas {
        let edited = match dir {
            Some(d) => editor::apply_edit(&code, d, a, cfg)?,
            None => code.clone(),
        };
        let img = gen.synthesize_from_base(&edited, NoiseMode::None)?;
        let path = out.join(format!("{name}.png"));
        pipeline::write_atomic(&path, &image_io::encode_png(&img)?)?;
        println!("{}", path.display());
    }
    Ok(())
}
