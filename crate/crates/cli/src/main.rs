//! `lh`: dataset building, the three training phases, inference, α sweeps, latent
//! analysis and the HTTP service.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

mod grid;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use latent_harmony::checkpoint::CheckpointBundle;
use latent_harmony::config::RunConfig;
use latent_harmony::degrade::{build_dataset, Dataset, DegradationKind};
use latent_harmony::freq::{cdcs, hf_energy_proportion, radial_spectrum, SpectralBands};
use latent_harmony::hflora::alternating_train;
use latent_harmony::io::{read_image, read_tensor, write_png, write_tensor, BitDepth};
use latent_harmony::lhvae::{train_stage1, Vae};
use latent_harmony::pipeline::{param_report, sweep_alpha, Pipeline, DEFAULT_OVERLAP, DEFAULT_TILE};
use latent_harmony::restorer::train_restorer;
use latent_harmony::training::TrainLog;
use latent_harmony::{Error, HwcTensor, Result};

#[derive(Parser, Debug)]
#[command(name = "lh", version, about = "Latent Harmony: latent-space image restoration with α-blended HF adapters")]
struct Cli {
    /// Root for default outputs; a config's relative `output_dir` resolves against it.
    #[arg(long, env = "LH_HOME", default_value = ".lh", global = true)]
    home: PathBuf,
    /// More log output on stderr (-v debug, -vv trace). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Run configuration (TOML). Defaults to the built-in desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's seed. Stage seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset directory written by `lh dataset`; built from the config when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a paired clean/degraded dataset and write it as PNGs.
    Dataset {
        #[command(flatten)]
        run: RunArgs,
        /// Number of images (overrides the config).
        #[arg(long)]
        count: Option<usize>,
        /// Square side in pixels (overrides the config).
        #[arg(long)]
        resolution: Option<usize>,
        /// Comma-separated degradation kinds (overrides the config).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<DegradationKind>>,
        /// Output directory [default: <home>/<output_dir>/dataset].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage one: train the degradation-robust VAE.
    TrainVae {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Step count (overrides the config; perturbation schedules keep their horizon).
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint path [default: <home>/<output_dir>/stage1.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage two: train the latent restorer against a frozen stage-one VAE.
    TrainRestorer {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Stage-one checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint path [default: <home>/<output_dir>/restorer.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage two: train the fidelity and perception adapters by alternating optimization.
    TrainLora {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Restorer checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Route the fidelity path through the restorer.
        #[arg(long)]
        restorer_in_fhf: bool,
        /// Checkpoint path [default: <home>/<output_dir>/lora.ckpt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore one image; prints a metrics report when --ref is given.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Fidelity (1) to perception (0) control.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference for metrics.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TILE)]
        tile: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: usize,
        /// Write a 16-bit PNG.
        #[arg(long)]
        sixteen_bit: bool,
    },
    /// Average metrics over held-out pairs for each α in a grid.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// `start:stop:step` (inclusive) or a comma list.
        #[arg(long, default_value = "0:1:0.25")]
        grid: String,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latent diagnostics.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Serve the HTTP API for the companion UI.
    Serve {
        /// Checkpoint to load; without one, restore requests get 503.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = lh_service::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value_t = lh_service::DEFAULT_MAX_PIXELS)]
        max_pixels: usize,
        /// Allowed CORS origin (repeatable) [default: the local UI dev server].
        #[arg(long)]
        cors_origin: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_TILE)]
        tile: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: usize,
    },
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Cross-degradation cosine similarity of dumped latents (`<dir>/<kind>/<index>.lht`).
    Cdcs {
        #[arg(long)]
        latents: PathBuf,
        /// Also report LF/HF band CDCS with this normalized radial cutoff.
        #[arg(long)]
        cutoff: Option<f64>,
    },
    /// Radial DCT energy spectrum of a latent (.lht) or image file.
    Spectrum {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        bins: usize,
    },
    /// Encode every degraded image of a dataset to posterior-mean latents.
    DumpLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Parameter counts per component.
    Params {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(home: &Path, cfg: &RunConfig) -> PathBuf {
    home.join(&cfg.output_dir)
}

/// `x.ckpt` → `x.config.toml`; `dir` → `dir.config.toml`.
fn snapshot_path(out: &Path) -> PathBuf {
    out.with_extension("config.toml")
}

fn write_snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    let path = snapshot_path(out);
    cfg.save(&path)?;
    log::info!("config snapshot: {}", path.display());
    Ok(())
}

fn training_split(data: &DataArgs, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = match &data.dataset {
        Some(dir) => Dataset::load(dir)?,
        None => build_dataset(&cfg.dataset)?,
    };
    ds.split(cfg.pipeline.holdout)
}

fn finish_training(out: &Path, cfg: &RunConfig, bundle: &CheckpointBundle, log: &TrainLog) -> Result<()> {
    bundle.save(out)?;
    log.write_jsonl(&out.with_extension("log.jsonl"))?;
    write_snapshot(out, cfg)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct InferSnapshot<'a> {
    ckpt: &'a Path,
    ckpt_digest: String,
    input: &'a Path,
    reference: Option<&'a Path>,
    alpha: f64,
    tile: usize,
    overlap: usize,
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let home = cli.home;
    match cli.command {
        Command::Dataset { run, count, resolution, kinds, out } => {
            let mut cfg = load_config(&run)?;
            if let Some(n) = count {
                cfg.dataset.count = n;
            }
            if let Some(r) = resolution {
                cfg.dataset.resolution = r;
            }
            if let Some(k) = kinds {
                cfg.dataset.kinds = k;
            }
            cfg.dataset.validate()?;
            let out = out.unwrap_or_else(|| output_dir(&home, &cfg).join("dataset"));
            let ds = build_dataset(&cfg.dataset)?;
            ds.save(&out)?;
            write_snapshot(&out, &cfg)?;
            log::info!("{} samples → {}", ds.len(), out.display());
            println!("{}", out.display());
        }
        Command::TrainVae { run, data, steps, out } => {
            let mut cfg = load_config(&run)?;
            if let Some(s) = steps {
                cfg.stage1.steps = s;
            }
            let (train, _) = training_split(&data, &cfg)?;
            let out = out.unwrap_or_else(|| output_dir(&home, &cfg).join("stage1.ckpt"));
            let (bundle, log) = train_stage1(&cfg.stage1, &cfg.model, &train)?;
            finish_training(&out, &cfg, &bundle, &log)?;
        }
        Command::TrainRestorer { run, data, ckpt, steps, out } => {
            let mut cfg = load_config(&run)?;
            if let Some(s) = steps {
                cfg.restorer.steps = s;
            }
            let (train, _) = training_split(&data, &cfg)?;
            let base = CheckpointBundle::load(&ckpt)?;
            let out = out.unwrap_or_else(|| output_dir(&home, &cfg).join("restorer.ckpt"));
            let (bundle, log) = train_restorer(&cfg.restorer, &train, &base)?;
            finish_training(&out, &cfg, &bundle, &log)?;
        }
        Command::TrainLora { run, data, ckpt, steps, restorer_in_fhf, out } => {
            let mut cfg = load_config(&run)?;
            if let Some(s) = steps {
                cfg.lora.steps = s;
            }
            cfg.lora.restorer_in_fhf |= restorer_in_fhf;
            let (train, _) = training_split(&data, &cfg)?;
            let base = CheckpointBundle::load(&ckpt)?;
            let out = out.unwrap_or_else(|| output_dir(&home, &cfg).join("lora.ckpt"));
            let (bundle, log) = alternating_train(&cfg.lora, &train, &base)?;
            finish_training(&out, &cfg, &bundle, &log)?;
        }
        Command::Infer { ckpt, input, alpha, out, reference, tile, overlap, sixteen_bit } => {
            let bundle = CheckpointBundle::load(&ckpt)?;
            let pipeline = Pipeline::from_bundle(&bundle)?;
            let image = read_image(&input)?;
            let reference_img = reference.as_deref().map(read_image).transpose()?;
            let (restored, metrics) = pipeline.restore(&image, alpha, reference_img.as_ref(), tile, overlap)?;
            let depth = if sixteen_bit { BitDepth::Sixteen } else { BitDepth::Eight };
            write_png(&out, &restored, depth)?;
            write_toml(
                &snapshot_path(&out),
                &InferSnapshot {
                    ckpt: &ckpt,
                    ckpt_digest: bundle.digest()?,
                    input: &input,
                    reference: reference.as_deref(),
                    alpha,
                    tile,
                    overlap,
                },
            )?;
            if let Some(m) = metrics {
                println!("{}", serde_json::to_string_pretty(&m)?);
            }
        }
        Command::SweepAlpha { run, data, ckpt, grid, format, out } => {
            let alphas = grid::parse_grid(&grid).map_err(usage)?;
            let cfg = load_config(&run)?;
            let (_, hold) = training_split(&data, &cfg)?;
            let pipeline = Pipeline::from_bundle(&CheckpointBundle::load(&ckpt)?)?;
            let pairs: Vec<_> = hold.all_pairs().into_iter().map(|(_, d, c)| (d, c)).collect();
            let table = sweep_alpha(&pipeline, &pairs, &alphas)?;
            let text = match format {
                Format::Csv => table.to_csv(),
                Format::Json => table.to_json()? + "\n",
            };
            match out {
                Some(path) => {
                    if let Some(dir) = path.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    std::fs::write(&path, text)?;
                    write_snapshot(&path, &cfg)?;
                }
                None => print!("{text}"),
            }
        }
        Command::Analyze(cmd) => analyze(cmd)?,
        Command::Serve { ckpt, port, max_pixels, cors_origin, tile, overlap } => {
            let defaults = lh_service::ServiceConfig::default();
            let config = lh_service::ServiceConfig {
                port,
                max_pixels,
                tile,
                overlap,
                cors_origins: if cors_origin.is_empty() { defaults.cors_origins } else { cors_origin },
            };
            if tile == 0 || 2 * overlap >= tile {
                return Err(usage(format!("tile {tile} / overlap {overlap} invalid")));
            }
            let model = ckpt.as_deref().map(lh_service::LoadedModel::load).transpose()?;
            match &model {
                Some(m) => log::info!("serving model {}", m.id),
                None => log::warn!("no checkpoint given; /api/restore will answer 503"),
            }
            let state = lh_service::AppState::new(config, model);
            tokio::runtime::Runtime::new()?.block_on(lh_service::serve(state))?;
        }
    }
    Ok(())
}

fn read_latent_dir(dir: &Path) -> Result<BTreeMap<String, Vec<HwcTensor>>> {
    let mut map = BTreeMap::new();
    let mut kinds: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    kinds.sort_by_key(|e| e.file_name());
    for kind in kinds {
        let mut files: Vec<PathBuf> = std::fs::read_dir(kind.path())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "lht"))
            .collect();
        files.sort();
        let latents = files.iter().map(|p| read_tensor(p)).collect::<Result<Vec<_>>>()?;
        map.insert(kind.file_name().to_string_lossy().into_owned(), latents);
    }
    Ok(map)
}

fn analyze(cmd: Analyze) -> Result<()> {
    match cmd {
        Analyze::Cdcs { latents, cutoff } => {
            let bands = cutoff.map(SpectralBands::new);
            let report = cdcs(&read_latent_dir(&latents)?, bands.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Analyze::Spectrum { input, bins } => {
            let x = if input.extension().is_some_and(|e| e == "lht") {
                read_tensor(&input)?
            } else {
                read_image(&input)?
            };
            let spectrum = radial_spectrum(&x, bins)?;
            let report = serde_json::json!({
                "shape": x.shape(),
                "bins": bins,
                "energy": spectrum,
                "hf_energy_proportion": hf_energy_proportion(&x, &SpectralBands::default())?,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Analyze::DumpLatents { ckpt, dataset, out, limit } => {
            let bundle = CheckpointBundle::load(&ckpt)?;
            let vae = Vae::new(bundle.model.vae.clone())?;
            let params = bundle.params.with_prefix("vae.");
            let ds = Dataset::load(&dataset)?;
            let mut written = 0;
            for (i, s) in ds.samples.iter().take(limit.unwrap_or(usize::MAX)).enumerate() {
                for (kind, img) in &s.degraded {
                    let mu = vae.encode(&params, img)?.mu;
                    write_tensor(&out.join(kind.as_str()).join(format!("{i:04}.lht")), &mu)?;
                    written += 1;
                }
            }
            log::info!("{written} latents → {}", out.display());
            println!("{}", out.display());
        }
        Analyze::Params { run } => {
            let cfg = load_config(&run)?;
            println!("{}", serde_json::to_string_pretty(&param_report(&cfg.model)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = ["info", "debug", "trace"][cli.verbose.min(2) as usize];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
