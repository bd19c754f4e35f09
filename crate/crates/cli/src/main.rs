//! Command-line surface for the video inpainting engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! failure. `LGTSM_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use lgtsm_core::data::{self, Dataset};
use lgtsm_core::error::{Error, Result};
use lgtsm_core::gradcheck::{self, Component};
use lgtsm_core::maskgen::{generate_mask, MaskKind, MaskSpec};
use lgtsm_core::networks::{DiscriminatorConfig, GeneratorConfig};
use lgtsm_core::train::{self, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "lgtsm", version, about = "Video inpainting with learnable gated temporal shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage from a config file.
    Train(TrainArgs),
    /// Fill masked regions of a frame directory using a checkpoint.
    Inpaint(InpaintArgs),
    /// Finite-difference verification of the backward rules (f64).
    Gradcheck(GradcheckArgs),
    /// Parameter counts and forward timings for both generator builds.
    Paramreport(ParamreportArgs),
    /// Per-mask-ratio-bucket metrics for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Generate a free-form mask and write it as PBM frames.
    Maskgen(MaskgenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (line-based `key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to resume from (stage must match the config).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override a config value, e.g. --set steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of frame_%05d.ppm inputs.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of frame_%05d.pbm masks.
    #[arg(long)]
    masks: PathBuf,
    /// Output directory for composited frames.
    #[arg(long)]
    out: PathBuf,
    /// Online mode: no layer reads future frames.
    #[arg(long)]
    causal: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ops | layer | generator | losses (default: all)
    #[arg(long)]
    component: Option<String>,
}

#[derive(Args)]
struct ParamreportArgs {
    /// Forward-timing shape as BxLxHxW.
    #[arg(long, default_value = "1x8x64x64")]
    shape: String,
    /// Generator width for the parameter counts.
    #[arg(long, default_value_t = 32)]
    base_channels: usize,
    /// Spatial kernel for the parameter counts.
    #[arg(long, default_value_t = 5)]
    kernel_size: usize,
    /// Generator width for the timing runs (kept small so a report
    /// finishes quickly on a laptop).
    #[arg(long, default_value_t = 16)]
    timing_channels: usize,
    /// Spatial kernel for the timing runs.
    #[arg(long, default_value_t = 3)]
    timing_kernel: usize,
    /// Runs per timing median.
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Clip manifest (one frame directory per line) or `synthetic:N`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value_t = 7)]
    buckets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MaskgenArgs {
    /// stroke | bbox | object
    #[arg(long)]
    kind: String,
    /// Target ratio range as lo:hi, e.g. 0.1:0.2.
    #[arg(long)]
    ratio: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Max per-frame translation in pixels.
    #[arg(long, default_value_t = 2)]
    motion: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_shape(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 4 {
        return Err(Error::config(format!("shape must be BxLxHxW, got {s}")));
    }
    let mut out = [0usize; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::config(format!("bad shape component {part}")))?;
    }
    Ok(out)
}

fn parse_ratio(s: &str) -> Result<(f64, f64)> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| Error::config(format!("ratio must be lo:hi, got {s}")))?;
    let lo = lo
        .parse()
        .map_err(|_| Error::config(format!("bad ratio lower bound {lo}")))?;
    let hi = hi
        .parse()
        .map_err(|_| Error::config(format!("bad ratio upper bound {hi}")))?;
    Ok((lo, hi))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::from_file(&args.config)?;
    for pair in &args.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {pair}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let outcome = trainer.run(|log| println!("{}", log.render()))?;
    for (step, v) in &outcome.val_history {
        println!("val step {step:>6} l1 {v:.6}");
    }
    if outcome.stopped_early {
        println!("stopped early: validation l1 plateaued");
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn cmd_inpaint(args: InpaintArgs) -> Result<()> {
    train::inpaint(&args.ckpt, &args.frames, &args.masks, &args.out, args.causal)?;
    println!("wrote composited frames to {}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = match &args.component {
        Some(c) => gradcheck::run_component(Component::parse(c)?)?,
        None => gradcheck::run_all()?,
    };
    print!("{}", report.render());
    if report.passed() {
        println!("gradcheck: all checks within {:.0e}", gradcheck::TOLERANCE);
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|f| f.name.as_str()).collect();
        Err(Error::numeric(format!("gradient check failed for: {}", names.join(", "))))
    }
}

fn cmd_paramreport(args: ParamreportArgs) -> Result<()> {
    let shape = parse_shape(&args.shape)?;
    let count_cfg = GeneratorConfig {
        base_channels: args.base_channels,
        kernel_size: args.kernel_size,
        ..Default::default()
    };
    let timing_cfg = GeneratorConfig {
        base_channels: args.timing_channels,
        kernel_size: args.timing_kernel,
        ..Default::default()
    };
    let disc_cfg = DiscriminatorConfig {
        base_channels: args.base_channels,
        kernel_size: args.kernel_size,
        ..Default::default()
    };
    let report = train::param_report(count_cfg, timing_cfg, disc_cfg, shape, args.runs)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dataset: Dataset<f32> = if let Some(n) = args.data.strip_prefix("synthetic:") {
        let n = n
            .parse()
            .map_err(|_| Error::config(format!("bad synthetic clip count {n}")))?;
        Dataset::synthetic(n, 0x5eed, 8, 64, 64)?
    } else {
        Dataset::from_manifest(&PathBuf::from(&args.data))?
    };
    let report = train::evaluate_checkpoint(&args.ckpt, &dataset, args.buckets, args.seed)?;
    print!("{}", report.render());
    Ok(())
}

fn cmd_maskgen(args: MaskgenArgs) -> Result<()> {
    let spec = MaskSpec {
        kind: MaskKind::parse(&args.kind)?,
        ratio_range: parse_ratio(&args.ratio)?,
        motion: args.motion,
        seed: args.seed,
    };
    let mask = generate_mask(&spec, args.frames, args.height, args.width)?;
    data::write_mask_dir(&args.out, &mask)?;
    println!(
        "wrote {} mask frames ({}x{}) with ratio {:.4} to {}",
        mask.frames(),
        mask.height(),
        mask.width(),
        mask.ratio(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Inpaint(args) => cmd_inpaint(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Paramreport(args) => cmd_paramreport(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Maskgen(args) => cmd_maskgen(args),
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("LGTSM_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                lgtsm_core::parallel::configure_threads(n);
                if n == 1 {
                    lgtsm_core::parallel::set_sequential(true);
                }
            }
            _ => {
                eprintln!("error: LGTSM_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help =
                matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
