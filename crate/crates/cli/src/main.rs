//! Command-line driver for the reconstruction pipeline.
//!
//! Exit codes: 0 success, 2 bad input, 3 missing artifact, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gs4d::io::EngineConfig;
use gs4d::pipeline::{generate_dataset, load_spec, Pipeline};
use gs4d::Error;

#[derive(Parser)]
#[command(name = "gs4d", version, about = "Compositional 4D Gaussian splatting pipeline")]
#[command(after_help = "Environment:\n  GS4D_THREADS  cap on worker threads (default: all cores)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Engine config (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an oracle dataset from a JSON scene spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Image size, crop size and occupancy are taken from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift every object to a static canonical cloud.
    FitStatic(Common),
    /// Fit per-object deformation, world warps and the joint fine-tune.
    FitMotion(Common),
    /// Fit per-frame camera translation scales on the background.
    FitCamera(Common),
    /// Align object depth scales into one scene.
    Compose(Common),
    /// Render the composed scene from an orbit camera.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        elevation: f64,
        /// Frame, 1-based.
        #[arg(long, default_value_t = 1)]
        t: usize,
        /// Output PNG (default: <out>/renders/...).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score point tracks against the dataset and write eval.json.
    Eval(Common),
    /// Run fit-static, fit-camera, fit-motion, compose and eval.
    Run(Common),
    /// Print the full configuration (defaults merged with --config).
    DumpConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> gs4d::Result<EngineConfig> {
    path.map_or_else(|| Ok(EngineConfig::default()), EngineConfig::load)
}

fn pipeline(c: &Common) -> gs4d::Result<Pipeline> {
    Ok(Pipeline::new(load_config(c.config.as_deref())?, &c.data, &c.out))
}

fn run(cli: Cli) -> gs4d::Result<()> {
    match cli.command {
        Command::Gen { spec, config, out } => {
            let config = load_config(config.as_deref())?;
            let m = generate_dataset(&load_spec(&spec)?, &config, &out)?;
            println!("wrote {} frames of {} object(s) to {}", m.frames, m.objects.len(), out.display());
        }
        Command::FitStatic(c) => pipeline(&c)?.fit_static()?,
        Command::FitMotion(c) => pipeline(&c)?.fit_motion()?,
        Command::FitCamera(c) => {
            let cam = pipeline(&c)?.fit_camera()?;
            let betas: Vec<String> = cam.beta.iter().map(|b| format!("{b:.4}")).collect();
            println!("beta = [{}]", betas.join(", "));
        }
        Command::Compose(c) => {
            let comp = pipeline(&c)?.compose()?;
            let scales: Vec<String> = comp.scales.iter().map(|k| format!("{k:.4}")).collect();
            println!("scales = [{}]", scales.join(", "));
        }
        Command::Render { common, azimuth, elevation, t, output } => {
            let path = pipeline(&common)?.render(azimuth, elevation, t, output.as_deref())?;
            println!("{}", path.display());
        }
        Command::Eval(c) => print!("{}", pipeline(&c)?.eval()?.table()),
        Command::Run(c) => print!("{}", pipeline(&c)?.run_all()?.table()),
        Command::DumpConfig { config } => print!("{}", load_config(config.as_deref())?.dump()),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => 3,
        Error::Io(_) | Error::Image(_) | Error::Csv(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("GS4D_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot size the thread pool: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: GS4D_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
