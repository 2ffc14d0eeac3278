use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seaice_cli::commands::{self, EvaluateArgs, TrainArgs};
use seaice_cli::{CliResult, RunConfig};
use seaice_core::LossKind;

#[derive(Parser)]
#[command(name = "seaice", version, about = "Sea-ice type segmentation of SAR scenes")]
struct Cli {
    /// Compute device. Only the CPU is supported.
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    device: Device,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Dice,
    Focal,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => LossKind::Ce,
            LossArg::Dice => LossKind::Dice,
            LossArg::Focal => LossKind::Focal,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic monthly dataset (bands and charts).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        scenes: usize,
        /// Scene side in pixels.
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2018)]
        year: u32,
    },
    /// Rasterize charts, resample bands and write the split and patch index.
    Prepare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Raw scenes; defaults to `data.raw` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `data.prepared` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Patch sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per seed and evaluate it on the test scenes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Train this seed only.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Predict test scenes tile by tile.
        #[arg(long)]
        tiled: bool,
    },
    /// Score checkpoints on prepared scenes and render their maps.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory or weight file; repeat for several.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Scene ids; defaults to the test scenes of the split.
        #[arg(long = "scene")]
        scenes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tiled: bool,
    },
    /// Predict a single scene.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding `<scene>_{hh,hv,ia}.tif`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tiled: bool,
    },
    /// Color a label raster, with an error map when the truth is given.
    Render {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let Device::Cpu = cli.device;
    match cli.command {
        Command::Synth {
            out,
            scenes,
            size,
            seed,
            year,
        } => commands::synth(&out, scenes, size, seed, year),
        Command::Prepare { config, data, out, seed } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.split.seed = s;
            }
            let data = data.unwrap_or_else(|| cfg.data.raw.clone());
            let out = out.unwrap_or_else(|| cfg.data.prepared.clone());
            commands::prepare(&cfg, &data, &out)
        }
        Command::Train {
            config,
            loss,
            seed,
            out,
            tiled,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let args = TrainArgs {
                loss: loss.map(Into::into),
                seed,
                out,
                tiled,
            };
            commands::train(&cfg, &args)
        }
        Command::Evaluate {
            config,
            checkpoints,
            scenes,
            out,
            tiled,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let args = EvaluateArgs {
                checkpoints,
                scenes,
                out,
                tiled,
            };
            commands::evaluate(&cfg, &args).map(|(_, line)| line)
        }
        Command::Predict {
            config,
            checkpoint,
            data,
            scene,
            out,
            tiled,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::predict(&checkpoint, &data, &scene, &out, cfg.eval.mode(tiled))
        }
        Command::Render { labels, truth, out } => commands::render(&labels, truth.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
