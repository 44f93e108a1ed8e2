use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tubelink::commands::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_infer, cmd_train, resolve_config, Overrides};
use tubelink::gradcheck::GradcheckOptions;
use tubelink::synth::BenchmarkName;
use tubelink::types::TaskMode;

#[derive(Parser)]
#[command(name = "tubelink", about = "Near-online video segmentation by linking subclip tubes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by the commands that use a run config.
#[derive(Args)]
struct Common {
    /// TOML run config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task: vps, vis or vss.
    #[arg(long)]
    mode: Option<TaskMode>,
    /// Frames per training subclip.
    #[arg(long)]
    subclip_size: Option<usize>,
    /// Frames per inference window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen {
        #[arg(long, default_value = "easy")]
        benchmark: BenchmarkName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Segment and track the videos of one split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val or all.
        #[arg(long, default_value = "val")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Score a prediction directory against a ground-truth dataset.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(c: &Common, iterations: Option<usize>) -> Overrides {
    Overrides {
        mode: c.mode,
        subclip_size: c.subclip_size,
        window: c.window,
        seed: c.seed,
        iterations,
    }
}

fn run(cli: Cli) -> tubelink::Result<bool> {
    match cli.command {
        Command::Gen { benchmark, seed, out } => {
            cmd_gen(benchmark, seed, &out)?;
        }
        Command::Train { data, iterations, common } => {
            let cfg = resolve_config(common.config.as_deref(), &overrides(&common, iterations))?;
            cmd_train(&cfg, &data, &common.out)?;
        }
        Command::Infer { checkpoint, data, split, common } => {
            let cfg = resolve_config(common.config.as_deref(), &overrides(&common, None))?;
            cmd_infer(&cfg, &checkpoint, &data, &split, &common.out)?;
        }
        Command::Eval { pred, gt, out } => {
            let out = out.unwrap_or_else(|| pred.clone());
            cmd_eval(&pred, &gt, &out)?;
        }
        Command::Gradcheck { instances, seed, out } => {
            let opts = GradcheckOptions { instances, seed, ..GradcheckOptions::default() };
            return Ok(cmd_gradcheck(&opts, out.as_deref())?.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
