use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnsp_cli::commands;
use gnsp_cli::selftest::SelftestOptions;

#[derive(Parser)]
#[command(
    name = "gnsp",
    version,
    about = "Null-space-projected continual learning on toy dual encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured task sequence and write CSVs and a checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides trainer.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check projector algebra, gradients and the invariance property.
    Selftest {
        #[arg(long, hide = true)]
        perturb_projector: bool,
    },
    /// Render a run CSV (gap.csv, spectra.csv or x,y… tables) as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_y: bool,
    },
    /// Evaluate a checkpoint on the tasks and probes of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a probe's image and text embeddings to CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: String,
        #[arg(long)]
        out: PathBuf,
        /// Config describing the probe data; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => commands::cmd_run(&config, &out, seed),
        Command::Selftest { perturb_projector } => commands::cmd_selftest(SelftestOptions { perturb_projector }),
        Command::Plot { input, out, log_y } => commands::cmd_plot(&input, &out, log_y),
        Command::Eval { checkpoint, config } => commands::cmd_eval(&checkpoint, &config),
        Command::ExportEmbeddings {
            checkpoint,
            probe,
            out,
            config,
        } => commands::cmd_export_embeddings(&checkpoint, &probe, &out, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.into()
        }
    }
}
