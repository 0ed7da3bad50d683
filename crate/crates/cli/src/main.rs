use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcmpc::{commands, CliError};

#[derive(Debug, Parser)]
#[command(name = "pcmpc", version, about = "Prediction-correction MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment config and write its result bundle.
    Run {
        config: PathBuf,
        /// Output directory (default: config `output.dir`, then $PCMPC_OUT, then ./pcmpc-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for batches.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Estimate constants and check the bounds for a logged run.
    Diagnose { config: PathBuf, logdir: PathBuf },
    /// Reproduce one figure (fig2..fig6) as data files.
    Paper {
        figure: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<String, CliError> = match &cli.command {
        Command::Run { config, out, jobs } => {
            commands::run(config, out.as_deref(), *jobs).map(|r| format!("wrote {}", r.dir.display()))
        }
        Command::Diagnose { config, logdir } => commands::diagnose(config, logdir).map(|r| {
            format!(
                "wrote {}: m_hat {:e}, L_hat {:e}, predicted corrections {:?}, {} bound violations",
                logdir.join(pcmpc::bundle::BOUND_REPORT_FILE).display(),
                r.estimates.m_hat,
                r.estimates.l_hat,
                r.bounds.predicted_n,
                r.bounds.violations
            )
        }),
        Command::Paper { figure, out, jobs } => {
            commands::paper(figure, out.as_deref(), *jobs).map(|r| format!("wrote {}", r.dir.display()))
        }
    };
    match outcome {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pcmpc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
