use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use incseg::commands::{
    cmd_eval, cmd_gen_domains, cmd_report, cmd_run, cmd_selftest, load_config,
};
use incseg::error::Result;

#[derive(Parser)]
#[command(name = "incseg", version, about = "Incremental multi-domain segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic datasets an experiment file describes.
    GenDomains {
        /// Experiment file (flat key=value lines).
        #[arg(long)]
        config: PathBuf,
        /// Override the file's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured method over its domain sequence.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the file's method (ours, or a baseline name).
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved checkpoint on one domain's validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data root holding domain_<name> directories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Re-render a run's CSV as a comparison table.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run the built-in verification suite.
    Selftest,
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDomains { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            for dir in cmd_gen_domains(&cfg)? {
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Run { config, baseline, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(method) = baseline {
                cfg.method = method;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let artifacts = cmd_run(&cfg)?;
            for r in &artifacts.reports {
                print!("{}", r.render());
            }
            for p in &artifacts.checkpoints {
                println!("wrote {}", p.display());
            }
            println!("wrote {}", artifacts.report_txt.display());
            println!("wrote {}", artifacts.report_csv.display());
            Ok(())
        }
        Command::Eval { checkpoint, data, domain } => {
            print!("{}", cmd_eval(&checkpoint, &data, &domain)?);
            Ok(())
        }
        Command::Report { csv } => {
            print!("{}", cmd_report(&csv)?);
            Ok(())
        }
        Command::Selftest => cmd_selftest(&mut std::io::stdout()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
