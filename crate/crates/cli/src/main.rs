use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use samt_core::harness::{
    exit_code, gradcheck, parse_config, parse_overrides, run_experiment, run_protocol, run_theory_suite,
    GradcheckOptions, SuiteSelection, TheorySuiteOptions,
};
use samt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "samt", version, about = "Alternating minimization with meta-learned step sizes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its metrics CSV.
    Train {
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Key overrides such as `--seed=7` or `--epochs 3`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Sampled contraction and Monte-Carlo recursion checks on random quadratics.
    Theory {
        #[arg(long, default_value = "all")]
        suite: SuiteSelection,
        /// Run with a deliberately broken step so the suite must fail.
        #[arg(long)]
        inject_bug: bool,
        #[arg(long, default_value = "runs/theory")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of layer gradients and step-network meta-gradients.
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Every ablation arm under both projection styles, one CSV each.
    Protocol {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/protocol")]
        out_dir: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, overrides } => {
            let config = parse_config(config.as_deref(), &parse_overrides(&overrides)?)?;
            let summary = run_experiment(&config)?;
            println!("{}", summary.summary_line());
            Ok(())
        }
        Command::Theory { suite, inject_bug, out_dir, seed } => {
            let options = TheorySuiteOptions {
                selection: suite,
                inject_bug,
                out_dir,
                seed,
                ..TheorySuiteOptions::default()
            };
            let report = run_theory_suite(&options)?;
            print!("{}", report.text);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Check("theory suite found violated inequalities".into()))
            }
        }
        Command::Gradcheck { cases, seed } => {
            let report = gradcheck(&GradcheckOptions { cases, seed })?;
            print!("{}", report.to_text());
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Check("gradient check exceeded its tolerance".into()))
            }
        }
        Command::Protocol { config, out_dir, overrides } => {
            let config = parse_config(config.as_deref(), &parse_overrides(&overrides)?)?;
            let report = run_protocol(&config, &out_dir)?;
            for arm in &report.arms {
                println!("{}", arm.summary.summary_line());
            }
            println!("wrote {}", report.summary_path.display());
            if report.shared_inputs_identical() {
                Ok(())
            } else {
                Err(Error::Check("protocol arms did not share initial weights and batches".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(cli.command);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
