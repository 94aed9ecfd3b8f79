use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vgp::commands::{self, Options};

#[derive(Debug, Parser)]
#[command(name = "vgp", version, about = "Black-box variational inference with a variational Gaussian process")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Threads for evaluation sampling. Results depend on the thread count.
    #[arg(long, global = true, value_name = "N", default_value_t = 1,
          value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and report the bound.
    Fit,
    /// Evaluate a saved checkpoint.
    Eval {
        /// Defaults to the checkpoint under the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    CheckGrad,
    /// Quantile-anchoring convergence experiment.
    Universal {
        /// Target name; overrides the config.
        target: Option<String>,
        #[arg(long, value_name = "K")]
        k_max: Option<u32>,
        /// Target parameter, e.g. `--param rho=0.5`.
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
    /// Print exact evidence and moments as JSON.
    Oracle {
        target: Option<String>,
        #[arg(long = "param", value_name = "KEY=VALUE")]
        params: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads as usize,
    };
    let result = match &cli.command {
        Command::Fit => commands::fit(&opts),
        Command::Eval { checkpoint } => commands::eval(&opts, checkpoint.as_deref()),
        Command::CheckGrad => commands::check_grad(&opts),
        Command::Universal { target, k_max, params } => {
            commands::universal(&opts, target.as_deref(), *k_max, params)
        }
        Command::Oracle { target, params } => commands::oracle(&opts, target.as_deref(), params),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
