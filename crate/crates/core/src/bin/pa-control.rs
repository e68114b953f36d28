//! Batch front-end: `solve`, `simulate`, `verify`, `export-policy`, all
//! driven by a single JSON config document.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pa_control::config::{
    cmd_export_policy, cmd_simulate, cmd_solve, cmd_verify, CliError, RunConfig, VerifyWhich,
    EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "pa-control", version, about = "Stochastic control solver and verification suite")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the simulation seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the convergence ladder and write grid artifacts.
    Solve,
    /// Monte Carlo cost estimation from the configured start state.
    Simulate,
    /// Run verification suites against the model and solved artifacts.
    Verify {
        /// Suites to run; defaults to every section present in the config.
        #[arg(long, value_enum)]
        which: Vec<WhichArg>,
    },
    /// Synthesize a discrete policy table from a solved grid.
    ExportPolicy,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Dpp,
    Viscosity,
    Martingale,
    Tail,
    Conditions,
    Bound,
}

impl From<WhichArg> for VerifyWhich {
    fn from(w: WhichArg) -> Self {
        match w {
            WhichArg::Dpp => VerifyWhich::Dpp,
            WhichArg::Viscosity => VerifyWhich::Viscosity,
            WhichArg::Martingale => VerifyWhich::Martingale,
            WhichArg::Tail => VerifyWhich::Tail,
            WhichArg::Conditions => VerifyWhich::Conditions,
            WhichArg::Bound => VerifyWhich::Bound,
        }
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": err.to_string() })
    );
    ExitCode::from(EXIT_USAGE as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    let Some(config_path) = cli.config.as_ref() else {
        eprintln!("{}", serde_json::json!({ "error": "--config is required" }));
        return ExitCode::from(EXIT_USAGE as u8);
    };
    let mut cfg = match RunConfig::from_path(config_path) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let result = match &cli.command {
        Command::Solve => cmd_solve(&cfg, &out),
        Command::Simulate => cmd_simulate(&cfg, &out),
        Command::Verify { which } => {
            let which: Vec<VerifyWhich> = if which.is_empty() {
                // run every suite that has a config section
                let v = cfg.verify.clone().unwrap_or_default();
                VerifyWhich::ALL
                    .into_iter()
                    .filter(|w| match w {
                        VerifyWhich::Dpp => v.dpp.is_some(),
                        VerifyWhich::Viscosity => v.viscosity.is_some(),
                        VerifyWhich::Martingale => v.martingale.is_some(),
                        VerifyWhich::Tail => v.tail.is_some(),
                        VerifyWhich::Conditions => v.conditions.is_some(),
                        VerifyWhich::Bound => v.bound.is_some(),
                    })
                    .collect()
            } else {
                which.iter().map(|&w| w.into()).collect()
            };
            cmd_verify(&cfg, &out, &which)
        }
        Command::ExportPolicy => cmd_export_policy(&cfg, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => fail(&e),
    }
}
