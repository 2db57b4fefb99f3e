//! `dcles`: dataset generation, closure training, LES runs, analysis and
//! self-validation. Every run writes into its own directory together with
//! the resolved configuration.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 failed validation checks.

mod commands;
mod config;
mod validate;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dcles::les::Formulation;
use dcles::training::LossKind;

use crate::commands::Quantity;
use crate::config::{ClosureKind, RunConfig};
use crate::validate::Suite;

#[derive(Parser, Debug)]
#[command(name = "dcles", version, about = "Divergence-consistent LES: data generation, closure training and simulation")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the initial-condition, split, initialization and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating point width of integration and stored fields.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Worker threads (trajectories are generated in parallel).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory; must not exist or be empty. Default `runs/<command>`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate DNS trajectories and store filtered snapshots with their commutators.
    Generate,
    /// Fit the CNN closure, or search the Smagorinsky coefficient.
    Train {
        #[arg(long, value_enum, default_value = "prior")]
        loss: LossArg,
    },
    /// Run an LES from the first snapshot of a dataset trajectory.
    Les {
        #[arg(long, value_enum)]
        closure: Option<ClosureKind>,
        #[arg(long, value_enum)]
        formulation: Option<FormulationArg>,
    },
    /// Spectra, energies or divergence of stored fields.
    Analyze {
        #[arg(long, value_enum)]
        what: Quantity,
    },
    /// Built-in consistency checks.
    Validate {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum LossArg {
    Prior,
    Post,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormulationArg {
    Dif,
    Dcf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train { .. } => "train",
            Command::Les { .. } => "les",
            Command::Analyze { .. } => "analyze",
            Command::Validate { .. } => "validate",
        }
    }
}

/// Failures with their own exit code; everything else exits with 1.
#[derive(Debug)]
pub enum Failure {
    Numerical(String),
    Validation(usize),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Validation(n) => write!(f, "{n} validation check(s) failed"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Numerical(_) => 2,
                Failure::Validation(_) => 3,
            };
        }
        if let Some(d) = cause.downcast_ref::<dcles::Error>() {
            if d.is_numerical() {
                return 2;
            }
        }
    }
    1
}

fn prepare_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() || fs::read_dir(dir)?.next().is_some() {
            bail!("run directory {} exists and is not empty", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_provenance(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let args: Vec<String> = std::env::args().collect();
    let run = format!(
        "tool = \"{}\"\nversion = \"{}\"\ncommand = \"{command}\"\nargs = {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        toml::Value::Array(args.into_iter().map(toml::Value::String).collect())
    );
    fs::write(dir.join("run.toml"), run)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    if let Some(p) = &cli.precision {
        cfg.dataset.precision = dcles::grid::Precision::from_bits(p.parse()?)?;
    }
    cfg.validate()?;
    // input files are checked before anything is written
    match &cli.command {
        Command::Train { .. } | Command::Les { .. } => {
            cfg.dataset_path()?;
            cfg.params_path()?;
        }
        Command::Analyze { .. } if cfg.analysis.inputs.is_empty() => bail!("analysis.inputs is empty"),
        _ => {}
    }
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("setting up the worker pool")?;
    }

    let name = cli.command.name();
    let run = cli.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    prepare_run_dir(&run)?;
    write_provenance(&run, &cfg, name)?;
    eprintln!("run directory: {}", run.display());

    match cli.command {
        Command::Generate => commands::generate(&cfg, &run),
        Command::Train { loss } => {
            let loss = match loss {
                LossArg::Prior => LossKind::Prior,
                LossArg::Post => LossKind::Post,
            };
            commands::train(&cfg, &run, loss)
        }
        Command::Les { closure, formulation } => {
            let f = match formulation {
                Some(FormulationArg::Dif) => Formulation::Dif,
                Some(FormulationArg::Dcf) => Formulation::Dcf,
                None => cfg.les.formulation,
            };
            commands::les(&cfg, &run, closure.unwrap_or(cfg.closure.kind), f)
        }
        Command::Analyze { what } => commands::analyze(&cfg, &run, what),
        Command::Validate { suite } => match validate::run(suite, &run)? {
            0 => Ok(()),
            n => Err(Failure::Validation(n).into()),
        },
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            process::exit(code);
        }
    };
    if let Err(e) = execute(cli) {
        eprintln!("error: {e}");
        for cause in e.chain().skip(1) {
            eprintln!("  caused by: {cause}");
        }
        process::exit(exit_code(&e));
    }
}
