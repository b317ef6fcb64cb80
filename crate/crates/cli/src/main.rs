//! Command-line front end for the guidance-lab experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use guidance_lab::harness::experiment::{
    resolve_out_dir, run_ablate, run_barrier_profile, run_gen_tasks, run_noise_sweep,
    run_risk_curve, run_select_level, run_train,
};
use guidance_lab::harness::verify::{all_passed, render_report, verify_suite, VerifyOptions};
use guidance_lab::harness::ExperimentConfig;
use guidance_lab::optimizer::Mode;

#[derive(Parser)]
#[command(
    name = "guidance-lab",
    about = "Tabular RL laboratory for adaptive minimal-intervention action guidance",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to a TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for the run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the GUIDANCE_LAB_OUT env var.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Training mode override.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Guidance level for fixed-k mode.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Vanilla,
    Actguide,
    FixedK,
    AlwaysGuided,
    Opsd,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and serialize the task set.
    GenTasks,
    /// Train one mode and write metrics, traces, and a checkpoint.
    Train,
    /// Run the ablation grid under identical seeds.
    Ablate,
    /// Estimate the per-level off-policy risk curve.
    RiskCurve,
    /// Dump per-step mass, retention, Pass@K, and guidance influence.
    BarrierProfile,
    /// Train at 0%, 10%, and 20% reference noise.
    NoiseSweep,
    /// Estimate recovery and risk per level and select the minimal level.
    SelectLevel,
    /// Run the full acceptance verification suite.
    Verify,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match (cli.mode, cli.k) {
        (Some(ModeArg::FixedK), Some(k)) => config.train.mode = Mode::FixedK { k },
        (Some(ModeArg::FixedK), None) => bail!("--mode fixed-k requires --k"),
        (Some(mode), _) => {
            config.train.mode = match mode {
                ModeArg::Vanilla => Mode::Vanilla,
                ModeArg::Actguide => Mode::ActGuide,
                ModeArg::AlwaysGuided => Mode::AlwaysGuided,
                ModeArg::Opsd => Mode::Opsd,
                ModeArg::FixedK => unreachable!(),
            }
        }
        (None, _) => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<bool> {
    let out = resolve_out_dir(cli.out.as_deref());
    let quiet = cli.quiet;
    match cli.command {
        Command::Verify => {
            let results = verify_suite(&VerifyOptions::default());
            print!("{}", render_report(&results));
            return Ok(all_passed(&results));
        }
        Command::GenTasks => {
            run_gen_tasks(&load_config(cli)?, &out, quiet)?;
        }
        Command::Train => {
            run_train(&load_config(cli)?, &out, quiet)?;
        }
        Command::Ablate => {
            run_ablate(&load_config(cli)?, &out, quiet)?;
        }
        Command::RiskCurve => {
            run_risk_curve(&load_config(cli)?, &out, quiet)?;
        }
        Command::BarrierProfile => {
            run_barrier_profile(&load_config(cli)?, &out, quiet)?;
        }
        Command::NoiseSweep => {
            run_noise_sweep(&load_config(cli)?, &out, quiet)?;
        }
        Command::SelectLevel => {
            run_select_level(&load_config(cli)?, &out, quiet)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
