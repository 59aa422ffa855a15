//! `sparse-lab <experiment> [--config file] [--seed n] [--out dir] [--key value ...]`

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{LabError, Result};
use crate::lab::config::{Experiment, ExperimentConfig};
use crate::lab::run_experiment;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "sparse-lab", version, about = "Sparse-training experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// First-layer gradient ratio sparse/dense with and without BatchNorm.
    GradSkew(RunArgs),
    /// One-neuron GF/HAM flows.
    HamSim(RunArgs),
    /// Dynamic sparse training of a masked MLP.
    DstTrain(RunArgs),
    /// LayerNorm gradient ratio under uniform fan-in.
    LnCheck(RunArgs),
    /// ITOP rates of SET and RigL.
    ItopReport(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Pairs `--key value` / `--key=value` tokens.
pub fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| LabError::Config(format!("expected --key, got '{tok}'")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| LabError::Config(format!("missing value for --{key}")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Builds the resolved config: experiment defaults, then the file, then
/// `--seed`/`--out`, then the remaining overrides.
pub fn resolve(experiment: Experiment, config: Option<&PathBuf>, seed: Option<u64>, out: Option<&PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p, experiment)?,
        None => ExperimentConfig::for_experiment(experiment),
    };
    cfg.experiment = experiment;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.clone();
    }
    for (k, v) in parse_overrides(overrides)? {
        cfg.set(&k, &v)?;
    }
    if cfg.experiment != experiment {
        return Err(LabError::Config(format!(
            "config selects experiment {} but the subcommand is {experiment}",
            cfg.experiment
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &LabError) -> i32 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Runs the CLI and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (experiment, args) = match cli.command {
        Command::GradSkew(a) => (Experiment::GradSkew, a),
        Command::HamSim(a) => (Experiment::HamSim, a),
        Command::DstTrain(a) => (Experiment::DstTrain, a),
        Command::LnCheck(a) => (Experiment::LnCheck, a),
        Command::ItopReport(a) => (Experiment::ItopReport, a),
    };
    let cfg = match resolve(experiment, args.config.as_ref(), args.seed, args.out.as_ref(), &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    println!("# resolved config");
    print!("{}", cfg.echo());
    match run_experiment(&cfg) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
