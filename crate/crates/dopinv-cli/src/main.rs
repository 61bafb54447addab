//! Command-line driver for the doping-reconstruction pipelines.
//!
//! Exit codes: 0 success, 2 configuration, 3 forward stage, 4 synth stage,
//! 5 invert stage, 6 reconstruct stage, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dopinv::config::{expand_sweep, ExperimentConfig};
use dopinv::error::Error;
use dopinv::experiment::{run_full_experiment, run_stage, ExperimentReport, Stage};

#[derive(Parser)]
#[command(
    name = "dopinv",
    version,
    about = "Doping-profile reconstruction for a 2D unipolar diode",
    long_about = "Solves the drift-diffusion forward model with finite elements, samples the \
                  equilibrium-potential posterior with preconditioned Crank-Nicolson MCMC, and \
                  recovers the doping profile by finite differences."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file; defaults reproduce the reference experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set device.u=5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for set in &self.sets {
            let (key, value) = set.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set needs KEY=VALUE, got '{set}'"))
            })?;
            config.apply_set(key.trim(), value.trim())?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline: truth, data, chain, reconstruction, report.
    Full(ConfigArgs),
    /// Solve the forward model only and export the truth fields.
    Forward(ConfigArgs),
    /// Generate the noisy synthetic observation file.
    Synth(ConfigArgs),
    /// Run the MCMC inversion against an existing observation file.
    Invert(ConfigArgs),
    /// Recover the doping profile from an existing posterior mean.
    Reconstruct(ConfigArgs),
    /// Run a config matrix, one full experiment per combination.
    Sweep {
        #[command(flatten)]
        base: ConfigArgs,
        /// Matrix file: `section.key = v1, v2, ...` per line, expanded
        /// cartesian.
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err.stage() {
        Some("forward") => 3,
        Some("synth") => 4,
        Some("invert") => 5,
        Some("reconstruct") => 6,
        _ => match err {
            Error::Config(_) => 2,
            _ => 1,
        },
    }
}

fn print_report(label: &str, report: &ExperimentReport) {
    println!(
        "{label}: mse_doping={:.6} mse_potential={:.6} acceptance={:.4} wall={:.1}s",
        report.mse_doping,
        report.mse_potential,
        report.acceptance_rate,
        report.wall_time_seconds
    );
}

fn run_sweep(base: &ConfigArgs, matrix: &PathBuf) -> Result<(), Error> {
    let base_config = base.resolve()?;
    let matrix_text = std::fs::read_to_string(matrix)
        .map_err(|e| Error::Config(format!("cannot read matrix {}: {e}", matrix.display())))?;
    let cases = expand_sweep(&matrix_text)?;
    let root = PathBuf::from(&base_config.output.directory);
    println!("sweep: {} cases under {}", cases.len(), root.display());

    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let mut config = base_config.clone();
        for (key, value) in &case.overrides {
            config.apply_set(key, value)?;
        }
        config.output.directory = root.join(&case.label).to_string_lossy().into_owned();
        let report = run_full_experiment(&config)?;
        print_report(&case.label, &report);
        rows.push((case.label.clone(), report));
    }

    use std::io::Write;
    std::fs::create_dir_all(&root)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(root.join("sweep_summary.csv"))?);
    writeln!(
        w,
        "label,mse_doping,mse_potential,acceptance_rate,wall_time_seconds"
    )?;
    for (label, report) in &rows {
        writeln!(
            w,
            "{label},{},{},{},{}",
            dopinv::io::fmt_f64(report.mse_doping),
            dopinv::io::fmt_f64(report.mse_potential),
            dopinv::io::fmt_f64(report.acceptance_rate),
            dopinv::io::fmt_f64(report.wall_time_seconds)
        )?;
    }
    w.flush()?;
    println!("sweep summary: {}", root.join("sweep_summary.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Full(args) => {
            let config = args.resolve()?;
            let report = run_full_experiment(&config)?;
            print_report("full", &report);
            println!("outputs: {}", config.output.directory);
            Ok(())
        }
        Command::Forward(args) => run_named_stage(Stage::Forward, args),
        Command::Synth(args) => run_named_stage(Stage::Synth, args),
        Command::Invert(args) => run_named_stage(Stage::Invert, args),
        Command::Reconstruct(args) => run_named_stage(Stage::Reconstruct, args),
        Command::Sweep { base, matrix } => run_sweep(base, matrix),
    }
}

fn run_named_stage(stage: Stage, args: &ConfigArgs) -> Result<(), Error> {
    let config = args.resolve()?;
    run_stage(stage, &config)?;
    println!("{stage} stage done: {}", config.output.directory);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
