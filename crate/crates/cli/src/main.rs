use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use maskdiff_cli::config::{resolve_seed, ExperimentConfig};
use maskdiff_cli::output::{Format, OutSink};
use maskdiff_cli::sample_cmd::run_sample;
use maskdiff_cli::sweep::{sweep_j, sweep_t, DEFAULT_J_GRID, DEFAULT_T_GRID};
use maskdiff_cli::verify::{run_verify, Scope};
use maskdiff_cli::{bounds, CliError};

/// Masked-diffusion sampling experiments over exactly tractable sequence
/// distributions: Monte Carlo sampling-error sweeps, convergence-bound
/// reports, a brute-force verification suite, and reverse-process sampling.
#[derive(Parser)]
#[command(name = "maskdiff", version, about)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides MASKDIFF_SEED and the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Write primary output to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for Monte Carlo loops (default: all cores). Results
    /// are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output format where applicable.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sampling error vs iteration count on balanced schedules, with the
    /// log-log slope.
    SweepT {
        /// Comma-separated iteration counts.
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<usize>>,
    },
    /// Sampling error vs coupling strength at a fixed iteration count, with
    /// the Pearson correlation against total mutual information.
    SweepJ {
        /// Comma-separated coupling values.
        #[arg(long, value_delimiter = ',')]
        j: Option<Vec<f64>>,
        /// Iteration count (balanced schedule).
        #[arg(long)]
        t: Option<usize>,
    },
    /// Evaluate all convergence bounds for the configured instance (JSON).
    Bounds,
    /// Run the identity/bound verification suite on randomized brute-force
    /// instances. Exit code 1 if any check fails.
    Verify {
        #[arg(long, value_enum, default_value_t = Scope::Quick)]
        scope: Scope,
        /// Deliberately mislabel a perturbed predictor as optimal; the
        /// decoupling check must catch it.
        #[arg(long, hide = true)]
        tamper: bool,
    },
    /// Draw samples from the reverse process; optional per-step run log.
    Sample {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

/// Default seed used when neither flag, environment, nor config supplies one
/// (verify has no config).
const DEFAULT_VERIFY_SEED: u64 = 2024;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::from_file(p),
        None => Err(CliError::Config(
            "this command requires --config <path>".into(),
        )),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }

    match &cli.command {
        Command::SweepT { t } => {
            let config = load_config(&cli.config)?;
            let seed = resolve_seed(cli.seed, config.seed)?;
            let grid = t.clone().unwrap_or_else(|| DEFAULT_T_GRID.to_vec());
            let output = sweep_t(&config, &grid, seed)?;
            emit_sweep(&cli, &config, output)
        }
        Command::SweepJ { j, t } => {
            let config = load_config(&cli.config)?;
            let seed = resolve_seed(cli.seed, config.seed)?;
            let grid = j.clone().unwrap_or_else(|| DEFAULT_J_GRID.to_vec());
            let output = sweep_j(&config, &grid, t.unwrap_or(10), seed)?;
            emit_sweep(&cli, &config, output)
        }
        Command::Bounds => {
            let config = load_config(&cli.config)?;
            let seed = resolve_seed(cli.seed, config.seed)?;
            if cli.format == Some(Format::Csv) {
                return Err(CliError::Config("bounds emits JSON only".into()));
            }
            let report = bounds::run_bounds(&config, seed)?;
            let sink = OutSink::from_flag(cli.out.as_deref(), config.out.as_deref());
            sink.write_all(&format!(
                "{}\n",
                serde_json::to_string_pretty(&report).expect("serializable")
            ))
        }
        Command::Verify { scope, tamper } => {
            let seed = resolve_seed(cli.seed, DEFAULT_VERIFY_SEED)?;
            let report = run_verify(*scope, seed, *tamper)?;
            let sink = OutSink::from_flag(cli.out.as_deref(), None);
            sink.write_all(&format!(
                "{}\n",
                serde_json::to_string_pretty(&report).expect("serializable")
            ))?;
            if report.passed {
                Ok(())
            } else {
                Err(CliError::VerificationFailed)
            }
        }
        Command::Sample { count } => {
            let config = load_config(&cli.config)?;
            let seed = resolve_seed(cli.seed, config.seed)?;
            let output = run_sample(&config, *count, seed)?;
            // Sampled sequences go to stdout; --out receives the step log.
            match cli.format.unwrap_or(Format::Csv) {
                Format::Json => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&output.runs).expect("serializable")
                    );
                }
                Format::Csv => {
                    for run in &output.runs {
                        let tokens: Vec<String> =
                            run.tokens.iter().map(|t| t.to_string()).collect();
                        println!("{}", tokens.join(" "));
                    }
                }
            }
            if let Some(path) = cli.out.as_deref().or(config.out.as_deref()) {
                std::fs::write(path, &output.step_log_csv)?;
            }
            Ok(())
        }
    }
}

/// Sweep output routing: CSV rows go to the sink with the summary printed as
/// JSON to stdout (or stderr when the rows already occupy stdout); JSON
/// format bundles rows and summary in one object.
fn emit_sweep(
    cli: &Cli,
    config: &ExperimentConfig,
    output: maskdiff_cli::sweep::SweepOutput,
) -> Result<(), CliError> {
    let sink = OutSink::from_flag(cli.out.as_deref(), config.out.as_deref());
    match cli.format.unwrap_or(Format::Csv) {
        Format::Json => {
            sink.write_all(&format!(
                "{}\n",
                serde_json::to_string_pretty(&output).expect("serializable")
            ))?;
        }
        Format::Csv => {
            let summary = serde_json::to_string(&output.summary).expect("serializable");
            sink.write_all(&output.to_csv())?;
            if sink.is_file() {
                println!("{summary}");
            } else {
                eprintln!("{summary}");
            }
        }
    }
    Ok(())
}
