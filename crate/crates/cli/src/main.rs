use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluxinv_core::{compare_data_types, run_experiment, validate_suite, Error, ExperimentConfig, ExperimentReport};

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

/// Reconstruct a degradation coefficient from average boundary-flux data.
#[derive(Parser)]
#[command(name = "fluxinv", version = fluxinv_core::experiment::VERSION)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override the base noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize data, invert, sample the posterior and write artifacts.
    Run(RunArgs),
    /// Compare average-flux and direct-flux reconstructions over noise levels.
    CompareData(RunArgs),
    /// Run the built-in numerical self-checks.
    Validate,
    /// Print the default configuration of example 1..=7.
    Example { number: u8 },
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("out").join(&cfg.name));
    Ok((cfg, out))
}

fn code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_SOLVER,
    }
}

fn finish(report: &ExperimentReport) -> ExitCode {
    for c in &report.checks {
        println!("check {} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !report.failures.is_empty() {
        for (job, msg) in &report.failures {
            eprintln!("job {job} failed: {msg}");
        }
        return ExitCode::from(EXIT_SOLVER);
    }
    if report.all_checks_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = load(&args)?;
            let report = run_experiment(&cfg, &out)?;
            println!("{} -> {}", cfg.name, out.display());
            println!("alpha,N,segments,data,epsilon,mu_rule,runs,r_e_mean,r_e_sd");
            for p in &report.summary {
                println!(
                    "{},{},{},{:?},{:e},{},{},{:.4},{:.4}",
                    p.alpha, p.count, p.segments, p.data, p.epsilon, p.mu_rule, p.runs, p.mean, p.sd
                );
            }
            Ok(finish(&report))
        }
        Command::CompareData(args) => {
            let (cfg, out) = load(&args)?;
            let cmp = compare_data_types(&cfg, &out)?;
            println!("{} -> {}", cfg.name, out.display());
            println!("epsilon,re_average,re_direct");
            for r in &cmp.rows {
                println!("{:e},{:.4},{:.4}", r.epsilon, r.average.0, r.direct.0);
            }
            Ok(finish(&cmp.experiment))
        }
        Command::Validate => {
            let report = validate_suite();
            print!("{}", report.to_json_lines());
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ACCEPTANCE)
            })
        }
        Command::Example { number } => {
            print!("{}", ExperimentConfig::example(number)?.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}
