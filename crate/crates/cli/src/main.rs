//! Pipeline command-line surface.
//!
//! Subcommands:
//!   run      one pipeline run per configured seed
//!   ablate   one-at-a-time grid (method rows and sensitivity axes)
//!   analyze  turn run logs into trajectory/stability/null CSVs + summary
//!   null-mc  random-subspace null statistics
//!
//! Exit code 0 on success; on failure a machine-readable JSON error
//! record is printed to stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safeanchor_core::analytics::{random_subspace_null, render_csv};
use safeanchor_core::pipeline::{ablate, analyze_paths, run, GridConfig, Method, RunConfig};
use safeanchor_core::Error;

#[derive(Parser)]
#[command(
    name = "safeanchor",
    version,
    about = "Safety-preserving continual adaptation engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the pipeline for every configured seed.
    Run(RunArgs),
    /// Run an ablation grid and write the combined report.
    Ablate(AblateArgs),
    /// Analyze run logs into CSV tables and a text summary.
    Analyze(AnalyzeArgs),
    /// Monte Carlo random-subspace null statistics.
    NullMc(NullArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override: run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training method.
    #[arg(long)]
    method: Option<String>,
    /// Override the domain-ordering permutation index.
    #[arg(long)]
    ordering: Option<usize>,
    /// Override the number of sequential domains T.
    #[arg(long)]
    domains: Option<usize>,
    /// Output directory for run logs and artifacts.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON grid config (base run config plus axes).
    #[arg(long)]
    grid: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run log files.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Output directory for the CSVs and summary.
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
}

#[derive(Args)]
struct NullArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": err.to_string(),
                "kind": err.kind(),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::NullMc(args) => cmd_null(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(method) = &args.method {
        cfg.method = method.parse::<Method>()?;
    }
    if let Some(ordering) = args.ordering {
        cfg.ordering = ordering;
    }
    if let Some(domains) = args.domains {
        cfg.domains = domains;
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    let cfg = cfg.resolve()?;
    for &seed in &cfg.seeds {
        let artifacts = run(&cfg, seed)?;
        let path = artifacts.write(&args.out)?;
        let last = artifacts.log.refusal_series();
        println!(
            "wrote {} (final refusal {:.1}, composite {:.1})",
            path.display(),
            last.last().copied().unwrap_or(0.0),
            artifacts
                .log
                .composite_series()
                .last()
                .copied()
                .unwrap_or(0.0),
        );
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let grid = GridConfig::from_json_file(&args.grid)?;
    let (artifacts, report) = ablate(&grid)?;
    std::fs::create_dir_all(&args.out)?;
    for art in &artifacts {
        art.write(&args.out)?;
    }
    std::fs::write(args.out.join("ablation.csv"), report.render_csv())?;
    std::fs::write(
        args.out.join("ablation-summary.txt"),
        report.render_summary(),
    )?;
    println!(
        "wrote {} runs and the combined report to {}",
        artifacts.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let output = analyze_paths(&args.logs)?;
    output.write(&args.out)?;
    println!(
        "wrote trajectory.csv, stability.csv, null.csv, summary.txt to {}",
        args.out.display()
    );
    Ok(())
}

fn cmd_null(args: NullArgs) -> Result<(), Error> {
    let stats = random_subspace_null(args.dim, args.k, args.trials, args.seed)?;
    let csv = render_csv(
        &[
            "dim", "k", "trials", "seed", "mean_cos", "std_cos", "mean_d_G", "std_d_G",
        ],
        &[vec![
            stats.dim.to_string(),
            stats.k_s.to_string(),
            stats.trials.to_string(),
            args.seed.to_string(),
            format!("{:.6}", stats.mean_cos),
            format!("{:.6}", stats.std_cos),
            format!("{:.6}", stats.mean_grassmannian),
            format!("{:.6}", stats.std_grassmannian),
        ]],
    );
    match args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
