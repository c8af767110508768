use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use enfed::experiment::{
    any_without_collaborators, inspect_partitions, render_table, report_files, run_experiment, serve_device,
    write_metrics, ExperimentConfig, RunError, EXIT_NO_COLLABORATORS,
};
use enfed::nn::run_gradcheck_suite;

#[derive(Parser)]
#[command(name = "enfed", version, about = "Energy-aware opportunistic federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a config file and write its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the backpropagation gradients.
    Gradcheck {
        /// Perturbs the analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Compare metrics files; reductions are of the first row against the rest.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Show how the config's dataset is split over devices.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Print per-device class histograms.
        #[arg(long)]
        inspect: bool,
    },
    /// Serve one collaborator of a TCP experiment for a single requester.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        device: usize,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode, RunError> {
    let cfg = ExperimentConfig::load(&config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("metrics.csv"));
    let rows = run_experiment(&cfg, seed)?;
    write_metrics(&out, &rows)?;
    print!("{}", render_table(&rows));
    println!("metrics written to {}", out.display());
    if any_without_collaborators(&rows) {
        eprintln!("no collaborator accepted the request");
        return Ok(ExitCode::from(EXIT_NO_COLLABORATORS as u8));
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(corrupt: bool) -> Result<ExitCode, RunError> {
    let results = run_gradcheck_suite(corrupt).map_err(|e| RunError::Config(e.to_string()))?;
    let mut ok = true;
    for (arch, rep) in &results {
        let verdict = if rep.passed() { "PASS" } else { "FAIL" };
        ok &= rep.passed();
        println!(
            "{verdict} layers={arch:?} max_rel_error={:.3e} checked={:?}",
            rep.max_rel_error, rep.checked
        );
    }
    println!("gradcheck: {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn serve(config: PathBuf, device: usize, listen: String, seed: Option<u64>) -> Result<ExitCode, RunError> {
    let cfg = ExperimentConfig::load(&config)?;
    let listener = TcpListener::bind(&listen).map_err(|e| RunError::Io(format!("{listen}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| RunError::Io(e.to_string()))?;
    println!("device {device} listening on {addr}");
    serve_device(&cfg, seed.unwrap_or(cfg.seed), device, &listener)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => run(config, seed, out),
        Command::Gradcheck { corrupt } => gradcheck(corrupt),
        Command::Report { files } => report_files(&files).map(|text| {
            print!("{text}");
            ExitCode::SUCCESS
        }),
        Command::Partition { config, seed, inspect } => ExperimentConfig::load(&config).and_then(|cfg| {
            let text = inspect_partitions(&cfg, seed.unwrap_or(cfg.seed))?;
            if inspect {
                print!("{text}");
            } else {
                println!("{} devices; pass --inspect for class histograms", cfg.topology.devices);
            }
            Ok(ExitCode::SUCCESS)
        }),
        Command::Serve { config, device, listen, seed } => serve(config, device, listen, seed),
    };
    result.unwrap_or_else(fail)
}
