use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use elfarol::analytics::{
    argmax_expected_winners, attendance_mean_var, expected_winners, monte_carlo_validate,
    overload_probability, BinomialAttendanceModel,
};
use elfarol::clustering::{
    cluster_report_from_features, extract_features, ClusterOptions, DEFAULT_K, DEFAULT_RESTARTS,
};
use elfarol::harness::{
    load_config, read_run_log, report_logs, run_experiment, write_cluster_csv, write_report_csv,
};

/// |z| at or above this fails `validate-baseline`.
const Z_LIMIT: f64 = 4.0;

#[derive(Parser)]
#[command(
    name = "elfarol",
    version,
    about = "Capacity-constrained El Farol game simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run { config: PathBuf },
    /// Compare simulated Bernoulli agents with the exact binomial overload.
    ValidateBaseline {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        capacity: usize,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 100_000)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print exact attendance statistics for independent agents.
    Oracle {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        capacity: u64,
        /// GO probability; defaults to capacity / n.
        #[arg(long)]
        p: Option<f64>,
        #[arg(long, default_value_t = 0.001)]
        grid_step: f64,
    },
    /// Cluster agents from run logs by behavior.
    Cluster {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_RESTARTS)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write scatter and table CSVs into this directory.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Recompute metrics from run logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Also write attendance, overload and agent CSVs into this directory.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
}

fn oracle(n: u64, capacity: u64, p: Option<f64>, grid_step: f64) -> Result<()> {
    if n == 0 {
        bail!("n must be at least 1");
    }
    let p = p.unwrap_or(capacity as f64 / n as f64);
    let (mean, var) = attendance_mean_var(&BinomialAttendanceModel::Homogeneous { n, p })?;
    let overload = overload_probability(n, capacity, p)?;
    let winners = expected_winners(n, capacity, p)?;
    let p_star = argmax_expected_winners(n, capacity, grid_step)?;
    println!("n: {n}");
    println!("capacity: {capacity}");
    println!("p: {p}");
    println!("mean_attendance: {mean}");
    println!("attendance_variance: {var}");
    println!("attendance_sd: {}", var.sqrt());
    println!("overload_probability: {overload}");
    println!("expected_winners: {winners}");
    println!("capacity_matching_p: {}", capacity as f64 / n as f64);
    println!("payoff_optimal_p: {p_star}");
    println!(
        "expected_winners_at_optimum: {}",
        expected_winners(n, capacity, p_star)?
    );
    println!(
        "overload_at_optimum: {}",
        overload_probability(n, capacity, p_star)?
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg =
                load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            let out = run_experiment(&cfg)?;
            for run in &out.summary.runs {
                println!(
                    "run {:>3}: overload {:.4}, mean attendance {:.4}, fallbacks {}",
                    run.replication,
                    run.system.overload_frequency,
                    run.system.attendance_mean,
                    run.fallback_count
                );
            }
            if let Some(t) = &out.summary.theory {
                println!(
                    "theory: analytic overload {:.6}, empirical {:.6}, z {:.3}",
                    t.analytic_overload, t.empirical_overload, t.z_score
                );
            }
            println!("summary: {}", out.summary_path.display());
        }
        Command::ValidateBaseline {
            n,
            capacity,
            p,
            rounds,
            seed,
        } => {
            let report = monte_carlo_validate(n, capacity, p, rounds, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.z_score.abs() >= Z_LIMIT {
                eprintln!("FAIL: |z| = {:.3} >= {Z_LIMIT}", report.z_score.abs());
                return Ok(ExitCode::FAILURE);
            }
            eprintln!("PASS: |z| = {:.3} < {Z_LIMIT}", report.z_score.abs());
        }
        Command::Oracle {
            n,
            capacity,
            p,
            grid_step,
        } => oracle(n, capacity, p, grid_step)?,
        Command::Cluster {
            logs,
            k,
            restarts,
            seed,
            out,
            csv_dir,
        } => {
            let runs = logs
                .iter()
                .map(|p| read_run_log(p).map(|(_, log)| log))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = extract_features(&runs)?;
            let options = ClusterOptions {
                k,
                restarts,
                seed,
                ..ClusterOptions::default()
            };
            let report = cluster_report_from_features(&rows, options)?;
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, json + "\n")
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
            if let Some(dir) = csv_dir {
                for f in write_cluster_csv(&report, &rows, &dir)? {
                    eprintln!("wrote {}", f.display());
                }
            }
        }
        Command::Report { logs, csv_dir } => {
            let reports = report_logs(&logs)?;
            println!("{}", serde_json::to_string_pretty(&reports)?);
            if let Some(dir) = csv_dir {
                for f in write_report_csv(&logs, &dir)? {
                    eprintln!("wrote {}", f.display());
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
