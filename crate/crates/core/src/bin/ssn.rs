use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use ssn_core::baselines::{adagrad_grid_search, AdagradConfig};
use ssn_core::diagnostics::{run_check, DiagCheck};
use ssn_core::experiment::{build_problem, run_experiment, ExperimentConfig, Measure, SummaryRow};
use ssn_core::model::SmoothLoss;

#[derive(Parser)]
#[command(name = "ssn", version, about = "Stochastic semismooth Newton experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every configured (method, seed) pair and write CSV output.
    Run {
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use seeds 0..N instead of the configured list.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Run a randomized inequality check and print a JSON report.
    Diag {
        /// One of metric-bound, genconv, prox-descent, prox-descent-full,
        /// strconv, strconv-full, concentration-vector, concentration-matrix, all.
        check: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean final objective of Adagrad for each step-scale grid value.
    GridAdagrad {
        config: PathBuf,
        /// Number of seeds averaged per grid value.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 20.0)]
        max_epochs: f64,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:<12} {:>8} {:>8} {:>10} {:>12} {:>12}",
        "method", "tol", "reached", "epochs", "wall_ms", "final"
    );
    for r in rows {
        println!(
            "{:<12} {:>8.0e} {:>4}/{:<3} {:>10} {:>12} {:>12.3e}",
            r.method,
            r.tol,
            r.reached,
            r.runs,
            fmt_opt(r.median_epochs),
            fmt_opt(r.median_wall_ms),
            r.median_final
        );
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, seeds: Option<u64>) -> ssn_core::Result<bool> {
    let mut cfg = ExperimentConfig::from_file(&config)?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(n) = seeds {
        cfg.seeds = (0..n).collect();
    }
    let s = run_experiment(&cfg)?;
    match s.measure {
        Measure::RelativeError { psi_star } => println!("reference psi* = {psi_star:.17e}"),
        Measure::Residual => println!("measure: full residual"),
    }
    print_rows(&s.rows);
    println!("output written to {}", cfg.out_dir.display());
    Ok(true)
}

fn diag(check: &str, trials: Option<usize>, seed: u64) -> ssn_core::Result<bool> {
    let checks: Vec<DiagCheck> = if check == "all" {
        DiagCheck::all().to_vec()
    } else {
        vec![check.parse()?]
    };
    let mut all_pass = true;
    let mut results = Vec::new();
    for c in checks {
        let r = run_check(c, trials, seed)?;
        all_pass &= r.report.pass;
        results.push(r);
    }
    let out = if results.len() == 1 {
        serde_json::to_string_pretty(&results[0])?
    } else {
        serde_json::to_string_pretty(&results)?
    };
    println!("{out}");
    Ok(all_pass)
}

fn grid_adagrad(config: PathBuf, seeds: u64, max_epochs: f64) -> ssn_core::Result<bool> {
    let cfg = ExperimentConfig::from_file(&config)?;
    let p = build_problem(&cfg)?;
    let base = AdagradConfig {
        max_epochs,
        max_iters: usize::MAX,
        ..AdagradConfig::for_points(p.n_points())
    };
    let seeds: Vec<u64> = (0..seeds).collect();
    let grid = adagrad_grid_search(&p, &base, &seeds)?;
    let best = grid
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid is nonempty");
    let table: Vec<_> = grid
        .iter()
        .map(|&(scale, psi)| json!({ "step_scale": scale, "mean_final_psi": psi }))
        .collect();
    let out = json!({ "grid": table, "best_step_scale": best.0, "best_mean_final_psi": best.1 });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run { config, out, seeds } => run(config, out, seeds),
        Cmd::Diag { check, trials, seed } => diag(&check, trials, seed),
        Cmd::GridAdagrad {
            config,
            seeds,
            max_epochs,
        } => grid_adagrad(config, seeds, max_epochs),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
