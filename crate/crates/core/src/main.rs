use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use heat_toc::config::load_config;
use heat_toc::study::{run_convergence_study, run_single, run_structural};

#[derive(Parser)]
#[command(name = "heat-toc", version, about = "Time-optimal bang-bang control of the heat equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `outputs` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent study points.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Solve at the first study point and dump control, observation and optimality report.
    Solve(Common),
    /// Convergence study against the configured reference.
    Study(Common),
    /// Measure of the near-zero set of the switching function.
    Structural(Common),
}

fn run(cli: Cli) -> heat_toc::Result<()> {
    let (common, kind) = match &cli.command {
        Command::Solve(c) => (c, 0),
        Command::Study(c) => (c, 1),
        Command::Structural(c) => (c, 2),
    };
    let mut cfg = load_config(&common.config)?;
    if let Some(out) = &common.out {
        cfg.outputs = out.clone();
    }
    match kind {
        0 => {
            let s = run_single(&cfg)?;
            let r = &s.point.result;
            println!("nu = {:.12e}  delta = {:.3e}  mu = {:.6e}", r.nu(), r.solution.delta, r.kkt.mu);
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        1 => {
            let s = run_convergence_study(&cfg, common.jobs)?;
            println!("reference nu = {:.12e}", s.reference.result.nu());
            for row in &s.table.rows {
                let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
                println!(
                    "level {} M {:4} N {:5}  err_nu {:.3e} ({})  err_q {:.3e} ({})",
                    row.level,
                    row.m,
                    row.n,
                    row.err_nu,
                    f(row.eoc_nu),
                    row.err_q,
                    f(row.eoc_q)
                );
            }
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        _ => {
            let s = run_structural(&cfg)?;
            match &s.fit {
                Ok(fit) => println!("kappa_fit = {:.4} (residual {:.3e}, {} points)", fit.kappa, fit.residual, fit.points),
                Err(e) => println!("kappa_fit unavailable: {e}"),
            }
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
