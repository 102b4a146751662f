//! Command-line driver for the assimilation experiments.

use clap::{Args, Parser, Subcommand};
use egmf_core::harness::output::write_outputs;
use egmf_core::harness::{
    run_experiment, run_lorenz_sweep, run_table1, Experiment, ExperimentConfig, ExperimentOutput,
    FilterName, SweepGrid,
};
use egmf_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "egmf",
    about = "Ensemble Gaussian mixture filtering experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One Bayes update of a bimodal prior, scored against the closed form
    #[command(alias = "single_bayes")]
    SingleBayes(RunArgs),
    /// Cycled double-well assimilation against the grid-filter oracle
    #[command(alias = "double_well")]
    DoubleWell(RunArgs),
    /// Langevin particle observed through position increments
    Langevin(RunArgs),
    /// Lorenz-63 twin experiment
    #[command(alias = "lorenz_63")]
    Lorenz63(RunArgs),
    /// Ensemble-size study on the double well (R=36, M=20/50/100)
    Table1 {
        /// Paper-scale horizon (10000 cycles) instead of the desk default
        #[arg(long)]
        full: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (default 0,1,2,3,4)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Bandwidth/inflation sweep on Lorenz-63
    LorenzSweep {
        /// Paper-scale horizon (101000 cycles) instead of 10000
        #[arg(long)]
        full: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (default 0,1,2)
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the cycle count
        #[arg(long)]
        cycles: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration (defaults built in when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list
    #[arg(long)]
    seed: Option<u64>,
    /// Restore the paper-scale horizon
    #[arg(long)]
    full: bool,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of the configured filters
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<String>>,
}

fn run_configured(experiment: Experiment, args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default_for(experiment),
    };
    if cfg.experiment != experiment {
        return Err(Error::Config(format!(
            "config describes the {} experiment, not {}",
            cfg.experiment, experiment
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if args.full {
        cfg.apply_full();
    }
    if let Some(names) = &args.filters {
        let parsed: Result<Vec<FilterName>> = names.iter().map(|s| s.parse()).collect();
        cfg.retain_filters(&parsed?)?;
    }
    let out_dir = args
        .out
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("out_{experiment}")));
    let output = run_experiment(&cfg)?;
    report(&output);
    finish(&output, &out_dir)
}

fn report(output: &ExperimentOutput) {
    for r in &output.summary.reports {
        for o in &r.outcomes {
            let mut line = format!("seed={} filter={}", r.seed, o.filter);
            if let Some(c) = o.c {
                line.push_str(&format!(" c={c}"));
            }
            if let Some(l) = o.inflation {
                line.push_str(&format!(" inflation={l}"));
            }
            line.push_str(&format!(" rms={:.6}", o.rms));
            if let Some(f) = o.l2_fraction {
                line.push_str(&format!(" l2_fraction={f:.4}"));
            }
            println!("{line}");
        }
    }
}

fn finish(output: &ExperimentOutput, out_dir: &PathBuf) -> Result<()> {
    let written = write_outputs(output, out_dir)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SingleBayes(args) => run_configured(Experiment::SingleBayes, args),
        Cmd::DoubleWell(args) => run_configured(Experiment::DoubleWell, args),
        Cmd::Langevin(args) => run_configured(Experiment::Langevin, args),
        Cmd::Lorenz63(args) => run_configured(Experiment::Lorenz63, args),
        Cmd::Table1 { full, out, seeds } => {
            let seeds = seeds.unwrap_or_else(|| (0..5).collect());
            let horizon = if full { 10_000 } else { 1000 };
            let output = run_table1(&[20, 50, 100], &seeds, horizon)?;
            for t in &output.tables {
                println!("{}", t.header);
                for row in &t.rows {
                    println!("{row}");
                }
            }
            finish(&output, &out.unwrap_or_else(|| PathBuf::from("out_table1")))
        }
        Cmd::LorenzSweep {
            full,
            out,
            seeds,
            cycles,
        } => {
            let mut grid = SweepGrid::default();
            if let Some(seeds) = seeds {
                grid.seeds = seeds;
            }
            if full {
                grid.cycles = 101_000;
            }
            if let Some(cycles) = cycles {
                grid.cycles = cycles;
            }
            let output = run_lorenz_sweep(&grid)?;
            for t in &output.tables {
                println!("{}", t.header);
                for row in &t.rows {
                    println!("{row}");
                }
            }
            finish(
                &output,
                &out.unwrap_or_else(|| PathBuf::from("out_lorenz_sweep")),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
