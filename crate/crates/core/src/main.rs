use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlamb::bench::{
    compare_protocols, default_grid, grid_sweep, run_experiment, ExperimentConfig, Grid,
};

#[derive(Parser)]
#[command(name = "fedlamb", version, about = "Federated optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Base seed; repeats use seed, seed+1, ...
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for metrics (or the comparison table).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds to run.
    #[arg(long)]
    repeat: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(r) = self.repeat {
            cfg.repeat = r;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep step sizes; GRID is a TOML file or `default`.
    Sweep {
        config: PathBuf,
        grid: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run several configs on the same data and tabulate accuracy.
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(path: &PathBuf, overrides: &Overrides) -> fedlamb::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> fedlamb::Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            let s = run_experiment(&cfg)?;
            let (best, best_sd) = s.best_accuracy();
            let (last, last_sd) = s.final_accuracy();
            println!(
                "{}: best accuracy {best:.4} (sd {best_sd:.4}), final {last:.4} (sd {last_sd:.4}) over {} run(s)",
                cfg.protocol,
                s.runs.len()
            );
            for r in &s.runs {
                if let Some(p) = &r.metrics_path {
                    println!("metrics: {}", p.display());
                }
            }
            if let Some(p) = &s.summary_path {
                println!("summary: {}", p.display());
            }
        }
        Command::Sweep {
            config,
            grid,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let grid = if grid == "default" {
                default_grid(cfg.protocol)
            } else {
                Grid::load(&grid)?
            };
            let entries = grid_sweep(&cfg, &grid)?;
            println!("rank  lr        lr_global  best_acc  final_acc");
            for (i, e) in entries.iter().enumerate() {
                let g = e.lr_global.map_or("-".to_string(), |g| g.to_string());
                println!(
                    "{:<5} {:<9} {:<10} {:<9.4} {:.4}",
                    i + 1,
                    e.lr,
                    g,
                    e.best_accuracy,
                    e.final_accuracy
                );
            }
        }
        Command::Compare { configs, overrides } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, &overrides))
                .collect::<fedlamb::Result<Vec<_>>>()?;
            let out = overrides
                .out
                .clone()
                .unwrap_or_else(|| "comparison.csv".into());
            let c = compare_protocols(&cfgs, &out)?;
            for (label, r) in c.labels.iter().zip(&c.rounds_to_target) {
                let r = r.map_or("inf".to_string(), |n| n.to_string());
                println!("{label}: rounds to {} accuracy = {r}", c.target);
            }
            println!("table: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
