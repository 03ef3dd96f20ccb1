use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sentinel::bundle::{self, SummaryRow};
use sentinel::config::{parse_config, with_overrides, ExperimentConfig, Mode};
use sentinel::runner::{self, RunError};

#[derive(Parser)]
#[command(name = "sentinel", version, about = "Simulate and verify pipeline-parallel training signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Root of the results tree.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Baseline mode: train without verification.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed data x pipeline parallel mesh.
    RunMesh(Common),
    /// Stochastic-routing swarm with per-trainer detectors.
    RunSwarm(Common),
    /// Bounds report; no training.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo trials for the honest-majority check.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Many configs and seeds; writes every bundle plus `sweep.csv`.
    Sweep {
        /// Experiment files, run in the given order.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Comma-separated seeds; defaults to each file's own seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long)]
        no_verify: bool,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-aggregates the summaries found under `--out`.
    Report {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

fn load(path: Option<&Path>, mode: Mode) -> Result<ExperimentConfig, RunError> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => {
            let mut c = ExperimentConfig::new(mode);
            c.attack.start = c.warmup;
            c
        }
    };
    cfg.mode = mode;
    Ok(cfg)
}

fn overrides(seed: Option<u64>, no_verify: bool, trials: Option<usize>) -> Vec<(&'static str, String)> {
    let mut o = Vec::new();
    if let Some(s) = seed {
        o.push(("seed", s.to_string()));
    }
    if no_verify {
        o.push(("verification.enabled", "false".into()));
    }
    if let Some(t) = trials {
        o.push(("theory.trials", t.to_string()));
    }
    o
}

fn single(common: &Common, mode: Mode, trials: Option<usize>) -> Result<(), RunError> {
    let base = load(common.config.as_deref(), mode)?;
    let cfg = with_overrides(&base, &overrides(common.seed, common.no_verify, trials))?;
    let (out, dir) = runner::run_to(&cfg, &common.out)?;
    match &out.summary {
        Some(row) => {
            print!("{}", bundle::table(&SummaryRow::COLUMNS, &[row.cells()]));
        }
        None => {
            if let Some(txt) = out.bundle.file("bounds.txt") {
                print!("{}", txt.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
            }
        }
    }
    println!("bundle: {}", dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::RunMesh(c) => single(&c, Mode::Mesh, None),
        Command::RunSwarm(c) => single(&c, Mode::Swarm, None),
        Command::Theory { common, trials } => single(&common, Mode::Theory, trials),
        Command::Sweep { configs, seeds, out, no_verify, jobs } => {
            let mut runs = Vec::new();
            for path in &configs {
                let base = parse_config(path)?;
                if seeds.is_empty() {
                    runs.push(with_overrides(&base, &overrides(None, no_verify, None))?);
                }
                for s in &seeds {
                    runs.push(with_overrides(&base, &overrides(Some(*s), no_verify, None))?);
                }
            }
            let rows = runner::sweep(&runs, jobs, Some(&out))?;
            let table = runner::sweep_table(&rows);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("sweep.csv"), &table)?;
            print!("{}", table.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
            Ok(())
        }
        Command::Report { out } => {
            let (rows, aggs) = runner::report(&out)?;
            let cells: Vec<Vec<String>> = rows.iter().map(SummaryRow::cells).collect();
            print!("{}", bundle::table(&SummaryRow::COLUMNS, &cells));
            print!("{}", runner::aggregate_table(&aggs));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
