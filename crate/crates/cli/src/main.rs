use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hivdyn::error::{Error, Result};
use hivdyn::io::bundle::{load_bundle, StudyBundle};
use hivdyn::io::commands::{cmd_compare, cmd_fit, cmd_simstudy, cmd_summarize_adherence};
use hivdyn::io::config::RunConfig;

/// Fit, compare and simulate the adherence-driven HIV viral-dynamics model.
#[derive(Parser)]
#[command(name = "hivdyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model (the `metric` key) and write posterior summaries and fitted curves.
    Fit(Common),
    /// Fit every model in `compare_metrics` and rank them by DIC.
    Compare(Common),
    /// Run the parameter-recovery study on synthetic trials.
    Simstudy(Common),
    /// Tabulate per-visit adherence under each metric.
    SummarizeAdherence(Common),
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding viral_load.csv, covariates.csv and optionally mems_events.csv and ic50.csv.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply(o)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out_dir {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }

    fn bundle(&self, cfg: &RunConfig) -> Result<StudyBundle> {
        let dir = self.data_dir.as_deref().ok_or_else(|| Error::Validation("--data-dir is required".into()))?;
        load_bundle(dir, cfg.censoring())
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let (Command::Fit(common) | Command::Compare(common) | Command::Simstudy(common) | Command::SummarizeAdherence(common)) =
        &cli.command;
    let cfg = common.config()?;
    let out: &Path = &cfg.out_dir;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(c) => Ok(cmd_fit(&c.bundle(&cfg)?, &cfg, out)?.1),
        Command::Compare(c) => cmd_compare(&c.bundle(&cfg)?, &cfg, out),
        Command::Simstudy(_) => cmd_simstudy(&cfg, out),
        Command::SummarizeAdherence(c) => cmd_summarize_adherence(&c.bundle(&cfg)?, &cfg, out),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
