use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use steerkit::harness::{self, Experiment, ExperimentConfig};

/// Run one steerkit experiment and write its report.
#[derive(Parser, Debug)]
#[command(name = "steerkit", version)]
struct Cli {
    /// Experiment name, e.g. `theorem1-scan`.
    experiment: String,
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the report lands in `<out>/<experiment>/`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(cli: &Cli) -> steerkit::Result<ExperimentConfig> {
    let name: Experiment = cli.experiment.parse()?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::new(name, 0),
    };
    if cfg.experiment()? != name {
        return Err(steerkit::Error::Config(format!(
            "config is for `{}` but `{}` was requested",
            cfg.experiment, cli.experiment
        )));
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = load(&cli).and_then(|cfg| harness::run_experiment(&cfg));
    match outcome {
        Ok(out) => {
            for c in &out.report.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} = {:.6e} ({} {:.6e})", c.name, c.value, c.relation, c.threshold);
            }
            println!("report: {}", out.dir.join("report.json").display());
            let failed = out.report.failed_checks();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
