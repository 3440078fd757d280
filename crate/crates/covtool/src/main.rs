use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use covtool_core::cli::{apply_budget_env, run_experiment, RawConfig, EXIT_ERROR};

/// Runs change-of-variable experiments and prints a CSV or JSON report.
///
/// Settings come from an optional `key = value` file; flags override it.
/// Exit status is 0 on success, 2 when a check misses its tolerance and 1
/// on errors. `COVTOOL_CELL_BUDGET` caps the cells of any dense grid.
#[derive(Debug, Parser)]
#[command(name = "covtool", version)]
struct Args {
    /// Experiment config file.
    config: Option<PathBuf>,
    /// Registry transform, e.g. `polar` or `linear:2,0,0,1`.
    #[arg(long)]
    transform: Option<String>,
    /// scale, diff, decompose, sandwich, indicatrix, verify or zeroset.
    #[arg(long)]
    mode: Option<String>,
    /// `lo hi` per axis, e.g. "0 1 0 2*pi".
    #[arg(long, allow_hyphen_values = true)]
    domain: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    /// Threshold for the zero-set estimate.
    #[arg(long)]
    tau: Option<String>,
    /// Difference step.
    #[arg(long)]
    h: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
    /// Report path, `-` for standard output.
    #[arg(long, allow_hyphen_values = true)]
    output: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    /// Depth range `a..b`, one report row per depth.
    #[arg(long)]
    sweep: Option<String>,
    /// Integrand for verify: 1, x1 or prod.
    #[arg(long)]
    phi: Option<String>,
}

impl Args {
    fn overrides(&self) -> [(&'static str, &Option<String>); 13] {
        [
            ("transform", &self.transform),
            ("mode", &self.mode),
            ("domain", &self.domain),
            ("depth", &self.depth),
            ("epsilon", &self.epsilon),
            ("tau", &self.tau),
            ("h", &self.h),
            ("seed", &self.seed),
            ("format", &self.format),
            ("output", &self.output),
            ("threads", &self.threads),
            ("sweep", &self.sweep),
            ("phi", &self.phi),
        ]
    }
}

fn load(args: &Args) -> covtool_core::Result<covtool_core::cli::ExperimentConfig> {
    apply_budget_env()?;
    let mut raw = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| covtool_core::Error::Io {
                path: path.clone(),
                source,
            })?;
            RawConfig::parse(&text)?
        }
        None => RawConfig::default(),
    };
    for (key, value) in args.overrides() {
        if let Some(v) = value {
            raw.set(key, v.clone())?;
        }
    }
    raw.build()
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match load(&args) {
        Ok(cfg) => run_experiment(&cfg),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    };
    ExitCode::from(code as u8)
}
