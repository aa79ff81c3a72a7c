//! Command-line front end for covariate-specific treatment effect
//! estimation: CSV ingestion, the fit / simulate / diagnose / compare
//! workflows and their output files.

pub mod analysis;
pub mod args;
pub mod error;
pub mod ingest;
pub mod output;
pub mod simulate;

use std::path::Path;

use crate::analysis::{curve_rows, run_compare, run_diagnose, run_fit};
use crate::args::{Command, FitArgs, FitConfig, SimulateArgs};
use crate::error::{CliError, CliResult};
use crate::output::{sha256_file, InputInfo, Manifest, OutDir};

/// Environment variable with the worker thread count.
pub const THREADS_ENV: &str = "CSTE_THREADS";

pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t >= 1)
        .ok_or_else(|| CliError::config("cli.threads", format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A second initialization only happens in-process (tests); keep the first.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Fit(a) => fit_like("fit", a),
        Command::Diagnose(a) => fit_like("diagnose", a),
        Command::Compare(a) => fit_like("compare", a),
        Command::Simulate(a) => simulate(a),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn replayed_fit_config(command: &str, path: &Path) -> CliResult<FitConfig> {
    let manifest = Manifest::read(path)?;
    let cfg: FitConfig = manifest.config_for(command)?;
    if let (Some(recorded), Some(input)) = (&manifest.input, &cfg.input) {
        let now = sha256_file(input)?;
        if now != recorded.sha256 {
            return Err(CliError::data(
                "cli.input_changed",
                format!("{} no longer matches the digest in the manifest", input.display()),
            ));
        }
    }
    Ok(cfg)
}

fn fit_like(command: &str, args: FitArgs) -> CliResult<()> {
    let cfg = match &args.manifest {
        Some(path) => replayed_fit_config(command, path)?,
        None => args.config,
    };
    let out = OutDir::create(&args.out)?;
    let input = match &cfg.input {
        Some(p) => Some(InputInfo { path: p.display().to_string(), sha256: sha256_file(p)? }),
        None => None,
    };
    match command {
        "fit" => {
            let res = run_fit(&cfg)?;
            warn_all(&res.warnings);
            out.json("results.json", &res)?;
            out.csv("results.csv", &res.estimates)?;
            if cfg.z.len() <= 1 {
                out.csv("curve.csv", &curve_rows(&res.estimates))?;
            }
            if let Some(search) = &res.knot_search {
                out.csv("knots.csv", &search.rows)?;
            }
        }
        "diagnose" => {
            let res = run_diagnose(&cfg)?;
            warn_all(&res.warnings);
            out.json("results.json", &res)?;
            out.csv("results.csv", &res.summary)?;
            out.csv("balance.csv", &res.balance)?;
        }
        "compare" => {
            let res = run_compare(&cfg)?;
            warn_all(&res.warnings);
            out.json("results.json", &res)?;
            out.csv("results.csv", &res.estimates)?;
            if cfg.z.len() <= 1 {
                out.csv("curve.csv", &curve_rows(&res.estimates))?;
            }
        }
        other => unreachable!("unknown command {other}"),
    }
    out.json("manifest.json", &Manifest::new(command, &cfg, cfg.seed, input)?)
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    let cfg = match &args.manifest {
        Some(path) => Manifest::read(path)?.config_for("simulate")?,
        None => args.config,
    };
    let out = OutDir::create(&args.out)?;
    let metrics = simulate::run_simulate(&cfg, &out)?;
    if metrics.failures > 0 {
        eprintln!("warning: {} of {} replicates failed", metrics.failures, metrics.n_reps);
    }
    out.json("manifest.json", &Manifest::new("simulate", &cfg, cfg.seed, None)?)
}
