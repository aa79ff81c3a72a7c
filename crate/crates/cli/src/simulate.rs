//! The simulate workflow.

use serde::Serialize;

use cste_core::simlab::{run_mc, Estimator, MCConfig, MCMetrics, Scenario};

use crate::args::{SimulateConfig, TargetArg};
use crate::error::{CliError, CliResult};
use crate::output::OutDir;

#[derive(Debug, Clone, Serialize)]
struct MetricRow<'a> {
    scenario: &'a str,
    estimator: &'a str,
    z0: f64,
    truth: f64,
    bias: f64,
    var: f64,
    sd: f64,
    evar: f64,
    cov90: f64,
    cov95: f64,
    mean_ci_width: f64,
}

#[derive(Debug, Clone, Serialize)]
struct ReplicateRow {
    rep: usize,
    retried: bool,
    z0: Option<f64>,
    point: Option<f64>,
    variance: Option<f64>,
    error: Option<String>,
}

pub fn mc_config(cfg: &SimulateConfig) -> CliResult<MCConfig> {
    let scenario = Scenario::parse(&cfg.scenario)?;
    let estimator = Estimator::parse(&cfg.estimator)?;
    let mut mc = MCConfig::new(scenario, cfg.reps, cfg.seed, estimator);
    mc.n = cfg.n;
    if let Some(p) = cfg.p {
        mc.p = p;
    }
    if !cfg.z0.is_empty() {
        mc.z0_list = cfg.z0.clone();
    }
    mc.target = match cfg.target {
        TargetArg::Mu1 => cste_core::cste::Target::Mu1,
        TargetArg::Mu0 => cste_core::cste::Target::Mu0,
        TargetArg::Tau => cste_core::cste::Target::Tau,
        TargetArg::All => return Err(CliError::config("cli.target", "simulate takes a single target")),
    };
    mc.cv_folds = cfg.folds;
    mc.grid_size = cfg.grid_size;
    Ok(mc)
}

pub fn run_simulate(cfg: &SimulateConfig, out: &OutDir) -> CliResult<MCMetrics> {
    let mc = mc_config(cfg)?;
    let metrics = run_mc(&mc)?;
    out.json("results.json", &metrics)?;
    let rows: Vec<MetricRow> = metrics
        .points
        .iter()
        .map(|p| MetricRow {
            scenario: &metrics.scenario,
            estimator: &metrics.estimator,
            z0: p.z0,
            truth: p.truth,
            bias: p.bias,
            var: p.var,
            sd: p.var.sqrt(),
            evar: p.evar,
            cov90: p.cov90,
            cov95: p.cov95,
            mean_ci_width: p.mean_ci_width,
        })
        .collect();
    out.csv("results.csv", &rows)?;
    let mut reps = Vec::new();
    for r in &metrics.replicates {
        if r.estimates.is_empty() {
            reps.push(ReplicateRow { rep: r.rep, retried: r.retried, z0: None, point: None, variance: None, error: r.error.clone() });
        }
        for (&z0, &(point, variance)) in mc.z0_list.iter().zip(&r.estimates) {
            reps.push(ReplicateRow {
                rep: r.rep,
                retried: r.retried,
                z0: Some(z0),
                point: Some(point),
                variance: Some(variance),
                error: None,
            });
        }
    }
    out.csv("replicates.csv", &reps)?;
    Ok(metrics)
}
