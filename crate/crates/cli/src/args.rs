use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "cste", version, about = "Covariate-specific treatment effects in high dimensions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate mu1(z), mu0(z) or tau(z) with confidence intervals.
    Fit(FitArgs),
    /// Monte Carlo study of one estimator on a simulation scenario.
    Simulate(SimulateArgs),
    /// Covariate balance of calibrated and likelihood propensity fits.
    Diagnose(FitArgs),
    /// Proposed, likelihood and kernel estimators of mu1(z) on the same data.
    Compare(FitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    ModelAssisted,
    DoublyRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TargetArg {
    Tau,
    Mu1,
    Mu0,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MethodArg {
    Rcal,
    Rml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum LinkArg {
    Identity,
    Logistic,
}

/// Everything that determines a `fit`, `diagnose` or `compare` run. This
/// is what the manifest records.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitConfig {
    /// CSV file with a header row; empty fields are missing values.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Use one draw from a simulation scenario instead of a file.
    #[arg(long, conflicts_with = "input")]
    pub scenario: Option<String>,
    /// Sample size of the scenario draw.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Number of V columns of the scenario draw (default: scenario's own).
    #[arg(long)]
    pub p: Option<usize>,

    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Columns defining the subpopulations.
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    /// Auxiliary covariates; all remaining columns when omitted.
    #[arg(long, value_delimiter = ',')]
    pub v: Vec<String>,
    /// Force these columns to be treated as categorical.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Force these columns to be treated as numeric.
    #[arg(long, value_delimiter = ',')]
    pub continuous: Vec<String>,

    /// Regressor recipe; doubly robust for discrete Z by default.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Interior spline knots for a continuous Z.
    #[arg(long, conflicts_with = "auto_knots")]
    pub knots: Option<usize>,
    /// Choose the number of knots (1 to 10) by AIC.
    #[arg(long)]
    pub auto_knots: bool,
    /// Evaluation points: `0,1`, `grid:N`, or `a,b;c,d` for several Z columns.
    #[arg(long, allow_hyphen_values = true)]
    pub z0: Option<String>,
    /// Confidence levels.
    #[arg(long, value_delimiter = ',', default_value = "0.95")]
    pub level: Vec<f64>,
    #[arg(long, value_enum, default_value = "tau")]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value = "rcal")]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "identity")]
    pub link: LinkArg,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Fixed propensity penalty (skips cross-validation together with
    /// `--lambda-or`).
    #[arg(long, requires = "lambda_or")]
    pub lambda_ps: Option<f64>,
    #[arg(long, requires = "lambda_ps")]
    pub lambda_or: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub config: FitConfig,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Re-run the configuration recorded in a manifest; other options are
    /// ignored.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[arg(long, default_value = "C1")]
    pub scenario: String,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long)]
    pub p: Option<usize>,
    /// proposed, rml_msm, aipw_kernel_full, aipw_kernel_cf4 or oracle_phi.
    #[arg(long, default_value = "proposed")]
    pub estimator: String,
    /// Evaluation points (default: the scenario's table points).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub z0: Vec<f64>,
    #[arg(long, value_enum, default_value = "mu1")]
    pub target: TargetArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 50)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: SimulateConfig,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
