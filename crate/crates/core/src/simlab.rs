//! Simulation scenarios and the Monte Carlo runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cste::{estimate_from_fits, fit_nuisance, msm_fit, LambdaChoice, NuisanceMethod, PipelineOptions, Target};
use crate::data::{ColMatrix, Dataset};
use crate::design::{build_plan, build_plan_with, full_spline_basis, BasisSpec, PlanMode, RegressorPlan, ZTerms};
use crate::error::{Error, Result};
use crate::kernels::{bandwidth_rule, crossfit, kernel_mean_and_variance, KernelConfig, RmlLearner};
use crate::nuisance::{CvOptions, ModelFrame};
use crate::optim::{sigmoid, Link, SolverOptions};

const GAMMA: [f64; 5] = [0.5, -0.5, -0.5, 0.5, -0.5];

/// Knots of the 3-knot spline at the population quartiles of Uniform(-1/2, 1/2).
const POP_KNOTS: [f64; 3] = [-0.25, 0.0, 0.25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum Scenario {
    C1,
    C2,
    C3,
    C4,
    C5,
    /// Linear recipes for both arms:
    /// `Y^t = a_t + b_t Z + c_t' V_{1:4} + e`, propensity
    /// `expit(gamma' (Z, V_1, ..., V_4))`.
    Custom {
        continuous_z: bool,
        gamma: [f64; 5],
        mu1: [f64; 6],
        mu0: [f64; 6],
    },
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(Scenario::C1),
            "C2" => Ok(Scenario::C2),
            "C3" => Ok(Scenario::C3),
            "C4" => Ok(Scenario::C4),
            "C5" => Ok(Scenario::C5),
            _ => Err(Error::Argument(format!("unknown scenario {s:?} (expected C1..C5)"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Scenario::C1 => "C1".into(),
            Scenario::C2 => "C2".into(),
            Scenario::C3 => "C3".into(),
            Scenario::C4 => "C4".into(),
            Scenario::C5 => "C5".into(),
            Scenario::Custom { .. } => "custom".into(),
        }
    }

    pub fn continuous_z(&self) -> bool {
        match self {
            Scenario::C4 | Scenario::C5 => true,
            Scenario::Custom { continuous_z, .. } => *continuous_z,
            _ => false,
        }
    }

    /// Default evaluation points.
    pub fn default_z0(&self) -> Vec<f64> {
        if self.continuous_z() {
            vec![-0.4, -0.2, 0.0, 0.2, 0.4]
        } else {
            vec![0.0, 1.0]
        }
    }

    /// Default dimension of V.
    pub fn default_p(&self) -> usize {
        if self.continuous_z() {
            60
        } else {
            200
        }
    }

    /// `E(Y^1 | Z = z)`.
    pub fn true_mu1(&self, z: f64) -> f64 {
        match self {
            Scenario::C1 | Scenario::C2 | Scenario::C3 => 1.0 + z,
            Scenario::C4 => z,
            Scenario::C5 => c5_poly(z) + 15.0 / 32.0,
            Scenario::Custom { mu1, .. } => mu1[0] + mu1[1] * z,
        }
    }

    /// `E(Y^0 | Z = z)`; the built-in scenarios use `Y^0 = e`.
    pub fn true_mu0(&self, z: f64) -> f64 {
        match self {
            Scenario::Custom { mu0, .. } => mu0[0] + mu0[1] * z,
            _ => 0.0,
        }
    }

    pub fn truth(&self, target: Target, z: f64) -> f64 {
        match target {
            Target::Mu1 => self.true_mu1(z),
            Target::Mu0 => self.true_mu0(z),
            Target::Tau => self.true_mu1(z) - self.true_mu0(z),
        }
    }

    fn ps_eta(&self, z: f64, v: &[f64]) -> f64 {
        let gamma = match self {
            Scenario::Custom { gamma, .. } => gamma,
            _ => &GAMMA,
        };
        let x: [f64; 5] = match self {
            Scenario::C3 => [z, v[0] * v[0], v[1] * v[1], v[2] * v[2], v[3] * v[3]],
            _ => [z, v[0], v[1], v[2], v[3]],
        };
        x.iter().zip(gamma).map(|(a, b)| a * b).sum()
    }

    /// `E(Y^1 | Z, V)`.
    pub fn m1(&self, z: f64, v: &[f64]) -> f64 {
        let v4 = &v[..4];
        match self {
            Scenario::C1 | Scenario::C3 => 1.0 + z + v4.iter().map(|x| x * z + 2.0 * x * (1.0 - z)).sum::<f64>(),
            Scenario::C2 => {
                1.0 + z
                    + v4.iter()
                        .enumerate()
                        .map(|(i, x)| x * z + 2.0 * x * (1.0 - z) + x.powi(3) / 2f64.powi(i as i32 + 1))
                        .sum::<f64>()
            }
            Scenario::C4 => z + v4.iter().sum::<f64>(),
            Scenario::C5 => {
                c5_poly(z) + v4.iter().enumerate().map(|(i, x)| (x * x + x) / 2f64.powi(i as i32 + 2)).sum::<f64>()
            }
            Scenario::Custom { mu1, .. } => linear_arm(mu1, z, v4),
        }
    }

    /// `E(Y^0 | Z, V)`.
    pub fn m0(&self, z: f64, v: &[f64]) -> f64 {
        match self {
            Scenario::Custom { mu0, .. } => linear_arm(mu0, z, &v[..4]),
            _ => 0.0,
        }
    }

    pub fn propensity(&self, z: f64, v: &[f64]) -> f64 {
        sigmoid(self.ps_eta(z, v))
    }
}

fn linear_arm(c: &[f64; 6], z: f64, v: &[f64]) -> f64 {
    c[0] + c[1] * z + v.iter().zip(&c[2..]).map(|(a, b)| a * b).sum::<f64>()
}

fn c5_poly(z: f64) -> f64 {
    z * (1.0 + 2.0 * z).powi(2) * (z - 1.0).powi(2)
}

/// `n x d` draws from `N(0, Sigma)` with `Sigma_jk = 2^{-|j-k|}`, through
/// the lower-triangular (autoregressive) factor.
pub fn sample_covariates_with<R: Rng>(n: usize, d: usize, rng: &mut R) -> ColMatrix {
    let mut m = ColMatrix::zeros(n, d);
    let a = 0.75f64.sqrt();
    for i in 0..n {
        let mut prev = 0.0;
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            let x = if j == 0 { e } else { 0.5 * prev + a * e };
            m.set(i, j, x);
            prev = x;
        }
    }
    m
}

pub fn sample_covariates(n: usize, d: usize, seed: u64) -> Result<ColMatrix> {
    if d == 0 {
        return Err(Error::Argument("dimension must be at least 1".into()));
    }
    Ok(sample_covariates_with(n, d, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Observed data from a scenario. Both potential outcomes are drawn; the
/// observed outcome follows the realized treatment.
pub fn generate_with<R: Rng>(scenario: &Scenario, n: usize, p: usize, rng: &mut R) -> Result<Dataset> {
    if p < 4 {
        return Err(Error::Argument(format!("scenarios need p >= 4, got {p}")));
    }
    let v = sample_covariates_with(n, p, rng);
    let mut z = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let zi = if scenario.continuous_z() {
            rng.random::<f64>() - 0.5
        } else {
            f64::from(u8::from(rng.random::<f64>() < 0.5))
        };
        let vi: Vec<f64> = (0..4).map(|j| v.get(i, j)).collect();
        let pi = scenario.propensity(zi, &vi);
        let ti = u8::from(rng.random::<f64>() < pi);
        let e1: f64 = StandardNormal.sample(rng);
        let e0: f64 = StandardNormal.sample(rng);
        let yi = if ti == 1 { scenario.m1(zi, &vi) + e1 } else { scenario.m0(zi, &vi) + e0 };
        z.push(zi);
        t.push(ti);
        y.push(yi);
    }
    Dataset::new(y, t, ColMatrix::from_columns(n, &[z])?, v)
}

pub fn generate(scenario: &Scenario, n: usize, p: usize, seed: u64) -> Result<Dataset> {
    generate_with(scenario, n, p, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    // Newton iteration on Legendre polynomials.
    let n = order;
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// Integral over `[a, b]` by composite 20-point Gauss-Legendre on `pieces`
/// equal panels.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    let nodes = gauss_legendre(20);
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let lo = a + k as f64 * w;
            let mid = lo + w / 2.0;
            nodes.iter().map(|(x, wt)| wt * f(mid + x * w / 2.0)).sum::<f64>() * w / 2.0
        })
        .sum()
}

/// Population least-squares projection of `mu(z)` onto the 3-knot cubic
/// spline basis (with constant) under Uniform(-1/2, 1/2); evaluated at
/// `z0`.
pub fn best_linear_approximation(mu: impl Fn(f64) -> f64, z0: f64) -> f64 {
    let basis = |z: f64| full_spline_basis(z, &POP_KNOTS, -0.5, 0.5).expect("finite").0;
    let d = POP_KNOTS.len() + 4;
    // The full B-spline basis spans the same space as (1, Phi).
    let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
    let mut rhs = nalgebra::DVector::<f64>::zeros(d);
    for a in 0..d {
        for b in a..d {
            let v = integrate(|z| basis(z)[a] * basis(z)[b], -0.5, 0.5, 8);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        rhs[a] = integrate(|z| basis(z)[a] * mu(z), -0.5, 0.5, 8);
    }
    let coef = gram.lu().solve(&rhs).expect("spline Gram matrix is invertible");
    basis(z0).iter().zip(coef.iter()).map(|(x, c)| x * c).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Calibrated nuisances, MSM projection with the scenario's basis.
    Proposed,
    /// Penalized maximum-likelihood nuisances on main effects, same MSM.
    RmlMsm,
    AipwKernelFull,
    AipwKernelCf4,
    /// AIPW values built from the true propensity and outcome functions.
    OraclePhi,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Estimator::Proposed),
            "rml_msm" => Ok(Estimator::RmlMsm),
            "aipw_kernel_full" | "aipw_full" => Ok(Estimator::AipwKernelFull),
            "aipw_kernel_cf4" | "aipw_crossfit" => Ok(Estimator::AipwKernelCf4),
            "oracle_phi" => Ok(Estimator::OraclePhi),
            _ => Err(Error::Argument(format!("unknown estimator {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Proposed => "proposed",
            Estimator::RmlMsm => "rml_msm",
            Estimator::AipwKernelFull => "aipw_kernel_full",
            Estimator::AipwKernelCf4 => "aipw_kernel_cf4",
            Estimator::OraclePhi => "oracle_phi",
        }
    }

    fn is_kernel(self) -> bool {
        matches!(self, Estimator::AipwKernelFull | Estimator::AipwKernelCf4)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MCConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    pub n_reps: usize,
    pub z0_list: Vec<f64>,
    pub seed: u64,
    pub estimator: Estimator,
    pub target: Target,
    pub cv_folds: usize,
    pub grid_size: usize,
}

impl MCConfig {
    pub fn new(scenario: Scenario, n_reps: usize, seed: u64, estimator: Estimator) -> Self {
        MCConfig {
            z0_list: scenario.default_z0(),
            p: scenario.default_p(),
            scenario,
            n: 500,
            n_reps,
            seed,
            estimator,
            target: Target::Mu1,
            cv_folds: 5,
            grid_size: 50,
        }
    }
}

/// Plan used by the MSM estimators for a scenario's data.
pub fn scenario_plan(scenario: &Scenario, data: &Dataset, estimator: Estimator) -> Result<RegressorPlan> {
    let basis = if scenario.continuous_z() {
        BasisSpec::cubic_spline(data.z.col(0), 3)?
    } else {
        BasisSpec::binary()
    };
    Ok(match (estimator, scenario.continuous_z()) {
        (Estimator::Proposed | Estimator::OraclePhi, false) => build_plan(PlanMode::DoublyRobust, &basis, data.num_v()),
        (Estimator::Proposed | Estimator::OraclePhi, true) => {
            build_plan_with(PlanMode::ModelAssisted, ZTerms::Raw, &basis, data.num_v())
        }
        _ => build_plan_with(PlanMode::MainEffects, ZTerms::Raw, &basis, data.num_v()),
    })
}

/// Point estimate and variance at each `z0` for one replicate.
pub type ReplicateEstimates = Vec<(f64, f64)>;

pub fn run_replicate(cfg: &MCConfig, data: &Dataset, rep_seed: u64) -> Result<ReplicateEstimates> {
    let cv = CvOptions { folds: cfg.cv_folds, seed: rep_seed, grid_size: cfg.grid_size, ..CvOptions::default() };
    let z0s: Vec<Vec<f64>> = cfg.z0_list.iter().map(|&z| vec![z]).collect();
    match cfg.estimator {
        Estimator::Proposed | Estimator::RmlMsm => {
            let plan = scenario_plan(&cfg.scenario, data, cfg.estimator)?;
            let frame = ModelFrame::new(data, &plan)?;
            let method = if cfg.estimator == Estimator::Proposed {
                NuisanceMethod::Calibrated
            } else {
                NuisanceMethod::MaximumLikelihood
            };
            let opts = PipelineOptions { method, lambdas: LambdaChoice::Cv(cv), ..PipelineOptions::default() };
            let fits = fit_nuisance(&frame, &[cfg.target], &opts)?;
            let (_, est) = estimate_from_fits(&frame, &fits, cfg.target, &z0s, 0.95)?;
            Ok(est.into_iter().map(|e| (e.point, e.variance)).collect())
        }
        Estimator::OraclePhi => {
            let plan = scenario_plan(&cfg.scenario, data, cfg.estimator)?;
            let frame = ModelFrame::new(data, &plan)?;
            let phi = oracle_phi(&cfg.scenario, data, cfg.target);
            let mut msm = msm_fit(&phi, &frame.designs.phi_dag)?;
            msm.basis = Some(plan.basis.clone());
            z0s.iter()
                .map(|z| Ok((msm.predict(z)?, crate::cste::sandwich_variance(&msm, z)?)))
                .collect()
        }
        Estimator::AipwKernelFull | Estimator::AipwKernelCf4 => {
            if cfg.target != Target::Mu1 {
                return Err(Error::Argument("kernel competitors estimate mu1 only".into()));
            }
            let plan = scenario_plan(&cfg.scenario, data, Estimator::RmlMsm)?;
            let learner = RmlLearner { data, plan: &plan, link: Link::Identity, cv, solver: SolverOptions::default() };
            let folds = if cfg.estimator == Estimator::AipwKernelCf4 { 4 } else { 1 };
            let t = data.treatment_f64();
            let cf = crossfit(&t, folds, rep_seed ^ 0xC0FF_EE00, &learner)?;
            let z = data.z.col(0);
            let h = bandwidth_rule(z)?;
            let kcfg = KernelConfig { crossfit_folds: folds, seed: rep_seed, ..KernelConfig::new(h)? };
            let phi = (0..data.len())
                .map(|i| crate::cste::aipw_phi(data.y[i], t[i], cf.pi[i], cf.m[i]))
                .collect::<Result<Vec<_>>>()?;
            cfg.z0_list.iter().map(|&z0| kernel_mean_and_variance(z0, z, &phi, &kcfg)).collect()
        }
    }
}

/// AIPW values from the true nuisance functions.
pub fn oracle_phi(scenario: &Scenario, data: &Dataset, target: Target) -> Vec<f64> {
    (0..data.len())
        .map(|i| {
            let z = data.z.get(i, 0);
            let v: Vec<f64> = (0..4).map(|j| data.v.get(i, j)).collect();
            let pi = scenario.propensity(z, &v);
            let t = data.t[i] as f64;
            let y = data.y[i];
            let phi1 = t * y / pi - (t / pi - 1.0) * scenario.m1(z, &v);
            let phi0 = (1.0 - t) * y / (1.0 - pi) - ((1.0 - t) / (1.0 - pi) - 1.0) * scenario.m0(z, &v);
            match target {
                Target::Mu1 => phi1,
                Target::Mu0 => phi0,
                Target::Tau => phi1 - phi0,
            }
        })
        .collect()
}

/// Value the estimator's intervals are meant to cover at `z0`.
pub fn coverage_truth(cfg: &MCConfig, z0: f64) -> f64 {
    let curve = |z: f64| cfg.scenario.truth(cfg.target, z);
    if cfg.scenario.continuous_z() && !cfg.estimator.is_kernel() {
        best_linear_approximation(curve, z0)
    } else {
        curve(z0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PointMetrics {
    pub z0: f64,
    pub truth: f64,
    pub bias: f64,
    pub var: f64,
    pub evar: f64,
    pub cov90: f64,
    pub cov95: f64,
    pub mean_ci_width: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub retried: bool,
    /// `(point, variance)` per z0; empty when the replicate failed.
    pub estimates: Vec<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MCMetrics {
    pub scenario: String,
    pub estimator: String,
    pub n: usize,
    pub p: usize,
    pub n_reps: usize,
    pub successes: usize,
    pub failures: usize,
    pub points: Vec<PointMetrics>,
    pub replicates: Vec<ReplicateRecord>,
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn one_replicate(cfg: &MCConfig, rep: usize) -> ReplicateRecord {
    let attempt = |stream: u64| -> Result<ReplicateEstimates> {
        let mut rng = replicate_rng(cfg.seed, stream);
        let data = generate_with(&cfg.scenario, cfg.n, cfg.p, &mut rng)?;
        let rep_seed = rng.random::<u64>();
        run_replicate(cfg, &data, rep_seed)
    };
    match attempt(rep as u64) {
        Ok(estimates) => ReplicateRecord { rep, retried: false, estimates, error: None },
        Err(_) => match attempt(rep as u64 | (1 << 63)) {
            Ok(estimates) => ReplicateRecord { rep, retried: true, estimates, error: None },
            Err(e) => ReplicateRecord { rep, retried: true, estimates: Vec::new(), error: Some(e.to_string()) },
        },
    }
}

pub fn summarize(cfg: &MCConfig, replicates: Vec<ReplicateRecord>) -> MCMetrics {
    let ok: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let m = ok.len() as f64;
    let z90 = crate::stats::two_sided_critical(0.90);
    let z95 = crate::stats::two_sided_critical(0.95);
    let points = cfg
        .z0_list
        .iter()
        .enumerate()
        .map(|(k, &z0)| {
            let truth = coverage_truth(cfg, z0);
            let est: Vec<f64> = ok.iter().map(|r| r.estimates[k].0).collect();
            let vars: Vec<f64> = ok.iter().map(|r| r.estimates[k].1).collect();
            let mean = est.iter().sum::<f64>() / m;
            let var = if ok.len() > 1 {
                est.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let covered = |z: f64| {
                est.iter().zip(&vars).filter(|(e, v)| (*e - truth).abs() <= z * v.sqrt()).count() as f64 / m
            };
            PointMetrics {
                z0,
                truth,
                bias: mean - truth,
                var,
                evar: vars.iter().sum::<f64>() / m,
                cov90: covered(z90),
                cov95: covered(z95),
                mean_ci_width: vars.iter().map(|v| 2.0 * z95 * v.sqrt()).sum::<f64>() / m,
            }
        })
        .collect();
    MCMetrics {
        scenario: cfg.scenario.name(),
        estimator: cfg.estimator.name().into(),
        n: cfg.n,
        p: cfg.p,
        n_reps: cfg.n_reps,
        successes: ok.len(),
        failures: replicates.len() - ok.len(),
        points,
        replicates,
    }
}

/// Runs all replicates (in parallel) and reduces them in replicate order.
pub fn run_mc(cfg: &MCConfig) -> Result<MCMetrics> {
    if cfg.n_reps == 0 {
        return Err(Error::Argument("n_reps must be at least 1".into()));
    }
    if cfg.p < 4 {
        return Err(Error::Argument(format!("p must be at least 4, got {}", cfg.p)));
    }
    let replicates: Vec<ReplicateRecord> = (0..cfg.n_reps).into_par_iter().map(|r| one_replicate(cfg, r)).collect();
    if replicates.iter().all(|r| r.error.is_some()) {
        return Err(Error::DegenerateData(format!(
            "every replicate failed; first error: {}",
            replicates[0].error.as_deref().unwrap_or("")
        )));
    }
    Ok(summarize(cfg, replicates))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_entries() {
        let v = sample_covariates(200_000, 3, 7).unwrap();
        let n = 200_000.0;
        for (a, b, target) in [(0, 0, 1.0), (0, 1, 0.5), (0, 2, 0.25), (1, 2, 0.5), (2, 2, 1.0)] {
            let c = v.col(a).iter().zip(v.col(b)).map(|(x, y)| x * y).sum::<f64>() / n;
            assert!((c - target).abs() < 0.02, "({a},{b}) {c}");
        }
        assert_eq!(sample_covariates(10, 3, 7).unwrap(), sample_covariates(10, 3, 7).unwrap());
    }

    #[test]
    fn scenario_recipes() {
        let v0 = [0.0; 4];
        assert_eq!(Scenario::C1.m1(1.0, &v0), 2.0);
        assert!((Scenario::C1.propensity(1.0, &v0) - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
        assert_eq!(Scenario::C5.true_mu1(0.0), 15.0 / 32.0);
    }

    #[test]
    fn c5_constant_matches_integral() {
        // E[(V^2 + V) / 2^(i+1)] for V ~ N(0, 1), integrated numerically.
        let dens = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let e = integrate(|x| (x * x + x) * dens(x), -12.0, 12.0, 48);
        let shift: f64 = (1..=4).map(|i| e / 2f64.powi(i + 1)).sum();
        assert!((shift - 15.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn best_linear_approximation_reproduces_splines() {
        for z in [-0.4, 0.0, 0.33] {
            assert!((best_linear_approximation(|x| 2.0 * x - 1.0, z) - (2.0 * z - 1.0)).abs() < 1e-10);
            assert!((best_linear_approximation(|x| x * x * x, z) - z * z * z).abs() < 1e-10);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&Scenario::C1, 50, 6, 3).unwrap();
        let b = generate(&Scenario::C1, 50, 6, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.z.col(0).iter().all(|&z| z == 0.0 || z == 1.0));
        let c = generate(&Scenario::C4, 50, 6, 3).unwrap();
        assert!(c.z.col(0).iter().all(|&z| (-0.5..0.5).contains(&z)));
    }
}
