//! Point estimates, sandwich variances and confidence intervals for the
//! conditional means `mu1(z)`, `mu0(z)` and their difference `tau(z)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ColMatrix, Dataset};
use crate::design::{build_plan, phi_dag, BasisSpec, PlanMode, RegressorPlan};
use crate::error::{Error, Result};
use crate::nuisance::{
    cv_lambda_frame, fit_or, fit_ps, Arm, CVResult, CvModel, CvOptions, ModelFrame, ORFit, OrMethod, PSFit, PsMethod,
};
use crate::optim::{Link, SolverOptions};
use crate::stats::two_sided_critical;

/// Augmented IPW value `t y / pi - (t / pi - 1) m`.
pub fn aipw_phi(y: f64, t: f64, pi_hat: f64, m_hat: f64) -> Result<f64> {
    if !(pi_hat > 0.0 && pi_hat < 1.0) {
        return Err(Error::Argument(format!("propensity must lie in (0, 1), got {pi_hat}")));
    }
    Ok(t * y / pi_hat - (t / pi_hat - 1.0) * m_hat)
}

/// Least-squares projection of influence values onto `Phi_dag(Z)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsmFit {
    pub beta: Vec<f64>,
    /// `M = E~{Phi_dag Phi_dag'}`, row-major.
    pub m: Vec<Vec<f64>>,
    pub m_inv: Vec<Vec<f64>>,
    /// `G = n^-1 sum Phi_dag Phi_dag' (phi - beta' Phi_dag)^2`, row-major.
    pub g_hat: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
    pub residuals: Vec<f64>,
    pub n: usize,
    pub basis: Option<BasisSpec>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

/// Inverse of a symmetric positive semi-definite matrix by column-pivoted
/// QR, refusing numerically rank-deficient input.
fn invert_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let max_diag = (0..d).map(|j| m[(j, j)].abs()).fold(0.0, f64::max);
    let tol = 1e-10 * max_diag.max(f64::MIN_POSITIVE);
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let mut order = DMatrix::from_fn(1, d, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let bad: Vec<usize> = (0..d).filter(|&k| r[(k, k)].abs() <= tol).map(|k| order[(0, k)] as usize).collect();
    if !bad.is_empty() || max_diag == 0.0 {
        let mut columns = if bad.is_empty() { (0..d).collect() } else { bad };
        columns.sort_unstable();
        return Err(Error::SingularDesign { columns });
    }
    qr.try_inverse().ok_or_else(|| Error::SingularDesign { columns: (0..d).collect() })
}

pub fn msm_fit(phi: &[f64], phidag: &ColMatrix) -> Result<MsmFit> {
    let n = phidag.nrows();
    let d = phidag.ncols();
    if phi.len() != n {
        return Err(Error::Argument(format!("{} influence values for {n} rows", phi.len())));
    }
    if n == 0 || d == 0 {
        return Err(Error::Argument("empty regression".into()));
    }
    if let Some(i) = phi.iter().position(|x| !x.is_finite()) {
        return Err(Error::Argument(format!("non-finite influence value at row {i}")));
    }
    let nf = n as f64;
    let m = DMatrix::from_fn(d, d, |a, b| {
        phidag.col(a).iter().zip(phidag.col(b)).map(|(x, y)| x * y).sum::<f64>() / nf
    });
    let rhs = DVector::from_fn(d, |a, _| phidag.col(a).iter().zip(phi).map(|(x, y)| x * y).sum::<f64>() / nf);
    let m_inv = invert_checked(&m)?;
    let mut beta = &m_inv * &rhs;
    // One step of iterative refinement keeps the normal equations tight
    // for badly scaled bases.
    let resid_ne = &rhs - &m * &beta;
    beta += &m_inv * resid_ne;

    let fitted = phidag.matvec(beta.as_slice());
    let residuals: Vec<f64> = phi.iter().zip(&fitted).map(|(p, f)| p - f).collect();
    let r2: Vec<f64> = residuals.iter().map(|r| r * r).collect();
    let g = DMatrix::from_fn(d, d, |a, b| {
        phidag
            .col(a)
            .iter()
            .zip(phidag.col(b))
            .zip(&r2)
            .map(|((x, y), r)| x * y * r)
            .sum::<f64>()
            / nf
    });
    Ok(MsmFit {
        beta: beta.iter().copied().collect(),
        m: to_rows(&m),
        m_inv: to_rows(&m_inv),
        g_hat: to_rows(&g),
        phi: phi.to_vec(),
        residuals,
        n,
        basis: None,
    })
}

impl MsmFit {
    fn dag(&self, z0: &[f64]) -> Result<Vec<f64>> {
        match &self.basis {
            Some(b) => phi_dag(z0, b),
            None => Err(Error::Argument("fit has no basis; use the Phi_dag form".into())),
        }
    }

    pub fn predict_dag(&self, dag: &[f64]) -> Result<f64> {
        if dag.len() != self.beta.len() {
            return Err(Error::Argument("Phi_dag length mismatch".into()));
        }
        Ok(dag.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }

    pub fn predict(&self, z0: &[f64]) -> Result<f64> {
        self.predict_dag(&self.dag(z0)?)
    }

    /// `Phi_dag(z0)' M^-1 G M^-1 Phi_dag(z0) / n`.
    pub fn variance_dag(&self, dag: &[f64]) -> Result<f64> {
        if dag.len() != self.beta.len() {
            return Err(Error::Argument("Phi_dag length mismatch".into()));
        }
        let m_inv = from_rows(&self.m_inv);
        let g = from_rows(&self.g_hat);
        let a = &m_inv * DVector::from_column_slice(dag);
        let v = (a.transpose() * g * &a)[(0, 0)] / self.n as f64;
        Ok(v.max(0.0))
    }
}

pub fn sandwich_variance(msm: &MsmFit, z0: &[f64]) -> Result<f64> {
    msm.variance_dag(&msm.dag(z0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Mu1,
    Mu0,
    Tau,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Mu1 => "mu1",
            Target::Mu0 => "mu0",
            Target::Tau => "tau",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsteEstimate {
    pub target: Target,
    pub z0: Vec<f64>,
    pub point: f64,
    /// Variance of the point estimate, `V(z0) / n`.
    pub variance: f64,
    pub level: f64,
    pub ci: (f64, f64),
    /// The basis is not saturated, so the target is the best linear
    /// approximation `beta*' Phi_dag(z0)` rather than the curve itself.
    pub approximation: bool,
}

impl CsteEstimate {
    pub fn se(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn ci_at(&self, level: f64) -> (f64, f64) {
        let half = two_sided_critical(level) * self.se();
        (self.point - half, self.point + half)
    }

    pub fn covers(&self, truth: f64, level: f64) -> bool {
        let (lo, hi) = self.ci_at(level);
        lo <= truth && truth <= hi
    }
}

pub fn make_estimate(target: Target, z0: &[f64], point: f64, variance: f64, level: f64, approximation: bool) -> CsteEstimate {
    let half = two_sided_critical(level) * variance.sqrt();
    CsteEstimate { target, z0: z0.to_vec(), point, variance, level, ci: (point - half, point + half), approximation }
}

/// Penalty levels: cross-validated per model, or fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LambdaChoice {
    Cv(CvOptions),
    Fixed { ps: f64, or: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMethod {
    /// Calibrated propensity score with weighted-likelihood outcome model.
    Calibrated,
    /// Penalized maximum likelihood for both.
    MaximumLikelihood,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub method: NuisanceMethod,
    pub lambdas: LambdaChoice,
    pub link: Link,
    pub solver: SolverOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            method: NuisanceMethod::Calibrated,
            lambdas: LambdaChoice::Cv(CvOptions::default()),
            link: Link::Identity,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmFits {
    pub ps: PSFit,
    pub or: ORFit,
    pub ps_cv: Option<CVResult>,
    pub or_cv: Option<CVResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct NuisanceFits {
    pub treated: Option<ArmFits>,
    pub untreated: Option<ArmFits>,
}

impl NuisanceFits {
    pub fn arm(&self, arm: Arm) -> Option<&ArmFits> {
        match arm {
            Arm::Treated => self.treated.as_ref(),
            Arm::Untreated => self.untreated.as_ref(),
        }
    }
}

pub fn fit_arm(frame: &ModelFrame, arm: Arm, opts: &PipelineOptions) -> Result<ArmFits> {
    let (ps_method, or_method) = match opts.method {
        NuisanceMethod::Calibrated => (PsMethod::Rcal, OrMethod::Rwl),
        NuisanceMethod::MaximumLikelihood => (PsMethod::Rml, OrMethod::Rml),
    };
    let (ps_lambda, ps_cv) = match &opts.lambdas {
        LambdaChoice::Fixed { ps, .. } => (*ps, None),
        LambdaChoice::Cv(cv) => {
            let r = cv_lambda_frame(frame, CvModel::Ps { arm, method: ps_method }, opts.link, cv)?;
            (r.chosen_lambda, Some(r))
        }
    };
    let ps = fit_ps(frame, arm, ps_method, ps_lambda, &opts.solver)?;
    let (or_lambda, or_cv) = match &opts.lambdas {
        LambdaChoice::Fixed { or, .. } => (*or, None),
        LambdaChoice::Cv(cv) => {
            let model = match or_method {
                OrMethod::Rwl => CvModel::OrRwl { arm, ps_lambda },
                OrMethod::Rml => CvModel::OrRml { arm },
            };
            let r = cv_lambda_frame(frame, model, opts.link, cv)?;
            (r.chosen_lambda, Some(r))
        }
    };
    let ps_ref = (or_method == OrMethod::Rwl).then_some(&ps);
    let or = fit_or(frame, ps_ref, arm, or_method, or_lambda, opts.link, &opts.solver)?;
    Ok(ArmFits { ps, or, ps_cv, or_cv })
}

/// AIPW values for one arm: `phi(Y, T, X; m1, pi)` for the treated arm and
/// `phi(Y, 1 - T, X; m0, 1 - pi0)` for the untreated one.
pub fn arm_phi(frame: &ModelFrame, fits: &ArmFits, arm: Arm) -> Result<Vec<f64>> {
    (0..frame.len())
        .map(|i| {
            let (t, p) = match arm {
                Arm::Treated => (frame.t[i], fits.ps.fitted_pi[i]),
                Arm::Untreated => (1.0 - frame.t[i], 1.0 - fits.ps.fitted_pi[i]),
            };
            aipw_phi(frame.y[i], t, p, fits.or.fitted_m[i])
        })
        .collect()
}

pub fn target_phi(frame: &ModelFrame, fits: &NuisanceFits, target: Target) -> Result<Vec<f64>> {
    let need = |arm| fits.arm(arm).ok_or_else(|| Error::Argument(format!("no {arm:?} nuisance fits")));
    match target {
        Target::Mu1 => arm_phi(frame, need(Arm::Treated)?, Arm::Treated),
        Target::Mu0 => arm_phi(frame, need(Arm::Untreated)?, Arm::Untreated),
        Target::Tau => {
            let a = arm_phi(frame, need(Arm::Treated)?, Arm::Treated)?;
            let b = arm_phi(frame, need(Arm::Untreated)?, Arm::Untreated)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        }
    }
}

fn arms_for(targets: &[Target]) -> (bool, bool) {
    let treated = targets.iter().any(|t| matches!(t, Target::Mu1 | Target::Tau));
    let untreated = targets.iter().any(|t| matches!(t, Target::Mu0 | Target::Tau));
    (treated, untreated)
}

pub fn fit_nuisance(frame: &ModelFrame, targets: &[Target], opts: &PipelineOptions) -> Result<NuisanceFits> {
    let (treated, untreated) = arms_for(targets);
    Ok(NuisanceFits {
        treated: if treated { Some(fit_arm(frame, Arm::Treated, opts)?) } else { None },
        untreated: if untreated { Some(fit_arm(frame, Arm::Untreated, opts)?) } else { None },
    })
}

/// Projects the target's influence values onto the basis of `frame`'s plan
/// and evaluates at each `z0`.
pub fn estimate_from_fits(
    frame: &ModelFrame,
    fits: &NuisanceFits,
    target: Target,
    z0s: &[Vec<f64>],
    level: f64,
) -> Result<(MsmFit, Vec<CsteEstimate>)> {
    let phi = target_phi(frame, fits, target)?;
    let mut msm = msm_fit(&phi, &frame.designs.phi_dag)?;
    msm.basis = Some(frame.plan.basis.clone());
    let approximation = !frame.plan.basis.is_discrete();
    let estimates = z0s
        .iter()
        .map(|z0| {
            let dag = phi_dag(z0, &frame.plan.basis)?;
            let point = msm.predict_dag(&dag)?;
            let var = msm.variance_dag(&dag)?;
            Ok(make_estimate(target, z0, point, var, level, approximation))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((msm, estimates))
}

pub fn estimate_mu(
    arm: Arm,
    data: &Dataset,
    plan: &RegressorPlan,
    z0s: &[Vec<f64>],
    opts: &PipelineOptions,
    level: f64,
) -> Result<Vec<CsteEstimate>> {
    let frame = ModelFrame::new(data, plan)?;
    let target = match arm {
        Arm::Treated => Target::Mu1,
        Arm::Untreated => Target::Mu0,
    };
    let fits = fit_nuisance(&frame, &[target], opts)?;
    Ok(estimate_from_fits(&frame, &fits, target, z0s, level)?.1)
}

pub fn estimate_tau(
    data: &Dataset,
    plan: &RegressorPlan,
    z0s: &[Vec<f64>],
    opts: &PipelineOptions,
    level: f64,
) -> Result<Vec<CsteEstimate>> {
    let frame = ModelFrame::new(data, plan)?;
    let fits = fit_nuisance(&frame, &[Target::Tau], opts)?;
    Ok(estimate_from_fits(&frame, &fits, Target::Tau, z0s, level)?.1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnotRow {
    pub num_knots: usize,
    /// Basis dimension `K`.
    pub dim: usize,
    pub rss: f64,
    pub aic: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnotSearch {
    pub rows: Vec<KnotRow>,
    pub best_aic: usize,
    pub best_bic: usize,
}

fn info_row(phi: &[f64], dag: &ColMatrix, num_knots: usize) -> Result<KnotRow> {
    let fit = msm_fit(phi, dag)?;
    let n = phi.len() as f64;
    let rss: f64 = fit.residuals.iter().map(|r| r * r).sum();
    let dim = dag.ncols() - 1;
    let params = (dim + 2) as f64;
    let base = n * (rss / n).ln();
    Ok(KnotRow { num_knots, dim, rss, aic: base + 2.0 * params, bic: base + n.ln() * params })
}

fn summarize(rows: Vec<KnotRow>) -> KnotSearch {
    let argmin = |key: fn(&KnotRow) -> f64| {
        rows.iter()
            .min_by(|a, b| key(a).total_cmp(&key(b)))
            .map(|r| r.num_knots)
            .unwrap_or(0)
    };
    let best_aic = argmin(|r| r.aic);
    let best_bic = argmin(|r| r.bic);
    KnotSearch { rows, best_aic, best_bic }
}

/// Gaussian-likelihood AIC/BIC of least-squares spline fits of `phi` on
/// `z` with `1..=max_knots` quantile knots.
pub fn knot_search_phi(phi: &[f64], z: &[f64], max_knots: usize) -> Result<KnotSearch> {
    let zm = ColMatrix::from_columns(z.len(), &[z.to_vec()])?;
    let rows = (1..=max_knots)
        .map(|k| {
            let basis = BasisSpec::cubic_spline(z, k)?;
            let (dag, _) = crate::design::phi_dag_matrix(&zm, &basis)?;
            info_row(phi, &dag, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

/// Same criteria for explicitly given knot sets (boundary at the range of
/// `z`), e.g. nested candidates.
pub fn knot_search_sets(phi: &[f64], z: &[f64], knot_sets: &[Vec<f64>]) -> Result<KnotSearch> {
    let zm = ColMatrix::from_columns(z.len(), &[z.to_vec()])?;
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rows = knot_sets
        .iter()
        .map(|knots| {
            let basis = BasisSpec::cubic_spline_with_knots(knots.clone(), lo, hi)?;
            let (dag, _) = crate::design::phi_dag_matrix(&zm, &basis)?;
            info_row(phi, &dag, knots.len())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

/// Fits both arms once with a 10-knot spline plan from `plan_builder`,
/// then runs the knot search on the difference of the AIPW values.
pub fn knot_search(
    data: &Dataset,
    plan_builder: impl Fn(&BasisSpec) -> RegressorPlan,
    max_knots: usize,
    opts: &PipelineOptions,
) -> Result<KnotSearch> {
    if data.z.ncols() != 1 {
        return Err(Error::Argument("knot search needs a single continuous Z column".into()));
    }
    let z = data.z.col(0).to_vec();
    let basis = BasisSpec::cubic_spline(&z, 10)?;
    let plan = plan_builder(&basis);
    let frame = ModelFrame::new(data, &plan)?;
    let fits = fit_nuisance(&frame, &[Target::Tau], opts)?;
    let phi = target_phi(&frame, &fits, Target::Tau)?;
    knot_search_phi(&phi, &z, max_knots)
}

/// Default plan builder for the knot search: model-assisted regressors.
pub fn model_assisted_builder(num_v: usize) -> impl Fn(&BasisSpec) -> RegressorPlan {
    move |b| build_plan(PlanMode::ModelAssisted, b, num_v)
}
