//! Propensity-score and outcome-regression fits.
//!
//! Calibrated (RCAL) propensity scores with weighted-likelihood (RWL)
//! outcome regressions, and penalized maximum likelihood (RML) for the
//! competitor, each with a cross-validated penalty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColMatrix, Dataset};
use crate::design::{build_designs, Designs, RegressorPlan};
use crate::error::{Error, Result};
use crate::optim::{self, eval_loss, fit_lasso, PathSolver, sigmoid, FitResult, Link, LossKind, PenalizedProblem, SolverOptions};

/// Fitted probabilities are kept inside `[PI_FLOOR, 1 - PI_FLOOR]`.
pub const PI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treated,
    Untreated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsMethod {
    Rcal,
    Rml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrMethod {
    Rwl,
    Rml,
}

/// Data and evaluated designs for one plan.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub plan: RegressorPlan,
    pub designs: Designs,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl ModelFrame {
    pub fn new(data: &Dataset, plan: &RegressorPlan) -> Result<Self> {
        let designs = build_designs(plan, &data.z, &data.v)?;
        Ok(ModelFrame { plan: plan.clone(), designs, t: data.treatment_f64(), y: data.y.clone() })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn subset(&self, rows: &[usize]) -> ModelFrame {
        ModelFrame {
            plan: self.plan.clone(),
            designs: Designs {
                f: self.designs.f.select_rows(rows),
                g: self.designs.g.select_rows(rows),
                phi_dag: self.designs.phi_dag.select_rows(rows),
                clamped: self.designs.clamped,
            },
            t: rows.iter().map(|&i| self.t[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }

    fn check_arms(&self) -> Result<()> {
        let n1 = self.t.iter().filter(|&&t| t == 1.0).count();
        if n1 == 0 || n1 == self.len() {
            return Err(Error::DegenerateData(format!(
                "both treatment arms are required ({n1} treated of {})",
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PSFit {
    pub gamma: Vec<f64>,
    pub columns: Vec<String>,
    /// `P(T = 1 | X)` per observation, clamped.
    pub fitted_pi: Vec<f64>,
    /// Unclamped linear predictor `gamma' f(X)`.
    pub eta: Vec<f64>,
    pub arm: Arm,
    pub method: PsMethod,
    pub lambda: f64,
    pub pi_clamped: bool,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ORFit {
    pub alpha: Vec<f64>,
    pub columns: Vec<String>,
    pub link: Link,
    pub fitted_m: Vec<f64>,
    pub arm: Arm,
    pub method: OrMethod,
    pub lambda: f64,
    pub fit: FitResult,
}

fn clamp_pi(eta: &[f64]) -> (Vec<f64>, bool) {
    let mut clamped = false;
    let pi = eta
        .iter()
        .map(|&e| {
            let p = sigmoid(e);
            if p < PI_FLOOR || p > 1.0 - PI_FLOOR {
                clamped = true;
                p.clamp(PI_FLOOR, 1.0 - PI_FLOOR)
            } else {
                p
            }
        })
        .collect();
    (pi, clamped)
}

fn ps_problem(f: &ColMatrix, t: &[f64], arm: Arm, method: PsMethod) -> Result<PenalizedProblem> {
    let kind = match (method, arm) {
        (PsMethod::Rcal, Arm::Treated) => LossKind::CalTreated,
        (PsMethod::Rcal, Arm::Untreated) => LossKind::CalUntreated,
        (PsMethod::Rml, _) => LossKind::MlLogistic,
    };
    PenalizedProblem::new(kind, f.clone(), t.to_vec(), Vec::new(), Vec::new())
}

/// Per-observation outcome-loss weights implied by a propensity fit:
/// `e^{-eta}` on treated rows for the treated arm, `e^{eta}` on untreated
/// rows for the untreated arm, zero elsewhere.
pub fn rwl_weights(ps_eta: &[f64], t: &[f64], arm: Arm) -> Result<Vec<f64>> {
    ps_eta
        .iter()
        .zip(t)
        .enumerate()
        .map(|(i, (&e, &ti))| {
            let w = match arm {
                Arm::Treated if ti == 1.0 => (-e).exp(),
                Arm::Untreated if ti == 0.0 => e.exp(),
                _ => 0.0,
            };
            if w.is_finite() {
                Ok(w)
            } else {
                Err(Error::NumericOverflow { eta: e, row: i })
            }
        })
        .collect()
}

fn arm_indicator(t: &[f64], arm: Arm) -> Vec<f64> {
    match arm {
        Arm::Treated => t.to_vec(),
        Arm::Untreated => t.iter().map(|x| 1.0 - x).collect(),
    }
}

fn or_problem(
    g: &ColMatrix,
    t: &[f64],
    y: &[f64],
    arm: Arm,
    method: OrMethod,
    link: Link,
    ps_eta: Option<&[f64]>,
) -> Result<PenalizedProblem> {
    let indicator = arm_indicator(t, arm);
    match method {
        OrMethod::Rwl => {
            let eta = ps_eta.ok_or_else(|| Error::Argument("weighted likelihood needs a propensity fit".into()))?;
            let w = rwl_weights(eta, t, arm)?;
            PenalizedProblem::new(LossKind::WeightedGlm(link), g.clone(), indicator, y.to_vec(), w)
        }
        OrMethod::Rml => PenalizedProblem::new(LossKind::MlGlm(link), g.clone(), indicator, y.to_vec(), Vec::new()),
    }
}

fn column_names(cols: &[crate::design::ColumnExpr]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn fit_ps(frame: &ModelFrame, arm: Arm, method: PsMethod, lambda: f64, opts: &SolverOptions) -> Result<PSFit> {
    frame.check_arms()?;
    let problem = ps_problem(&frame.designs.f, &frame.t, arm, method)?;
    let fit = fit_lasso(&problem, lambda, None, opts)?;
    let eta = frame.designs.f.matvec(&fit.coef);
    let (fitted_pi, pi_clamped) = clamp_pi(&eta);
    Ok(PSFit {
        gamma: fit.coef.clone(),
        columns: column_names(&frame.plan.f_columns),
        fitted_pi,
        eta,
        arm,
        method,
        lambda,
        pi_clamped,
        fit,
    })
}

pub fn fit_or(
    frame: &ModelFrame,
    ps: Option<&PSFit>,
    arm: Arm,
    method: OrMethod,
    lambda: f64,
    link: Link,
    opts: &SolverOptions,
) -> Result<ORFit> {
    frame.check_arms()?;
    if method == OrMethod::Rwl {
        let ps = ps.ok_or_else(|| Error::Argument("weighted likelihood needs a propensity fit".into()))?;
        if ps.method != PsMethod::Rcal || ps.arm != arm {
            return Err(Error::Argument("weighted likelihood needs a calibrated fit for the same arm".into()));
        }
        if ps.eta.len() != frame.len() {
            return Err(Error::Argument("propensity fit was computed on different data".into()));
        }
    }
    let problem = or_problem(
        &frame.designs.g,
        &frame.t,
        &frame.y,
        arm,
        method,
        link,
        ps.map(|p| p.eta.as_slice()),
    )?;
    let fit = fit_lasso(&problem, lambda, None, opts)?;
    let fitted_m = frame.designs.g.matvec(&fit.coef).into_iter().map(|e| link.inverse(e)).collect();
    Ok(ORFit {
        alpha: fit.coef.clone(),
        columns: column_names(&frame.plan.g_columns),
        link,
        fitted_m,
        arm,
        method,
        lambda,
        fit,
    })
}

pub fn fit_ps_rcal(data: &Dataset, plan: &RegressorPlan, lambda: f64) -> Result<PSFit> {
    fit_ps(&ModelFrame::new(data, plan)?, Arm::Treated, PsMethod::Rcal, lambda, &SolverOptions::default())
}

pub fn fit_ps_rcal_untreated(data: &Dataset, plan: &RegressorPlan, lambda: f64) -> Result<PSFit> {
    fit_ps(&ModelFrame::new(data, plan)?, Arm::Untreated, PsMethod::Rcal, lambda, &SolverOptions::default())
}

pub fn fit_ps_rml(data: &Dataset, plan: &RegressorPlan, lambda: f64) -> Result<PSFit> {
    fit_ps(&ModelFrame::new(data, plan)?, Arm::Treated, PsMethod::Rml, lambda, &SolverOptions::default())
}

pub fn fit_or_rwl(data: &Dataset, plan: &RegressorPlan, ps: &PSFit, lambda: f64, link: Link) -> Result<ORFit> {
    let frame = ModelFrame::new(data, plan)?;
    fit_or(&frame, Some(ps), Arm::Treated, OrMethod::Rwl, lambda, link, &SolverOptions::default())
}

pub fn fit_or_rwl_untreated(data: &Dataset, plan: &RegressorPlan, ps0: &PSFit, lambda: f64, link: Link) -> Result<ORFit> {
    let frame = ModelFrame::new(data, plan)?;
    fit_or(&frame, Some(ps0), Arm::Untreated, OrMethod::Rwl, lambda, link, &SolverOptions::default())
}

pub fn fit_or_rml(data: &Dataset, plan: &RegressorPlan, lambda: f64, link: Link) -> Result<ORFit> {
    let frame = ModelFrame::new(data, plan)?;
    fit_or(&frame, None, Arm::Treated, OrMethod::Rml, lambda, link, &SolverOptions::default())
}

/// Which nuisance model a cross-validation run tunes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CvModel {
    Ps { arm: Arm, method: PsMethod },
    /// Weighted likelihood; each training fold refits the calibrated
    /// propensity score at `ps_lambda` to supply the weights.
    OrRwl { arm: Arm, ps_lambda: f64 },
    OrRml { arm: Arm },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub ratio: f64,
    /// Stop walking down the grid once the mean held-out loss has failed to
    /// improve on its minimum for this many consecutive values. `None`
    /// evaluates the whole grid.
    pub patience: Option<usize>,
    pub solver: SolverOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { folds: 5, seed: 0, grid_size: 50, ratio: 1e-3, patience: Some(10), solver: SolverOptions::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CVResult {
    pub lambda_grid: Vec<f64>,
    /// `folds x grid` held-out losses; `inf` where the fit failed or was
    /// not attempted.
    pub fold_losses: Vec<Vec<f64>>,
    /// Number of leading grid values that were evaluated.
    pub evaluated: usize,
    pub mean_losses: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    pub one_se_lambda: f64,
    /// Fold label of every observation.
    pub fold_of: Vec<usize>,
    /// Seed that produced the accepted fold assignment.
    pub seed: u64,
}

/// Stratified fold labels: each arm is shuffled separately and dealt out
/// round-robin, continuing the deal across arms.
pub fn stratified_folds(t: &[f64], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; t.len()];
    let mut counter = 0;
    for arm in [1.0, 0.0] {
        let mut idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] == arm).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold_of[i] = counter % folds;
            counter += 1;
        }
    }
    fold_of
}

fn folds_usable(t: &[f64], fold_of: &[usize], folds: usize) -> bool {
    (0..folds).all(|k| {
        let (mut tr1, mut tr0, mut te) = (0, 0, 0);
        for (i, &f) in fold_of.iter().enumerate() {
            if f == k {
                te += 1;
            } else if t[i] == 1.0 {
                tr1 += 1;
            } else {
                tr0 += 1;
            }
        }
        tr1 > 0 && tr0 > 0 && te > 0
    })
}

/// Lambda grid for a problem: geometric from the smallest lambda that
/// zeroes every penalized coefficient.
pub fn lambda_grid(problem: &PenalizedProblem, grid_size: usize, ratio: f64) -> Result<Vec<f64>> {
    optim::lambda_grid(problem, grid_size, ratio)
}

fn model_problem(frame: &ModelFrame, model: CvModel, link: Link, solver: &SolverOptions) -> Result<PenalizedProblem> {
    match model {
        CvModel::Ps { arm, method } => ps_problem(&frame.designs.f, &frame.t, arm, method),
        CvModel::OrRwl { arm, ps_lambda } => {
            let ps = fit_ps(frame, arm, PsMethod::Rcal, ps_lambda, solver)?;
            or_problem(&frame.designs.g, &frame.t, &frame.y, arm, OrMethod::Rwl, link, Some(&ps.eta))
        }
        CvModel::OrRml { arm } => or_problem(&frame.designs.g, &frame.t, &frame.y, arm, OrMethod::Rml, link, None),
    }
}

/// Train and test problems for one fold.
fn fold_problems(
    frame: &ModelFrame,
    fold_of: &[usize],
    k: usize,
    model: CvModel,
    link: Link,
    solver: &SolverOptions,
) -> Result<(PenalizedProblem, PenalizedProblem)> {
    let train: Vec<usize> = (0..frame.len()).filter(|&i| fold_of[i] != k).collect();
    let test: Vec<usize> = (0..frame.len()).filter(|&i| fold_of[i] == k).collect();
    let tr = frame.subset(&train);
    let te = frame.subset(&test);
    match model {
        CvModel::OrRwl { arm, ps_lambda } => {
            let ps = fit_ps(&tr, arm, PsMethod::Rcal, ps_lambda, solver)?;
            let test_eta = te.designs.f.matvec(&ps.gamma);
            let train_p = or_problem(&tr.designs.g, &tr.t, &tr.y, arm, OrMethod::Rwl, link, Some(&ps.eta))?;
            let test_p = or_problem(&te.designs.g, &te.t, &te.y, arm, OrMethod::Rwl, link, Some(&test_eta))?;
            Ok((train_p, test_p))
        }
        _ => Ok((model_problem(&tr, model, link, solver)?, model_problem(&te, model, link, solver)?)),
    }
}

/// Walks all folds down the grid together so the walk can stop on the
/// mean held-out loss. Returns `folds x grid` losses and the number of grid
/// values evaluated.
fn fold_losses(
    frame: &ModelFrame,
    fold_of: &[usize],
    model: CvModel,
    link: Link,
    grid: &[f64],
    opts: &CvOptions,
) -> (Vec<Vec<f64>>, usize) {
    let problems: Vec<Option<(PenalizedProblem, PenalizedProblem)>> = (0..opts.folds)
        .into_par_iter()
        .map(|k| fold_problems(frame, fold_of, k, model, link, &opts.solver).ok())
        .collect();
    let mut losses = vec![vec![f64::INFINITY; grid.len()]; opts.folds];
    let mut solvers: Vec<Option<PathSolver>> =
        problems.iter().map(|p| p.as_ref().map(|(train, _)| PathSolver::new(train, None))).collect();
    if solvers.iter().any(Option::is_none) {
        return (losses, 0);
    }
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for (j, &lambda) in grid.iter().enumerate() {
        let step: Vec<f64> = solvers
            .par_iter_mut()
            .zip(&problems)
            .map(|(solver, prob)| {
                let (Some(s), Some((_, test))) = (solver.as_mut(), prob) else {
                    return f64::INFINITY;
                };
                match s.step(lambda, &opts.solver) {
                    Ok(fit) => eval_loss(test, &fit.coef).unwrap_or(f64::INFINITY),
                    Err(_) => {
                        *solver = None;
                        f64::INFINITY
                    }
                }
            })
            .collect();
        for (row, v) in losses.iter_mut().zip(&step) {
            row[j] = *v;
        }
        let mean = step.iter().sum::<f64>() / opts.folds as f64;
        if !mean.is_finite() {
            // A failed path makes every later mean infinite.
            return (losses, j + 1);
        }
        if mean < best {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if opts.patience.is_some_and(|p| since_best >= p) {
                return (losses, j + 1);
            }
        }
    }
    (losses, grid.len())
}

/// K-fold cross-validation of the penalty level.
pub fn cv_lambda_frame(frame: &ModelFrame, model: CvModel, link: Link, opts: &CvOptions) -> Result<CVResult> {
    if opts.folds < 2 {
        return Err(Error::Argument("cross-validation needs at least two folds".into()));
    }
    frame.check_arms()?;
    let mut seed = opts.seed;
    let mut fold_of = stratified_folds(&frame.t, opts.folds, seed);
    let mut attempts = 1;
    while !folds_usable(&frame.t, &fold_of, opts.folds) {
        if attempts >= 10 {
            return Err(Error::DegenerateData("could not form folds containing both treatment arms".into()));
        }
        seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        fold_of = stratified_folds(&frame.t, opts.folds, seed);
        attempts += 1;
    }

    let full = model_problem(frame, model, link, &opts.solver)?;
    let grid = lambda_grid(&full, opts.grid_size, opts.ratio)?;

    let (fold_losses, evaluated) = fold_losses(frame, &fold_of, model, link, &grid, opts);

    let nf = opts.folds as f64;
    let mean_losses: Vec<f64> = (0..grid.len())
        .map(|j| fold_losses.iter().map(|r| r[j]).sum::<f64>() / nf)
        .collect();
    let mut chosen_index = 0;
    for (j, &m) in mean_losses.iter().enumerate() {
        if m < mean_losses[chosen_index] {
            chosen_index = j;
        }
    }
    if !mean_losses[chosen_index].is_finite() {
        return Err(Error::DegenerateData("every cross-validation fit failed".into()));
    }
    let se = {
        let col: Vec<f64> = fold_losses.iter().map(|r| r[chosen_index]).collect();
        let m = mean_losses[chosen_index];
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (nf - 1.0);
        (var / nf).sqrt()
    };
    let bound = mean_losses[chosen_index] + se;
    let one_se_index = mean_losses.iter().position(|&m| m <= bound).unwrap_or(chosen_index);

    Ok(CVResult {
        chosen_lambda: grid[chosen_index],
        one_se_lambda: grid[one_se_index],
        lambda_grid: grid,
        fold_losses,
        evaluated,
        mean_losses,
        chosen_index,
        fold_of,
        seed,
    })
}

pub fn cv_lambda(
    data: &Dataset,
    plan: &RegressorPlan,
    model: CvModel,
    link: Link,
    folds: usize,
    seed: u64,
) -> Result<CVResult> {
    let frame = ModelFrame::new(data, plan)?;
    cv_lambda_frame(&frame, model, link, &CvOptions { folds, seed, ..CvOptions::default() })
}

/// Standardized calibration difference of `h` under the weights of `ps`:
/// the weighted arm mean minus the overall mean, over the sample standard
/// deviation of `h` (`n` denominator).
pub fn std_cal_diff(ps: &PSFit, h: &[f64], t: &[f64]) -> Result<f64> {
    let n = h.len();
    if ps.fitted_pi.len() != n || t.len() != n {
        return Err(Error::Argument("length mismatch".into()));
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("column must be finite".into()));
    }
    let nf = n as f64;
    let mean = h.iter().sum::<f64>() / nf;
    let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
    if !(var > 0.0) {
        return Err(Error::UndefinedDiagnostic("column has zero sample variance".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let w = match ps.arm {
            Arm::Treated => t[i] / ps.fitted_pi[i],
            Arm::Untreated => (1.0 - t[i]) / (1.0 - ps.fitted_pi[i]),
        };
        num += w * h[i];
        den += w;
    }
    Ok((num / den - mean) / var.sqrt())
}
