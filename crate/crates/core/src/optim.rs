//! L1-penalized convex losses and their solver.
//!
//! Every nuisance model in the crate is an instance of
//! `min_b  L(b) + lambda * sum_{penalized j} |b_j|`
//! where `L` is a sample-average loss in the linear predictor `eta = X b`.
//! The solver is a proximal Newton scheme: at each outer step the loss is
//! replaced by its second-order expansion, the penalized quadratic is solved
//! by cyclic coordinate descent with soft-thresholding, and a step-halving
//! line search on the true objective keeps the iterates monotone.
//!
//! Penalized columns are centered and scaled internally (sample mean 0,
//! sample variance 1, `n` denominator). The penalty, the KKT residuals and
//! `lambda` all live on that standardized scale; coefficients are reported
//! on the original scale.

use serde::{Deserialize, Serialize};

use crate::data::ColMatrix;
use crate::error::{Error, Result};

/// Beyond this magnitude a linear predictor is treated as divergence
/// (separation or an unbounded calibration direction).
pub const ETA_DIVERGENCE: f64 = 500.0;

/// Linear predictors beyond this magnitude mark the fit as touching the
/// overflow guard.
pub const ETA_GUARD: f64 = 35.0;

const CURVATURE_CAP: f64 = 1e8;
const MIN_CURVATURE: f64 = 1e-12;
const CURVATURE_FLOOR: f64 = 1e-100;
const STALL_SLACK: f64 = 10.0;

/// Inverse link of a generalized linear outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logistic,
}

impl Link {
    #[inline]
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logistic => sigmoid(eta),
        }
    }

    /// `Psi(u) = int_0^u psi`, up to an additive constant.
    #[inline]
    pub fn cumulant(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 0.5 * eta * eta,
            Link::Logistic => softplus(eta),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `T e^{-eta} + (1 - T) eta`
    CalTreated,
    /// `(1 - T) e^{eta} - T eta`
    CalUntreated,
    /// `T w (-Y eta + Psi(eta))`
    WeightedGlm(Link),
    /// `-T eta + log(1 + e^eta)`
    MlLogistic,
    /// `T (-Y eta + Psi(eta))`
    MlGlm(Link),
}

/// An instance of a penalized loss over a fixed design.
#[derive(Debug, Clone)]
pub struct PenalizedProblem {
    kind: LossKind,
    design: ColMatrix,
    response: Vec<f64>,
    treatment: Vec<f64>,
    weights: Vec<f64>,
    penalty_mask: Vec<bool>,
    standardize: bool,
    center: Vec<f64>,
    scale: Vec<f64>,
    degenerate: Vec<bool>,
}

impl PenalizedProblem {
    /// `response` may be empty for propensity-score losses and `weights`
    /// empty for unit weights. Every column except the intercept is
    /// penalized until [`with_penalty_mask`](Self::with_penalty_mask) says
    /// otherwise.
    pub fn new(
        kind: LossKind,
        design: ColMatrix,
        treatment: Vec<f64>,
        response: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = design.nrows();
        let d = design.ncols();
        if n == 0 || d == 0 {
            return Err(Error::Argument("empty design".into()));
        }
        if design.col(0).iter().any(|&x| x != 1.0) {
            return Err(Error::Argument("design column 0 must be identically 1".into()));
        }
        if treatment.len() != n {
            return Err(Error::Argument(format!("treatment has length {}, expected {n}", treatment.len())));
        }
        if treatment.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Argument("treatment entries must be 0 or 1".into()));
        }
        let needs_response = matches!(kind, LossKind::WeightedGlm(_) | LossKind::MlGlm(_));
        let response = if needs_response {
            if response.len() != n {
                return Err(Error::Argument(format!("response has length {}, expected {n}", response.len())));
            }
            response
        } else {
            if !response.is_empty() && response.len() != n {
                return Err(Error::Argument("response length mismatch".into()));
            }
            if response.is_empty() {
                vec![0.0; n]
            } else {
                response
            }
        };
        let weights = if weights.is_empty() { vec![1.0; n] } else { weights };
        if weights.len() != n {
            return Err(Error::Argument(format!("weights have length {}, expected {n}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Argument("weights must be finite and nonnegative".into()));
        }
        if let LossKind::WeightedGlm(Link::Logistic) | LossKind::MlGlm(Link::Logistic) = kind {
            if response
                .iter()
                .zip(&treatment)
                .zip(&weights)
                .any(|((&y, &t), &w)| t * w > 0.0 && !(0.0..=1.0).contains(&y))
            {
                return Err(Error::Argument("logistic link requires outcomes in [0, 1]".into()));
            }
        }
        let mut penalty_mask = vec![true; d];
        penalty_mask[0] = false;
        let mut p = PenalizedProblem {
            kind,
            design,
            response,
            treatment,
            weights,
            penalty_mask,
            standardize: true,
            center: Vec::new(),
            scale: Vec::new(),
            degenerate: Vec::new(),
        };
        p.compute_scaling();
        Ok(p)
    }

    pub fn with_penalty_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.design.ncols() {
            return Err(Error::Argument("penalty mask length mismatch".into()));
        }
        if mask[0] {
            return Err(Error::Argument("the intercept is never penalized".into()));
        }
        self.penalty_mask = mask;
        Ok(self)
    }

    /// Turns internal standardization on or off.
    pub fn with_standardization(mut self, on: bool) -> Self {
        self.standardize = on;
        self.compute_scaling();
        self
    }

    fn compute_scaling(&mut self) {
        let n = self.design.nrows() as f64;
        let d = self.design.ncols();
        self.center = vec![0.0; d];
        self.scale = vec![1.0; d];
        self.degenerate = vec![false; d];
        for j in 1..d {
            let col = self.design.col(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            let tiny = 1e-10 * (1.0 + mean.abs());
            if self.standardize {
                if sd <= tiny {
                    self.degenerate[j] = true;
                } else {
                    self.center[j] = mean;
                    self.scale[j] = sd;
                }
            } else if col.iter().all(|&x| x == 0.0) {
                self.degenerate[j] = true;
            }
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn design(&self) -> &ColMatrix {
        &self.design
    }

    pub fn nobs(&self) -> usize {
        self.design.nrows()
    }

    pub fn ncoef(&self) -> usize {
        self.design.ncols()
    }

    pub fn penalty_mask(&self) -> &[bool] {
        &self.penalty_mask
    }

    pub fn treatment(&self) -> &[f64] {
        &self.treatment
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Columns excluded from the fit because they have no variation.
    pub fn degenerate_columns(&self) -> Vec<usize> {
        (0..self.ncoef()).filter(|&j| self.degenerate[j]).collect()
    }

    /// Column scales used for the penalty (`1` when not standardizing).
    pub fn column_scale(&self) -> &[f64] {
        &self.scale
    }

    /// Same loss restricted to a subset of observations; scaling is
    /// recomputed on the subset.
    pub fn subset(&self, rows: &[usize]) -> Result<PenalizedProblem> {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let p = PenalizedProblem::new(
            self.kind,
            self.design.select_rows(rows),
            pick(&self.treatment),
            pick(&self.response),
            pick(&self.weights),
        )?
        .with_penalty_mask(self.penalty_mask.clone())?;
        Ok(p.with_standardization(self.standardize))
    }

    /// Penalty `sum s_j |beta_j|` over penalized columns, original scale.
    pub fn penalty(&self, coef: &[f64]) -> f64 {
        coef.iter()
            .enumerate()
            .filter(|&(j, &c)| self.penalty_mask[j] && c != 0.0)
            .map(|(j, c)| self.scale[j] * c.abs())
            .sum()
    }

    /// Per-observation loss value, first and second derivative in `eta`.
    #[inline]
    fn obs(&self, i: usize, eta: f64) -> (f64, f64, f64) {
        let t = self.treatment[i];
        match self.kind {
            LossKind::CalTreated => {
                if t == 1.0 {
                    let e = (-eta).exp();
                    (e, -e, e)
                } else {
                    (eta, 1.0, 0.0)
                }
            }
            LossKind::CalUntreated => {
                if t == 0.0 {
                    let e = eta.exp();
                    (e, e, e)
                } else {
                    (-eta, -1.0, 0.0)
                }
            }
            LossKind::MlLogistic => {
                let s = sigmoid(eta);
                (softplus(eta) - t * eta, s - t, s * (1.0 - s))
            }
            LossKind::WeightedGlm(link) | LossKind::MlGlm(link) => {
                let a = t * self.weights[i];
                if a == 0.0 {
                    return (0.0, 0.0, 0.0);
                }
                let y = self.response[i];
                match link {
                    Link::Identity => (a * (-y * eta + 0.5 * eta * eta), a * (eta - y), a),
                    Link::Logistic => {
                        let s = sigmoid(eta);
                        (a * (-y * eta + softplus(eta)), a * (s - y), a * s * (1.0 - s))
                    }
                }
            }
        }
    }

    /// Whether observation `i` can contribute curvature.
    fn curvature_row(&self, i: usize) -> bool {
        let t = self.treatment[i];
        match self.kind {
            LossKind::CalTreated => t == 1.0,
            LossKind::CalUntreated => t == 0.0,
            LossKind::MlLogistic => true,
            LossKind::WeightedGlm(_) | LossKind::MlGlm(_) => t * self.weights[i] > 0.0,
        }
    }

    fn loss_from_eta(&self, eta: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (i, &e) in eta.iter().enumerate() {
            let (l, _, _) = self.obs(i, e);
            if !l.is_finite() {
                return Err(Error::NumericOverflow { eta: e, row: i });
            }
            total += l;
        }
        Ok(total / eta.len() as f64)
    }

    fn check_coef(&self, coef: &[f64]) -> Result<()> {
        if coef.len() != self.ncoef() {
            return Err(Error::Argument(format!(
                "coefficient vector has length {}, design has {} columns",
                coef.len(),
                self.ncoef()
            )));
        }
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::Argument("coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn linear_predictor(&self, coef: &[f64]) -> Result<Vec<f64>> {
        self.check_coef(coef)?;
        Ok(self.design.matvec(coef))
    }
}

/// Sample-average loss at `coef` (original scale), without penalty.
pub fn eval_loss(problem: &PenalizedProblem, coef: &[f64]) -> Result<f64> {
    let eta = problem.linear_predictor(coef)?;
    problem.loss_from_eta(&eta)
}

/// Exact gradient of the unpenalized sample loss (original scale).
pub fn eval_gradient(problem: &PenalizedProblem, coef: &[f64]) -> Result<Vec<f64>> {
    let eta = problem.linear_predictor(coef)?;
    let d1 = first_derivatives(problem, &eta)?;
    let n = problem.nobs() as f64;
    Ok((0..problem.ncoef())
        .map(|j| dot(problem.design.col(j), &d1) / n)
        .collect())
}

fn first_derivatives(problem: &PenalizedProblem, eta: &[f64]) -> Result<Vec<f64>> {
    eta.iter()
        .enumerate()
        .map(|(i, &e)| {
            let (_, g, _) = problem.obs(i, e);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::NumericOverflow { eta: e, row: i })
            }
        })
        .collect()
}

#[inline]
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktReport {
    /// Gradient of the loss with respect to each standardized coefficient.
    pub residuals: Vec<f64>,
    /// Largest violation of the stationarity conditions at `lambda`.
    pub violation: f64,
}

/// Subgradient residuals of `loss + lambda * penalty` at `coef`.
///
/// For the treated calibration loss on unit-variance columns the penalized
/// entries are `n^-1 sum T f_j / pi - n^-1 sum f_j`; entry 0 is
/// `1 - n^-1 sum T / pi`.
pub fn kkt_report(problem: &PenalizedProblem, coef: &[f64], lambda: f64) -> Result<KktReport> {
    let eta = problem.linear_predictor(coef)?;
    let d1 = first_derivatives(problem, &eta)?;
    let n = problem.nobs() as f64;
    let sum_d1: f64 = d1.iter().sum();
    let residuals: Vec<f64> = (0..problem.ncoef())
        .map(|j| {
            let raw = dot(problem.design.col(j), &d1);
            if j == 0 || problem.degenerate[j] {
                raw / n
            } else {
                (raw - problem.center[j] * sum_d1) / (n * problem.scale[j])
            }
        })
        .collect();
    let std_coef: Vec<f64> = coef.iter().zip(&problem.scale).map(|(c, s)| c * s).collect();
    let violation = kkt_violation(&residuals, &std_coef, problem.penalty_mask(), lambda, &problem.degenerate);
    Ok(KktReport { residuals, violation })
}

fn kkt_violation(grad: &[f64], b: &[f64], mask: &[bool], lambda: f64, degenerate: &[bool]) -> f64 {
    let mut v: f64 = 0.0;
    for j in 0..grad.len() {
        if degenerate[j] {
            continue;
        }
        let g = grad[j];
        let r = if !mask[j] {
            g.abs()
        } else if b[j] > 0.0 {
            (g + lambda).abs()
        } else if b[j] < 0.0 {
            (g - lambda).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        };
        v = v.max(r);
    }
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Maximum proximal Newton steps.
    pub max_iter: usize,
    /// Convergence: largest KKT violation on the standardized scale.
    pub kkt_tol: f64,
    /// Relative objective decrease below which a non-converged run is
    /// declared stalled.
    pub stall_tol: f64,
    /// Cap on coordinate-descent passes per Newton step.
    pub max_inner_passes: usize,
    /// Keep the per-iteration objective values in the result.
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 10_000,
            kkt_tol: 1e-9,
            stall_tol: 1e-15,
            max_inner_passes: 50,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub coef: Vec<f64>,
    pub lambda: f64,
    /// `eval_loss(coef) + lambda * penalty(coef)`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residuals: Vec<f64>,
    pub kkt_violation: f64,
    /// Nonzero penalized coefficients together with the unpenalized ones.
    pub active_set: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    /// Set when some linear predictor exceeded [`ETA_GUARD`] in magnitude.
    pub clamp_touched: bool,
    pub max_abs_eta: f64,
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    pub fn nonzero_penalized(&self, mask: &[bool]) -> usize {
        self.coef.iter().enumerate().filter(|&(j, &c)| mask[j] && c != 0.0).count()
    }
}

/// Standardized copies of the design prepared once per problem and reused
/// across a lambda path.
struct Prepared<'a> {
    p: &'a PenalizedProblem,
    xs: ColMatrix,
    crows: Vec<usize>,
    xc: ColMatrix,
    cols: Vec<usize>,
}

impl<'a> Prepared<'a> {
    fn new(p: &'a PenalizedProblem) -> Self {
        let n = p.nobs();
        let d = p.ncoef();
        let mut xs = ColMatrix::zeros(n, d);
        for j in 0..d {
            if p.degenerate[j] {
                continue;
            }
            let (m, s) = (p.center[j], p.scale[j]);
            let src = p.design.col(j);
            if j == 0 || (m == 0.0 && s == 1.0) {
                xs.col_mut(j).copy_from_slice(src);
            } else {
                for (dst, &x) in xs.col_mut(j).iter_mut().zip(src) {
                    *dst = (x - m) / s;
                }
            }
        }
        let crows: Vec<usize> = (0..n).filter(|&i| p.curvature_row(i)).collect();
        let xc = xs.select_rows(&crows);
        let cols = (0..d).filter(|&j| !p.degenerate[j]).collect();
        Prepared { p, xs, crows, xc, cols }
    }

    fn to_standardized(&self, coef: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut b = vec![0.0; coef.len()];
        let mut intercept = coef[0];
        for j in 1..coef.len() {
            if p.degenerate[j] {
                continue;
            }
            b[j] = coef[j] * p.scale[j];
            intercept += coef[j] * p.center[j];
        }
        b[0] = intercept;
        b
    }

    fn to_original(&self, b: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut coef = vec![0.0; b.len()];
        let mut intercept = b[0];
        for j in 1..b.len() {
            if p.degenerate[j] || b[j] == 0.0 {
                continue;
            }
            coef[j] = b[j] / p.scale[j];
            intercept -= coef[j] * p.center[j];
        }
        coef[0] = intercept;
        coef
    }

    fn penalty(&self, b: &[f64]) -> f64 {
        b.iter()
            .enumerate()
            .filter(|&(j, &c)| self.p.penalty_mask[j] && c != 0.0)
            .map(|(_, c)| c.abs())
            .sum()
    }

    fn objective(&self, eta: &[f64], b: &[f64], lambda: f64) -> Result<f64> {
        let pen = self.penalty(b);
        let pen_term = if pen == 0.0 { 0.0 } else { lambda * pen };
        Ok(self.p.loss_from_eta(eta)? + pen_term)
    }

    /// A minimizer at infinity (separation) stalls with a vanishing
    /// gradient rather than overflowing; detect it by checking that the
    /// objective still falls along the ray through `b`.
    fn recedes(&self, eta: &[f64], b: &[f64], f: f64, lambda: f64) -> bool {
        let far_eta: Vec<f64> = eta.iter().map(|e| 2.0 * e).collect();
        let far_b: Vec<f64> = b.iter().map(|x| 2.0 * x).collect();
        match self.objective(&far_eta, &far_b, lambda) {
            Ok(far) => far < f,
            Err(_) => false,
        }
    }

    fn quadratic(&self) -> bool {
        matches!(self.p.kind, LossKind::WeightedGlm(Link::Identity) | LossKind::MlGlm(Link::Identity))
    }

    fn gradient(&self, d1: &[f64]) -> Vec<f64> {
        let n = self.p.nobs() as f64;
        let mut g = vec![0.0; self.p.ncoef()];
        for &j in &self.cols {
            g[j] = dot(self.xs.col(j), d1) / n;
        }
        g
    }

    fn solve(&self, lambda: f64, init: &[f64], opts: &SolverOptions) -> Result<FitResult> {
        let p = self.p;
        let n = p.nobs();
        let d = p.ncoef();
        let nf = n as f64;
        let mask = &p.penalty_mask;

        let mut b = self.to_standardized(init);
        let mut eta = self.xs.matvec(&b);
        let mut f = self.objective(&eta, &b, lambda)?;
        let mut trace = Vec::new();
        if opts.record_trace {
            trace.push(f);
        }

        let mut d1 = vec![0.0; n];
        let mut hc = vec![0.0; self.crows.len()];
        let mut xh = ColMatrix::zeros(self.crows.len(), d);
        let mut diag = vec![0.0; d];
        let mut delta = vec![0.0; d];
        let mut u = vec![0.0; self.crows.len()];
        let mut d_eta = vec![0.0; n];
        let mut cand_eta = vec![0.0; n];

        let mut converged = false;
        let mut iterations = 0;
        let mut grad;
        let mut violation;
        loop {
            for i in 0..n {
                let (_, g1, _) = p.obs(i, eta[i]);
                if !g1.is_finite() {
                    return Err(Error::NumericOverflow { eta: eta[i], row: i });
                }
                d1[i] = g1;
            }
            grad = self.gradient(&d1);
            violation = kkt_violation(&grad, &b, mask, lambda, &p.degenerate);
            if violation <= opts.kkt_tol {
                converged = true;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;

            for (k, &i) in self.crows.iter().enumerate() {
                let (_, _, h) = p.obs(i, eta[i]);
                // Negligible weights are flushed so the sweeps never touch
                // subnormal numbers.
                hc[k] = if h < CURVATURE_FLOOR { 0.0 } else { h.min(CURVATURE_CAP) / nf };
            }
            for &j in &self.cols {
                for ((w, x), h) in xh.col_mut(j).iter_mut().zip(self.xc.col(j)).zip(&hc) {
                    *w = h * x;
                }
                diag[j] = dot(xh.col(j), self.xc.col(j)).max(MIN_CURVATURE);
            }

            // A quadratic loss is its own model, so its inner solve goes
            // straight to the final tolerance.
            let inner_tol = if self.quadratic() { 0.1 * opts.kkt_tol } else { (0.05 * violation).max(0.1 * opts.kkt_tol) };
            let settled = self.inner_cd(&grad, &xh, &diag, &b, lambda, inner_tol, opts, &mut delta, &mut u);
            if !settled {
                self.face_newton(&grad, &xh, &b, lambda, &mut delta);
            }

            let new_pen: f64 = (0..d)
                .filter(|&j| mask[j])
                .map(|j| (b[j] + delta[j]).abs())
                .sum::<f64>();
            let pen_change = new_pen - self.penalty(&b);
            let descent = dot(&grad, &delta) + if pen_change == 0.0 { 0.0 } else { lambda * pen_change };
            if !(descent < 0.0) {
                break;
            }

            d_eta.iter_mut().for_each(|x| *x = 0.0);
            for &j in &self.cols {
                let dj = delta[j];
                if dj != 0.0 {
                    for (e, &x) in d_eta.iter_mut().zip(self.xs.col(j)) {
                        *e += dj * x;
                    }
                }
            }

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                for i in 0..n {
                    cand_eta[i] = eta[i] + step * d_eta[i];
                }
                let cand_b: Vec<f64> = b.iter().zip(&delta).map(|(x, y)| x + step * y).collect();
                if let Ok(fc) = self.objective(&cand_eta, &cand_b, lambda) {
                    let slack = 1e-13 * f.abs().max(1.0);
                    if fc.is_finite() && (fc <= f + 1e-4 * step * descent || (fc <= f + slack && step == 1.0)) {
                        accepted = Some((fc, cand_b));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((fc, new_b)) = accepted else {
                break;
            };
            std::mem::swap(&mut eta, &mut cand_eta);
            b = new_b;
            let decrease = f - fc;
            f = fc;
            if opts.record_trace {
                trace.push(f);
            }
            if let Some((row, &e)) = eta
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            {
                if e.abs() > ETA_DIVERGENCE || (e.abs() > ETA_GUARD && self.recedes(&eta, &b, f, lambda)) {
                    return Err(Error::NumericOverflow { eta: e, row });
                }
            }
            if decrease.abs() <= opts.stall_tol * f.abs().max(1.0) && step < 1.0 {
                break;
            }
        }

        // Steps that no longer register in floating point end the loop
        // early; that is as close as the arithmetic allows.
        if !converged && violation <= STALL_SLACK * opts.kkt_tol {
            converged = true;
        }
        let max_abs_eta = eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        if max_abs_eta > ETA_GUARD && self.recedes(&eta, &b, f, lambda) {
            let (row, &e) = eta
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("nonempty");
            return Err(Error::NumericOverflow { eta: e, row });
        }

        let coef = self.to_original(&b);
        let mut kkt_residuals = grad.clone();
        for j in 0..d {
            if p.degenerate[j] {
                kkt_residuals[j] = dot(p.design.col(j), &d1) / nf;
            }
        }
        let active_set = (0..d)
            .filter(|&j| !p.degenerate[j] && (!mask[j] || b[j] != 0.0))
            .collect();
        Ok(FitResult {
            coef,
            lambda,
            objective: f,
            iterations,
            converged,
            kkt_residuals,
            kkt_violation: violation,
            active_set,
            dropped_columns: p.degenerate_columns(),
            clamp_touched: max_abs_eta > ETA_GUARD,
            max_abs_eta,
            objective_trace: trace,
        })
    }

    /// Coordinate descent on the penalized quadratic model around `b`.
    /// Leaves the step in `delta`.
    #[allow(clippy::too_many_arguments)]
    fn inner_cd(
        &self,
        grad: &[f64],
        xh: &ColMatrix,
        diag: &[f64],
        b: &[f64],
        lambda: f64,
        tol: f64,
        opts: &SolverOptions,
        delta: &mut [f64],
        u: &mut [f64],
    ) -> bool {
        let mask = &self.p.penalty_mask;
        delta.iter_mut().for_each(|x| *x = 0.0);
        u.iter_mut().for_each(|x| *x = 0.0);

        let update = |j: usize, delta: &mut [f64], u: &mut [f64]| -> f64 {
            let col = self.xc.col(j);
            let g = grad[j] + dot(xh.col(j), u);
            let c = diag[j];
            let old = b[j] + delta[j];
            let z = old - g / c;
            let new = if mask[j] { soft_threshold(z, lambda / c) } else { z };
            let ch = new - old;
            if ch != 0.0 {
                delta[j] += ch;
                for (uu, x) in u.iter_mut().zip(col) {
                    *uu += ch * x;
                }
            }
            (ch * c).abs()
        };

        // A model that keeps moving this far has no useful minimizer; the
        // line search and divergence checks take it from here.
        let cap = if self.quadratic() { f64::INFINITY } else { 2.0 * ETA_GUARD };
        let runaway = |delta: &[f64]| delta.iter().any(|x| x.abs() > cap);
        let max_passes = opts.max_inner_passes;
        let mut passes = 0;
        loop {
            let mut max_change: f64 = 0.0;
            for &j in &self.cols {
                max_change = max_change.max(update(j, delta, u));
            }
            passes += 1;
            if max_change <= tol || passes >= max_passes || runaway(delta) {
                break;
            }
            let active: Vec<usize> = self
                .cols
                .iter()
                .copied()
                .filter(|&j| !mask[j] || b[j] + delta[j] != 0.0)
                .collect();
            loop {
                let mut m: f64 = 0.0;
                for &j in &active {
                    m = m.max(update(j, delta, u));
                }
                passes += 1;
                if m <= tol || passes >= max_passes || runaway(delta) {
                    break;
                }
            }
            if passes >= max_passes || runaway(delta) {
                break;
            }
        }
        passes < max_passes && !runaway(delta)
    }

    /// Exact minimizer of the quadratic model over the face fixed by the
    /// support and signs of `b + delta`. Replaces `delta` when the solution
    /// keeps those signs, which makes it at least as good as the
    /// coordinate-descent step.
    fn face_newton(&self, grad: &[f64], xh: &ColMatrix, b: &[f64], lambda: f64, delta: &mut [f64]) {
        let mask = &self.p.penalty_mask;
        let face: Vec<usize> = self.cols.iter().copied().filter(|&j| !mask[j] || b[j] + delta[j] != 0.0).collect();
        let k = face.len();
        if k == 0 || k > self.crows.len() {
            return;
        }
        let sign = |j: usize| if mask[j] { (b[j] + delta[j]).signum() } else { 0.0 };
        let weighted: Vec<&[f64]> = face.iter().map(|&j| xh.col(j)).collect();
        let mut h = nalgebra::DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for c in a..k {
                let v = dot(weighted[a], self.xc.col(face[c]));
                h[(a, c)] = v;
                h[(c, a)] = v;
            }
        }
        // The model is expanded at b, so the step is measured from b and
        // includes the pull of the coordinates leaving the face.
        let mut leaving = vec![0.0; self.crows.len()];
        for &j in &self.cols {
            if mask[j] && b[j] != 0.0 && b[j] + delta[j] == 0.0 {
                for (l, x) in leaving.iter_mut().zip(self.xc.col(j)) {
                    *l -= b[j] * x;
                }
            }
        }
        let rhs = nalgebra::DVector::from_iterator(
            k,
            face.iter().zip(&weighted).map(|(&j, w)| -(grad[j] + lambda * sign(j) + dot(w, &leaving))),
        );
        let Some(chol) = h.cholesky() else {
            return;
        };
        let step = chol.solve(&rhs);
        if !step.iter().all(|x| x.is_finite()) {
            return;
        }
        let consistent = face.iter().zip(step.iter()).all(|(&j, &s)| !mask[j] || (b[j] + s) * sign(j) >= 0.0);
        if consistent {
            // Coordinates off the face go to zero.
            for &j in &self.cols {
                delta[j] = -b[j];
            }
            for (&j, &s) in face.iter().zip(step.iter()) {
                delta[j] = s;
            }
        }
    }
}

/// Minimizes `loss + lambda * penalty` starting from `init` (original
/// scale; zeros when `None`).
pub fn fit_lasso(
    problem: &PenalizedProblem,
    lambda: f64,
    init: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<FitResult> {
    if !(lambda >= 0.0) {
        return Err(Error::Argument(format!("lambda must be nonnegative, got {lambda}")));
    }
    let zeros = vec![0.0; problem.ncoef()];
    let init = init.unwrap_or(&zeros);
    problem.check_coef(init)?;
    Prepared::new(problem).solve(lambda, init, opts)
}

/// Fits along a decreasing lambda sequence with warm starts.
#[derive(Debug, Clone)]
pub struct PathFit {
    pub fits: Vec<FitResult>,
    /// Index and cause of the first failed lambda; later lambdas are not
    /// attempted.
    pub failure: Option<(usize, Error)>,
}

pub fn fit_path(
    problem: &PenalizedProblem,
    lambdas: &[f64],
    init: Option<&[f64]>,
    opts: &SolverOptions,
) -> PathFit {
    let mut solver = PathSolver::new(problem, init);
    let mut fits = Vec::with_capacity(lambdas.len());
    for (k, &lambda) in lambdas.iter().enumerate() {
        match solver.step(lambda, opts) {
            Ok(fit) => fits.push(fit),
            Err(e) => return PathFit { fits, failure: Some((k, e)) },
        }
    }
    PathFit { fits, failure: None }
}

/// Incremental version of [`fit_path`]: each call to [`PathSolver::step`]
/// warm-starts from the previous solution.
pub struct PathSolver<'a> {
    prepared: Prepared<'a>,
    current: Vec<f64>,
}

impl<'a> PathSolver<'a> {
    pub fn new(problem: &'a PenalizedProblem, init: Option<&[f64]>) -> Self {
        let current = init.map(|c| c.to_vec()).unwrap_or_else(|| vec![0.0; problem.ncoef()]);
        PathSolver { prepared: Prepared::new(problem), current }
    }

    pub fn step(&mut self, lambda: f64, opts: &SolverOptions) -> Result<FitResult> {
        if !(lambda >= 0.0) {
            return Err(Error::Argument(format!("lambda must be nonnegative, got {lambda}")));
        }
        let fit = self.prepared.solve(lambda, &self.current, opts)?;
        self.current.clone_from(&fit.coef);
        Ok(fit)
    }
}

/// Smallest lambda at which every penalized coefficient is zero, padded
/// by the intercept's own convergence error so a fit at this value lands
/// on exact zeros.
pub fn lambda_max(problem: &PenalizedProblem, opts: &SolverOptions) -> Result<f64> {
    let fit = fit_lasso(problem, f64::INFINITY, None, opts)?;
    let top = fit
        .kkt_residuals
        .iter()
        .enumerate()
        .filter(|&(j, _)| problem.penalty_mask[j] && !problem.degenerate[j])
        .fold(0.0f64, |m, (_, r)| m.max(r.abs()));
    Ok(top * (1.0 + 1e-8) + opts.kkt_tol)
}

/// Geometric grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(problem: &PenalizedProblem, grid_size: usize, ratio: f64) -> Result<Vec<f64>> {
    if grid_size == 0 {
        return Err(Error::Argument("grid_size must be positive".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let top = lambda_max(problem, &SolverOptions::default())?.max(1e-10);
    if grid_size == 1 {
        return Ok(vec![top]);
    }
    let step = ratio.ln() / (grid_size - 1) as f64;
    Ok((0..grid_size).map(|k| top * (step * k as f64).exp()).collect())
}
