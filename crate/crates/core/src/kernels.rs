//! Local-constant kernel competitors: regression of IPW, outcome-model and
//! AIPW values on a scalar Z, with optional cross-fitted nuisances.

use serde::{Deserialize, Serialize};

use crate::cste::aipw_phi;
use crate::data::Dataset;
use crate::design::RegressorPlan;
use crate::error::{Error, Result};
use crate::nuisance::{cv_lambda_frame, fit_or, fit_ps, stratified_folds, Arm, CvModel, CvOptions, ModelFrame, OrMethod, PsMethod};
use crate::optim::{Link, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub kernel: Kernel,
    /// 1 means nuisances are fitted on the full sample.
    pub crossfit_folds: usize,
    pub seed: u64,
}

impl KernelConfig {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Argument(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelConfig { bandwidth, kernel: Kernel::Gaussian, crossfit_folds: 1, seed: 0 })
    }
}

/// Normalized kernel weights at `z0`.
pub fn kernel_weights(z0: f64, z: &[f64], cfg: &KernelConfig) -> Result<Vec<f64>> {
    let h = cfg.bandwidth;
    let mut w: Vec<f64> = z
        .iter()
        .map(|&zi| {
            let u = (zi - z0) / h;
            match cfg.kernel {
                Kernel::Gaussian => (-0.5 * u * u).exp(),
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptyNeighborhood { z0 });
    }
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

pub fn local_constant(z0: f64, z: &[f64], values: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if z.len() != values.len() {
        return Err(Error::Argument("z and values differ in length".into()));
    }
    let w = kernel_weights(z0, z, cfg)?;
    Ok(w.iter().zip(values).map(|(a, b)| a * b).sum())
}

/// Rule-of-thumb bandwidth `1.06 sd(z) n^{-1/5}`, undersmoothed by the
/// factor `n^{1/5} n^{-2/7}`.
pub fn bandwidth_rule(z: &[f64]) -> Result<f64> {
    let n = z.len();
    if n < 10 {
        return Err(Error::Argument(format!("bandwidth rule needs at least 10 points, got {n}")));
    }
    let nf = n as f64;
    let mean = z.iter().sum::<f64>() / nf;
    let sd = (z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateData("z has zero variance".into()));
    }
    let base = 1.06 * sd * nf.powf(-0.2);
    Ok(base * nf.powf(0.2) * nf.powf(-2.0 / 7.0))
}

fn single_z(data: &Dataset) -> Result<&[f64]> {
    if data.z.ncols() != 1 {
        return Err(Error::Argument("kernel estimators need exactly one Z column".into()));
    }
    Ok(data.z.col(0))
}

/// Local-constant regression of the AIPW values on Z, with the
/// kernel-weighted variance `sum w_i^2 (phi_i - mu)^2`.
pub fn aipw_kernel(z0: f64, data: &Dataset, m_hat: &[f64], pi_hat: &[f64], cfg: &KernelConfig) -> Result<(f64, f64)> {
    let z = single_z(data)?;
    let phi = (0..data.len())
        .map(|i| aipw_phi(data.y[i], data.t[i] as f64, pi_hat[i], m_hat[i]))
        .collect::<Result<Vec<_>>>()?;
    kernel_mean_and_variance(z0, z, &phi, cfg)
}

pub fn kernel_mean_and_variance(z0: f64, z: &[f64], values: &[f64], cfg: &KernelConfig) -> Result<(f64, f64)> {
    let w = kernel_weights(z0, z, cfg)?;
    let mu: f64 = w.iter().zip(values).map(|(a, b)| a * b).sum();
    let var = w.iter().zip(values).map(|(a, b)| a * a * (b - mu) * (b - mu)).sum();
    Ok((mu, var))
}

pub fn ipw_kernel(z0: f64, data: &Dataset, pi_hat: &[f64], cfg: &KernelConfig) -> Result<f64> {
    let z = single_z(data)?;
    let values: Vec<f64> = (0..data.len()).map(|i| data.t[i] as f64 * data.y[i] / pi_hat[i]).collect();
    local_constant(z0, z, &values, cfg)
}

pub fn or_kernel(z0: f64, data: &Dataset, m_hat: &[f64], cfg: &KernelConfig) -> Result<f64> {
    local_constant(z0, single_z(data)?, m_hat, cfg)
}

/// Nuisance predictions `(pi, m)` for held-out rows from a model trained
/// on other rows.
pub trait NuisanceLearner {
    fn fit_predict(&self, train: &[usize], test: &[usize]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Cross-fitted nuisance values plus the fold bookkeeping.
#[derive(Debug, Clone)]
pub struct CrossFit {
    pub pi: Vec<f64>,
    pub m: Vec<f64>,
    pub fold_of: Vec<usize>,
    /// Training rows used for each fold.
    pub train_rows: Vec<Vec<usize>>,
}

/// With `folds == 1` the learner is trained and evaluated on every row.
pub fn crossfit(t: &[f64], folds: usize, seed: u64, learner: &dyn NuisanceLearner) -> Result<CrossFit> {
    let n = t.len();
    if folds == 0 {
        return Err(Error::Argument("folds must be at least 1".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    if folds == 1 {
        let (pi, m) = learner.fit_predict(&all, &all)?;
        return Ok(CrossFit { pi, m, fold_of: vec![0; n], train_rows: vec![all] });
    }
    let fold_of = stratified_folds(t, folds, seed);
    let mut pi = vec![f64::NAN; n];
    let mut m = vec![f64::NAN; n];
    let mut train_rows = Vec::with_capacity(folds);
    for k in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
        let (p, mm) = learner.fit_predict(&train, &test)?;
        for (j, &i) in test.iter().enumerate() {
            pi[i] = p[j];
            m[i] = mm[j];
        }
        train_rows.push(train);
    }
    Ok(CrossFit { pi, m, fold_of, train_rows })
}

/// Penalized maximum-likelihood nuisances with cross-validated penalties.
pub struct RmlLearner<'a> {
    pub data: &'a Dataset,
    pub plan: &'a RegressorPlan,
    pub link: Link,
    pub cv: CvOptions,
    pub solver: SolverOptions,
}

impl NuisanceLearner for RmlLearner<'_> {
    fn fit_predict(&self, train: &[usize], test: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let frame = ModelFrame::new(&self.data.select_rows(train), self.plan)?;
        let ps_cv = cv_lambda_frame(&frame, CvModel::Ps { arm: Arm::Treated, method: PsMethod::Rml }, self.link, &self.cv)?;
        let ps = fit_ps(&frame, Arm::Treated, PsMethod::Rml, ps_cv.chosen_lambda, &self.solver)?;
        let or_cv = cv_lambda_frame(&frame, CvModel::OrRml { arm: Arm::Treated }, self.link, &self.cv)?;
        let or = fit_or(&frame, None, Arm::Treated, OrMethod::Rml, or_cv.chosen_lambda, self.link, &self.solver)?;
        let test_frame = ModelFrame::new(&self.data.select_rows(test), self.plan)?;
        let pi = test_frame
            .designs
            .f
            .matvec(&ps.gamma)
            .into_iter()
            .map(|e| crate::optim::sigmoid(e).clamp(crate::nuisance::PI_FLOOR, 1.0 - crate::nuisance::PI_FLOOR))
            .collect();
        let m = test_frame.designs.g.matvec(&or.alpha).into_iter().map(|e| self.link.inverse(e)).collect();
        Ok((pi, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: f64) -> KernelConfig {
        KernelConfig::new(h).unwrap()
    }

    #[test]
    fn constant_values_reproduce() {
        let z = [0.1, -0.3, 0.25, 0.4];
        assert!((local_constant(0.0, &z, &[2.5; 4], &cfg(0.1)).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn huge_bandwidth_gives_sample_mean() {
        let z: [f64; 5] = [0.1, -0.3, 0.25, 0.4, 0.0];
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert!((local_constant(0.2, &z, &v, &cfg(1e6)).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn direct_summation() {
        let z: [f64; 5] = [0.1, -0.3, 0.25, 0.4, 0.0];
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        let h = 0.2f64;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..5 {
            let k = (-0.5 * ((z[i] - 0.05) / h).powi(2)).exp();
            num += k * v[i];
            den += k;
        }
        assert!((local_constant(0.05, &z, &v, &cfg(h)).unwrap() - num / den).abs() < 1e-12);
        let w = kernel_weights(0.05, &z, &cfg(h)).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15 && w.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn far_point_is_empty() {
        assert!(matches!(
            local_constant(1e3, &[0.0, 0.1], &[1.0, 2.0], &cfg(0.01)),
            Err(Error::EmptyNeighborhood { .. })
        ));
    }

    #[test]
    fn bandwidth_scales_and_shrinks() {
        let z: Vec<f64> = (0..40).map(|i| ((i * 37) % 40) as f64 / 40.0 - 0.5).collect();
        let h = bandwidth_rule(&z).unwrap();
        let zs: Vec<f64> = z.iter().map(|x| 3.0 * x).collect();
        assert!((bandwidth_rule(&zs).unwrap() - 3.0 * h).abs() < 1e-12);
        assert!(bandwidth_rule(&[1.0; 20]).is_err());
    }
}
