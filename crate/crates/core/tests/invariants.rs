//! Calibration identities of converged calibrated / weighted-likelihood
//! fits on random data, and the range property of the AIPW mean.

mod common;

use common::{random_dataset, rng};
use cste_core::cste::aipw_phi;
use cste_core::design::{build_plan, BasisSpec, PlanMode};
use cste_core::nuisance::{fit_or, fit_ps, Arm, ModelFrame, OrMethod, PsMethod};
use cste_core::optim::{kkt_report, lambda_max, Link, LossKind, PenalizedProblem, SolverOptions};
use rand::Rng;

/// Checks the intercept identity and the per-column boxes of a fit.
fn check_identities(label: &str, problem: &PenalizedProblem, coef: &[f64], lambda: f64) -> Result<(), String> {
    let kkt = kkt_report(problem, coef, lambda).map_err(|e| e.to_string())?;
    for (j, &r) in kkt.residuals.iter().enumerate() {
        if problem.degenerate_columns().contains(&j) {
            continue;
        }
        if j == 0 {
            if r.abs() > 1e-8 {
                return Err(format!("{label}: intercept residual {r:e}"));
            }
        } else if coef[j] != 0.0 {
            if (r.abs() - lambda).abs() > 1e-6 || r * coef[j] > 0.0 {
                return Err(format!("{label}: active column {j} residual {r:e} at lambda {lambda:e}"));
            }
        } else if r.abs() > lambda + 1e-8 {
            return Err(format!("{label}: zero column {j} residual {r:e} at lambda {lambda:e}"));
        }
    }
    Ok(())
}

#[test]
fn calibration_identities_hold_on_random_data() {
    let mut r = rng(101);
    let plan_of = |p| build_plan(PlanMode::ModelAssisted, &BasisSpec::binary(), p);
    let opts = SolverOptions::default();
    let (mut converged, mut total) = (0, 0);
    let mut failures = Vec::new();
    for case in 0..100 {
        let n = r.random_range(60..=300);
        let p = r.random_range(2..=100);
        let data = random_dataset(&mut r, n, p);
        let frame = ModelFrame::new(&data, &plan_of(p)).unwrap();
        for arm in [Arm::Treated, Arm::Untreated] {
            let kind = match arm {
                Arm::Treated => LossKind::CalTreated,
                Arm::Untreated => LossKind::CalUntreated,
            };
            let ps_problem =
                PenalizedProblem::new(kind, frame.designs.f.clone(), frame.t.clone(), Vec::new(), Vec::new()).unwrap();
            let lambda = lambda_max(&ps_problem, &opts).unwrap() * r.random_range(0.05..0.7);
            total += 1;
            let Ok(ps) = fit_ps(&frame, arm, PsMethod::Rcal, lambda, &opts) else { continue };
            if !ps.fit.converged {
                continue;
            }
            converged += 1;
            if let Err(e) = check_identities(&format!("case {case} ps {arm:?}"), &ps_problem, &ps.gamma, lambda) {
                failures.push(e);
            }

            let or_lambda = 0.05 + r.random_range(0.0..0.3);
            total += 1;
            let Ok(or) = fit_or(&frame, Some(&ps), arm, OrMethod::Rwl, or_lambda, Link::Identity, &opts) else {
                continue;
            };
            if !or.fit.converged {
                continue;
            }
            converged += 1;
            let w = cste_core::nuisance::rwl_weights(&ps.eta, &frame.t, arm).unwrap();
            let indicator: Vec<f64> = match arm {
                Arm::Treated => frame.t.clone(),
                Arm::Untreated => frame.t.iter().map(|t| 1.0 - t).collect(),
            };
            let or_problem = PenalizedProblem::new(
                LossKind::WeightedGlm(Link::Identity),
                frame.designs.g.clone(),
                indicator,
                frame.y.clone(),
                w,
            )
            .unwrap();
            if let Err(e) = check_identities(&format!("case {case} or {arm:?}"), &or_problem, &or.alpha, or_lambda) {
                failures.push(e);
            }

            // The weighted-mean form of the intercept identity; clamping
            // at the overlap floor breaks it and is flagged.
            let s: f64 = match arm {
                Arm::Treated => frame.t.iter().zip(&ps.fitted_pi).map(|(t, p)| t / p).sum(),
                Arm::Untreated => frame.t.iter().zip(&ps.fitted_pi).map(|(t, p)| (1.0 - t) / (1.0 - p)).sum(),
            };
            if !ps.pi_clamped && (s / n as f64 - 1.0).abs() > 1e-8 {
                failures.push(format!("case {case} {arm:?}: mean inverse weight {}", s / n as f64));
            }

            if arm == Arm::Treated {
                let phi: Vec<f64> = (0..n)
                    .map(|i| aipw_phi(frame.y[i], frame.t[i], ps.fitted_pi[i], or.fitted_m[i]).unwrap())
                    .collect();
                let mean = phi.iter().sum::<f64>() / n as f64;
                let pool: Vec<f64> =
                    (0..n).map(|i| if frame.t[i] == 1.0 { frame.y[i] } else { or.fitted_m[i] }).collect();
                let lo = pool.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = pool.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-8 * (hi - lo);
                if !(mean >= lo - slack && mean <= hi + slack) {
                    failures.push(format!("case {case}: AIPW mean {mean} outside [{lo}, {hi}]"));
                }
            }
        }
    }
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
    assert!(converged * 10 >= total * 9, "only {converged} of {total} fits converged");
}

#[test]
fn untreated_fit_is_the_mirror_of_the_treated_fit() {
    let mut r = rng(102);
    let data = random_dataset(&mut r, 250, 6);
    let plan = build_plan(PlanMode::ModelAssisted, &BasisSpec::binary(), 6);
    let ps0 = cste_core::nuisance::fit_ps_rcal_untreated(&data, &plan, 0.03).unwrap();
    let mirrored = cste_core::nuisance::fit_ps_rcal(&data.relabeled(), &plan, 0.03).unwrap();
    for (a, b) in ps0.gamma.iter().zip(&mirrored.gamma) {
        assert!((a + b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn constant_treated_outcome_is_reproduced() {
    let mut r = rng(103);
    let mut data = random_dataset(&mut r, 200, 5);
    for i in 0..200 {
        if data.t[i] == 1 {
            data.y[i] = 2.5;
        }
    }
    let plan = build_plan(PlanMode::ModelAssisted, &BasisSpec::binary(), 5);
    let ps = cste_core::nuisance::fit_ps_rcal(&data, &plan, 0.05).unwrap();
    let or = cste_core::nuisance::fit_or_rwl(&data, &plan, &ps, 0.05, Link::Identity).unwrap();
    assert!(or.alpha[1..].iter().all(|&a| a.abs() < 1e-10), "{:?}", or.alpha);
    assert!(or.fitted_m.iter().all(|&m| (m - 2.5).abs() < 1e-8));
}

#[test]
fn likelihood_propensity_is_not_calibrated() {
    // Strongly skewed treatment: the likelihood fit does not reweight the
    // treated to the full sample size.
    let mut r = rng(104);
    let n = 400;
    let v: Vec<f64> = common::normals(&mut r, n);
    let t: Vec<u8> = v
        .iter()
        .map(|&x| u8::from(r.random::<f64>() < cste_core::optim::sigmoid(-1.0 + 2.0 * x)))
        .collect();
    let data = cste_core::Dataset::new(
        vec![0.0; n],
        t,
        cste_core::ColMatrix::from_columns(n, &[vec![0.0; n]]).unwrap(),
        cste_core::ColMatrix::from_columns(n, &[v]).unwrap(),
    )
    .unwrap();
    let plan = build_plan(PlanMode::MainEffects, &BasisSpec::binary(), 1);
    let ps = cste_core::nuisance::fit_ps_rml(&data, &plan, 0.05).unwrap();
    let tf = data.treatment_f64();
    let s: f64 = tf.iter().zip(&ps.fitted_pi).map(|(t, p)| t / p).sum::<f64>() / n as f64;
    assert!((s - 1.0).abs() > 1e-3, "{s}");
}
