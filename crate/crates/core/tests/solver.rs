mod common;

use common::{curvature, random_problem, rng, KINDS};
use cste_core::optim::{
    eval_gradient, eval_loss, fit_lasso, kkt_report, lambda_grid, lambda_max, Link, LossKind, PenalizedProblem,
    SolverOptions,
};
use cste_core::ColMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn objective(p: &PenalizedProblem, coef: &[f64], lambda: f64) -> f64 {
    eval_loss(p, coef).unwrap() + lambda * p.penalty(coef)
}

#[test]
fn gradient_matches_central_differences() {
    let mut r = rng(7);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for pair in 0..1000 {
        let kind = KINDS[pair % KINDS.len()];
        let n = r.random_range(5..=50);
        let d = r.random_range(1..=10);
        let p = random_problem(&mut r, kind, n, d);
        let coef: Vec<f64> = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
        let g = eval_gradient(&p, &coef).unwrap();
        let fd: Vec<f64> = (0..d)
            .map(|j| {
                let mut up = coef.clone();
                let mut dn = coef.clone();
                up[j] += h;
                dn[j] -= h;
                (eval_loss(&p, &up).unwrap() - eval_loss(&p, &dn).unwrap()) / (2.0 * h)
            })
            .collect();
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let size = g.iter().map(|a| a.abs()).fold(1.0, f64::max);
        worst = worst.max(err / size);
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn loss_is_midpoint_convex() {
    let mut r = rng(8);
    for probe in 0..300 {
        let kind = KINDS[probe % KINDS.len()];
        let d = r.random_range(1..=6);
        let p = random_problem(&mut r, kind, 40, d);
        let a: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let (la, lb, lm) = (eval_loss(&p, &a).unwrap(), eval_loss(&p, &b).unwrap(), eval_loss(&p, &m).unwrap());
        let slack = 1e-12 * (1.0 + la.abs() + lb.abs());
        assert!(lm <= 0.5 * (la + lb) + slack, "{kind:?}: {lm} > {}", 0.5 * (la + lb));
    }
}

#[test]
fn objective_trace_is_nonincreasing() {
    let mut r = rng(9);
    let opts = SolverOptions { record_trace: true, ..SolverOptions::default() };
    for case in 0..70 {
        let kind = KINDS[case % KINDS.len()];
        let n = r.random_range(30..=120);
        let d = r.random_range(2..=30);
        let p = random_problem(&mut r, kind, n, d);
        let lmax = lambda_max(&p, &SolverOptions::default()).unwrap();
        let lambda = lmax * r.random_range(0.02..0.8);
        let fit = match fit_lasso(&p, lambda, None, &opts) {
            Ok(f) => f,
            Err(_) => continue,
        };
        assert!(!fit.objective_trace.is_empty());
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1e-300), "{kind:?}: {} -> {}", w[0], w[1]);
        }
        assert!((fit.objective - objective(&p, &fit.coef, lambda)).abs() <= 1e-12 * (1.0 + fit.objective.abs()));
    }
}

#[test]
fn converged_fits_satisfy_the_kkt_box() {
    let mut r = rng(10);
    for case in 0..140 {
        let kind = KINDS[case % KINDS.len()];
        let n = r.random_range(30..=150);
        let d = r.random_range(2..=40);
        let p = random_problem(&mut r, kind, n, d);
        let lmax = lambda_max(&p, &SolverOptions::default()).unwrap();
        let lambda = lmax * r.random_range(0.05..0.9);
        let Ok(fit) = fit_lasso(&p, lambda, None, &SolverOptions::default()) else { continue };
        if !fit.converged {
            continue;
        }
        let kkt = kkt_report(&p, &fit.coef, lambda).unwrap();
        for (j, g) in kkt.residuals.iter().enumerate() {
            if !p.penalty_mask()[j] {
                assert!(g.abs() <= 1e-6, "{kind:?} unpenalized {j}: {g:e}");
            } else {
                assert!(g.abs() <= lambda + 1e-6, "{kind:?} penalized {j}: {g:e} vs {lambda:e}");
            }
        }
    }
}

#[test]
fn fits_are_deterministic() {
    let mut r = rng(11);
    for kind in KINDS {
        let p = random_problem(&mut r, kind, 80, 12);
        let lambda = 0.3 * lambda_max(&p, &SolverOptions::default()).unwrap();
        let a = fit_lasso(&p, lambda, None, &SolverOptions::default()).unwrap();
        let b = fit_lasso(&p, lambda, None, &SolverOptions::default()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.coef), bits(&b.coef));
        assert_eq!(a.iterations, b.iterations);
    }
}

/// Minimizes a convex function on a box by repeatedly evaluating a dense
/// grid and zooming in on the best point.
fn grid_minimize(f: impl Fn(&[f64]) -> f64, d: usize, half_width: f64) -> (Vec<f64>, f64) {
    const STEPS: usize = 24;
    let mut center = vec![0.0; d];
    let mut width = half_width;
    let mut best = (center.clone(), f(&center));
    for _ in 0..30 {
        let mut idx = vec![0usize; d];
        loop {
            let x: Vec<f64> = (0..d)
                .map(|k| center[k] - width + 2.0 * width * idx[k] as f64 / STEPS as f64)
                .collect();
            let v = f(&x);
            if v < best.1 {
                best = (x, v);
            }
            let mut k = 0;
            while k < d {
                idx[k] += 1;
                if idx[k] <= STEPS {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == d {
                break;
            }
        }
        center = best.0.clone();
        width *= 0.25;
    }
    best
}

#[test]
fn small_penalized_fits_match_grid_oracle() {
    let mut r = rng(12);
    let lambda = 0.1;
    for kind in KINDS {
        let mut checked = 0;
        while checked < 3 {
            // Six observations can leave the penalized objective unbounded
            // below; the solver reports that as an overflow.
            let p = random_problem(&mut r, kind, 6, 3);
            let fit = match fit_lasso(&p, lambda, None, &SolverOptions::default()) {
                Ok(f) => f,
                Err(cste_core::Error::NumericOverflow { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            checked += 1;
            let (_, oracle) = grid_minimize(
                |c| eval_loss(&p, c).map_or(f64::INFINITY, |l| l + lambda * p.penalty(c)),
                3,
                8.0,
            );
            assert!(
                fit.objective <= oracle + 1e-4 && oracle >= fit.objective - 1e-4,
                "{kind:?}: solver {} oracle {}",
                fit.objective,
                oracle
            );
            assert!(fit.objective <= oracle + 1e-9, "{kind:?}: solver {} oracle {}", fit.objective, oracle);
        }
    }
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    assert!(f(lo) < 0.0 && f(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn at_lambda_max_only_the_intercept_moves() {
    let mut r = rng(13);
    for kind in KINDS {
        let p = random_problem(&mut r, kind, 60, 8);
        let grid = lambda_grid(&p, 50, 1e-3).unwrap();
        assert_eq!(grid.len(), 50);
        assert!(grid.iter().all(|&l| l > 0.0) && grid.windows(2).all(|w| w[1] < w[0]));
        let fit = fit_lasso(&p, grid[0], None, &SolverOptions::default()).unwrap();
        assert!(fit.coef[1..].iter().all(|&c| c == 0.0), "{kind:?}: {:?}", fit.coef);
        let slope = |b: f64| {
            let mut c = vec![0.0; 8];
            c[0] = b;
            eval_gradient(&p, &c).unwrap()[0]
        };
        let b0 = bisect(-30.0, 30.0, slope);
        assert!((fit.coef[0] - b0).abs() < 1e-6, "{kind:?}: {} vs {b0}", fit.coef[0]);
    }
}

/// Damped Newton with backtracking on the unpenalized loss.
fn newton_oracle(p: &PenalizedProblem) -> Vec<f64> {
    let (n, d) = (p.nobs(), p.ncoef());
    let x = p.design();
    let mut b = vec![0.0; d];
    for _ in 0..200 {
        let g = DVector::from_vec(eval_gradient(p, &b).unwrap());
        if g.amax() < 1e-14 {
            break;
        }
        let eta = x.matvec(&b);
        let h = DMatrix::from_fn(d, d, |j, k| {
            (0..n)
                .map(|i| {
                    let w = p.weights()[i];
                    curvature(p.kind(), p.treatment()[i], w, eta[i]) * x.get(i, j) * x.get(i, k)
                })
                .sum::<f64>()
                / n as f64
        });
        let step = h.cholesky().expect("oracle needs a positive definite Hessian").solve(&(-&g));
        let f0 = eval_loss(p, &b).unwrap();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = b.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if let Ok(f1) = eval_loss(p, &cand) {
                if f1 <= f0 + 1e-4 * t * g.dot(&step) || t < 1e-12 {
                    b = cand;
                    break;
                }
            }
            t *= 0.5;
        }
    }
    b
}

#[test]
fn unpenalized_fits_match_newton_oracle() {
    let mut r = rng(14);
    for kind in KINDS {
        for _ in 0..4 {
            let p = random_problem(&mut r, kind, 300, 4);
            let fit = fit_lasso(&p, 0.0, None, &SolverOptions::default()).unwrap();
            assert!(fit.converged);
            let oracle = newton_oracle(&p);
            let err = fit.coef.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{kind:?}: sup error {err:e}");
        }
    }
}

#[test]
fn unpenalized_weighted_identity_fit_is_wls() {
    let mut r = rng(15);
    for _ in 0..5 {
        let p = random_problem(&mut r, LossKind::WeightedGlm(Link::Identity), 200, 5);
        let fit = fit_lasso(&p, 0.0, None, &SolverOptions::default()).unwrap();
        let x = p.design();
        let a: Vec<f64> = (0..p.nobs()).map(|i| p.treatment()[i] * p.weights()[i]).collect();
        let xtwx = DMatrix::from_fn(5, 5, |j, k| (0..p.nobs()).map(|i| a[i] * x.get(i, j) * x.get(i, k)).sum());
        let xtwy = DVector::from_fn(5, |j, _| (0..p.nobs()).map(|i| a[i] * x.get(i, j) * p.response()[i]).sum());
        let beta: DVector<f64> = xtwx.lu().solve(&xtwy).unwrap();
        let err = fit.coef.iter().zip(beta.iter()).map(|(a, b): (&f64, &f64)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "sup error {err:e}");
    }
}

#[test]
fn warm_start_reaches_the_same_solution() {
    let mut r = rng(16);
    let p = random_problem(&mut r, LossKind::CalTreated, 150, 20);
    let lambda = 0.2 * lambda_max(&p, &SolverOptions::default()).unwrap();
    let cold = fit_lasso(&p, lambda, None, &SolverOptions::default()).unwrap();
    let init: Vec<f64> = (0..20).map(|j| if j == 0 { 0.3 } else { 0.05 }).collect();
    let warm = fit_lasso(&p, lambda, Some(&init), &SolverOptions::default()).unwrap();
    assert!((cold.objective - warm.objective).abs() < 1e-10);
    let err = cold.coef.iter().zip(&warm.coef).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn unit_design_scaling_keeps_the_penalized_fit() {
    // Standardization makes the fit equivariant to column rescaling.
    let mut r = rng(17);
    let p = random_problem(&mut r, LossKind::MlLogistic, 120, 6);
    let lambda = 0.1 * lambda_max(&p, &SolverOptions::default()).unwrap();
    let fit = fit_lasso(&p, lambda, None, &SolverOptions::default()).unwrap();
    let x = p.design();
    let scales = [1.0, 3.0, 0.5, 10.0, 0.1, 2.0];
    let cols: Vec<Vec<f64>> = (0..6).map(|j| x.col(j).iter().map(|v| v * scales[j]).collect()).collect();
    let q = PenalizedProblem::new(
        LossKind::MlLogistic,
        ColMatrix::from_columns(120, &cols).unwrap(),
        p.treatment().to_vec(),
        Vec::new(),
        Vec::new(),
    )
    .unwrap();
    let fit2 = fit_lasso(&q, lambda, None, &SolverOptions::default()).unwrap();
    for j in 0..6 {
        assert!((fit.coef[j] - fit2.coef[j] * scales[j]).abs() < 1e-6, "column {j}");
    }
}
