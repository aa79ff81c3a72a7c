#![allow(dead_code)]

use cste_core::optim::{sigmoid, Link, LossKind, PenalizedProblem};
use cste_core::{ColMatrix, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub const KINDS: [LossKind; 7] = [
    LossKind::CalTreated,
    LossKind::CalUntreated,
    LossKind::MlLogistic,
    LossKind::WeightedGlm(Link::Identity),
    LossKind::WeightedGlm(Link::Logistic),
    LossKind::MlGlm(Link::Identity),
    LossKind::MlGlm(Link::Logistic),
];

/// Design with an intercept and `d - 1` Gaussian columns, treatment with
/// both arms present, response suited to the loss.
pub fn random_problem(rng: &mut ChaCha8Rng, kind: LossKind, n: usize, d: usize) -> PenalizedProblem {
    let mut cols = vec![vec![1.0; n]];
    for _ in 1..d {
        let scale = rng.random_range(0.5..3.0);
        let shift = rng.random_range(-1.0..1.0);
        cols.push(normals(rng, n).into_iter().map(|x| shift + scale * x).collect());
    }
    let mut t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.5))).collect();
    t[0] = 1.0;
    t[1] = 0.0;
    let response: Vec<f64> = match kind {
        LossKind::WeightedGlm(Link::Logistic) | LossKind::MlGlm(Link::Logistic) => {
            (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.4))).collect()
        }
        _ => normals(rng, n),
    };
    let weights: Vec<f64> = match kind {
        LossKind::WeightedGlm(_) => (0..n).map(|_| rng.random_range(0.2..4.0)).collect(),
        _ => Vec::new(),
    };
    PenalizedProblem::new(kind, ColMatrix::from_columns(n, &cols).unwrap(), t, response, weights).unwrap()
}

/// Binary Z, Gaussian V with a logistic propensity in `V1, V2, Z` and a
/// linear outcome.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
    let v: Vec<Vec<f64>> = (0..p).map(|_| normals(rng, n)).collect();
    let z: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.5))).collect();
    let a = rng.random_range(-0.8..0.8);
    let b = rng.random_range(-0.8..0.8);
    let t: Vec<u8> = (0..n)
        .map(|i| {
            let v2 = if p > 1 { v[1][i] } else { 0.0 };
            let pi = sigmoid(0.2 + a * v[0][i] + b * v2 - 0.4 * z[i]);
            u8::from(rng.random::<f64>() < pi)
        })
        .collect();
    let e = normals(rng, n);
    let y: Vec<f64> = (0..n).map(|i| 1.0 + z[i] + v[0][i] - 0.5 * v[p - 1][i] + e[i]).collect();
    Dataset::new(y, t, ColMatrix::from_columns(n, &[z]).unwrap(), ColMatrix::from_columns(n, &v).unwrap()).unwrap()
}

/// Per-observation second derivative of each loss in the linear predictor.
pub fn curvature(kind: LossKind, t: f64, w: f64, eta: f64) -> f64 {
    match kind {
        LossKind::CalTreated => t * (-eta).exp(),
        LossKind::CalUntreated => (1.0 - t) * eta.exp(),
        LossKind::MlLogistic => sigmoid(eta) * (1.0 - sigmoid(eta)),
        LossKind::WeightedGlm(link) | LossKind::MlGlm(link) => {
            let a = t * w;
            match link {
                Link::Identity => a,
                Link::Logistic => a * sigmoid(eta) * (1.0 - sigmoid(eta)),
            }
        }
    }
}
