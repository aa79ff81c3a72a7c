mod common;

use common::rng;
use cste_core::design::{full_spline_basis, phi_dag, quantile_knots, spline_basis, BasisSpec};
use nalgebra::DMatrix;
use rand::Rng;

/// Cox-de Boor recursion on the clamped knot vector, written from the
/// definition with the right-closed convention at the upper boundary.
fn cox_de_boor(x: f64, knots: &[f64], lower: f64, upper: f64) -> Vec<f64> {
    let mut t = vec![lower; 4];
    t.extend_from_slice(knots);
    t.extend(std::iter::repeat(upper).take(4));
    let m = t.len() - 1;
    let mut b: Vec<f64> = (0..m)
        .map(|i| {
            let inside = t[i] <= x && x < t[i + 1];
            let last = x == upper && t[i] < t[i + 1] && t[i + 1] == upper;
            if inside || last {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for k in 1..=3 {
        b = (0..m - k)
            .map(|i| {
                let left = if t[i + k] > t[i] { (x - t[i]) / (t[i + k] - t[i]) * b[i] } else { 0.0 };
                let right =
                    if t[i + k + 1] > t[i + 1] { (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * b[i + 1] } else { 0.0 };
                left + right
            })
            .collect();
    }
    b
}

#[test]
fn spline_values_match_cox_de_boor() {
    let mut r = rng(501);
    for _ in 0..200 {
        let num = r.random_range(1..=8);
        let mut knots: Vec<f64> = (0..num).map(|_| r.random_range(-0.45..0.45)).collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let x = r.random_range(-0.5..=0.5);
        let (got, clamped) = full_spline_basis(x, &knots, -0.5, 0.5).unwrap();
        assert!(!clamped);
        let want = cox_de_boor(x, &knots, -0.5, 0.5);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "x={x} knots={knots:?}: {got:?} vs {want:?}");
        }
    }
    for x in [-0.5, 0.5] {
        let (got, _) = full_spline_basis(x, &[-0.1, 0.2], -0.5, 0.5).unwrap();
        let want = cox_de_boor(x, &[-0.1, 0.2], -0.5, 0.5);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn three_knots_give_six_columns_and_clamp_outside() {
    let knots = [-0.25, 0.0, 0.25];
    assert_eq!(spline_basis(0.1, &knots, -0.5, 0.5).unwrap().0.len(), 6);
    let (inside, _) = spline_basis(0.5, &knots, -0.5, 0.5).unwrap();
    let (outside, flagged) = spline_basis(0.9, &knots, -0.5, 0.5).unwrap();
    assert!(flagged);
    assert_eq!(inside, outside);
}

#[test]
fn spline_columns_are_continuous() {
    let knots = [-0.3, -0.1, 0.05, 0.3];
    let eval = |x: f64| full_spline_basis(x, &knots, -0.5, 0.5).unwrap().0;
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for &k in &knots {
        assert!(gap(&eval(k - 1e-10), &eval(k + 1e-10)) < 1e-6, "jump at knot {k}");
    }
    // Away from the knots the basis is Lipschitz with constant below 3 / min spacing.
    let h = 1e-8;
    let mut x = -0.5;
    while x + h <= 0.5 {
        assert!(gap(&eval(x), &eval(x + h)) < 1e-6, "jump near {x}");
        x += 9973.0 * h;
    }
}

/// The `(n + 1) p` plotting-position quantile by sorting and indexing.
fn sorted_quantile(z: &[f64], p: f64) -> f64 {
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() as f64 + 1.0) * p;
    let k = h.floor() as usize;
    s[k - 1] + (h - k as f64) * (s[k] - s[k - 1])
}

#[test]
fn knots_match_sort_and_index_quantiles() {
    let mut r = rng(502);
    let z: Vec<f64> = (0..200).map(|_| r.random_range(-0.5..0.5)).collect();
    let knots = quantile_knots(&z, 3).unwrap();
    for (k, p) in knots.iter().zip([0.25, 0.5, 0.75]) {
        assert_eq!(*k, sorted_quantile(&z, p));
    }
    let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let q = quantile_knots(&grid, 3).unwrap();
    for (a, b) in q.iter().zip([0.25, 0.5, 0.75]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(quantile_knots(&[1.0, 1.0, 2.0, 2.0], 3).is_err());
}

#[test]
fn discrete_bases_are_saturated() {
    let bases = vec![
        BasisSpec::binary(),
        BasisSpec::multi_binary(2).unwrap(),
        BasisSpec::multi_binary(3).unwrap(),
        BasisSpec::categorical(&[0.0, 1.0, 2.0, 2.0, 1.0, 2.0]).unwrap(),
    ];
    for b in bases {
        let support = b.support().expect("discrete basis has a finite support");
        let rows: Vec<Vec<f64>> = support.iter().map(|z| phi_dag(z, &b).unwrap()).collect();
        let k = rows[0].len();
        assert_eq!(rows.len(), k, "{b:?}");
        let m = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
        assert!(m.determinant().abs() > 1e-8, "{b:?}");
    }
}
