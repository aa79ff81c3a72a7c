//! Basis functions of the conditioning covariates and the regressor
//! vectors built from them.
//!
//! Columns are described symbolically: a [`ColumnExpr`] is a product of
//! atoms, each atom an auxiliary covariate `V_i`, a raw `Z_j`, or a primitive
//! basis factor `Phi_k`. Basis components themselves are products of
//! primitives (a saturated two-binary basis has primitives `z1`, `z2` and
//! components `z1`, `z2`, `z1 z2`), which is what lets `z1 * z1z2` reduce
//! to `z1z2` and be recognized as a duplicate.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::ColMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Atom {
    V(usize),
    /// Raw value of Z column `j`.
    Z(usize),
    Phi(usize),
}

/// Product of atoms in canonical (sorted) order. The empty product is the
/// constant column.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnExpr {
    atoms: Vec<Atom>,
}

impl ColumnExpr {
    pub fn constant() -> Self {
        ColumnExpr { atoms: Vec::new() }
    }

    pub fn v(i: usize) -> Self {
        ColumnExpr { atoms: vec![Atom::V(i)] }
    }

    pub fn from_atoms(mut atoms: Vec<Atom>) -> Self {
        atoms.sort();
        ColumnExpr { atoms }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn is_constant(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Value of the product given primitive values and the `z`, `v` rows.
    pub fn eval(&self, prim: &[f64], z: &[f64], v: &[f64]) -> f64 {
        self.atoms.iter().fold(1.0, |acc, a| {
            acc * match *a {
                Atom::V(i) => v[i],
                Atom::Z(j) => z[j],
                Atom::Phi(k) => prim[k],
            }
        })
    }
}

impl fmt::Display for ColumnExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.atoms.is_empty() {
            return write!(f, "1");
        }
        for (k, a) in self.atoms.iter().enumerate() {
            if k > 0 {
                write!(f, "*")?;
            }
            match a {
                Atom::V(i) => write!(f, "V{}", i + 1)?,
                Atom::Z(j) => write!(f, "Z{}", j + 1)?,
                Atom::Phi(j) => write!(f, "Phi{}", j + 1)?,
            }
        }
        Ok(())
    }
}

/// Algebraic behaviour of a primitive factor under multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveRule {
    /// `x * x = x` (0/1 indicators).
    Idempotent,
    /// Idempotent, and the product with another member of the same group
    /// vanishes (dummies of one categorical variable).
    Exclusive(usize),
    /// No reduction (spline values).
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisKind {
    /// One 0/1 covariate; `Phi(z) = z`.
    BinarySaturated,
    /// One categorical covariate; one dummy per non-reference level.
    CategoricalDummies { levels: Vec<f64>, reference: f64 },
    /// `q` binary covariates with all interactions.
    MultiBinarySaturated { num_z: usize },
    /// Cubic B-splines with the first column dropped.
    CubicSpline { knots: Vec<f64>, lower: f64, upper: f64 },
    /// A discrete basis on the leading Z columns, a spline on the last one,
    /// and their products.
    Mixed { discrete: Box<BasisKind>, spline: Box<BasisKind> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// `K`, the length of `Phi(z)`.
    pub dim: usize,
}

impl BasisSpec {
    fn from_kind(kind: BasisKind) -> Result<Self> {
        let dim = components_of(&kind).len();
        if dim == 0 {
            return Err(Error::Argument("basis must have at least one component".into()));
        }
        Ok(BasisSpec { kind, dim })
    }

    pub fn binary() -> Self {
        BasisSpec { kind: BasisKind::BinarySaturated, dim: 1 }
    }

    pub fn multi_binary(num_z: usize) -> Result<Self> {
        if num_z == 0 || num_z > 16 {
            return Err(Error::Argument(format!("multi-binary basis needs 1..=16 columns, got {num_z}")));
        }
        Self::from_kind(BasisKind::MultiBinarySaturated { num_z })
    }

    /// Dummies for the observed levels of `z`; the most frequent level
    /// (smallest on ties) is the reference.
    pub fn categorical(z: &[f64]) -> Result<Self> {
        let mut counts: BTreeMap<OrdF64, usize> = BTreeMap::new();
        for &x in z {
            if !x.is_finite() {
                return Err(Error::Data("non-finite categorical value".into()));
            }
            *counts.entry(OrdF64(x)).or_default() += 1;
        }
        if counts.len() < 2 {
            return Err(Error::DegenerateData("categorical covariate has fewer than two levels".into()));
        }
        let mut reference = f64::NAN;
        let mut best = 0;
        for (k, &c) in &counts {
            if c > best {
                best = c;
                reference = k.0;
            }
        }
        let levels = counts.keys().map(|k| k.0).collect();
        Self::from_kind(BasisKind::CategoricalDummies { levels, reference })
    }

    pub fn categorical_with_levels(levels: Vec<f64>, reference: f64) -> Result<Self> {
        let mut sorted = levels.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() != levels.len() || sorted.len() < 2 || !sorted.contains(&reference) {
            return Err(Error::Argument("categorical levels must be distinct, at least two, and include the reference".into()));
        }
        Self::from_kind(BasisKind::CategoricalDummies { levels: sorted, reference })
    }

    /// Spline with `num_knots` quantile knots and boundary knots at the
    /// range of `z`.
    pub fn cubic_spline(z: &[f64], num_knots: usize) -> Result<Self> {
        let knots = quantile_knots(z, num_knots)?;
        let (lower, upper) = range(z);
        Self::cubic_spline_with_knots(knots, lower, upper)
    }

    pub fn cubic_spline_with_knots(knots: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Argument(format!("boundary knots must satisfy lower < upper ({lower}, {upper})")));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Argument("interior knots must be strictly increasing".into()));
        }
        if knots.iter().any(|&k| !(k > lower && k < upper)) {
            return Err(Error::Argument("interior knots must lie strictly inside the boundary".into()));
        }
        Self::from_kind(BasisKind::CubicSpline { knots, lower, upper })
    }

    pub fn mixed(discrete: BasisSpec, spline: BasisSpec) -> Result<Self> {
        if !discrete.is_discrete() {
            return Err(Error::Argument("mixed basis needs a discrete first part".into()));
        }
        if !matches!(spline.kind, BasisKind::CubicSpline { .. }) {
            return Err(Error::Argument("mixed basis needs a spline second part".into()));
        }
        Self::from_kind(BasisKind::Mixed { discrete: Box::new(discrete.kind), spline: Box::new(spline.kind) })
    }

    pub fn is_discrete(&self) -> bool {
        kind_is_discrete(&self.kind)
    }

    /// Number of Z columns consumed.
    pub fn num_z(&self) -> usize {
        kind_num_z(&self.kind)
    }

    pub fn rules(&self) -> Vec<PrimitiveRule> {
        rules_of(&self.kind)
    }

    pub fn num_primitives(&self) -> usize {
        self.rules().len()
    }

    /// `Phi(z)` as products of primitives.
    pub fn components(&self) -> Vec<ColumnExpr> {
        components_of(&self.kind)
    }

    /// Values of the primitive factors at `z`. The flag is set when a
    /// spline argument had to be clamped into the boundary knots.
    pub fn primitives(&self, z: &[f64]) -> Result<(Vec<f64>, bool)> {
        if z.len() != self.num_z() {
            return Err(Error::Argument(format!("basis expects {} z values, got {}", self.num_z(), z.len())));
        }
        let mut out = Vec::with_capacity(self.num_primitives());
        let clamped = push_primitives(&self.kind, z, &mut out)?;
        Ok((out, clamped))
    }

    /// `Phi(z)`.
    pub fn phi(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (prim, _) = self.primitives(z)?;
        Ok(self.components().iter().map(|c| c.eval(&prim, z, &[])).collect())
    }

    /// Support points of a discrete basis in a fixed order.
    pub fn support(&self) -> Option<Vec<Vec<f64>>> {
        support_of(&self.kind)
    }
}

/// `(1, Phi(z)')'`.
pub fn phi_dag(z: &[f64], basis: &BasisSpec) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(basis.dim + 1);
    out.push(1.0);
    out.extend(basis.phi(z)?);
    Ok(out)
}

/// `Phi_dag` rows for every observation, `n x (K + 1)`.
pub fn phi_dag_matrix(z: &ColMatrix, basis: &BasisSpec) -> Result<(ColMatrix, bool)> {
    let n = z.nrows();
    let comps = basis.components();
    let mut out = ColMatrix::zeros(n, comps.len() + 1);
    let mut any_clamped = false;
    for i in 0..n {
        let zi = z.row(i);
        let (prim, clamped) = basis.primitives(&zi)?;
        any_clamped |= clamped;
        out.set(i, 0, 1.0);
        for (k, c) in comps.iter().enumerate() {
            out.set(i, k + 1, c.eval(&prim, &[], &[]));
        }
    }
    Ok((out, any_clamped))
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn range(z: &[f64]) -> (f64, f64) {
    z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn kind_is_discrete(kind: &BasisKind) -> bool {
    matches!(
        kind,
        BasisKind::BinarySaturated | BasisKind::CategoricalDummies { .. } | BasisKind::MultiBinarySaturated { .. }
    )
}

fn kind_num_z(kind: &BasisKind) -> usize {
    match kind {
        BasisKind::BinarySaturated | BasisKind::CategoricalDummies { .. } | BasisKind::CubicSpline { .. } => 1,
        BasisKind::MultiBinarySaturated { num_z } => *num_z,
        BasisKind::Mixed { discrete, spline } => kind_num_z(discrete) + kind_num_z(spline),
    }
}

fn rules_of(kind: &BasisKind) -> Vec<PrimitiveRule> {
    match kind {
        BasisKind::BinarySaturated => vec![PrimitiveRule::Idempotent],
        BasisKind::CategoricalDummies { levels, .. } => vec![PrimitiveRule::Exclusive(0); levels.len() - 1],
        BasisKind::MultiBinarySaturated { num_z } => vec![PrimitiveRule::Idempotent; *num_z],
        BasisKind::CubicSpline { knots, .. } => vec![PrimitiveRule::Plain; knots.len() + 3],
        BasisKind::Mixed { discrete, spline } => {
            let mut r = rules_of(discrete);
            r.extend(rules_of(spline));
            r
        }
    }
}

fn components_of(kind: &BasisKind) -> Vec<ColumnExpr> {
    let single = |k: usize| ColumnExpr { atoms: vec![Atom::Phi(k)] };
    match kind {
        BasisKind::BinarySaturated => vec![single(0)],
        BasisKind::CategoricalDummies { levels, .. } => (0..levels.len() - 1).map(single).collect(),
        BasisKind::CubicSpline { knots, .. } => (0..knots.len() + 3).map(single).collect(),
        BasisKind::MultiBinarySaturated { num_z } => {
            let q = *num_z;
            let mut subsets: Vec<Vec<usize>> = (1u32..(1 << q))
                .map(|mask| (0..q).filter(|&j| mask & (1 << j) != 0).collect())
                .collect();
            subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
            subsets
                .into_iter()
                .map(|s| ColumnExpr { atoms: s.into_iter().map(Atom::Phi).collect() })
                .collect()
        }
        BasisKind::Mixed { discrete, spline } => {
            let d = components_of(discrete);
            let offset = rules_of(discrete).len();
            let s: Vec<ColumnExpr> = components_of(spline)
                .into_iter()
                .map(|c| ColumnExpr::from_atoms(c.atoms.iter().map(|a| shift(*a, offset)).collect()))
                .collect();
            let mut out = d.clone();
            out.extend(s.iter().cloned());
            for dc in &d {
                for sc in &s {
                    let mut atoms = dc.atoms.clone();
                    atoms.extend(sc.atoms.iter().copied());
                    out.push(ColumnExpr::from_atoms(atoms));
                }
            }
            out
        }
    }
}

fn shift(a: Atom, offset: usize) -> Atom {
    match a {
        Atom::Phi(k) => Atom::Phi(k + offset),
        v => v,
    }
}

fn push_primitives(kind: &BasisKind, z: &[f64], out: &mut Vec<f64>) -> Result<bool> {
    match kind {
        BasisKind::BinarySaturated => {
            out.push(binary_value(z[0])?);
            Ok(false)
        }
        BasisKind::MultiBinarySaturated { num_z } => {
            for &x in &z[..*num_z] {
                out.push(binary_value(x)?);
            }
            Ok(false)
        }
        BasisKind::CategoricalDummies { levels, reference } => {
            let x = z[0];
            if !levels.contains(&x) {
                return Err(Error::UnknownLevel(x));
            }
            out.extend(levels.iter().filter(|&&l| l != *reference).map(|&l| if l == x { 1.0 } else { 0.0 }));
            Ok(false)
        }
        BasisKind::CubicSpline { knots, lower, upper } => {
            let (vals, clamped) = spline_basis(z[0], knots, *lower, *upper)?;
            out.extend(vals);
            Ok(clamped)
        }
        BasisKind::Mixed { discrete, spline } => {
            let nd = kind_num_z(discrete);
            let a = push_primitives(discrete, &z[..nd], out)?;
            let b = push_primitives(spline, &z[nd..], out)?;
            Ok(a || b)
        }
    }
}

fn binary_value(x: f64) -> Result<f64> {
    if x == 0.0 || x == 1.0 {
        Ok(x)
    } else {
        Err(Error::UnknownLevel(x))
    }
}

fn support_of(kind: &BasisKind) -> Option<Vec<Vec<f64>>> {
    match kind {
        BasisKind::BinarySaturated => Some(vec![vec![0.0], vec![1.0]]),
        BasisKind::CategoricalDummies { levels, .. } => Some(levels.iter().map(|&l| vec![l]).collect()),
        BasisKind::MultiBinarySaturated { num_z } => Some(
            (0u32..(1 << num_z))
                .map(|mask| (0..*num_z).map(|j| if mask & (1 << j) != 0 { 1.0 } else { 0.0 }).collect())
                .collect(),
        ),
        _ => None,
    }
}

/// Sample quantiles at levels `k / (num_knots + 1)`, using the
/// `(n + 1) p` plotting position with linear interpolation.
pub fn quantile_knots(z: &[f64], num_knots: usize) -> Result<Vec<f64>> {
    if num_knots == 0 {
        return Err(Error::Argument("num_knots must be positive".into()));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite z value".into()));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < num_knots + 2 {
        return Err(Error::DegenerateData(format!(
            "{} distinct z values cannot support {num_knots} interior knots",
            distinct.len()
        )));
    }
    let n = sorted.len();
    let knots: Vec<f64> = (1..=num_knots)
        .map(|k| {
            let p = k as f64 / (num_knots + 1) as f64;
            let h = (n as f64 + 1.0) * p;
            let lo = h.floor();
            if lo < 1.0 {
                sorted[0]
            } else if lo as usize >= n {
                sorted[n - 1]
            } else {
                let i = lo as usize - 1;
                sorted[i] + (h - lo) * (sorted[i + 1] - sorted[i])
            }
        })
        .collect();
    let (lower, upper) = (sorted[0], sorted[n - 1]);
    if knots.windows(2).any(|w| !(w[0] < w[1])) || knots.iter().any(|&k| !(k > lower && k < upper)) {
        return Err(Error::DegenerateData("quantile knots are tied or on the boundary".into()));
    }
    Ok(knots)
}

/// Full cubic B-spline basis (`num_knots + 4` values) on the clamped knot
/// vector. Returns the clamp flag alongside.
pub fn full_spline_basis(z: f64, knots: &[f64], lower: f64, upper: f64) -> Result<(Vec<f64>, bool)> {
    const P: usize = 3;
    if !z.is_finite() {
        return Err(Error::Data("non-finite z value".into()));
    }
    let clamped = z < lower || z > upper;
    let x = z.clamp(lower, upper);
    let mut t = Vec::with_capacity(knots.len() + 2 * (P + 1));
    t.extend(std::iter::repeat(lower).take(P + 1));
    t.extend_from_slice(knots);
    t.extend(std::iter::repeat(upper).take(P + 1));
    let nbasis = knots.len() + P + 1;

    // Knot span index s with t[s] <= x < t[s + 1]; the right end belongs
    // to the last span.
    let span = if x >= upper {
        nbasis - 1
    } else {
        let mut s = P;
        while s < nbasis - 1 && x >= t[s + 1] {
            s += 1;
        }
        s
    };

    let mut n = [0.0; P + 1];
    let mut left = [0.0; P + 1];
    let mut right = [0.0; P + 1];
    n[0] = 1.0;
    for j in 1..=P {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    let mut out = vec![0.0; nbasis];
    for (r, &v) in n.iter().enumerate() {
        out[span - P + r] = v;
    }
    Ok((out, clamped))
}

/// Cubic B-spline values with the first basis function dropped, so the
/// constant is not in the span: length `num_knots + 3`.
pub fn spline_basis(z: f64, knots: &[f64], lower: f64, upper: f64) -> Result<(Vec<f64>, bool)> {
    let (mut full, clamped) = full_spline_basis(z, knots, lower, upper)?;
    full.remove(0);
    Ok((full, clamped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// `f = (1, V, Phi)`, `g = f` augmented by `f x Phi`.
    ModelAssisted,
    /// `f = (1, V, Phi, V x Phi)`, `g` as above.
    DoublyRobust,
    /// `f = g = (1, V, Phi)`; main-effects regressors for the likelihood
    /// competitor.
    MainEffects,
}

/// How Z enters `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZTerms {
    /// Through the basis, `f = (1, V, Phi(Z), ...)`.
    #[default]
    Basis,
    /// Through the raw Z columns, `f = (1, V, Z, ...)`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorPlan {
    pub mode: PlanMode,
    pub z_terms: ZTerms,
    pub basis: BasisSpec,
    pub num_v: usize,
    pub f_columns: Vec<ColumnExpr>,
    pub g_columns: Vec<ColumnExpr>,
    pub warnings: Vec<String>,
}

/// Multiplies two expressions under the primitive rules; `None` when the
/// product vanishes identically.
pub fn multiply(a: &ColumnExpr, b: &ColumnExpr, rules: &[PrimitiveRule]) -> Option<ColumnExpr> {
    let mut atoms = a.atoms.clone();
    atoms.extend_from_slice(&b.atoms);
    atoms.sort();
    let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
    for atom in atoms {
        if let Atom::Phi(k) = atom {
            match rules[k] {
                PrimitiveRule::Idempotent | PrimitiveRule::Exclusive(_) if out.last() == Some(&atom) => continue,
                PrimitiveRule::Exclusive(g) => {
                    let clash = out.iter().any(|x| match *x {
                        Atom::Phi(j) => j != k && rules[j] == PrimitiveRule::Exclusive(g),
                        _ => false,
                    });
                    if clash {
                        return None;
                    }
                }
                _ => {}
            }
        }
        out.push(atom);
    }
    Some(ColumnExpr { atoms: out })
}

fn dedup(cols: Vec<ColumnExpr>) -> Vec<ColumnExpr> {
    let mut seen = HashSet::new();
    cols.into_iter().filter(|c| seen.insert(c.clone())).collect()
}

pub fn build_plan(mode: PlanMode, basis: &BasisSpec, num_v: usize) -> RegressorPlan {
    build_plan_with(mode, ZTerms::Basis, basis, num_v)
}

pub fn build_plan_with(mode: PlanMode, z_terms: ZTerms, basis: &BasisSpec, num_v: usize) -> RegressorPlan {
    let rules = basis.rules();
    let phi = basis.components();
    let v: Vec<ColumnExpr> = (0..num_v).map(ColumnExpr::v).collect();
    let z_block = match z_terms {
        ZTerms::Basis => phi.clone(),
        ZTerms::Raw => (0..basis.num_z()).map(|j| ColumnExpr { atoms: vec![Atom::Z(j)] }).collect(),
    };

    let mut blocks: Vec<Vec<ColumnExpr>> = vec![vec![ColumnExpr::constant()], v.clone(), z_block];
    if mode == PlanMode::DoublyRobust {
        let mut vphi = Vec::with_capacity(num_v * phi.len());
        for p in &phi {
            for c in &v {
                vphi.extend(multiply(c, p, &rules));
            }
        }
        blocks.push(vphi);
    }
    let f_columns = dedup(blocks.iter().flatten().cloned().collect());

    let g_columns = if mode == PlanMode::MainEffects {
        f_columns.clone()
    } else {
        let mut g = f_columns.clone();
        for block in &blocks {
            for p in &phi {
                for c in block {
                    g.extend(multiply(c, p, &rules));
                }
            }
        }
        dedup(g)
    };

    let mut warnings = Vec::new();
    if mode == PlanMode::DoublyRobust && !basis.is_discrete() {
        warnings.push("doubly robust regressors requested with a non-discrete basis; double robustness of the intervals is not guaranteed".to_string());
    }
    RegressorPlan { mode, z_terms, basis: basis.clone(), num_v, f_columns, g_columns, warnings }
}

/// Evaluated regressor vectors for one observation.
pub fn expand_row(z: &[f64], v: &[f64], plan: &RegressorPlan) -> Result<(Vec<f64>, Vec<f64>)> {
    if v.len() != plan.num_v {
        return Err(Error::Argument(format!("expected {} v values, got {}", plan.num_v, v.len())));
    }
    if let Some(j) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite v value in column {j}")));
    }
    let (prim, _) = plan.basis.primitives(z)?;
    let f = plan.f_columns.iter().map(|c| c.eval(&prim, z, v)).collect();
    let g = plan.g_columns.iter().map(|c| c.eval(&prim, z, v)).collect();
    Ok((f, g))
}

/// Evaluated design matrices.
#[derive(Debug, Clone)]
pub struct Designs {
    pub f: ColMatrix,
    pub g: ColMatrix,
    /// `(1, Phi(Z_i)')` rows.
    pub phi_dag: ColMatrix,
    pub clamped: bool,
}

pub fn build_designs(plan: &RegressorPlan, z: &ColMatrix, v: &ColMatrix) -> Result<Designs> {
    let n = z.nrows();
    if v.nrows() != n {
        return Err(Error::Argument("z and v row counts differ".into()));
    }
    if v.ncols() != plan.num_v {
        return Err(Error::Argument(format!("plan expects {} v columns, got {}", plan.num_v, v.ncols())));
    }
    let np = plan.basis.num_primitives();
    let mut prim = ColMatrix::zeros(n, np);
    let mut clamped = false;
    for i in 0..n {
        let (p, c) = plan.basis.primitives(&z.row(i))?;
        clamped |= c;
        for (k, x) in p.into_iter().enumerate() {
            prim.set(i, k, x);
        }
    }
    let materialize = |cols: &[ColumnExpr]| {
        let mut m = ColMatrix::zeros(n, cols.len());
        for (j, c) in cols.iter().enumerate() {
            let out = m.col_mut(j);
            out.iter_mut().for_each(|x| *x = 1.0);
            for a in c.atoms() {
                let src = match *a {
                    Atom::V(i) => v.col(i),
                    Atom::Z(j) => z.col(j),
                    Atom::Phi(k) => prim.col(k),
                };
                for (o, s) in out.iter_mut().zip(src) {
                    *o *= s;
                }
            }
        }
        m
    };
    let mut dag_cols = vec![ColumnExpr::constant()];
    dag_cols.extend(plan.basis.components());
    Ok(Designs {
        f: materialize(&plan.f_columns),
        g: materialize(&plan.g_columns),
        phi_dag: materialize(&dag_cols),
        clamped,
    })
}
