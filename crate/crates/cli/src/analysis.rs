//! The fit, diagnose and compare workflows on one dataset.

use serde::Serialize;

use cste_core::cste::{
    estimate_from_fits, fit_nuisance, knot_search, model_assisted_builder, make_estimate, KnotSearch, LambdaChoice,
    NuisanceMethod, PipelineOptions, Target,
};
use cste_core::design::{build_plan, build_plan_with, BasisSpec, PlanMode, RegressorPlan, ZTerms};
use cste_core::kernels::{
    bandwidth_rule, crossfit, ipw_kernel, kernel_mean_and_variance, or_kernel, KernelConfig, RmlLearner,
};
use cste_core::nuisance::{cv_lambda_frame, fit_ps, std_cal_diff, Arm, CvModel, CvOptions, ModelFrame, PsMethod};
use cste_core::optim::{Link, SolverOptions};
use cste_core::simlab::{generate, Scenario};
use cste_core::{ColMatrix, Dataset, Error};

use crate::args::{FitConfig, LinkArg, MethodArg, ModeArg, TargetArg};
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest, IngestReport, Roles, ZKind};
use crate::output::{sha256_file, EstimateRow, InputInfo};

pub const MAX_AUTO_KNOTS: usize = 10;
const DEFAULT_KNOTS: usize = 3;
const DEFAULT_GRID: usize = 11;
/// Fold seed offset of the cross-fitted kernel competitor.
const CROSSFIT_SEED_MIX: u64 = 0xC0FF_EE00;

/// Data plus what is known about its Z columns. Z columns are stored with
/// the discrete ones first, which is the order the mixed basis expects.
pub struct Source {
    pub data: Dataset,
    pub z_kinds: Vec<ZKind>,
    /// Position in `data.z` of each Z column as the user listed it.
    pub z_slot: Vec<usize>,
    pub input: Option<InputInfo>,
    pub report: Option<IngestReport>,
    pub warnings: Vec<String>,
}

pub fn load(cfg: &FitConfig) -> CliResult<Source> {
    let (data, z_kinds, input, report) = match (&cfg.input, &cfg.scenario) {
        (Some(path), None) => {
            let outcome = cfg.outcome.as_deref().ok_or_else(|| missing_role("--outcome"))?;
            let treatment = cfg.treatment.as_deref().ok_or_else(|| missing_role("--treatment"))?;
            if cfg.z.is_empty() {
                return Err(missing_role("--z"));
            }
            let roles = Roles {
                outcome,
                treatment,
                z: &cfg.z,
                v: &cfg.v,
                categorical: &cfg.categorical,
                continuous: &cfg.continuous,
            };
            let ing = ingest(path, &roles)?;
            let info = InputInfo { path: path.display().to_string(), sha256: sha256_file(path)? };
            (ing.data, ing.z_kinds, Some(info), Some(ing.report))
        }
        (None, Some(name)) => {
            let scenario = Scenario::parse(name)?;
            let p = cfg.p.unwrap_or_else(|| scenario.default_p());
            let data = generate(&scenario, cfg.n, p, cfg.seed)?;
            let kind = if scenario.continuous_z() {
                ZKind::Continuous
            } else {
                ZKind::Binary { levels: vec!["0".into(), "1".into()] }
            };
            (data, vec![kind], None, None)
        }
        _ => return Err(CliError::config("cli.missing_input", "give exactly one of --input or --scenario")),
    };
    let mut order: Vec<usize> = (0..z_kinds.len()).collect();
    order.sort_by_key(|&j| !z_kinds[j].is_discrete());
    let mut z_slot = vec![0; order.len()];
    for (slot, &j) in order.iter().enumerate() {
        z_slot[j] = slot;
    }
    let n = data.len();
    let z = ColMatrix::from_columns(n, &order.iter().map(|&j| data.z.col(j).to_vec()).collect::<Vec<_>>())?;
    let z_names = order.iter().map(|&j| data.z_names[j].clone()).collect();
    let z_kinds = order.iter().map(|&j| z_kinds[j].clone()).collect();
    let data = Dataset::with_names(data.y, data.t, z, data.v, z_names, data.v_names)?;
    if data.n_treated() == 0 || data.n_treated() == n {
        return Err(CliError::data("cli.one_arm", "both treatment arms must be present"));
    }
    Ok(Source { data, z_kinds, z_slot, input, report, warnings: Vec::new() })
}

fn missing_role(flag: &str) -> CliError {
    CliError::config("cli.missing_role", format!("{flag} is required with --input"))
}

pub fn pipeline_options(cfg: &FitConfig, method: MethodArg) -> PipelineOptions {
    let lambdas = match (cfg.lambda_ps, cfg.lambda_or) {
        (Some(ps), Some(or)) => LambdaChoice::Fixed { ps, or },
        _ => LambdaChoice::Cv(cv_options(cfg)),
    };
    PipelineOptions {
        method: match method {
            MethodArg::Rcal => NuisanceMethod::Calibrated,
            MethodArg::Rml => NuisanceMethod::MaximumLikelihood,
        },
        lambdas,
        link: link_of(cfg.link),
        solver: SolverOptions::default(),
    }
}

fn cv_options(cfg: &FitConfig) -> CvOptions {
    CvOptions { folds: cfg.folds, seed: cfg.seed, ..CvOptions::default() }
}

fn link_of(link: LinkArg) -> Link {
    match link {
        LinkArg::Identity => Link::Identity,
        LinkArg::Logistic => Link::Logistic,
    }
}

fn discrete_basis(src: &Source, cols: &[usize]) -> CliResult<BasisSpec> {
    let kinds: Vec<&ZKind> = cols.iter().map(|&j| &src.z_kinds[j]).collect();
    let basis = match kinds.as_slice() {
        [ZKind::Binary { .. }] => BasisSpec::binary(),
        [ZKind::Categorical { .. }] => BasisSpec::categorical(src.data.z.col(cols[0]))?,
        ks if ks.iter().all(|k| matches!(k, ZKind::Binary { .. })) => BasisSpec::multi_binary(ks.len())?,
        _ => {
            return Err(CliError::config(
                "cli.unsupported_z",
                "several discrete Z columns must all be binary; combine categorical columns into one",
            ))
        }
    };
    Ok(basis)
}

/// Basis for the Z columns, with the knot search table when the number of
/// knots was chosen automatically.
pub fn choose_basis(src: &Source, cfg: &FitConfig, opts: &PipelineOptions) -> CliResult<(BasisSpec, Option<KnotSearch>)> {
    let discrete: Vec<usize> = (0..src.z_kinds.len()).filter(|&j| src.z_kinds[j].is_discrete()).collect();
    let continuous = src.z_kinds.len() - discrete.len();
    if continuous > 1 {
        return Err(CliError::config("cli.unsupported_z", "at most one continuous Z column is supported"));
    }
    if continuous == 0 {
        if cfg.knots.is_some() || cfg.auto_knots {
            return Err(CliError::config("cli.knots", "--knots/--auto-knots need a continuous Z column"));
        }
        return Ok((discrete_basis(src, &discrete)?, None));
    }
    let zc = src.data.z.col(discrete.len());
    let (knots, search) = if cfg.auto_knots {
        if !discrete.is_empty() {
            return Err(CliError::config("cli.knots", "--auto-knots needs a single continuous Z column"));
        }
        let search = knot_search(&src.data, model_assisted_builder(src.data.num_v()), MAX_AUTO_KNOTS, opts)?;
        (search.best_aic, Some(search))
    } else {
        (cfg.knots.unwrap_or(DEFAULT_KNOTS), None)
    };
    let spline = BasisSpec::cubic_spline(zc, knots)?;
    if discrete.is_empty() {
        Ok((spline, search))
    } else {
        Ok((BasisSpec::mixed(discrete_basis(src, &discrete)?, spline)?, search))
    }
}

fn plan_mode(cfg: &FitConfig, basis: &BasisSpec) -> PlanMode {
    match cfg.mode {
        Some(ModeArg::ModelAssisted) => PlanMode::ModelAssisted,
        Some(ModeArg::DoublyRobust) => PlanMode::DoublyRobust,
        None if basis.is_discrete() => PlanMode::DoublyRobust,
        None => PlanMode::ModelAssisted,
    }
}

/// An evaluation point in the internal column order with its display label.
#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub z: Vec<f64>,
    pub label: String,
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

fn column_range(col: &[f64]) -> (f64, f64) {
    col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Candidate values of one Z column (internal order), with labels.
fn column_values(src: &Source, j: usize, grid: usize) -> Vec<(f64, String)> {
    match &src.z_kinds[j] {
        ZKind::Continuous => {
            let (lo, hi) = column_range(src.data.z.col(j));
            (0..grid)
                .map(|k| {
                    let x = if grid == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (grid - 1) as f64 };
                    (x, fmt_num(x))
                })
                .collect()
        }
        kind => kind.levels().iter().enumerate().map(|(c, l)| (c as f64, l.clone())).collect(),
    }
}

fn cartesian(src: &Source, grid: usize) -> Vec<EvalPoint> {
    // Enumerate in the user's column order so labels read naturally.
    let q = src.z_kinds.len();
    let mut points = vec![(vec![0.0; q], Vec::<String>::new())];
    for user_j in 0..q {
        let slot = src.z_slot[user_j];
        let values = column_values(src, slot, grid);
        points = points
            .into_iter()
            .flat_map(|(z, labels)| {
                values.iter().map(move |(x, l)| {
                    let mut z = z.clone();
                    z[slot] = *x;
                    let mut labels = labels.clone();
                    labels.push(l.clone());
                    (z, labels)
                })
            })
            .collect();
    }
    points.into_iter().map(|(z, labels)| EvalPoint { z, label: labels.join(",") }).collect()
}

/// Parses `--z0`. With one Z column both `,` and `;` separate points; with
/// several, `;` separates points and `,` their coordinates.
pub fn parse_z0(src: &mut Source, spec: Option<&str>) -> CliResult<Vec<EvalPoint>> {
    let spec = match spec.map(str::trim) {
        None | Some("") => return Ok(cartesian(src, DEFAULT_GRID)),
        Some(s) => s,
    };
    if let Some(rest) = spec.strip_prefix("grid:") {
        let grid: usize = rest
            .trim()
            .parse()
            .ok()
            .filter(|&g| g >= 1)
            .ok_or_else(|| CliError::config("cli.z0", format!("bad grid size in {spec:?}")))?;
        return Ok(cartesian(src, grid));
    }
    let q = src.z_kinds.len();
    let raw_points: Vec<Vec<&str>> = if q == 1 {
        spec.split([',', ';']).map(|s| vec![s.trim()]).collect()
    } else {
        spec.split(';').map(|p| p.split(',').map(str::trim).collect()).collect()
    };
    let mut out = Vec::with_capacity(raw_points.len());
    for raw in raw_points {
        if raw.len() != q {
            return Err(CliError::config("cli.z0", format!("evaluation point {raw:?} needs {q} values")));
        }
        let mut z = vec![0.0; q];
        let mut labels = Vec::with_capacity(q);
        for (user_j, text) in raw.iter().enumerate() {
            let slot = src.z_slot[user_j];
            match &src.z_kinds[slot] {
                ZKind::Continuous => {
                    let x: f64 = text
                        .parse()
                        .ok()
                        .filter(|x: &f64| x.is_finite())
                        .ok_or_else(|| CliError::config("cli.z0", format!("{text:?} is not a number")))?;
                    let (lo, hi) = column_range(src.data.z.col(slot));
                    let c = x.clamp(lo, hi);
                    if c != x {
                        src.warnings.push(format!(
                            "z0 value {x} of {} lies outside the observed range [{lo}, {hi}]; clamped to {c}",
                            src.data.z_names[slot]
                        ));
                    }
                    z[slot] = c;
                    labels.push(fmt_num(c));
                }
                kind => {
                    let code = kind
                        .levels()
                        .iter()
                        .position(|l| l == text || matches!((l.parse::<f64>(), text.parse::<f64>()), (Ok(a), Ok(b)) if a == b))
                        .ok_or_else(|| {
                            CliError::config(
                                "cli.z0",
                                format!("{text:?} is not an observed level of {}", src.data.z_names[slot]),
                            )
                        })?;
                    z[slot] = code as f64;
                    labels.push(kind.levels()[code].clone());
                }
            }
        }
        out.push(EvalPoint { z, label: labels.join(",") });
    }
    Ok(out)
}

fn targets_of(t: TargetArg) -> Vec<Target> {
    match t {
        TargetArg::Tau => vec![Target::Tau],
        TargetArg::Mu1 => vec![Target::Mu1],
        TargetArg::Mu0 => vec![Target::Mu0],
        TargetArg::All => vec![Target::Mu1, Target::Mu0, Target::Tau],
    }
}

fn check_levels(levels: &[f64]) -> CliResult<()> {
    if levels.is_empty() || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(CliError::config("cli.level", "confidence levels must lie in (0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub ps_lambda: f64,
    pub or_lambda: f64,
    pub ps_converged: bool,
    pub or_converged: bool,
    pub pi_clamped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MsmSummary {
    pub target: Target,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutput {
    pub n: usize,
    pub basis: BasisSpec,
    pub mode: PlanMode,
    pub f_columns: usize,
    pub g_columns: usize,
    pub arms: Vec<ArmSummary>,
    pub msm: Vec<MsmSummary>,
    pub knot_search: Option<KnotSearch>,
    pub estimates: Vec<EstimateRow>,
    pub warnings: Vec<String>,
    pub ingest: Option<IngestReport>,
}

/// Penalties and clamp flag of the fits behind one target.
#[derive(Debug, Clone, Copy, Default)]
struct FitTags {
    lambda_ps1: Option<f64>,
    lambda_or1: Option<f64>,
    lambda_ps0: Option<f64>,
    lambda_or0: Option<f64>,
    pi_clamped: bool,
}

fn tags_of(fits: &cste_core::cste::NuisanceFits, target: Target) -> FitTags {
    let mut tags = FitTags::default();
    if matches!(target, Target::Mu1 | Target::Tau) {
        if let Some(a) = &fits.treated {
            tags.lambda_ps1 = Some(a.ps.lambda);
            tags.lambda_or1 = Some(a.or.lambda);
            tags.pi_clamped |= a.ps.pi_clamped;
        }
    }
    if matches!(target, Target::Mu0 | Target::Tau) {
        if let Some(a) = &fits.untreated {
            tags.lambda_ps0 = Some(a.ps.lambda);
            tags.lambda_or0 = Some(a.or.lambda);
            tags.pi_clamped |= a.ps.pi_clamped;
        }
    }
    tags
}

fn rows_from(
    method: &str,
    target: Target,
    points: &[EvalPoint],
    est: &[cste_core::cste::CsteEstimate],
    levels: &[f64],
    tags: FitTags,
) -> Vec<EstimateRow> {
    let mut rows = Vec::new();
    for (p, e) in points.iter().zip(est) {
        for &level in levels {
            let (lo, hi) = e.ci_at(level);
            rows.push(EstimateRow {
                method: method.into(),
                target: target.name().into(),
                z0: p.label.clone(),
                point: e.point,
                se: Some(e.se()),
                level,
                ci_lo: Some(lo),
                ci_hi: Some(hi),
                approximation: e.approximation,
                lambda_ps1: tags.lambda_ps1,
                lambda_or1: tags.lambda_or1,
                lambda_ps0: tags.lambda_ps0,
                lambda_or0: tags.lambda_or0,
                pi_clamped: tags.pi_clamped,
            });
        }
    }
    rows
}

fn arm_summaries(fits: &cste_core::cste::NuisanceFits) -> Vec<ArmSummary> {
    [Arm::Treated, Arm::Untreated]
        .into_iter()
        .filter_map(|arm| {
            fits.arm(arm).map(|a| ArmSummary {
                arm,
                ps_lambda: a.ps.lambda,
                or_lambda: a.or.lambda,
                ps_converged: a.ps.fit.converged,
                or_converged: a.or.fit.converged,
                pi_clamped: a.ps.pi_clamped,
            })
        })
        .collect()
}

pub fn run_fit(cfg: &FitConfig) -> CliResult<FitOutput> {
    check_levels(&cfg.level)?;
    let mut src = load(cfg)?;
    let opts = pipeline_options(cfg, cfg.method);
    let (basis, search) = choose_basis(&src, cfg, &opts)?;
    let points = parse_z0(&mut src, cfg.z0.as_deref())?;
    let mode = plan_mode(cfg, &basis);
    let plan = build_plan(mode, &basis, src.data.num_v());
    src.warnings.extend(plan.warnings.iter().cloned());
    let frame = ModelFrame::new(&src.data, &plan)?;
    let targets = targets_of(cfg.target);
    let fits = fit_nuisance(&frame, &targets, &opts)?;
    let z0s: Vec<Vec<f64>> = points.iter().map(|p| p.z.clone()).collect();
    let method = match cfg.method {
        MethodArg::Rcal => "proposed",
        MethodArg::Rml => "rml",
    };
    let mut estimates = Vec::new();
    let mut msm = Vec::new();
    for &target in &targets {
        let (m, est) = estimate_from_fits(&frame, &fits, target, &z0s, cfg.level[0])?;
        estimates.extend(rows_from(method, target, &points, &est, &cfg.level, tags_of(&fits, target)));
        msm.push(MsmSummary { target, beta: m.beta });
    }
    if !basis.is_discrete() {
        src.warnings.push(
            "Z enters through a spline: estimates target the best linear approximation of the curve".into(),
        );
    }
    Ok(FitOutput {
        n: src.data.len(),
        basis,
        mode,
        f_columns: plan.f_columns.len(),
        g_columns: plan.g_columns.len(),
        arms: arm_summaries(&fits),
        msm,
        knot_search: search,
        estimates,
        warnings: src.warnings,
        ingest: src.report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    pub arm: Arm,
    pub method: PsMethod,
    pub column: usize,
    pub name: String,
    /// Standardized calibration difference; empty for constant columns.
    pub cal: Option<f64>,
    pub lambda: f64,
    /// Bound the calibrated fit guarantees, `|cal| <= lambda`.
    pub bound: Option<f64>,
    pub within_box: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BalanceSummary {
    pub arm: Arm,
    pub method: PsMethod,
    pub lambda: f64,
    pub converged: bool,
    pub pi_clamped: bool,
    pub max_abs_cal: f64,
    pub columns: usize,
    pub all_within_box: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseOutput {
    pub n: usize,
    pub summary: Vec<BalanceSummary>,
    pub balance: Vec<BalanceRow>,
    pub warnings: Vec<String>,
    pub ingest: Option<IngestReport>,
}

/// Relative and absolute slack on the box check, matching the solver's
/// stationarity tolerance.
const BOX_SLACK: (f64, f64) = (1e-6, 1e-8);

pub fn run_diagnose(cfg: &FitConfig) -> CliResult<DiagnoseOutput> {
    let mut src = load(cfg)?;
    let opts = pipeline_options(cfg, MethodArg::Rcal);
    let (basis, _) = choose_basis(&src, cfg, &opts)?;
    let plan = build_plan(plan_mode(cfg, &basis), &basis, src.data.num_v());
    src.warnings.extend(plan.warnings.iter().cloned());
    let frame = ModelFrame::new(&src.data, &plan)?;
    let names = plan_column_names(&src.data, &plan);
    let t = &frame.t;
    let mut balance = Vec::new();
    let mut summary = Vec::new();
    for arm in [Arm::Treated, Arm::Untreated] {
        for method in [PsMethod::Rcal, PsMethod::Rml] {
            let lambda = match cfg.lambda_ps {
                Some(l) => l,
                None => cv_lambda_frame(&frame, CvModel::Ps { arm, method }, Link::Identity, &cv_options(cfg))?.chosen_lambda,
            };
            let ps = fit_ps(&frame, arm, method, lambda, &opts.solver)?;
            let mut max_abs: f64 = 0.0;
            let mut all_within = true;
            for j in 1..frame.designs.f.ncols() {
                let cal = match std_cal_diff(&ps, frame.designs.f.col(j), t) {
                    Ok(c) => Some(c),
                    Err(Error::UndefinedDiagnostic(_)) => None,
                    Err(e) => return Err(e.into()),
                };
                let bound = (method == PsMethod::Rcal).then_some(lambda);
                let within_box = match (cal, bound) {
                    (Some(c), Some(b)) => Some(c.abs() <= b * (1.0 + BOX_SLACK.0) + BOX_SLACK.1),
                    _ => None,
                };
                if let Some(c) = cal {
                    max_abs = max_abs.max(c.abs());
                }
                all_within &= within_box != Some(false);
                balance.push(BalanceRow {
                    arm,
                    method,
                    column: j,
                    name: names.get(j).cloned().unwrap_or_default(),
                    cal,
                    lambda,
                    bound,
                    within_box,
                });
            }
            summary.push(BalanceSummary {
                arm,
                method,
                lambda,
                converged: ps.fit.converged,
                pi_clamped: ps.pi_clamped,
                max_abs_cal: max_abs,
                columns: frame.designs.f.ncols() - 1,
                all_within_box: (method == PsMethod::Rcal).then_some(all_within),
            });
        }
    }
    Ok(DiagnoseOutput { n: src.data.len(), summary, balance, warnings: src.warnings, ingest: src.report })
}

/// Readable names of the propensity regressors.
fn plan_column_names(data: &Dataset, plan: &RegressorPlan) -> Vec<String> {
    let phi_names: Vec<String> = (1..=plan.basis.dim).map(|k| format!("Phi{k}")).collect();
    plan.f_columns
        .iter()
        .map(|c| {
            if c.is_constant() {
                return "1".to_string();
            }
            c.atoms()
                .iter()
                .map(|a| atom_name(a, &phi_names, data))
                .collect::<Vec<_>>()
                .join("*")
        })
        .collect()
}

fn atom_name(a: &cste_core::design::Atom, phi_names: &[String], data: &Dataset) -> String {
    use cste_core::design::Atom;
    match a {
        Atom::Phi(k) => phi_names.get(*k).cloned().unwrap_or_else(|| format!("P{}", k + 1)),
        Atom::Z(j) => data.z_names.get(*j).cloned().unwrap_or_else(|| format!("Z{}", j + 1)),
        Atom::V(i) => data.v_names.get(*i).cloned().unwrap_or_else(|| format!("V{}", i + 1)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareOutput {
    pub n: usize,
    pub bandwidth: Option<f64>,
    pub estimates: Vec<EstimateRow>,
    pub warnings: Vec<String>,
    pub ingest: Option<IngestReport>,
}

/// Proposed, likelihood and kernel estimates of `mu1(z)` on one dataset,
/// in one long table.
pub fn run_compare(cfg: &FitConfig) -> CliResult<CompareOutput> {
    check_levels(&cfg.level)?;
    let mut src = load(cfg)?;
    let opts = pipeline_options(cfg, MethodArg::Rcal);
    let (basis, _) = choose_basis(&src, cfg, &opts)?;
    let points = parse_z0(&mut src, cfg.z0.as_deref())?;
    let z0s: Vec<Vec<f64>> = points.iter().map(|p| p.z.clone()).collect();
    let num_v = src.data.num_v();
    let level = cfg.level[0];
    let mut estimates = Vec::new();

    let plan = build_plan(plan_mode(cfg, &basis), &basis, num_v);
    src.warnings.extend(plan.warnings.iter().cloned());
    let frame = ModelFrame::new(&src.data, &plan)?;
    let fits = fit_nuisance(&frame, &[Target::Mu1], &opts)?;
    let (_, est) = estimate_from_fits(&frame, &fits, Target::Mu1, &z0s, level)?;
    estimates.extend(rows_from("proposed", Target::Mu1, &points, &est, &cfg.level, tags_of(&fits, Target::Mu1)));

    let main = build_plan_with(PlanMode::MainEffects, ZTerms::Raw, &basis, num_v);
    let main_frame = ModelFrame::new(&src.data, &main)?;
    let rml = PipelineOptions { method: NuisanceMethod::MaximumLikelihood, ..opts.clone() };
    let fits = fit_nuisance(&main_frame, &[Target::Mu1], &rml)?;
    let (_, est) = estimate_from_fits(&main_frame, &fits, Target::Mu1, &z0s, level)?;
    estimates.extend(rows_from("rml_msm", Target::Mu1, &points, &est, &cfg.level, tags_of(&fits, Target::Mu1)));

    let single_continuous = src.z_kinds.len() == 1 && src.z_kinds[0] == ZKind::Continuous;
    let mut bandwidth = None;
    if single_continuous {
        let data = &src.data;
        let z = data.z.col(0);
        let h = bandwidth_rule(z)?;
        bandwidth = Some(h);
        let kcfg = KernelConfig::new(h)?;
        let learner = RmlLearner { data, plan: &main, link: opts.link, cv: cv_options(cfg), solver: opts.solver.clone() };
        let t = data.treatment_f64();
        let full = crossfit(&t, 1, cfg.seed, &learner)?;
        let cf4 = crossfit(&t, 4, cfg.seed ^ CROSSFIT_SEED_MIX, &learner)?;
        let phi_of = |pi: &[f64], m: &[f64]| {
            (0..data.len())
                .map(|i| cste_core::cste::aipw_phi(data.y[i], t[i], pi[i], m[i]))
                .collect::<cste_core::Result<Vec<f64>>>()
        };
        for (name, cf) in [("aipw_full", &full), ("aipw_crossfit", &cf4)] {
            let phi = phi_of(&cf.pi, &cf.m)?;
            let est = points
                .iter()
                .map(|p| {
                    let (point, var) = kernel_mean_and_variance(p.z[0], z, &phi, &kcfg)?;
                    Ok(make_estimate(Target::Mu1, &p.z, point, var, level, false))
                })
                .collect::<cste_core::Result<Vec<_>>>()?;
            estimates.extend(rows_from(name, Target::Mu1, &points, &est, &cfg.level, FitTags::default()));
        }
        for p in &points {
            for (name, point) in [
                ("ipw_kernel", ipw_kernel(p.z[0], data, &full.pi, &kcfg)?),
                ("or_kernel", or_kernel(p.z[0], data, &full.m, &kcfg)?),
            ] {
                estimates.push(EstimateRow {
                    method: name.into(),
                    target: Target::Mu1.name().into(),
                    z0: p.label.clone(),
                    point,
                    se: None,
                    level,
                    ci_lo: None,
                    ci_hi: None,
                    approximation: false,
                    lambda_ps1: None,
                    lambda_or1: None,
                    lambda_ps0: None,
                    lambda_or0: None,
                    pi_clamped: false,
                });
            }
        }
    } else {
        src.warnings.push("kernel competitors need a single continuous Z column; skipped".into());
    }
    Ok(CompareOutput { n: src.data.len(), bandwidth, estimates, warnings: src.warnings, ingest: src.report })
}

/// Curve rows for plotting: one Z column only.
#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub method: String,
    pub target: String,
    pub level: f64,
    pub z: String,
    pub point: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

pub fn curve_rows(estimates: &[EstimateRow]) -> Vec<CurveRow> {
    estimates
        .iter()
        .map(|e| CurveRow {
            method: e.method.clone(),
            target: e.target.clone(),
            level: e.level,
            z: e.z0.clone(),
            point: e.point,
            ci_lo: e.ci_lo,
            ci_hi: e.ci_hi,
        })
        .collect()
}
