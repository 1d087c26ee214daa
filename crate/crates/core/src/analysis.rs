//! Error studies and inequality ledgers.
//!
//! The ledgers evaluate, level by level or node by node, the size, stability
//! and contraction inequalities satisfied by the Full-Projection scheme. All
//! conditional expectations are exact finite sums on the lattice, so the only
//! slack is roundoff: an entry is a violation iff
//! `lhs - rhs > tol_abs + tol_rel |rhs|` (or either side is not finite).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::forward::{build_lattice, Lattice};
use crate::grids::{trinomial, SpatialGrid, TimeGrid, Truncation, TruncationConfig};
use crate::model::{DriverSpec, ModelSpec};
use crate::oracle::{fd_solve, guarded_dt, linear_solution, proxy_reference, sigma_bound, ProxyReference};
use crate::schemes::{run_backward, SchemeConfig, SchemeRun};
use crate::treeval::{compensated_sum, ChainLaw};

/// `d + 1` with `d = 1`.
const D1: f64 = (ModelSpec::D + 1) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Proxy,
    LinearOracle,
    FdOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub kind: ReferenceKind,
    pub value: f64,
    /// Present for proxies.
    pub proxy: Option<ProxyReference>,
}

/// How to obtain the reference value of a study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceSpec {
    /// Implicit/Full-Projection average at `steps`.
    Proxy { steps: usize },
    /// Closed form for `f(y, z) = a y`.
    LinearOracle { a: f64 },
    /// Finite differences at mesh `dx` with the guarded time step.
    FdOracle { dx: f64 },
}

pub fn build_reference(spec: &ModelSpec, cfg: &SchemeConfig, r: ReferenceSpec) -> Result<Reference> {
    match r {
        ReferenceSpec::Proxy { steps } => {
            let trunc = cfg
                .truncation
                .unwrap_or_else(|| TruncationConfig::default_for_degree(spec.driver.degree()));
            let p = proxy_reference(spec, &trunc, cfg.weights, steps, cfg.parallelism)?;
            Ok(Reference {
                kind: ReferenceKind::Proxy,
                value: p.value,
                proxy: Some(p),
            })
        }
        ReferenceSpec::LinearOracle { a } => Ok(Reference {
            kind: ReferenceKind::LinearOracle,
            value: linear_solution(a, spec)?.y0,
            proxy: None,
        }),
        ReferenceSpec::FdOracle { dx } => {
            let dt = guarded_dt(spec, dx)?;
            Ok(Reference {
                kind: ReferenceKind::FdOracle,
                value: fd_solve(spec, dx, dt)?.y0(),
                proxy: None,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub n: usize,
    pub h: f64,
    pub y0: f64,
    /// `|Y0 - reference|`, NaN for exploded runs.
    pub err: f64,
    /// Wall-clock seconds of the backward induction.
    pub seconds: f64,
    pub exploded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub scheme: String,
    pub reference: Reference,
    pub rows: Vec<ErrorRow>,
    /// Fit of `log err` against `log h`; `None` with fewer than two usable points.
    pub slope: Option<SlopeFit>,
    /// Every finite error is below `1e-12`.
    pub exact: bool,
    pub exploded: Vec<usize>,
}

/// Least squares for `log err = slope log h + intercept` over entries with a
/// finite, positive error.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(h, e)| h.is_finite() && *h > 0.0 && e.is_finite() && *e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = pts.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    Some(SlopeFit {
        slope,
        intercept,
        residual: (ss / nf).sqrt(),
        points: n,
    })
}

/// How the lattice for a given `N` is built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticePlan {
    /// Recombining tree (constant coefficients).
    #[default]
    Tree,
    /// Euler steps projected on a spatial grid; `eta` defaults to `h²` and the
    /// extent to `6σ√T` around `x0`.
    Grid { eta: Option<f64>, extent: Option<i64> },
}

impl LatticePlan {
    pub fn build(&self, spec: &ModelSpec, n: usize) -> Result<Lattice> {
        let tg = TimeGrid::new(spec.horizon, n)?;
        let dist = trinomial(tg.h())?;
        match *self {
            LatticePlan::Tree => build_lattice(spec, &tg, &dist, None),
            LatticePlan::Grid { eta, extent } => {
                let eta = eta.unwrap_or(tg.h() * tg.h());
                let grid = match extent {
                    Some(m) => SpatialGrid::new(spec.x0, eta, m)?,
                    None => SpatialGrid::covering(spec.x0, eta, sigma_bound(spec), spec.horizon)?,
                };
                build_lattice(spec, &tg, &dist, Some(&grid))
            }
        }
    }
}

/// Builds the lattice for `n` steps and times the backward induction; the
/// reported time is the minimum over `repeats` runs.
pub fn timed_run(
    spec: &ModelSpec,
    cfg: &SchemeConfig,
    plan: &LatticePlan,
    n: usize,
    repeats: usize,
) -> Result<(SchemeRun, f64)> {
    let lattice = plan.build(spec, n)?;
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let run = run_backward(cfg, &lattice, spec)?;
        best = best.min(start.elapsed().as_secs_f64());
        out = Some(run);
    }
    Ok((out.expect("at least one repeat"), best))
}

/// Runs the scheme for each `N` and compares `Y0` with the reference.
///
/// Runs are independent; they execute one after another so that the timings
/// are not distorted, with node-level parallelism inside each run.
pub fn convergence_study(
    spec: &ModelSpec,
    cfg: &SchemeConfig,
    plan: &LatticePlan,
    ns: &[usize],
    reference: ReferenceSpec,
) -> Result<ErrorReport> {
    let r = build_reference(spec, cfg, reference)?;
    convergence_against(spec, cfg, plan, ns, r)
}

/// As [`convergence_study`] with a prebuilt reference.
pub fn convergence_against(
    spec: &ModelSpec,
    cfg: &SchemeConfig,
    plan: &LatticePlan,
    ns: &[usize],
    reference: Reference,
) -> Result<ErrorReport> {
    check_ns(ns)?;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let (run, seconds) = timed_run(spec, cfg, plan, n, 1)?;
        let y0 = run.y0();
        let exploded = !run.is_finite() || !y0.is_finite();
        rows.push(ErrorRow {
            n,
            h: run.h,
            y0,
            err: if exploded { f64::NAN } else { (y0 - reference.value).abs() },
            seconds,
            exploded,
        });
    }
    let slope = fit_slope(&rows.iter().map(|r| (r.h, r.err)).collect::<Vec<_>>());
    let finite: Vec<f64> = rows.iter().filter(|r| r.err.is_finite()).map(|r| r.err).collect();
    Ok(ErrorReport {
        scheme: cfg.kind.label(),
        reference,
        exact: !finite.is_empty() && finite.iter().all(|e| *e <= 1e-12),
        exploded: rows.iter().filter(|r| r.exploded).map(|r| r.n).collect(),
        slope,
        rows,
    })
}

pub fn check_ns(ns: &[usize]) -> Result<()> {
    if ns.is_empty() {
        return Err(FbsdeError::Config("the list of N values is empty".into()));
    }
    if ns[0] == 0 || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(FbsdeError::Config(format!(
            "N values must be positive and strictly increasing, got {ns:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub level: usize,
    pub t: f64,
    pub max: f64,
    pub min: f64,
    pub finite: bool,
}

/// Per-level extrema of `Y_i` over the lattice nodes.
pub fn minmax_processes(run: &SchemeRun) -> Vec<MinMax> {
    run.diagnostics
        .iter()
        .map(|d| MinMax {
            level: d.level,
            t: d.t,
            max: d.max,
            min: d.min,
            finite: d.max.is_finite() && d.min.is_finite(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { abs: 1e-10, rel: 1e-8 }
    }
}

impl Tolerances {
    pub fn violated(&self, lhs: f64, rhs: f64) -> bool {
        let residual = lhs - rhs;
        !(residual <= self.abs + self.rel * rhs.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// `‖Y_i‖₂ <= e^{(M_y/2)(T-t_i)} ‖ξ^N‖₂`
    Contraction,
    /// `‖Y_i‖∞ <= ‖ξ^N‖∞`
    SupBound,
    /// `|Y_i|² + |Z_i|² h/8 <= e^{ch} E_i[|T(Y_{i+1})|²] + K h`
    Size,
    /// `|δY_i|² + |δZ_i|² h/8 <= e^{ch} E_i[|T(Y¹_{i+1}) - T(Y²_{i+1})|²]`
    Stability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub level: usize,
    /// `None` for level-wide checks.
    pub node: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityLedger {
    pub kind: CheckKind,
    /// Whether the hypotheses behind the inequality hold; the entries are
    /// computed either way.
    pub applicable: bool,
    pub notes: Vec<String>,
    pub tolerances: Tolerances,
    /// Constant in the exponential (`c` or `c'`).
    pub rate: f64,
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerDigest {
    pub kind: CheckKind,
    pub applicable: bool,
    pub checked: usize,
    pub violations: usize,
    pub worst_residual: f64,
}

impl StabilityLedger {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.violated).count()
    }

    /// Largest `lhs - rhs`; NaN if any entry is not finite.
    pub fn worst_residual(&self) -> f64 {
        self.entries.iter().fold(f64::NEG_INFINITY, |w, e| {
            if w.is_nan() || e.residual.is_nan() {
                f64::NAN
            } else {
                w.max(e.residual)
            }
        })
    }

    pub fn digest(&self) -> LedgerDigest {
        LedgerDigest {
            kind: self.kind,
            applicable: self.applicable,
            checked: self.entries.len(),
            violations: self.violations(),
            worst_residual: self.worst_residual(),
        }
    }
}

/// Step-size bound below which the contraction rate `M_y/2` is guaranteed,
/// or the reasons it is not.
pub fn contraction_threshold(driver: &DriverSpec, trunc: &TruncationConfig) -> std::result::Result<f64, Vec<String>> {
    let c = driver.constants();
    let mut why = Vec::new();
    if driver.f00() != 0.0 {
        why.push(format!("f(0,0) = {} is not zero", driver.f00()));
    }
    if !(c.monotonicity < 0.0) {
        why.push(format!("M_y = {} is not negative", c.monotonicity));
    }
    if 8.0 * c.lipschitz_z.powi(2) > -c.monotonicity {
        why.push(format!("8 L_z² = {} exceeds -M_y", 8.0 * c.lipschitz_z.powi(2)));
    }
    let p = 2.0 * (c.degree as f64 - 1.0);
    if p > 0.0 && !(trunc.alpha < 1.0 / p) {
        why.push(format!("alpha = {} is not below 1/(2(m-1)) = {}", trunc.alpha, 1.0 / p));
    }
    if !why.is_empty() {
        return Err(why);
    }
    let quarter = -c.monotonicity / 4.0;
    let ly2 = c.lipschitz_y.powi(2);
    let first = quarter / (4.0 * D1 * ly2);
    let second = (quarter / (4.0 * D1 * ly2 * trunc.r0.powf(p))).powf(1.0 / (1.0 - p * trunc.alpha));
    Ok(first.min(second))
}

/// Level ledger of the discrete contraction bound under the chain law.
pub fn contraction_check(
    run: &SchemeRun,
    law: &ChainLaw,
    spec: &ModelSpec,
    trunc: &TruncationConfig,
    tol: Tolerances,
) -> Result<StabilityLedger> {
    let n = run.steps;
    let c_prime = spec.driver.monotonicity() / 2.0;
    let xi = crate::treeval::l2_norm(&run.y[n], law, n)?;
    let (applicable, mut notes) = match contraction_threshold(&spec.driver, trunc) {
        Ok(h0) if run.h <= h0 => (true, Vec::new()),
        Ok(h0) => (false, vec![format!("h = {} exceeds the threshold {h0}", run.h)]),
        Err(why) => (false, why),
    };
    if !run.kind.is_full_projection() {
        notes.push(format!("{} is not the projection scheme", run.kind.label()));
    }
    let entries = run
        .diagnostics
        .iter()
        .map(|d| {
            let rhs = (c_prime * (spec.horizon - d.t)).exp() * xi;
            entry(d.level, None, d.l2, rhs, tol)
        })
        .collect();
    Ok(StabilityLedger {
        kind: CheckKind::Contraction,
        applicable,
        notes,
        tolerances: tol,
        rate: c_prime,
        entries,
    })
}

/// Level ledger of `‖Y_i‖∞ <= ‖ξ^N‖∞`.
pub fn sup_bound_check(run: &SchemeRun, tol: Tolerances) -> StabilityLedger {
    let sup = |v: &[f64]| {
        v.iter().fold(0.0f64, |a, x| if a.is_nan() || x.is_nan() { f64::NAN } else { a.max(x.abs()) })
    };
    let xi = sup(&run.y[run.steps]);
    let entries = (0..=run.steps)
        .map(|i| entry(i, None, sup(&run.y[i]), xi, tol))
        .collect();
    StabilityLedger {
        kind: CheckKind::SupBound,
        applicable: true,
        notes: Vec::new(),
        tolerances: tol,
        rate: 0.0,
        entries,
    }
}

fn entry(level: usize, node: Option<usize>, lhs: f64, rhs: f64, tol: Tolerances) -> LedgerEntry {
    LedgerEntry {
        level,
        node,
        lhs,
        rhs,
        residual: lhs - rhs,
        violated: tol.violated(lhs, rhs),
    }
}

/// The one-step checks.
#[derive(Debug, Clone, Copy)]
pub enum OneStep<'a> {
    Size,
    /// Against a second run on the same lattice.
    Stability { other: &'a SchemeRun },
}

/// Exponential rate `c` of the size estimate.
pub fn size_rate(driver: &DriverSpec, trunc: &TruncationConfig, h: f64) -> f64 {
    let c = driver.constants();
    let p = 2.0 * (c.degree as f64 - 1.0);
    2.0 * driver.monotonicity()
        + 2.0 * alpha_z(driver)
        + 4.0 * D1 * c.lipschitz_y.powi(2) * (1.0 + trunc.r0.powf(p) * h.powf(-p * trunc.alpha)) * h
}

/// Exponential rate `c` of the stability estimate.
pub fn stability_rate(driver: &DriverSpec, trunc: &TruncationConfig, h: f64) -> f64 {
    let c = driver.constants();
    let p = 2.0 * (c.degree as f64 - 1.0);
    2.0 * driver.monotonicity()
        + 4.0 * c.lipschitz_z.powi(2)
        + 3.0 * D1 * c.lipschitz_y.powi(2) * (1.0 + 2.0 * trunc.r0.powf(p) * h.powf(-p * trunc.alpha)) * h
}

/// Young parameter `α_z = 4 L_z²`. With `L_z = 0` it only has to absorb
/// `f(0,0)`: 0 when that vanishes, 1 otherwise.
fn alpha_z(driver: &DriverSpec) -> f64 {
    let lz = driver.lipschitz_z();
    if lz > 0.0 {
        4.0 * lz * lz
    } else if driver.f00() == 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Additive constant of the size estimate, `(d+1)|f(0,0)|² h + |f(0,0)|²/α_z`.
pub fn size_offset(driver: &DriverSpec, h: f64) -> f64 {
    let f2 = driver.f00().powi(2);
    if f2 == 0.0 {
        0.0
    } else {
        D1 * f2 * h + f2 / alpha_z(driver)
    }
}

/// `h <= 1/(16 (d+1) L_z²)`, vacuous when `L_z = 0`.
pub fn one_step_threshold(driver: &DriverSpec) -> f64 {
    let lz = driver.lipschitz_z();
    if lz == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (16.0 * D1 * lz * lz)
    }
}

/// Node ledger of the one-step size or stability inequality at every node of
/// levels `0..N`.
pub fn one_step_checks(
    run: &SchemeRun,
    lattice: &Lattice,
    spec: &ModelSpec,
    trunc: &TruncationConfig,
    kind: OneStep<'_>,
    tol: Tolerances,
) -> Result<StabilityLedger> {
    let h = run.h;
    let t: Truncation = run.truncation.unwrap_or(trunc.at_step(h)?);
    let mut notes = Vec::new();
    let h0 = one_step_threshold(&spec.driver);
    let mut applicable = h <= h0;
    if !applicable {
        notes.push(format!("h = {h} exceeds 1/(16(d+1)L_z²) = {h0}"));
    }
    if !run.kind.is_full_projection() {
        applicable = false;
        notes.push(format!("{} is not the projection scheme", run.kind.label()));
    }
    if let Err(e) = trunc.validate_for_degree(spec.driver.degree()) {
        applicable = false;
        notes.push(e.to_string());
    }
    let (check, rate) = match kind {
        OneStep::Size => (CheckKind::Size, size_rate(&spec.driver, trunc, h)),
        OneStep::Stability { other } => {
            if other.steps != run.steps || other.y.iter().zip(&run.y).any(|(a, b)| a.len() != b.len()) {
                return Err(FbsdeError::Structure("the two runs live on different lattices".into()));
            }
            (CheckKind::Stability, stability_rate(&spec.driver, trunc, h))
        }
    };
    let growth = (rate * h).exp();
    let offset = size_offset(&spec.driver, h) * h;
    let mut entries = Vec::with_capacity(lattice.total_nodes());
    for i in 0..run.steps {
        for node in 0..lattice.level_len(i) {
            let st = lattice.stencil(i, node);
            let (lhs, rhs) = match kind {
                OneStep::Size => {
                    let (y, z) = (run.y[i][node], run.z[i][node]);
                    let e = compensated_sum(st.iter().map(|b| b.weight * t.apply(run.y[i + 1][b.child]).powi(2)));
                    (y * y + z * z * h / 8.0, growth * e + offset)
                }
                OneStep::Stability { other } => {
                    let dy = run.y[i][node] - other.y[i][node];
                    let dz = run.z[i][node] - other.z[i][node];
                    let e = compensated_sum(st.iter().map(|b| {
                        let d = t.apply(run.y[i + 1][b.child]) - t.apply(other.y[i + 1][b.child]);
                        b.weight * d * d
                    }));
                    (dy * dy + dz * dz * h / 8.0, growth * e)
                }
            };
            entries.push(entry(i, Some(node), lhs, rhs, tol));
        }
    }
    Ok(StabilityLedger {
        kind: check,
        applicable,
        notes,
        tolerances: tol,
        rate,
        entries,
    })
}
