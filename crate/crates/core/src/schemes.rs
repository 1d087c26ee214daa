//! One-step backward operators and backward induction on a lattice.
//!
//! For an input `v = Y_{i+1}` on the children of a node, with weights `H_j`:
//!
//! ```text
//! explicit   Z = E[v H],        Y = E[v + f(v, Z) h]
//! θ-scheme   Z = E[v H],        Y = E[v + (1-θ) f(v, Z) h] + θ f(Y, Z) h
//! FP (pre)   Z = E[T(v) H],     Y = E[T(v) + f(T(v), Z) h]
//! FP (post)  Z = E[v H],        Y = T(E[v + f(v, Z) h]),   Y_N = T(g)
//! ```
//!
//! where `T` is the projection on the ball of radius `R^h`. The pre and post
//! variants are related node-exactly by `Y_post = T(Y_pre)`, `Z_post = Z_pre`.

use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::forward::{Lattice, Stencil};
use crate::grids::{weight_values, Truncation, TruncationConfig, WeightRule, Weights};
use crate::model::{DriverSpec, ModelSpec};
use crate::parallel::{map_indexed, Parallelism};
use crate::treeval::{chain_law, compensated_sum, l2_norm, ChainLaw};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    ExplicitBtz,
    ImplicitBtz,
    Theta(f64),
    FullProjectionPre,
    FullProjectionPost,
}

impl SchemeKind {
    pub fn is_full_projection(self) -> bool {
        matches!(self, SchemeKind::FullProjectionPre | SchemeKind::FullProjectionPost)
    }

    /// Implicitness weight, `None` for the projection schemes.
    pub fn theta(self) -> Option<f64> {
        match self {
            SchemeKind::ExplicitBtz => Some(0.0),
            SchemeKind::ImplicitBtz => Some(1.0),
            SchemeKind::Theta(t) => Some(t),
            _ => None,
        }
    }

    /// Short name used on the command line and in artifacts.
    pub fn label(self) -> String {
        match self {
            SchemeKind::ExplicitBtz => "explicit".into(),
            SchemeKind::ImplicitBtz => "implicit".into(),
            SchemeKind::Theta(t) => format!("theta={t}"),
            SchemeKind::FullProjectionPre => "fp".into(),
            SchemeKind::FullProjectionPost => "fp-post".into(),
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = FbsdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(SchemeKind::ExplicitBtz),
            "implicit" => Ok(SchemeKind::ImplicitBtz),
            "fp" => Ok(SchemeKind::FullProjectionPre),
            "fp-post" => Ok(SchemeKind::FullProjectionPost),
            other => {
                let theta = other
                    .strip_prefix("theta=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| FbsdeError::Config(format!("unknown scheme '{other}'")))?;
                if !(0.0..=1.0).contains(&theta) {
                    return Err(FbsdeError::Config(format!("theta must lie in [0, 1], got {theta}")));
                }
                Ok(SchemeKind::Theta(theta))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplicitSolver {
    /// Damped Newton with the analytic driver derivative; drivers without a
    /// derivative fall back to Picard iteration.
    Newton { max_iter: usize, tol: f64 },
    Picard { max_iter: usize, tol: f64 },
}

impl Default for ImplicitSolver {
    fn default() -> Self {
        ImplicitSolver::Newton {
            max_iter: 100,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    /// Required by the projection schemes, ignored otherwise.
    pub truncation: Option<TruncationConfig>,
    pub weights: WeightRule,
    pub solver: ImplicitSolver,
    pub parallelism: Parallelism,
}

impl SchemeConfig {
    pub fn new(kind: SchemeKind) -> Self {
        Self {
            kind,
            truncation: None,
            weights: WeightRule::Truncated,
            solver: ImplicitSolver::default(),
            parallelism: Parallelism::default(),
        }
    }

    pub fn with_truncation(mut self, t: TruncationConfig) -> Self {
        self.truncation = Some(t);
        self
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    pub fn validate(&self, driver: &DriverSpec) -> Result<()> {
        if let SchemeKind::Theta(t) = self.kind {
            if !(0.0..=1.0).contains(&t) {
                return Err(FbsdeError::Config(format!("theta must lie in [0, 1], got {t}")));
            }
        }
        if self.kind.is_full_projection() {
            self.truncation
                .ok_or_else(|| {
                    FbsdeError::Config("Full-Projection schemes need a truncation config".into())
                })?
                .validate_for_degree(driver.degree())?;
        }
        Ok(())
    }
}

/// `E[v H]` over the stencil.
#[inline]
pub fn z_step(vals_next: &[f64], stencil: &Stencil<'_>, weights: &[f64]) -> f64 {
    sum3(stencil, |j, child| vals_next[child] * weights[j])
}

/// `E[v + f(v, z) h]` over the stencil.
#[inline]
pub fn explicit_y_step(
    vals_next: &[f64],
    stencil: &Stencil<'_>,
    z: f64,
    driver: &DriverSpec,
    h: f64,
) -> f64 {
    sum3(stencil, |_, child| {
        let v = vals_next[child];
        v + driver.eval(v, z) * h
    })
}

/// Full-Projection step on untruncated inputs: both `Y` and `Z` see `T(v)`.
pub fn fp_pre_step(
    vals_next: &[f64],
    stencil: &Stencil<'_>,
    trunc: &Truncation,
    weights: &[f64],
    driver: &DriverSpec,
    h: f64,
) -> (f64, f64) {
    let children = stencil.children();
    let mut tv = [0.0f64; 8];
    if children.len() > tv.len() {
        let tv: Vec<f64> = children.iter().map(|&c| trunc.apply(vals_next[c])).collect();
        return fp_on_truncated(&tv, stencil, weights, driver, h);
    }
    for (j, &c) in children.iter().enumerate() {
        tv[j] = trunc.apply(vals_next[c]);
    }
    fp_on_truncated(&tv[..children.len()], stencil, weights, driver, h)
}

/// Explicit step on the already truncated child values `tv[j]`.
#[inline]
fn fp_on_truncated(tv: &[f64], stencil: &Stencil<'_>, weights: &[f64], driver: &DriverSpec, h: f64) -> (f64, f64) {
    let p = stencil.weights();
    let z = compensated_sum(tv.iter().enumerate().map(|(j, v)| p[j] * (v * weights[j])));
    let y = compensated_sum(tv.iter().enumerate().map(|(j, &v)| p[j] * (v + driver.eval(v, z) * h)));
    (y, z)
}

/// Post-truncated step on already truncated inputs.
pub fn fp_post_step(
    vals_next_tilde: &[f64],
    stencil: &Stencil<'_>,
    trunc: &Truncation,
    weights: &[f64],
    driver: &DriverSpec,
    h: f64,
) -> (f64, f64) {
    let z = z_step(vals_next_tilde, stencil, weights);
    let y = explicit_y_step(vals_next_tilde, stencil, z, driver, h);
    (trunc.apply(y), z)
}

/// Solves `y = m + f(y, z) h`; returns `(y, iterations)`.
pub fn implicit_y_step(
    vals_next: &[f64],
    stencil: &Stencil<'_>,
    z: f64,
    driver: &DriverSpec,
    h: f64,
    solver: &ImplicitSolver,
) -> Result<(f64, usize)> {
    theta_y_step(vals_next, stencil, z, driver, h, 1.0, solver)
}

/// Solves `y = E[v + (1-θ) f(v, z) h] + θ f(y, z) h`.
pub fn theta_y_step(
    vals_next: &[f64],
    stencil: &Stencil<'_>,
    z: f64,
    driver: &DriverSpec,
    h: f64,
    theta: f64,
    solver: &ImplicitSolver,
) -> Result<(f64, usize)> {
    let explicit_part = 1.0 - theta;
    let m = sum3(stencil, |_, child| {
        let v = vals_next[child];
        if explicit_part == 0.0 {
            v
        } else {
            v + explicit_part * driver.eval(v, z) * h
        }
    });
    if theta == 0.0 || !m.is_finite() {
        return Ok((m, 0));
    }
    solve_implicit(m, z, driver, theta * h, solver).map_err(|(iterations, residual)| {
        FbsdeError::SolverDivergence {
            level: 0,
            node: 0,
            iterations,
            residual,
        }
    })
}

/// Root of `F(y) = y - m - a f(y, z)`. Errors carry `(iterations, |F|)`.
fn solve_implicit(
    m: f64,
    z: f64,
    driver: &DriverSpec,
    a: f64,
    solver: &ImplicitSolver,
) -> std::result::Result<(f64, usize), (usize, f64)> {
    let residual = |y: f64| y - m - a * driver.eval(y, z);
    let (max_iter, tol, newton) = match *solver {
        ImplicitSolver::Newton { max_iter, tol } => (max_iter, tol, driver.is_polynomial()),
        ImplicitSolver::Picard { max_iter, tol } => (max_iter, tol, false),
    };
    let scale = 1f64.max(m.abs());
    let mut y = m;
    let mut r = residual(y);
    if r.abs() <= tol * scale {
        return Ok((y, 0));
    }
    for it in 1..=max_iter {
        let slope = if newton {
            driver.dy(y).map(|d| 1.0 - a * d).filter(|s| *s > 0.0)
        } else {
            None
        };
        match slope {
            Some(s) => {
                let step = -r / s;
                let mut lambda = 1.0;
                let mut cand = y + step;
                let mut rc = residual(cand);
                while !(rc.abs() < r.abs()) && lambda > 1e-6 {
                    lambda *= 0.5;
                    cand = y + lambda * step;
                    rc = residual(cand);
                }
                y = cand;
                r = rc;
                if r.abs() <= tol * scale || (lambda * step).abs() <= 1e-15 * 1f64.max(y.abs()) {
                    return Ok((y, it));
                }
            }
            None => {
                y = m + a * driver.eval(y, z);
                r = residual(y);
                if r.abs() <= tol * scale {
                    return Ok((y, it));
                }
            }
        }
        if !y.is_finite() {
            return Err((it, f64::NAN));
        }
    }
    Err((max_iter, r.abs()))
}

#[inline]
fn sum3(stencil: &Stencil<'_>, term: impl Fn(usize, usize) -> f64) -> f64 {
    let w = stencil.weights();
    compensated_sum(stencil.children().iter().enumerate().map(|(j, &c)| w[j] * term(j, c)))
}

/// Per-level summary of `Y_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub t: f64,
    pub max: f64,
    pub min: f64,
    /// L² norm under the chain law.
    pub l2: f64,
    /// All values at this level and every later level are finite.
    pub finite: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub solves: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
}

/// Value functions `y_i`, `z_i` on the lattice supports plus diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRun {
    pub kind: SchemeKind,
    pub steps: usize,
    pub h: f64,
    /// `y[i][node]` for `i = 0..=N`.
    pub y: Vec<Vec<f64>>,
    /// `z[i][node]` for `i = 0..N`; `z[N]` is empty.
    pub z: Vec<Vec<f64>>,
    pub diagnostics: Vec<LevelDiagnostics>,
    pub solver: SolverStats,
    /// `T^h` used by the run (`None` for the non-projection schemes).
    pub truncation: Option<Truncation>,
    pub weights: Weights,
}

impl SchemeRun {
    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }

    /// No non-finite value anywhere.
    pub fn is_finite(&self) -> bool {
        self.diagnostics[0].finite
    }

    /// Highest level (time index) carrying a non-finite value.
    pub fn exploded_at(&self) -> Option<usize> {
        self.diagnostics.iter().rev().find(|d| !d.finite).map(|d| d.level)
    }
}

/// Backward induction from `y_N = g` (post variant: `T(g)`) to level 0.
///
/// Non-finite values are carried through and recorded in the diagnostics;
/// only implicit solver failures abort.
pub fn run_backward(cfg: &SchemeConfig, lattice: &Lattice, spec: &ModelSpec) -> Result<SchemeRun> {
    let law = chain_law(lattice);
    run_backward_with_law(cfg, lattice, &law, spec)
}

/// As [`run_backward`] with a precomputed chain law.
pub fn run_backward_with_law(
    cfg: &SchemeConfig,
    lattice: &Lattice,
    law: &ChainLaw,
    spec: &ModelSpec,
) -> Result<SchemeRun> {
    cfg.validate(&spec.driver)?;
    let tg = lattice.time_grid();
    let h = tg.h();
    let n = lattice.steps();
    let weights = weight_values(cfg.weights, lattice.distribution(), h)?;
    let trunc = match cfg.truncation {
        Some(t) if cfg.kind.is_full_projection() => Some(t.at_step(h)?),
        _ => None,
    };
    let driver = &spec.driver;
    let hw = &weights.values;

    let mut y: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut z: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    y[n] = lattice
        .states(n)
        .iter()
        .map(|&x| {
            let g = spec.terminal.eval(x);
            match (cfg.kind, trunc) {
                (SchemeKind::FullProjectionPost, Some(t)) => t.apply(g),
                _ => g,
            }
        })
        .collect();

    let mut stats = SolverStats::default();
    for i in (0..n).rev() {
        let next = &y[i + 1];
        let results: Vec<Result<(f64, f64, usize)>> =
            map_indexed(cfg.parallelism, lattice.level_len(i), |node| {
                let st = lattice.stencil(i, node);
                match (cfg.kind, trunc) {
                    (SchemeKind::FullProjectionPre, Some(t)) => {
                        let (yv, zv) = fp_pre_step(next, &st, &t, hw, driver, h);
                        Ok((yv, zv, 0))
                    }
                    (SchemeKind::FullProjectionPost, Some(t)) => {
                        let (yv, zv) = fp_post_step(next, &st, &t, hw, driver, h);
                        Ok((yv, zv, 0))
                    }
                    (kind, _) => {
                        let theta = kind.theta().unwrap_or(0.0);
                        let zv = z_step(next, &st, hw);
                        let (yv, it) = theta_y_step(next, &st, zv, driver, h, theta, &cfg.solver)
                            .map_err(|e| match e {
                                FbsdeError::SolverDivergence {
                                    iterations, residual, ..
                                } => FbsdeError::SolverDivergence {
                                    level: i,
                                    node,
                                    iterations,
                                    residual,
                                },
                                other => other,
                            })?;
                        Ok((yv, zv, it))
                    }
                }
            });
        let mut yi = Vec::with_capacity(results.len());
        let mut zi = Vec::with_capacity(results.len());
        let implicit = cfg.kind.theta().is_some_and(|t| t > 0.0);
        for r in results {
            let (yv, zv, it) = r?;
            if implicit {
                stats.solves += 1;
                stats.total_iterations += it;
                stats.max_iterations = stats.max_iterations.max(it);
            }
            yi.push(yv);
            zi.push(zv);
        }
        y[i] = yi;
        z[i] = zi;
    }

    let mut diagnostics = Vec::with_capacity(n + 1);
    let mut finite_after = true;
    for i in (0..=n).rev() {
        let vals = &y[i];
        let level_finite = vals.iter().all(|v| v.is_finite());
        finite_after &= level_finite;
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, nan_max);
        let min = vals.iter().copied().fold(f64::INFINITY, nan_min);
        diagnostics.push(LevelDiagnostics {
            level: i,
            t: tg.t(i),
            max,
            min,
            l2: l2_norm(vals, law, i)?,
            finite: finite_after,
        });
    }
    diagnostics.reverse();

    Ok(SchemeRun {
        kind: cfg.kind,
        steps: n,
        h,
        y,
        z,
        diagnostics,
        solver: stats,
        truncation: trunc,
        weights,
    })
}

/// `max` that propagates NaN.
fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn nan_min(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.min(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::build_lattice;
    use crate::grids::{trinomial, TimeGrid, TruncMode};
    use crate::model::{Coefficient, TerminalCondition};
    use approx::assert_relative_eq;

    fn cubic() -> DriverSpec {
        DriverSpec::polynomial(vec![0.0, 0.0, 0.0, -1.0], 0.0).unwrap()
    }

    fn one_step_lattice(h: f64) -> Lattice {
        let spec = model(DriverSpec::polynomial(vec![0.0], 0.0).unwrap(), TerminalCondition::Constant(0.0), 1.0);
        let tg = TimeGrid::new(h, 1).unwrap();
        build_lattice(&spec, &tg, &trinomial(h).unwrap(), None).unwrap()
    }

    fn model(driver: DriverSpec, g: TerminalCondition, sigma: f64) -> ModelSpec {
        ModelSpec::new(1.0, 0.0, Coefficient::Constant(0.0), Coefficient::Constant(sigma), g, driver)
            .unwrap()
    }

    fn hard(radius: f64) -> Truncation {
        Truncation {
            radius,
            epsilon: 0.0,
            mode: TruncMode::Hard,
        }
    }

    #[test]
    fn z_step_examples() {
        let h = 0.03;
        let lat = one_step_lattice(h);
        let st = lat.stencil(0, 0);
        let w = weight_values(WeightRule::Truncated, lat.distribution(), h).unwrap();
        assert_eq!(z_step(&[5.0; 3], &st, &w.values), 0.0);
        assert_eq!(z_step(&[0.0; 3], &st, &w.values), 0.0);
        // (1/6)(3 - 1) sqrt(0.09) / 0.03
        assert_relative_eq!(z_step(&[1.0, 2.0, 3.0], &st, &w.values), 10.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn explicit_step_examples() {
        let h = 0.1;
        let lat = one_step_lattice(h);
        let st = lat.stencil(0, 0);
        let zero = DriverSpec::polynomial(vec![0.0], 0.0).unwrap();
        assert_relative_eq!(explicit_y_step(&[1.0, 2.0, 3.0], &st, 0.0, &zero, h), 2.0, max_relative = 1e-15);
        assert_relative_eq!(explicit_y_step(&[2.0; 3], &st, 0.0, &cubic(), h), 1.2, max_relative = 1e-14);
        let lin = DriverSpec::polynomial(vec![0.0, -3.0], 0.0).unwrap();
        assert_relative_eq!(explicit_y_step(&[2.0; 3], &st, 0.0, &lin, h), 2.0 * (1.0 - 0.3), max_relative = 1e-14);
    }

    #[test]
    fn fp_step_examples() {
        let h = 0.1;
        let lat = one_step_lattice(h);
        let st = lat.stencil(0, 0);
        let w = weight_values(WeightRule::Truncated, lat.distribution(), h).unwrap().values;
        let t = hard(10.0);
        let inside = [1.0, -2.0, 3.0];
        let zc = z_step(&inside, &st, &w);
        assert_eq!(
            fp_pre_step(&inside, &st, &t, &w, &cubic(), h),
            (explicit_y_step(&inside, &st, zc, &cubic(), h), zc)
        );
        let (y, _) = fp_pre_step(&[100.0; 3], &st, &t, &w, &cubic(), h);
        assert_relative_eq!(y, -90.0, max_relative = 1e-14);
        let (_, z) = fp_pre_step(&[-100.0, 0.0, 100.0], &st, &t, &w, &cubic(), h);
        assert_eq!(z, z_step(&[-10.0, 0.0, 10.0], &st, &w));
        // f = 0: post step is T(E[v])
        let zero = DriverSpec::polynomial(vec![0.0], 0.0).unwrap();
        let (y, _) = fp_post_step(&[9.0, 9.0, 9.0], &st, &hard(5.0), &w, &zero, h);
        assert_eq!(y, 5.0);
    }

    #[test]
    fn implicit_step_examples() {
        let h = 0.1;
        let lat = one_step_lattice(h);
        let st = lat.stencil(0, 0);
        let solver = ImplicitSolver::default();
        let (y, _) = implicit_y_step(&[1.0; 3], &st, 0.0, &cubic(), h, &solver).unwrap();
        // bisection oracle for y + 0.1 y^3 = 1
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + 0.1 * mid.powi(3) > 1.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        assert!((y - lo).abs() < 1e-12, "{y} vs {lo}");
        assert!((y - 0.921_70).abs() < 1e-5);
        assert!((y + 0.1 * y.powi(3) - 1.0).abs() <= 1e-12);

        let zero = DriverSpec::polynomial(vec![0.0], 0.0).unwrap();
        assert_eq!(implicit_y_step(&[1.0, 2.0, 3.0], &st, 0.0, &zero, h, &solver).unwrap().0, 2.0);
        let lin = DriverSpec::polynomial(vec![0.0, -2.0], 0.0).unwrap();
        let (y, _) = implicit_y_step(&[3.0; 3], &st, 0.0, &lin, h, &solver).unwrap();
        assert_relative_eq!(y, 3.0 / (1.0 + 0.2), max_relative = 1e-13);
        let picard = ImplicitSolver::Picard { max_iter: 200, tol: 1e-13 };
        let (yp, _) = implicit_y_step(&[3.0; 3], &st, 0.0, &lin, h, &picard).unwrap();
        assert_relative_eq!(yp, 2.5, max_relative = 1e-12);
    }

    #[test]
    fn solver_failure_is_reported() {
        let h = 0.1;
        let lat = one_step_lattice(h);
        let st = lat.stencil(0, 0);
        let picard = ImplicitSolver::Picard { max_iter: 5, tol: 1e-14 };
        let r = implicit_y_step(&[50.0; 3], &st, 0.0, &cubic(), h, &picard);
        assert!(matches!(r, Err(FbsdeError::SolverDivergence { .. })));
    }

    #[test]
    fn scheme_names_parse() {
        assert_eq!("fp".parse::<SchemeKind>().unwrap(), SchemeKind::FullProjectionPre);
        assert_eq!("theta=0.5".parse::<SchemeKind>().unwrap(), SchemeKind::Theta(0.5));
        assert!("theta=2".parse::<SchemeKind>().is_err());
        assert!("euler".parse::<SchemeKind>().is_err());
        for k in [SchemeKind::ExplicitBtz, SchemeKind::ImplicitBtz, SchemeKind::FullProjectionPost, SchemeKind::Theta(0.25)] {
            assert_eq!(k.label().parse::<SchemeKind>().unwrap(), k);
        }
    }

    fn run(kind: SchemeKind, spec: &ModelSpec, n: usize, r0: f64) -> SchemeRun {
        let tg = TimeGrid::new(spec.horizon, n).unwrap();
        let lat = build_lattice(spec, &tg, &trinomial(tg.h()).unwrap(), None).unwrap();
        let mut t = TruncationConfig::default_for_degree(spec.driver.degree());
        t.r0 = r0;
        run_backward(&SchemeConfig::new(kind).with_truncation(t), &lat, spec).unwrap()
    }

    #[test]
    fn zero_driver_constant_terminal_is_flat() {
        let spec = model(DriverSpec::polynomial(vec![0.0], 0.0).unwrap(), TerminalCondition::Constant(3.0), 1.5);
        for kind in [
            SchemeKind::ExplicitBtz,
            SchemeKind::ImplicitBtz,
            SchemeKind::FullProjectionPre,
            SchemeKind::FullProjectionPost,
            SchemeKind::Theta(0.5),
        ] {
            let r = run(kind, &spec, 7, 10.0);
            for i in 0..=7 {
                assert!(r.y[i].iter().all(|v| (v - 3.0).abs() < 1e-14), "{kind:?}");
                assert!(r.z[i].iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn pre_and_post_variants_agree_node_exactly() {
        let spec = model(cubic(), TerminalCondition::Quadratic { scale: 1.0 }, 1.5);
        let pre = run(SchemeKind::FullProjectionPre, &spec, 12, 2.0);
        let post = run(SchemeKind::FullProjectionPost, &spec, 12, 2.0);
        let t = pre.truncation.unwrap();
        for i in 0..=12 {
            for (a, b) in pre.y[i].iter().zip(&post.y[i]) {
                assert_eq!(t.apply(*a), *b);
            }
            assert_eq!(pre.z[i], post.z[i]);
        }
    }

    #[test]
    fn fp_equals_explicit_when_inside_radius() {
        let spec = model(cubic(), TerminalCondition::Clamp { lo: -1.0, hi: 1.0, slope: 1.0 }, 1.0);
        let fp = run(SchemeKind::FullProjectionPre, &spec, 10, 10.0);
        let ex = run(SchemeKind::ExplicitBtz, &spec, 10, 10.0);
        assert_eq!(fp.y, ex.y);
        assert_eq!(fp.z, ex.z);
    }

    #[test]
    fn explicit_scheme_explodes_on_damped_cubic() {
        let f = DriverSpec::polynomial(vec![0.0, -1.0, 0.0, -1.0], 0.0).unwrap();
        let spec = model(f, TerminalCondition::Clamp { lo: -7.0, hi: 7.0, slope: 1.0 }, 2.5);
        let r = run(SchemeKind::ExplicitBtz, &spec, 15, 10.0);
        assert!(!r.is_finite());
        assert!(r.exploded_at().is_some());
        assert!(r.y0().is_nan());
    }

    #[test]
    fn linear_driver_tracks_closed_form() {
        let f = DriverSpec::polynomial(vec![0.0, -1.0], 0.0).unwrap();
        let spec = model(f, TerminalCondition::Quadratic { scale: 1.0 }, 1.5);
        let exact = 2.25 * (-1.0f64).exp();
        let e40 = (run(SchemeKind::ImplicitBtz, &spec, 40, 10.0).y0() - exact).abs();
        let e80 = (run(SchemeKind::ImplicitBtz, &spec, 80, 10.0).y0() - exact).abs();
        assert!(e80 < e40 && e80 < 1e-2);
        // explicit with exact second moments: Y0 = (1-h)^N σ² T
        let ex = run(SchemeKind::ExplicitBtz, &spec, 50, 10.0).y0();
        assert_relative_eq!(ex, 2.25 * (1.0 - 1.0 / 50.0f64).powi(50), max_relative = 1e-12);
    }

    #[test]
    fn runs_are_deterministic_across_policies() {
        let spec = model(cubic(), TerminalCondition::Quadratic { scale: 1.0 }, 1.5);
        let tg = TimeGrid::new(1.0, 40).unwrap();
        let lat = build_lattice(&spec, &tg, &trinomial(tg.h()).unwrap(), None).unwrap();
        let cfg = SchemeConfig::new(SchemeKind::ImplicitBtz);
        let a = run_backward(&cfg.with_parallelism(Parallelism::Sequential), &lat, &spec).unwrap();
        let b = run_backward(&cfg.with_parallelism(Parallelism::Parallel), &lat, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.solver.solves > 0);
    }

    #[test]
    fn projection_scheme_requires_truncation() {
        let spec = model(cubic(), TerminalCondition::Quadratic { scale: 1.0 }, 1.5);
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let lat = build_lattice(&spec, &tg, &trinomial(tg.h()).unwrap(), None).unwrap();
        assert!(run_backward(&SchemeConfig::new(SchemeKind::FullProjectionPre), &lat, &spec).is_err());
        let bad = TruncationConfig { r0: 1.0, alpha: 0.3, epsilon: None, mode: TruncMode::Hard };
        assert!(run_backward(
            &SchemeConfig::new(SchemeKind::FullProjectionPre).with_truncation(bad),
            &lat,
            &spec
        )
        .is_err());
    }
}
