//! Independent reference values: the closed-form solution for linear drivers,
//! an explicit finite-difference solver for the semilinear PDE
//!
//! ```text
//! ∂t y + ½ σ² ∂xx y + b ∂x y + f(y, σ ∂x y) = 0,   y(T, ·) = g
//! ```
//!
//! and the proxy built from two fine lattice runs.

use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::forward::{build_lattice, Lattice};
use crate::grids::{trinomial, TimeGrid, TruncationConfig, WeightRule};
use crate::model::{ModelSpec, TerminalCondition};
use crate::parallel::Parallelism;
use crate::schemes::{run_backward, SchemeConfig, SchemeKind, SchemeRun};

/// Subintervals per smooth piece in the Gaussian quadrature.
const SIMPSON_PANELS: usize = 4000;
/// Half-width of the quadrature window in standard deviations.
const QUADRATURE_SDS: f64 = 12.0;

/// `E[g(mean + sd G)]`, `G ~ N(0, 1)`.
pub fn gaussian_expectation(g: &TerminalCondition, mean: f64, sd: f64) -> Result<f64> {
    if sd == 0.0 {
        return Ok(g.eval(mean));
    }
    match g {
        TerminalCondition::Quadratic { scale } => Ok(scale * (mean * mean + sd * sd)),
        TerminalCondition::Constant(c) => Ok(*c),
        TerminalCondition::Combination(parts) => parts
            .iter()
            .map(|(w, gk)| gaussian_expectation(gk, mean, sd).map(|e| w * e))
            .sum(),
        TerminalCondition::Clamp { lo, hi, slope } => {
            let mut kinks = Vec::new();
            if *slope != 0.0 {
                kinks.push(lo / slope);
                kinks.push(hi / slope);
            }
            Ok(piecewise_simpson(|x| g.eval(x), mean, sd, &kinks))
        }
        TerminalCondition::Custom { .. } => Err(FbsdeError::Domain(
            "no Gaussian expectation available for a custom terminal condition".into(),
        )),
    }
}

/// Composite Simpson against the Gaussian density, split at the kinks of `g`.
fn piecewise_simpson(g: impl Fn(f64) -> f64, mean: f64, sd: f64, kinks: &[f64]) -> f64 {
    let a = mean - QUADRATURE_SDS * sd;
    let b = mean + QUADRATURE_SDS * sd;
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = kinks.iter().copied().filter(|k| *k > a && *k < b).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(b);
    let density = |x: f64| {
        let u = (x - mean) / sd;
        (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let n = SIMPSON_PANELS;
        let step = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let x = lo + step * k as f64;
            let c = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += c * g(x) * density(x);
        }
        total += acc * step / 3.0;
    }
    total
}

/// Closed-form solution of the linear BSDE `f(y, z) = a y` with constant `b`, `σ`:
/// `v(t, x) = e^{a(T-t)} E[g(x + b(T-t) + σ W_{T-t})]`.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub a: f64,
    pub y0: f64,
    horizon: f64,
    drift: f64,
    sigma: f64,
    terminal: TerminalCondition,
}

impl LinearSolution {
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(FbsdeError::Domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let tau = self.horizon - t;
        let e = gaussian_expectation(&self.terminal, x + self.drift * tau, self.sigma * tau.sqrt())?;
        Ok((self.a * tau).exp() * e)
    }
}

pub fn linear_solution(a: f64, spec: &ModelSpec) -> Result<LinearSolution> {
    let (b, sigma) = spec.constant_coefficients().ok_or_else(|| {
        FbsdeError::Domain("the linear closed form needs constant b and sigma".into())
    })?;
    let mut sol = LinearSolution {
        a,
        y0: 0.0,
        horizon: spec.horizon,
        drift: b,
        sigma,
        terminal: spec.terminal.clone(),
    };
    sol.y0 = sol.value(0.0, spec.x0)?;
    Ok(sol)
}

/// Finite-difference solution stored on a few time slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSolution {
    pub x_min: f64,
    pub dx: f64,
    /// Effective time step (`T / steps`, at most the requested one).
    pub dt: f64,
    pub steps: usize,
    /// Index of `x0` in the space grid.
    pub center: usize,
    /// Increasing slice times, `times[0] = 0`, last `= T`.
    pub times: Vec<f64>,
    /// `values[s][j] = y(times[s], x_min + j dx)`.
    pub values: Vec<Vec<f64>>,
    /// `σ(t, x)` on each slice, used for `z`.
    sigma: Vec<Vec<f64>>,
    pub max_abs: f64,
}

impl PdeSolution {
    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.values[0].is_empty()
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + self.dx * j as f64
    }

    pub fn y0(&self) -> f64 {
        self.values[0][self.center]
    }

    /// `z = σ ∂x y` by central differences (one-sided at the ends).
    pub fn z(&self, slice: usize) -> Vec<f64> {
        let y = &self.values[slice];
        let n = y.len();
        (0..n)
            .map(|j| {
                let d = if j == 0 {
                    (y[1] - y[0]) / self.dx
                } else if j == n - 1 {
                    (y[n - 1] - y[n - 2]) / self.dx
                } else {
                    (y[j + 1] - y[j - 1]) / (2.0 * self.dx)
                };
                self.sigma[slice][j] * d
            })
            .collect()
    }

    /// Linear interpolation in `x` on a slice; `None` outside the grid.
    pub fn interpolate(&self, slice: usize, x: f64) -> Option<f64> {
        let u = (x - self.x_min) / self.dx;
        let n = self.len();
        if !(u >= -1e-9 && u <= (n - 1) as f64 + 1e-9) {
            return None;
        }
        let j = (u.floor().max(0.0) as usize).min(n - 2);
        let w = (u - j as f64).clamp(0.0, 1.0);
        let y = &self.values[slice];
        Some((1.0 - w) * y[j] + w * y[j + 1])
    }

    /// Slice whose time equals `t` up to rounding.
    pub fn slice_at(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.times.last().copied().unwrap_or(1.0).max(1.0);
        self.times.iter().position(|s| (s - t).abs() <= tol)
    }
}

/// `max |σ|`, scanned over the `6σ√T` window when `σ` is not constant.
pub fn sigma_bound(spec: &ModelSpec) -> f64 {
    if let Some(s) = spec.diffusion.as_constant() {
        return s.abs();
    }
    // Coarse scan of a non-constant coefficient over the 6σ window of the
    // starting value, refined once with the enlarged window.
    let mut s = spec.diffusion.eval(0.0, spec.x0).abs();
    for _ in 0..2 {
        let r = 6.0 * s.max(1e-12) * spec.horizon.sqrt();
        for it in 0..=20 {
            let t = spec.horizon * it as f64 / 20.0;
            for k in 0..=200 {
                let x = spec.x0 - r + 2.0 * r * k as f64 / 200.0;
                s = s.max(spec.diffusion.eval(t, x).abs());
            }
        }
    }
    s
}

/// Half-width `6 σ_max √T` of the finite-difference domain.
pub fn fd_extent(spec: &ModelSpec) -> f64 {
    6.0 * sigma_bound(spec) * spec.horizon.sqrt()
}

/// Largest `dt` satisfying both stability guards, using `max |g|` on the
/// domain as the value range.
pub fn guarded_dt(spec: &ModelSpec, dx: f64) -> Result<f64> {
    if !(dx > 0.0) {
        return Err(FbsdeError::Config(format!("dx must be positive, got {dx}")));
    }
    let s = sigma_bound(spec);
    let half = fd_extent(spec);
    let m = (half / dx).ceil() as usize;
    let range = (0..=2 * m)
        .map(|j| spec.terminal.eval(spec.x0 - m as f64 * dx + j as f64 * dx).abs())
        .fold(0.0f64, f64::max)
        + spec.driver.f00().abs() * spec.horizon;
    let diffusive = if s > 0.0 { dx * dx / (s * s) } else { f64::INFINITY };
    let l = spec.driver.reaction_lipschitz_bound(range);
    let reactive = if l > 0.0 { 0.5 / l } else { f64::INFINITY };
    let dt = diffusive.min(reactive).min(spec.horizon);
    Ok(dt)
}

/// Explicit backward finite differences on `[x0 - 6σ√T, x0 + 6σ√T]`, zero
/// curvature at both ends. Stores the slices `t = 0` and `t = T`.
pub fn fd_solve(spec: &ModelSpec, dx: f64, dt: f64) -> Result<PdeSolution> {
    fd_solve_sliced(spec, dx, dt, 1)
}

/// As [`fd_solve`] with the step count rounded up to a multiple of `slices`
/// and the solution stored at `t = kT/slices`.
pub fn fd_solve_sliced(spec: &ModelSpec, dx: f64, dt: f64, slices: usize) -> Result<PdeSolution> {
    if !(dx > 0.0) || !(dt > 0.0) || slices == 0 {
        return Err(FbsdeError::Config(format!(
            "need dx > 0, dt > 0, slices >= 1 (got {dx}, {dt}, {slices})"
        )));
    }
    let smax = sigma_bound(spec);
    if dt > dx * dx / (smax * smax) * (1.0 + 1e-12) {
        return Err(FbsdeError::Config(format!(
            "dt = {dt} exceeds the diffusive limit dx²/σ² = {}",
            dx * dx / (smax * smax)
        )));
    }
    let horizon = spec.horizon;
    let per_slice = ((horizon / dt) / slices as f64).ceil().max(1.0) as usize;
    let steps = per_slice * slices;
    let dt_eff = horizon / steps as f64;

    let m = (fd_extent(spec) / dx).ceil() as usize;
    let n = 2 * m + 1;
    let x_min = spec.x0 - m as f64 * dx;
    let xs: Vec<f64> = (0..n).map(|j| x_min + j as f64 * dx).collect();

    let driver = &spec.driver;
    let mut y: Vec<f64> = xs.iter().map(|&x| spec.terminal.eval(x)).collect();
    let mut next = vec![0.0; n];
    let sigma_row = |t: f64| xs.iter().map(|&x| spec.diffusion.eval(t, x)).collect::<Vec<_>>();
    let drift_row = |t: f64| xs.iter().map(|&x| spec.drift.eval(t, x)).collect::<Vec<_>>();
    let constant = spec.constant_coefficients().is_some();
    let mut sig = sigma_row(horizon);
    let mut drift = drift_row(horizon);

    let mut times = vec![horizon];
    let mut values = vec![y.clone()];
    let mut sigmas = vec![sig.clone()];
    let mut max_abs = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let inv_dx2 = 1.0 / (dx * dx);
    let inv_2dx = 0.5 / dx;
    for k in (0..steps).rev() {
        let t_next = horizon * (k + 1) as f64 / steps as f64;
        if !constant && k + 1 < steps {
            sig = sigma_row(t_next);
            drift = drift_row(t_next);
        }
        let range = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let l = driver.reaction_lipschitz_bound(range);
        if dt_eff * l > 0.5 {
            return Err(FbsdeError::Config(format!(
                "dt = {dt_eff} violates the reaction guard (Lipschitz bound {l} at |y| <= {range})"
            )));
        }
        for j in 1..n - 1 {
            let d1 = (y[j + 1] - y[j - 1]) * inv_2dx;
            let d2 = (y[j + 1] - 2.0 * y[j] + y[j - 1]) * inv_dx2;
            let s = sig[j];
            next[j] = y[j] + dt_eff * (0.5 * s * s * d2 + drift[j] * d1 + driver.eval(y[j], s * d1));
        }
        next[0] = 2.0 * next[1] - next[2];
        next[n - 1] = 2.0 * next[n - 2] - next[n - 3];
        std::mem::swap(&mut y, &mut next);
        if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
            return Err(FbsdeError::SolverFailure(format!(
                "finite-difference value became non-finite at step {k}, x = {}",
                xs[bad]
            )));
        }
        max_abs = y.iter().fold(max_abs, |a, v| a.max(v.abs()));
        if k % per_slice == 0 {
            let t = horizon * k as f64 / steps as f64;
            times.push(t);
            values.push(y.clone());
            sigmas.push(if constant { sig.clone() } else { sigma_row(t) });
        }
    }
    times.reverse();
    values.reverse();
    sigmas.reverse();
    Ok(PdeSolution {
        x_min,
        dx,
        dt: dt_eff,
        steps,
        center: m,
        times,
        values,
        sigma: sigmas,
        max_abs,
    })
}

/// `sup |y_i(node) - y_FD(t_i, x_node)|` over levels whose time is a stored
/// slice and nodes within `window` of `x0`. `None` when no level matches.
pub fn lattice_sup_error(
    run: &SchemeRun,
    lattice: &Lattice,
    sol: &PdeSolution,
    x0: f64,
    window: f64,
) -> Option<f64> {
    let tg = lattice.time_grid();
    let mut worst: Option<f64> = None;
    for i in 0..=lattice.steps() {
        let Some(s) = sol.slice_at(tg.t(i)) else { continue };
        for (node, &x) in lattice.states(i).iter().enumerate() {
            if (x - x0).abs() > window {
                continue;
            }
            let Some(v) = sol.interpolate(s, x) else { continue };
            let e = (run.y[i][node] - v).abs();
            worst = Some(match worst {
                Some(w) if !(e > w) && !e.is_nan() => w,
                _ => e,
            });
            if e.is_nan() {
                return Some(f64::NAN);
            }
        }
    }
    worst
}

/// Average of the implicit and Full-Projection values at a fine partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyReference {
    pub steps: usize,
    pub implicit: f64,
    pub full_projection: f64,
    pub value: f64,
}

impl ProxyReference {
    pub fn gap(&self) -> f64 {
        (self.implicit - self.full_projection).abs()
    }
}

pub const PROXY_STEPS: usize = 120;

pub fn proxy_reference(
    spec: &ModelSpec,
    trunc: &TruncationConfig,
    weights: WeightRule,
    steps: usize,
    parallelism: Parallelism,
) -> Result<ProxyReference> {
    let tg = TimeGrid::new(spec.horizon, steps)?;
    let lattice = build_lattice(spec, &tg, &trinomial(tg.h())?, None)?;
    let y0 = |kind| -> Result<f64> {
        let mut cfg = SchemeConfig::new(kind).with_truncation(*trunc).with_parallelism(parallelism);
        cfg.weights = weights;
        let run = run_backward(&cfg, &lattice, spec)?;
        let v = run.y0();
        if !run.is_finite() || !v.is_finite() {
            return Err(FbsdeError::NonFinite(format!(
                "{} run at N = {steps} is not finite",
                kind.label()
            )));
        }
        Ok(v)
    };
    let implicit = y0(SchemeKind::ImplicitBtz)?;
    let full_projection = y0(SchemeKind::FullProjectionPre)?;
    Ok(ProxyReference {
        steps,
        implicit,
        full_projection,
        value: 0.5 * (implicit + full_projection),
    })
}
