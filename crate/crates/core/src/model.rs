//! Problem instances: forward coefficients, terminal condition and driver,
//! together with the driver's structural constants and numerical probes
//! that check them.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};

pub type DriverFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type CoefficientFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Structural constants of a driver `f(y, z)`.
///
/// - monotonicity `M_y`: `(y'-y)(f(y',z)-f(y,z)) <= M_y (y'-y)^2`
/// - `L_y`, `m`: `|f(y',z)-f(y,z)| <= L_y (1 + |y'|^(m-1) + |y|^(m-1)) |y'-y|`
/// - `L_z`: `|f(y,z')-f(y,z)| <= L_z |z'-z|`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverConstants {
    pub monotonicity: f64,
    pub lipschitz_y: f64,
    pub degree: u32,
    pub lipschitz_z: f64,
}

#[derive(Clone)]
enum DriverExpr {
    /// `Σ a_k y^k + c z`
    Polynomial { coefficients: Vec<f64>, z_coefficient: f64 },
    Custom(DriverFn),
}

/// A driver together with its declared (or derived) constants.
#[derive(Clone)]
pub struct DriverSpec {
    expr: DriverExpr,
    constants: DriverConstants,
    f00: f64,
}

impl fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("DriverSpec");
        match &self.expr {
            DriverExpr::Polynomial {
                coefficients,
                z_coefficient,
            } => s
                .field("coefficients", coefficients)
                .field("z_coefficient", z_coefficient),
            DriverExpr::Custom(_) => s.field("expr", &"<callback>"),
        };
        s.field("constants", &self.constants)
            .field("f00", &self.f00)
            .finish()
    }
}

impl DriverSpec {
    /// Polynomial driver `Σ a_k y^k + c z` with constants derived from the
    /// coefficients. Derivation is supported up to degree 3; higher degrees
    /// need [`DriverSpec::polynomial_with_constants`].
    pub fn polynomial(coefficients: Vec<f64>, z_coefficient: f64) -> Result<Self> {
        let constants = derive_polynomial_constants(&coefficients, z_coefficient)?;
        Self::polynomial_with_constants(coefficients, z_coefficient, constants)
    }

    pub fn polynomial_with_constants(
        mut coefficients: Vec<f64>,
        z_coefficient: f64,
        constants: DriverConstants,
    ) -> Result<Self> {
        if coefficients.iter().chain([&z_coefficient]).any(|c| !c.is_finite()) {
            return Err(FbsdeError::NonFinite("driver coefficient".into()));
        }
        while coefficients.len() > 1 && coefficients.last() == Some(&0.0) {
            coefficients.pop();
        }
        if coefficients.is_empty() {
            coefficients.push(0.0);
        }
        check_constants(&constants)?;
        let f00 = coefficients[0];
        Ok(Self {
            expr: DriverExpr::Polynomial {
                coefficients,
                z_coefficient,
            },
            constants,
            f00,
        })
    }

    /// Arbitrary callback driver. Its constants are trusted as declared
    /// (and can still be probed by [`validate_model`]).
    pub fn custom(f: DriverFn, constants: DriverConstants) -> Result<Self> {
        check_constants(&constants)?;
        let f00 = f(0.0, 0.0);
        if !f00.is_finite() {
            return Err(FbsdeError::NonFinite("driver at (0, 0)".into()));
        }
        Ok(Self {
            expr: DriverExpr::Custom(f),
            constants,
            f00,
        })
    }

    /// Same driver expression with different declared constants.
    pub fn with_constants(&self, constants: DriverConstants) -> Result<Self> {
        check_constants(&constants)?;
        Ok(Self {
            constants,
            ..self.clone()
        })
    }

    #[inline]
    pub fn eval(&self, y: f64, z: f64) -> f64 {
        match &self.expr {
            DriverExpr::Polynomial {
                coefficients,
                z_coefficient,
            } => horner(coefficients, y) + z_coefficient * z,
            DriverExpr::Custom(f) => f(y, z),
        }
    }

    /// `∂f/∂y`, available for polynomial drivers only.
    #[inline]
    pub fn dy(&self, y: f64) -> Option<f64> {
        match &self.expr {
            DriverExpr::Polynomial { coefficients, .. } => {
                let mut acc = 0.0;
                for (k, a) in coefficients.iter().enumerate().skip(1).rev() {
                    acc = acc * y + k as f64 * a;
                }
                Some(acc)
            }
            DriverExpr::Custom(_) => None,
        }
    }

    pub fn constants(&self) -> DriverConstants {
        self.constants
    }

    pub fn monotonicity(&self) -> f64 {
        self.constants.monotonicity
    }

    pub fn lipschitz_y(&self) -> f64 {
        self.constants.lipschitz_y
    }

    pub fn degree(&self) -> u32 {
        self.constants.degree
    }

    pub fn lipschitz_z(&self) -> f64 {
        self.constants.lipschitz_z
    }

    /// `f(0, 0)`.
    pub fn f00(&self) -> f64 {
        self.f00
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self.expr, DriverExpr::Polynomial { .. })
    }

    /// Upper bound on `|∂f/∂y|` over `|y| <= r`.
    pub fn reaction_lipschitz_bound(&self, r: f64) -> f64 {
        match &self.expr {
            DriverExpr::Polynomial { coefficients, .. } => coefficients
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, a)| k as f64 * a.abs() * r.powi(k as i32 - 1))
                .sum(),
            DriverExpr::Custom(_) => {
                let m = self.constants.degree as i32;
                self.constants.lipschitz_y * (1.0 + 2.0 * r.powi(m - 1))
            }
        }
    }
}

fn horner(coefficients: &[f64], y: f64) -> f64 {
    coefficients.iter().rev().fold(0.0, |acc, a| acc * y + a)
}

fn check_constants(c: &DriverConstants) -> Result<()> {
    if c.degree < 1 {
        return Err(FbsdeError::Domain("driver degree m must be >= 1".into()));
    }
    if !(c.lipschitz_y >= 0.0 && c.lipschitz_z >= 0.0) || !c.monotonicity.is_finite() {
        return Err(FbsdeError::Domain(
            "driver constants must be finite with L_y, L_z >= 0".into(),
        ));
    }
    Ok(())
}

/// Constants of `Σ a_k y^k + c z` for degree <= 3.
///
/// `M_y = sup_y p'(y)`. For `L_y` each monomial `a_k y^k` contributes to the
/// constant part and to the `|y|^(m-1)` part of the local Lipschitz bound
/// (Young's inequality on `Σ_j |y'|^j |y|^(k-1-j)`), and `L_y` is the larger
/// of the two parts.
fn derive_polynomial_constants(coefficients: &[f64], z_coefficient: f64) -> Result<DriverConstants> {
    let degree = coefficients
        .iter()
        .rposition(|a| *a != 0.0)
        .unwrap_or(0)
        .max(1);
    if degree > 3 {
        return Err(FbsdeError::Config(
            "constants can only be derived for polynomial drivers of degree <= 3; declare them".into(),
        ));
    }
    let a = |k: usize| coefficients.get(k).copied().unwrap_or(0.0);
    let (a1, a2, a3) = (a(1), a(2), a(3));
    let monotonicity = if a3 < 0.0 {
        a1 - a2 * a2 / (3.0 * a3)
    } else if a3 == 0.0 && a2 == 0.0 {
        a1
    } else {
        return Err(FbsdeError::Config(
            "polynomial driver is not one-sided Lipschitz (needs negative cubic term or degree 1)".into(),
        ));
    };
    let m = degree;
    let mut constant_part = a1.abs();
    let mut power_part = 0.0;
    for k in 2..=m {
        let ak = a(k).abs();
        if k == m {
            power_part += 0.5 * k as f64 * ak;
        } else {
            constant_part += k as f64 * ak;
            power_part += 0.5 * k as f64 * ak;
        }
    }
    let lipschitz_y = if m == 1 {
        constant_part
    } else {
        constant_part.max(power_part)
    };
    Ok(DriverConstants {
        monotonicity,
        lipschitz_y,
        degree: m as u32,
        lipschitz_z: z_coefficient.abs(),
    })
}

/// Constants of the growth bounds
/// `|f(y,z)| <= K + K_y |y|^m + K_z |z|` and
/// `y f(y,z) <= M + M̂_y |y|^2 + M_z |z|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    pub k: f64,
    pub k_y: f64,
    pub k_z: f64,
    pub m: f64,
    pub m_hat_y: f64,
    pub m_z: f64,
    pub nu: f64,
}

pub fn growth_constants(driver: &DriverSpec, nu: f64) -> Result<GrowthConstants> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(FbsdeError::Domain(format!("nu must be positive, got {nu}")));
    }
    let c = driver.constants();
    let f00 = driver.f00();
    Ok(GrowthConstants {
        k: f00.abs() + c.lipschitz_y,
        k_y: 2.0 * c.lipschitz_y,
        k_z: c.lipschitz_z,
        m: f00 * f00 / (2.0 * nu),
        m_hat_y: c.monotonicity + nu,
        m_z: c.lipschitz_z * c.lipschitz_z / (2.0 * nu),
        nu,
    })
}

/// Forward drift or diffusion coefficient `(t, x) -> value`.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Custom(CoefficientFn),
}

impl Coefficient {
    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Custom(f) => f(t, x),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coefficient::Constant(c) => Some(*c),
            Coefficient::Custom(_) => None,
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Custom(_) => write!(f, "Custom(<callback>)"),
        }
    }
}

/// Terminal condition `g`.
#[derive(Clone)]
pub enum TerminalCondition {
    /// `scale * x^2`
    Quadratic { scale: f64 },
    /// `min(hi, max(lo, slope * x))`
    Clamp { lo: f64, hi: f64, slope: f64 },
    Constant(f64),
    /// `Σ w_k g_k(x)`
    Combination(Vec<(f64, TerminalCondition)>),
    Custom { g: TerminalFn, lipschitz: f64 },
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalCondition::Quadratic { scale } => write!(f, "Quadratic({scale})"),
            TerminalCondition::Clamp { lo, hi, slope } => {
                write!(f, "Clamp(lo={lo}, hi={hi}, slope={slope})")
            }
            TerminalCondition::Constant(c) => write!(f, "Constant({c})"),
            TerminalCondition::Combination(parts) => f.debug_list().entries(parts.iter()).finish(),
            TerminalCondition::Custom { lipschitz, .. } => write!(f, "Custom(L_g={lipschitz})"),
        }
    }
}

impl TerminalCondition {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TerminalCondition::Quadratic { scale } => scale * x * x,
            TerminalCondition::Clamp { lo, hi, slope } => (slope * x).max(*lo).min(*hi),
            TerminalCondition::Constant(c) => *c,
            TerminalCondition::Combination(parts) => {
                parts.iter().map(|(w, g)| w * g.eval(x)).sum()
            }
            TerminalCondition::Custom { g, .. } => g(x),
        }
    }

    /// Lipschitz constant on `[-radius, radius]` (global where one exists).
    pub fn lipschitz_on(&self, radius: f64) -> f64 {
        match self {
            TerminalCondition::Quadratic { scale } => 2.0 * scale.abs() * radius,
            TerminalCondition::Clamp { slope, .. } => slope.abs(),
            TerminalCondition::Constant(_) => 0.0,
            TerminalCondition::Combination(parts) => parts
                .iter()
                .map(|(w, g)| w.abs() * g.lipschitz_on(radius))
                .sum(),
            TerminalCondition::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    /// `self + weight * clamp(x, -7, 7)`, the perturbation used for
    /// stability comparisons.
    pub fn perturbed(&self, weight: f64) -> Self {
        TerminalCondition::Combination(vec![
            (1.0, self.clone()),
            (
                weight,
                TerminalCondition::Clamp {
                    lo: -7.0,
                    hi: 7.0,
                    slope: 1.0,
                },
            ),
        ])
    }
}

/// A scalar FBSDE instance (`d = n = 1`).
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub horizon: f64,
    pub x0: f64,
    pub drift: Coefficient,
    pub diffusion: Coefficient,
    pub terminal: TerminalCondition,
    pub driver: DriverSpec,
}

impl ModelSpec {
    /// Brownian dimension.
    pub const D: usize = 1;
    /// Dimension of `Y`.
    pub const N: usize = 1;

    pub fn new(
        horizon: f64,
        x0: f64,
        drift: Coefficient,
        diffusion: Coefficient,
        terminal: TerminalCondition,
        driver: DriverSpec,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(FbsdeError::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if !x0.is_finite() {
            return Err(FbsdeError::NonFinite("x0".into()));
        }
        for (name, c) in [("drift", &drift), ("diffusion", &diffusion)] {
            if let Some(v) = c.as_constant() {
                if !v.is_finite() {
                    return Err(FbsdeError::NonFinite(name.into()));
                }
            }
        }
        Ok(Self {
            horizon,
            x0,
            drift,
            diffusion,
            terminal,
            driver,
        })
    }

    /// `b` and `σ` both constant.
    pub fn constant_coefficients(&self) -> Option<(f64, f64)> {
        Some((self.drift.as_constant()?, self.diffusion.as_constant()?))
    }

    pub fn with_terminal(&self, terminal: TerminalCondition) -> Self {
        Self {
            terminal,
            ..self.clone()
        }
    }
}

/// Sampling box and budget for [`validate_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub budget: usize,
    /// Relative tolerance.
    pub tol: f64,
    pub y_max: f64,
    pub z_max: f64,
    /// Offset into the low-discrepancy sequence.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            budget: 10_000,
            tol: 1e-9,
            y_max: 50.0,
            z_max: 50.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    Monotonicity,
    RegularityY,
    RegularityZ,
    TerminalLipschitz,
    GrowthAbs,
    GrowthInner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub passed: bool,
    pub samples: usize,
    /// Largest `(lhs - rhs) / max(1, |lhs|, |rhs|)` observed.
    pub worst_excess: f64,
    /// Arguments at which `worst_excess` was attained.
    pub witness: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, a: Assumption) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.assumption == a)
    }
}

/// Additive-recurrence (Kronecker) point set in `[0,1)^3`.
struct Kronecker3 {
    alpha: [f64; 3],
    index: u64,
}

impl Kronecker3 {
    fn new(seed: u64) -> Self {
        // plastic-type constant: real root of x^4 = x + 1
        let phi: f64 = 1.220_744_084_605_759_5;
        Self {
            alpha: [1.0 / phi, 1.0 / (phi * phi), 1.0 / (phi * phi * phi)],
            index: seed,
        }
    }

    fn next(&mut self) -> [f64; 3] {
        self.index += 1;
        let n = self.index as f64;
        self.alpha.map(|a| (0.5 + n * a).fract())
    }
}

struct Tracker {
    assumption: Assumption,
    tol: f64,
    samples: usize,
    worst: f64,
    witness: Vec<f64>,
}

impl Tracker {
    fn new(assumption: Assumption, tol: f64) -> Self {
        Self {
            assumption,
            tol,
            samples: 0,
            worst: f64::NEG_INFINITY,
            witness: Vec::new(),
        }
    }

    fn record(&mut self, lhs: f64, rhs: f64, at: &[f64]) {
        self.samples += 1;
        let excess = (lhs - rhs) / 1f64.max(lhs.abs()).max(rhs.abs());
        if excess > self.worst {
            self.worst = excess;
            self.witness = at.to_vec();
        }
    }

    fn finish(self) -> AssumptionCheck {
        AssumptionCheck {
            assumption: self.assumption,
            passed: self.worst <= self.tol,
            samples: self.samples,
            worst_excess: self.worst,
            witness: self.witness,
        }
    }
}

/// Probes the driver and terminal assumptions on a deterministic
/// low-discrepancy sample. Samples are spread over nested boxes
/// `[-Y_max s, Y_max s]` with `s ∈ {1, 1e-1, 1e-2, 1e-3}` so that small
/// arguments (where one-sided bounds are tightest) are covered.
pub fn validate_model(spec: &ModelSpec, probe: &ProbeConfig) -> Result<ValidationReport> {
    if probe.budget < 1 {
        return Err(FbsdeError::Domain("probe budget must be >= 1".into()));
    }
    let f = &spec.driver;
    let c = f.constants();
    let g = growth_constants(f, 1.0)?;
    let m = c.degree as i32;
    let x_radius = {
        let sigma = spec.diffusion.eval(0.0, spec.x0).abs();
        let b = spec.drift.eval(0.0, spec.x0).abs();
        (spec.x0.abs() + b * spec.horizon + 6.0 * sigma * spec.horizon.sqrt()).max(1.0)
    };
    let l_g = spec.terminal.lipschitz_on(x_radius);

    let mut mon = Tracker::new(Assumption::Monotonicity, probe.tol);
    let mut reg_y = Tracker::new(Assumption::RegularityY, probe.tol);
    let mut reg_z = Tracker::new(Assumption::RegularityZ, probe.tol);
    let mut lip_g = Tracker::new(Assumption::TerminalLipschitz, probe.tol);
    let mut gr_abs = Tracker::new(Assumption::GrowthAbs, probe.tol);
    let mut gr_inner = Tracker::new(Assumption::GrowthInner, probe.tol);

    let mut seq = Kronecker3::new(probe.seed);
    for n in 0..probe.budget {
        let scale = 10f64.powi(-((n % 4) as i32));
        let [u, v, w] = seq.next();
        let y = (2.0 * u - 1.0) * probe.y_max * scale;
        let y2 = (2.0 * v - 1.0) * probe.y_max * scale;
        let z = (2.0 * w - 1.0) * probe.z_max * scale;
        let z2 = (2.0 * u - 1.0) * probe.z_max * scale;

        let fy = f.eval(y, z);
        let fy2 = f.eval(y2, z);
        let fz2 = f.eval(y, z2);
        if !(fy.is_finite() && fy2.is_finite() && fz2.is_finite()) {
            return Err(FbsdeError::NonFinite(format!("driver at y={y}, y'={y2}, z={z}")));
        }
        let dy = y2 - y;
        mon.record(dy * (fy2 - fy), c.monotonicity * dy * dy, &[y, y2, z]);
        reg_y.record(
            (fy2 - fy).abs(),
            c.lipschitz_y * (1.0 + y2.abs().powi(m - 1) + y.abs().powi(m - 1)) * dy.abs(),
            &[y, y2, z],
        );
        reg_z.record((fz2 - fy).abs(), c.lipschitz_z * (z2 - z).abs(), &[y, z, z2]);
        gr_abs.record(
            fy.abs(),
            g.k + g.k_y * y.abs().powi(m) + g.k_z * z.abs(),
            &[y, z],
        );
        gr_inner.record(y * fy, g.m + g.m_hat_y * y * y + g.m_z * z * z, &[y, z]);

        let xa = (2.0 * u - 1.0) * x_radius * scale.sqrt() + spec.x0;
        let xb = (2.0 * w - 1.0) * x_radius + spec.x0;
        let (ga, gb) = (spec.terminal.eval(xa), spec.terminal.eval(xb));
        let t = v * spec.horizon;
        for val in [
            ga,
            gb,
            spec.drift.eval(t, xa),
            spec.diffusion.eval(t, xa),
        ] {
            if !val.is_finite() {
                return Err(FbsdeError::NonFinite(format!("coefficient at t={t}, x={xa}")));
            }
        }
        lip_g.record((ga - gb).abs(), l_g * (xa - xb).abs(), &[xa, xb]);
    }

    Ok(ValidationReport {
        checks: vec![
            mon.finish(),
            reg_y.finish(),
            reg_z.finish(),
            lip_g.finish(),
            gr_abs.finish(),
            gr_inner.finish(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(m_y: f64) -> DriverSpec {
        DriverSpec::polynomial(vec![0.0, 0.0, 0.0, -1.0], 0.0)
            .unwrap()
            .with_constants(DriverConstants {
                monotonicity: m_y,
                lipschitz_y: 1.5,
                degree: 3,
                lipschitz_z: 0.0,
            })
            .unwrap()
    }

    fn spec_with(driver: DriverSpec) -> ModelSpec {
        ModelSpec::new(
            1.0,
            0.0,
            Coefficient::Constant(0.0),
            Coefficient::Constant(1.5),
            TerminalCondition::Quadratic { scale: 1.0 },
            driver,
        )
        .unwrap()
    }

    #[test]
    fn derived_constants_of_builtin_drivers() {
        let c = DriverSpec::polynomial(vec![0.0, 0.0, 0.0, -1.0], 0.0)
            .unwrap()
            .constants();
        assert_eq!(c.monotonicity, 0.0);
        assert_eq!(c.lipschitz_y, 1.5);
        assert_eq!(c.degree, 3);
        let c = DriverSpec::polynomial(vec![0.0, -1.0, 0.0, -1.0], 0.0)
            .unwrap()
            .constants();
        assert_eq!(c.monotonicity, -1.0);
        assert_eq!(c.lipschitz_y, 1.5);
        let c = DriverSpec::polynomial(vec![0.0, -1.0], 2.0).unwrap().constants();
        assert_eq!((c.monotonicity, c.lipschitz_y, c.degree, c.lipschitz_z), (-1.0, 1.0, 1, 2.0));
        assert!(DriverSpec::polynomial(vec![0.0, 0.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn derivative_matches_polynomial() {
        let f = DriverSpec::polynomial(vec![1.0, -1.0, 0.5, -2.0], 0.0).unwrap();
        let y = 0.7;
        assert!((f.dy(y).unwrap() - (-1.0 + 2.0 * 0.5 * y - 6.0 * y * y)).abs() < 1e-14);
    }

    #[test]
    fn cubic_driver_passes_all_checks() {
        let report = validate_model(&spec_with(cubic(0.0)), &ProbeConfig::default()).unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn damped_cubic_satisfies_monotonicity_with_minus_one() {
        let f = DriverSpec::polynomial(vec![0.0, -1.0, 0.0, -1.0], 0.0).unwrap();
        let spec = spec_with(f).with_terminal(TerminalCondition::Clamp {
            lo: -7.0,
            hi: 7.0,
            slope: 1.0,
        });
        let report = validate_model(&spec, &ProbeConfig::default()).unwrap();
        assert!(report.get(Assumption::Monotonicity).unwrap().passed);
        assert!(report.all_passed());
    }

    #[test]
    fn overclaimed_monotonicity_is_caught_near_the_diagonal() {
        let report = validate_model(&spec_with(cubic(-0.5)), &ProbeConfig::default()).unwrap();
        let mon = report.get(Assumption::Monotonicity).unwrap();
        assert!(!mon.passed);
        // the violation set is y^2 + y y' + y'^2 < 1/2
        let (y, y2) = (mon.witness[0], mon.witness[1]);
        assert!(y * y + y * y2 + y2 * y2 < 0.5);
    }

    #[test]
    fn brute_force_scan_agrees_on_monotonicity_witness() {
        // independent grid scan of (y'-y)(f(y')-f(y)) + 0.5 (y'-y)^2 for f = -y^3
        let mut found = false;
        for i in -20..=20 {
            for j in -20..=20 {
                let (y, y2) = (i as f64 * 0.05, j as f64 * 0.05);
                let d = y2 - y;
                if d != 0.0 && d * (y * y * y - y2 * y2 * y2) > -0.5 * d * d {
                    found = true;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn probes_are_deterministic() {
        let spec = spec_with(cubic(0.0));
        let a = validate_model(&spec, &ProbeConfig::default()).unwrap();
        let b = validate_model(&spec, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_driver_is_rejected() {
        let f = DriverSpec::custom(
            Arc::new(|y, _| if y > 10.0 { f64::NAN } else { -y }),
            DriverConstants {
                monotonicity: -1.0,
                lipschitz_y: 1.0,
                degree: 1,
                lipschitz_z: 0.0,
            },
        )
        .unwrap();
        assert!(matches!(
            validate_model(&spec_with(f), &ProbeConfig::default()),
            Err(FbsdeError::NonFinite(_))
        ));
    }

    #[test]
    fn growth_constants_by_substitution() {
        let f = DriverSpec::polynomial_with_constants(
            vec![0.0, 0.0, 0.0, -1.0],
            0.0,
            DriverConstants {
                monotonicity: 0.0,
                lipschitz_y: 1.0,
                degree: 3,
                lipschitz_z: 0.0,
            },
        )
        .unwrap();
        let g = growth_constants(&f, 1.0).unwrap();
        assert_eq!((g.k, g.k_y, g.k_z, g.m, g.m_hat_y, g.m_z), (1.0, 2.0, 0.0, 0.0, 1.0, 0.0));

        let f = DriverSpec::polynomial_with_constants(
            vec![2.0, -1.0],
            3.0,
            DriverConstants {
                monotonicity: -1.0,
                lipschitz_y: 1.0,
                degree: 1,
                lipschitz_z: 3.0,
            },
        )
        .unwrap();
        let g = growth_constants(&f, 0.5).unwrap();
        assert_eq!((g.m, g.m_hat_y, g.m_z), (4.0, -0.5, 9.0));
        assert_eq!(growth_constants(&f, 0.5).unwrap(), g);
        assert!(growth_constants(&f, 0.0).is_err());
    }
}
