//! Time grid, projections and the discrete increment law.
//!
//! `T^h` projects backward values on the ball of radius `R^h = R0 h^-α`;
//! `T^{r^h}` clips the driving increment at `r^h = sqrt(2h) ln(1/h)` inside
//! the `Z` weights `H = T^{r^h}(ΔW) / h`.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul};
use serde::{Deserialize, Serialize};

use crate::error::{FbsdeError, Result};
use crate::treeval::compensated_sum;

/// Uniform subdivision `t_i = i h` of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    h: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(FbsdeError::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 1 {
            return Err(FbsdeError::Domain("number of time steps must be >= 1".into()));
        }
        let h = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|i| i as f64 * h).collect();
        times[steps] = horizon;
        Ok(Self {
            horizon,
            steps,
            h,
            times,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncMode {
    #[default]
    Hard,
    Mollified,
}

impl std::str::FromStr for TruncMode {
    type Err = FbsdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(TruncMode::Hard),
            "mollified" => Ok(TruncMode::Mollified),
            other => Err(FbsdeError::Config(format!("unknown truncation mode '{other}'"))),
        }
    }
}

/// Parameters of `T^h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub r0: f64,
    pub alpha: f64,
    /// Blend width of the mollified mode; `None` means `ε = h`.
    pub epsilon: Option<f64>,
    pub mode: TruncMode,
}

impl TruncationConfig {
    pub const DEFAULT_R0: f64 = 10.0;

    /// `R0 = 10`, `α = 1/(2(m-1)) - 1e-3`, hard mode. For Lipschitz
    /// drivers (`m = 1`) any `α > 0` is admissible and `α = 1/2` is used.
    pub fn default_for_degree(m: u32) -> Self {
        Self {
            r0: Self::DEFAULT_R0,
            alpha: Self::default_alpha(m),
            epsilon: None,
            mode: TruncMode::Hard,
        }
    }

    pub fn default_alpha(m: u32) -> f64 {
        if m <= 1 {
            0.5
        } else {
            1.0 / (2.0 * (m as f64 - 1.0)) - 1e-3
        }
    }

    /// `sup α` allowed for degree `m` (infinite when `m = 1`).
    pub fn max_alpha(m: u32) -> f64 {
        if m <= 1 {
            f64::INFINITY
        } else {
            1.0 / (2.0 * (m as f64 - 1.0))
        }
    }

    pub fn validate_for_degree(&self, m: u32) -> Result<()> {
        if !(self.r0 > 0.0) || !self.r0.is_finite() {
            return Err(FbsdeError::Config(format!("R0 must be positive, got {}", self.r0)));
        }
        if !(self.alpha > 0.0) || self.alpha > Self::max_alpha(m) {
            return Err(FbsdeError::Config(format!(
                "alpha must lie in (0, {}] for driver degree {m}, got {}",
                Self::max_alpha(m),
                self.alpha
            )));
        }
        if let Some(eps) = self.epsilon {
            if !(eps >= 0.0) {
                return Err(FbsdeError::Config(format!("epsilon must be >= 0, got {eps}")));
            }
        }
        Ok(())
    }

    /// Resolves the operator for step size `h`.
    pub fn at_step(&self, h: f64) -> Result<Truncation> {
        let radius = truncation_radius(self, h)?;
        Ok(Truncation {
            radius,
            epsilon: self.epsilon.unwrap_or(h),
            mode: self.mode,
        })
    }
}

/// `R^h = R0 h^-α`.
pub fn truncation_radius(cfg: &TruncationConfig, h: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(FbsdeError::Domain(format!("step size must be positive, got {h}")));
    }
    Ok(cfg.r0 * h.powf(-cfg.alpha))
}

/// `T^h` resolved at a fixed step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub radius: f64,
    pub epsilon: f64,
    pub mode: TruncMode,
}

impl Truncation {
    /// No-op truncation (infinite radius).
    pub fn identity() -> Self {
        Self {
            radius: f64::INFINITY,
            epsilon: 0.0,
            mode: TruncMode::Hard,
        }
    }

    /// Radius transfer `ρ(|y|)`; the truncated value is `sign(y) ρ(|y|)`.
    ///
    /// Mollified mode: `ρ(r) = r` up to `R`, then the cubic Hermite blend with
    /// `ρ'(R) = 1`, `ρ'(R+ε) = 0`, which reduces to `R + s - s²/(2ε)` with
    /// `s = r - R`, and the constant `R + ε/2` beyond `R + ε`.
    #[inline]
    pub fn apply(&self, y: f64) -> f64 {
        let r = y.abs();
        if !(r > self.radius) {
            return y;
        }
        let rho = match self.mode {
            TruncMode::Hard => self.radius,
            TruncMode::Mollified => {
                if self.epsilon <= 0.0 {
                    self.radius
                } else {
                    let s = (r - self.radius).min(self.epsilon);
                    self.radius + s - s * s / (2.0 * self.epsilon)
                }
            }
        };
        rho.copysign(y)
    }

    /// Largest output magnitude.
    pub fn output_bound(&self) -> f64 {
        match self.mode {
            TruncMode::Hard => self.radius,
            TruncMode::Mollified => self.radius + 0.5 * self.epsilon,
        }
    }
}

/// `T^h(y)` from the configuration.
pub fn truncate(cfg: &TruncationConfig, h: f64, y: f64) -> Result<f64> {
    Ok(cfg.at_step(h)?.apply(y))
}

/// `r^h = sqrt(2h) ln(1/h)`; `None` when `h >= 1`, where the formula is
/// non-positive and increment truncation is switched off.
pub fn increment_radius(h: f64) -> Option<f64> {
    (h > 0.0 && h < 1.0).then(|| (2.0 * h).sqrt() * (1.0 / h).ln())
}

/// Clamp of an increment to `[-r_h, r_h]`.
pub fn truncate_increment(r_h: f64, dw: f64) -> Result<f64> {
    if !(r_h > 0.0) {
        return Err(FbsdeError::Domain(format!("increment radius must be positive, got {r_h}")));
    }
    Ok(dw.clamp(-r_h, r_h))
}

/// Exact form of a support point: `sign * sqrt(sq * h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactPoint {
    pub sign: i8,
    pub sq: Ratio<i64>,
}

/// Symmetric, finitely supported replacement for `N(0, h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementDistribution {
    pub h: f64,
    pub points: Vec<f64>,
    pub weights: Vec<Ratio<i64>>,
    pub exact: Option<Vec<ExactPoint>>,
    /// Highest `q` with moments `0..=q` equal to the Gaussian ones.
    pub order_matched: usize,
}

impl IncrementDistribution {
    /// Builds from exact points; `order_matched` is computed.
    pub fn from_exact(h: f64, exact: Vec<ExactPoint>, weights: Vec<Ratio<i64>>) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(FbsdeError::Domain(format!("step size must be positive, got {h}")));
        }
        if exact.len() != weights.len() || exact.is_empty() {
            return Err(FbsdeError::Structure("points and weights differ in length".into()));
        }
        if weights.iter().any(|w| *w < Ratio::from_integer(0))
            || weights.iter().sum::<Ratio<i64>>() != Ratio::from_integer(1)
        {
            return Err(FbsdeError::Structure("weights must be nonnegative and sum to one".into()));
        }
        let points = exact
            .iter()
            .map(|p| p.sign as f64 * (ratio_f64(p.sq) * h).sqrt())
            .collect();
        let mut dist = Self {
            h,
            points,
            weights,
            exact: Some(exact),
            order_matched: 0,
        };
        dist.order_matched = (0..64)
            .take_while(|&k| moment_exact(&dist, k) == Some(gaussian_moment_coefficient(k)))
            .last()
            .unwrap_or(0);
        Ok(dist)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn weight(&self, j: usize) -> f64 {
        ratio_f64(self.weights[j])
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        self.weights.iter().map(|w| ratio_f64(*w)).collect()
    }
}

pub(crate) fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Points `(-sqrt(3h), 0, sqrt(3h))` with weights `(1/6, 2/3, 1/6)`.
pub fn trinomial(h: f64) -> Result<IncrementDistribution> {
    let three = Ratio::from_integer(3);
    IncrementDistribution::from_exact(
        h,
        vec![
            ExactPoint { sign: -1, sq: three },
            ExactPoint {
                sign: 0,
                sq: Ratio::from_integer(0),
            },
            ExactPoint { sign: 1, sq: three },
        ],
        vec![Ratio::new(1, 6), Ratio::new(2, 3), Ratio::new(1, 6)],
    )
}

/// `c_k` with `E[G^k] = c_k h^(k/2)` for `G ~ N(0, h)`: `(k-1)!!` for even
/// `k`, zero for odd `k`.
pub fn gaussian_moment_coefficient(k: usize) -> Ratio<i64> {
    if k % 2 == 1 {
        return Ratio::from_integer(0);
    }
    Ratio::from_integer((1..k as i64).step_by(2).product::<i64>().max(1))
}

/// `c_k` with `Σ p_j g_j^k = c_k h^(k/2)`, in exact arithmetic. `None` when
/// the points carry no exact form, an odd moment does not cancel by
/// symmetry, or the computation overflows.
pub fn moment_exact(dist: &IncrementDistribution, k: usize) -> Option<Ratio<i64>> {
    let exact = dist.exact.as_ref()?;
    if k == 0 {
        return Some(dist.weights.iter().sum());
    }
    if k % 2 == 0 {
        let mut acc = Ratio::from_integer(0i64);
        for (p, w) in exact.iter().zip(&dist.weights) {
            if p.sign == 0 {
                continue;
            }
            let pow = checked_pow(p.sq, k / 2)?;
            acc = acc.checked_add(&w.checked_mul(&pow)?)?;
        }
        return Some(acc);
    }
    // odd order: signed weights must cancel within each |g| class
    let mut classes: Vec<(Ratio<i64>, Ratio<i64>)> = Vec::new();
    for (p, w) in exact.iter().zip(&dist.weights) {
        if p.sign == 0 {
            continue;
        }
        let signed = if p.sign > 0 { *w } else { -*w };
        match classes.iter_mut().find(|(sq, _)| *sq == p.sq) {
            Some((_, acc)) => *acc += signed,
            None => classes.push((p.sq, signed)),
        }
    }
    classes
        .iter()
        .all(|(_, acc)| *acc == Ratio::from_integer(0))
        .then(|| Ratio::from_integer(0))
}

fn checked_pow(base: Ratio<i64>, e: usize) -> Option<Ratio<i64>> {
    let mut acc = Ratio::from_integer(1i64);
    for _ in 0..e {
        acc = acc.checked_mul(&base)?;
    }
    Some(acc)
}

/// `Σ p_j g_j^k`, from the exact form when available, otherwise by
/// compensated summation.
pub fn moment(dist: &IncrementDistribution, k: usize) -> f64 {
    if let Some(c) = moment_exact(dist, k) {
        return ratio_f64(c) * dist.h.powf(k as f64 / 2.0);
    }
    compensated_sum(
        dist.points
            .iter()
            .zip(&dist.weights)
            .map(|(g, p)| ratio_f64(*p) * g.powi(k as i32)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightRule {
    /// `H = ΔW / h`
    Raw,
    /// `H = T^{r^h}(ΔW) / h`
    #[default]
    Truncated,
}

impl std::str::FromStr for WeightRule {
    type Err = FbsdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(WeightRule::Raw),
            "truncated" => Ok(WeightRule::Truncated),
            other => Err(FbsdeError::Config(format!("unknown weight rule '{other}'"))),
        }
    }
}

/// `Z` weights per branch of the increment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f64>,
    /// `Λ = h Σ p_j H_j²`.
    pub lambda: f64,
    /// Increment clip radius, if clipping was applied.
    pub r_h: Option<f64>,
    /// Whether clipping changed any support point.
    pub clipping_active: bool,
}

pub fn weight_values(rule: WeightRule, dist: &IncrementDistribution, h: f64) -> Result<Weights> {
    if !(h > 0.0) {
        return Err(FbsdeError::Domain(format!("step size must be positive, got {h}")));
    }
    let r_h = match rule {
        WeightRule::Raw => None,
        WeightRule::Truncated => increment_radius(h),
    };
    let mut clipping_active = false;
    let values: Vec<f64> = dist
        .points
        .iter()
        .map(|&g| {
            let clipped = match r_h {
                Some(r) => g.clamp(-r, r),
                None => g,
            };
            clipping_active |= clipped != g;
            clipped / h
        })
        .collect();
    let lambda = if dist.order_matched >= 2 {
        // E[ΔW²] = h exactly, so Λ = E[c²] / E[ΔW²] with c the clipped
        // increment; termwise c² <= ΔW² and ordered sums keep the float ratio <= 1
        let second = |clip: bool| -> f64 {
            dist.points
                .iter()
                .zip(&dist.weights)
                .map(|(&g, p)| {
                    let c = match (clip, r_h) {
                        (true, Some(r)) => g.clamp(-r, r),
                        _ => g,
                    };
                    ratio_f64(*p) * (c * c)
                })
                .sum()
        };
        second(true) / second(false)
    } else {
        h * compensated_sum(
            values
                .iter()
                .zip(&dist.weights)
                .map(|(v, p)| ratio_f64(*p) * v * v),
        )
    };
    if !(lambda > 0.0) {
        return Err(FbsdeError::Config(
            "degenerate increment law: weights H vanish (Λ = 0)".into(),
        ));
    }
    if lambda > 1.0 + 1e-12 {
        return Err(FbsdeError::Config(format!(
            "invalid increment law: Λ = {lambda} exceeds 1"
        )));
    }
    Ok(Weights {
        values,
        lambda,
        r_h,
        clipping_active,
    })
}

/// Uniform grid `{x0 + k η : |k| <= M}` with nearest-point projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub x0: f64,
    pub eta: f64,
    pub extent: i64,
}

/// Result of [`SpatialGrid::project`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub index: i64,
    pub value: f64,
    pub saturated: bool,
}

impl SpatialGrid {
    pub fn new(x0: f64, eta: f64, extent: i64) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(FbsdeError::Domain(format!("grid mesh must be positive, got {eta}")));
        }
        if extent < 0 {
            return Err(FbsdeError::Domain("grid extent must be >= 0".into()));
        }
        Ok(Self { x0, eta, extent })
    }

    /// Grid covering six standard deviations of `σ W_T` around `x0`.
    pub fn covering(x0: f64, eta: f64, sigma: f64, horizon: f64) -> Result<Self> {
        let extent = (6.0 * sigma.abs() * horizon.sqrt() / eta).ceil() as i64;
        Self::new(x0, eta, extent)
    }

    pub fn point(&self, k: i64) -> f64 {
        self.x0 + k as f64 * self.eta
    }

    /// Nearest grid point; ties go to the lower point, and points outside
    /// the hull clamp to the boundary with `saturated` set.
    pub fn project(&self, x: f64) -> Projection {
        let u = (x - self.x0) / self.eta;
        let k = (u - 0.5).ceil();
        let (k, saturated) = if k > self.extent as f64 {
            (self.extent, true)
        } else if k < -(self.extent as f64) {
            (-self.extent, true)
        } else {
            (k as i64, false)
        };
        Projection {
            index: k,
            value: self.point(k),
            saturated,
        }
    }
}

/// `Π(x)`.
pub fn grid_project(grid: &SpatialGrid, x: f64) -> f64 {
    grid.project(x).value
}
