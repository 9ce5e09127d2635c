//! Inference for SIVE: Hartley-type error (co)variance estimators, the
//! heterogeneity-robust variance, Wald tests and intervals, the
//! identification-robust score test and its inversion, and the comparison
//! variance that assumes a homogeneous slope.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::blockops::{self, cell_sums, dot};
use crate::design::{SaturatedDesign, Sample};
use crate::estimators::{self, check_denominator, FirstStage};
use crate::normal;
use crate::{Error, Result};

/// Per-observation estimates of `E[u^2]`, `E[v^2]` and `E[uv]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct SigmaEstimates {
    pub sigma_u2: Vec<f64>,
    pub sigma_v2: Vec<f64>,
    pub sigma_uv: Vec<f64>,
    /// True where the observation sits in a cell of size two.
    pub used_fallback: Vec<bool>,
}

/// Hartley estimators from `M_WZ T` and `M_WZ r`.
///
/// Cells of size three or more use `(M_WZ o M_WZ)^{-1}` applied to the
/// Hadamard squares and products. In a cell of size two each observation
/// shares its instrument status with a single other unit, and the estimator
/// becomes four times the own squared (or cross) residual.
pub fn hartley_sigma(design: &SaturatedDesign, treatment: &[f64], residual: &[f64]) -> Result<SigmaEstimates> {
    for c in 0..design.cells() {
        let size = design.cell_size(c);
        if size < 2 {
            return Err(Error::CellTooSmall {
                group: c / 2,
                status: u8::from(c % 2 == 0),
                size,
            });
        }
    }
    let mt = blockops::demean_within_cells(design, treatment)?;
    let mr = blockops::demean_within_cells(design, residual)?;
    let uu: Vec<f64> = mt.iter().map(|x| x * x).collect();
    let vv: Vec<f64> = mr.iter().map(|x| x * x).collect();
    let uv: Vec<f64> = mr.iter().zip(&mt).map(|(a, b)| a * b).collect();
    let (su, sv, suv) = (cell_sums(design, &uu), cell_sums(design, &vv), cell_sums(design, &uv));

    let n = design.n();
    let mut out = SigmaEstimates {
        sigma_u2: vec![0.0; n],
        sigma_v2: vec![0.0; n],
        sigma_uv: vec![0.0; n],
        used_fallback: vec![false; n],
    };
    for i in 0..n {
        let c = design.cell_of(i);
        let k = design.cell_size(c);
        if k == 2 {
            out.sigma_u2[i] = 4.0 * uu[i];
            out.sigma_v2[i] = 4.0 * vv[i];
            out.sigma_uv[i] = 4.0 * uv[i];
            out.used_fallback[i] = true;
        } else {
            let k = k as f64;
            let scale = k / (k - 2.0);
            let spread = k * (k - 1.0);
            out.sigma_u2[i] = scale * (uu[i] - su[c] / spread);
            out.sigma_v2[i] = scale * (vv[i] - sv[c] / spread);
            out.sigma_uv[i] = scale * (uv[i] - suv[c] / spread);
        }
    }
    Ok(out)
}

/// Numerator and `T'AT` of the variance estimator at a given `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceParts {
    /// `r'A S_u A r + T'A S_v A T + 2 r'A S_uv A T` with `r = Y - T beta`.
    pub numerator: f64,
    pub t_a_t: f64,
}

impl VarianceParts {
    pub fn variance(&self) -> f64 {
        self.numerator / (self.t_a_t * self.t_a_t)
    }
}

pub fn sive_variance_parts(design: &SaturatedDesign, outcome: &[f64], treatment: &[f64], beta: f64) -> Result<VarianceParts> {
    if outcome.len() != design.n() || treatment.len() != design.n() {
        return Err(Error::LengthMismatch {
            expected: design.n(),
            found: outcome.len().min(treatment.len()),
        });
    }
    let residual: Vec<f64> = outcome.iter().zip(treatment).map(|(y, t)| y - t * beta).collect();
    let sigma = hartley_sigma(design, treatment, &residual)?;
    let ar = blockops::apply_sive_operator(design, &residual)?;
    let at = blockops::apply_sive_operator(design, treatment)?;
    let numerator = (0..design.n())
        .map(|i| {
            sigma.sigma_u2[i] * ar[i] * ar[i] + sigma.sigma_v2[i] * at[i] * at[i] + 2.0 * sigma.sigma_uv[i] * ar[i] * at[i]
        })
        .sum();
    Ok(VarianceParts {
        numerator,
        t_a_t: dot(&at, treatment),
    })
}

/// Heterogeneity-, heteroskedasticity- and many-instrument-robust variance
/// of the SIVE estimator, evaluated at `beta` (the estimate, or a
/// hypothesized value for the robust test).
///
/// The value is returned as computed; it is not a sum of squares and can be
/// negative in finite samples.
pub fn sive_variance(design: &SaturatedDesign, outcome: &[f64], treatment: &[f64], beta: f64) -> Result<f64> {
    let parts = sive_variance_parts(design, outcome, treatment, beta)?;
    check_denominator(parts.t_a_t, treatment)?;
    Ok(parts.variance())
}

/// Outcome of a two-sided Wald test.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub critical: f64,
    pub reject: bool,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

pub fn t_test(beta_hat: f64, variance: f64, beta0: f64, alpha: f64) -> Result<TTest> {
    check_alpha(alpha)?;
    if !(variance > 0.0) {
        return Err(Error::NonPositiveVariance { value: variance });
    }
    let t = (beta_hat - beta0) / sqrt(variance);
    let critical = normal::two_sided_critical(alpha);
    Ok(TTest {
        t,
        p_value: 2.0 * normal::cdf(-t.abs()),
        critical,
        reject: t.abs() > critical,
    })
}

/// `beta_hat -/+ Phi^{-1}(1 - alpha/2) sqrt(variance)`.
pub fn confidence_interval(beta_hat: f64, variance: f64, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if !(variance > 0.0) {
        return Err(Error::NonPositiveVariance { value: variance });
    }
    let half = normal::two_sided_critical(alpha) * sqrt(variance);
    Ok((beta_hat - half, beta_hat + half))
}

/// Direction of the alternative for the score test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `beta > beta0`.
    Greater,
    /// `beta < beta0`.
    Less,
}

impl core::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "two_sided" => Ok(Self::TwoSided),
            "greater" => Ok(Self::Greater),
            "less" => Ok(Self::Less),
            _ => Err(Error::InvalidParameter(alloc::format!("unknown alternative `{s}`"))),
        }
    }
}

/// Score test of `beta = beta0`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RobustTest {
    /// `T'A(Y - T beta0)`.
    pub score: f64,
    /// Variance numerator evaluated at `beta0`.
    pub variance_at_beta0: f64,
    /// `score / sqrt(variance_at_beta0)`, signed so that positive values
    /// point towards `beta > beta0`. NaN when the variance is not positive.
    pub statistic: f64,
    pub reject: bool,
}

pub fn robust_test(design: &SaturatedDesign, sample: &Sample, beta0: f64, alpha: f64) -> Result<RobustTest> {
    robust_test_with(design, sample, beta0, alpha, Alternative::TwoSided)
}

/// Identification-robust score test.
///
/// The score and its variance are both evaluated at the hypothesized value,
/// so neither depends on the strength of the first stage. A non-positive
/// variance estimate never rejects.
pub fn robust_test_with(
    design: &SaturatedDesign,
    sample: &Sample,
    beta0: f64,
    alpha: f64,
    alternative: Alternative,
) -> Result<RobustTest> {
    check_alpha(alpha)?;
    sample.check_against(design)?;
    let residual: Vec<f64> = sample
        .outcome
        .iter()
        .zip(&sample.treatment)
        .map(|(y, t)| y - t * beta0)
        .collect();
    let at = blockops::apply_sive_operator(design, &sample.treatment)?;
    let score = dot(&at, &residual);
    let parts = sive_variance_parts(design, &sample.outcome, &sample.treatment, beta0)?;
    let variance = parts.numerator;
    if !(variance > 0.0) {
        return Ok(RobustTest {
            score,
            variance_at_beta0: variance,
            statistic: f64::NAN,
            reject: false,
        });
    }
    let orientation = if parts.t_a_t < 0.0 { -1.0 } else { 1.0 };
    let statistic = orientation * score / sqrt(variance);
    let reject = match alternative {
        Alternative::TwoSided => statistic.abs() > normal::two_sided_critical(alpha),
        Alternative::Greater => statistic > normal::quantile(1.0 - alpha),
        Alternative::Less => statistic < -normal::quantile(1.0 - alpha),
    };
    Ok(RobustTest {
        score,
        variance_at_beta0: variance,
        statistic,
        reject,
    })
}

/// Evenly spaced grid of hypothesized values, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    pub low: f64,
    pub high: f64,
    pub step: f64,
}

/// Upper bound on the number of grid points.
pub const MAX_GRID_POINTS: usize = 1_000_000;

impl Grid {
    /// `beta_hat -/+ 10 se` in 400 steps.
    pub fn around(beta_hat: f64, std_error: f64) -> Self {
        let low = beta_hat - 10.0 * std_error;
        let high = beta_hat + 10.0 * std_error;
        Self {
            low,
            high,
            step: (high - low) / 400.0,
        }
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.low.is_finite() && self.high.is_finite() && self.step.is_finite()) || self.step <= 0.0 || self.high < self.low {
            return Err(Error::InvalidParameter(format!(
                "grid needs finite low <= high and step > 0 (got {} .. {} by {})",
                self.low, self.high, self.step
            )));
        }
        let count = libm::floor((self.high - self.low) / self.step + 1e-9) as usize + 1;
        if count > MAX_GRID_POINTS {
            return Err(Error::InvalidParameter(format!("grid has {count} points, limit is {MAX_GRID_POINTS}")));
        }
        Ok((0..count).map(|k| self.low + k as f64 * self.step).collect())
    }
}

/// Grid points the score test fails to reject, merged into runs.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RobustConfidenceSet {
    /// Maximal runs of accepted grid points as `(first, last)`.
    pub intervals: Vec<(f64, f64)>,
    pub accepted_points: usize,
    pub grid_points: usize,
    /// The lowest grid point is accepted, so the set may continue below.
    pub open_below: bool,
    /// The highest grid point is accepted, so the set may continue above.
    pub open_above: bool,
}

impl RobustConfidenceSet {
    pub fn is_empty(&self) -> bool {
        self.accepted_points == 0
    }

    pub fn covers_grid(&self) -> bool {
        self.grid_points > 0 && self.accepted_points == self.grid_points
    }

    pub fn unbounded_within_grid(&self) -> bool {
        self.open_below || self.open_above
    }

    /// Builds the set from per-point acceptance decisions in grid order.
    pub fn from_decisions(points: &[f64], accepted: &[bool]) -> Self {
        let mut set = Self {
            grid_points: points.len(),
            accepted_points: accepted.iter().filter(|&&a| a).count(),
            open_below: accepted.first().copied().unwrap_or(false),
            open_above: accepted.last().copied().unwrap_or(false),
            ..Self::default()
        };
        let mut start: Option<f64> = None;
        for (k, (&b, &ok)) in points.iter().zip(accepted).enumerate() {
            match (ok, start) {
                (true, None) => start = Some(b),
                (false, Some(s)) => {
                    set.intervals.push((s, points[k - 1]));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            set.intervals.push((s, *points.last().unwrap()));
        }
        set
    }
}

/// Inverts the two-sided score test over `grid`.
pub fn robust_ci(design: &SaturatedDesign, sample: &Sample, grid: &Grid, alpha: f64) -> Result<RobustConfidenceSet> {
    robust_ci_with(design, sample, grid, alpha, Alternative::TwoSided)
}

pub fn robust_ci_with(
    design: &SaturatedDesign,
    sample: &Sample,
    grid: &Grid,
    alpha: f64,
    alternative: Alternative,
) -> Result<RobustConfidenceSet> {
    let points = grid.points()?;
    let accepted = points
        .iter()
        .map(|&b| robust_test_with(design, sample, b, alpha, alternative).map(|t| !t.reject))
        .collect::<Result<Vec<bool>>>()?;
    Ok(RobustConfidenceSet::from_decisions(&points, &accepted))
}

/// Comparison variance built for a homogeneous slope:
/// `(T'A D1 A T + x'(A o A) x) / (T'AT)^2` with `x = J (eps o u)`,
/// `D1 = diag(J (eps o eps))`, `J = (M_W o M_W)^{-1}`, `eps = M_WZ (Y - T beta)`
/// and `u = M_WZ T`.
pub fn chao_variance(design: &SaturatedDesign, outcome: &[f64], treatment: &[f64], beta_hat: f64) -> Result<f64> {
    if outcome.len() != design.n() {
        return Err(Error::LengthMismatch {
            expected: design.n(),
            found: outcome.len(),
        });
    }
    let residual: Vec<f64> = outcome.iter().zip(treatment).map(|(y, t)| y - t * beta_hat).collect();
    let eps = blockops::demean_within_cells(design, &residual)?;
    let u = blockops::demean_within_cells(design, treatment)?;
    let ee: Vec<f64> = eps.iter().map(|e| e * e).collect();
    let eu: Vec<f64> = eps.iter().zip(&u).map(|(e, u)| e * u).collect();
    let d1 = blockops::hartley_inverse_groups(design, &ee)?;
    let x = blockops::hartley_inverse_groups(design, &eu)?;
    let at = blockops::apply_sive_operator(design, treatment)?;
    let t_a_t = dot(&at, treatment);
    check_denominator(t_a_t, treatment)?;
    let first: f64 = d1.iter().zip(&at).map(|(d, a)| d * a * a).sum();
    let second = blockops::sive_hadamard_form(design, &x)?;
    Ok((first + second) / (t_a_t * t_a_t))
}

/// HC0 variance of saturated TSLS: `sum_i (P T)_i^2 e_i^2 / (T'PT)^2` with
/// `e = M_W (Y - T beta)`.
pub fn tsls_hc0_variance(design: &SaturatedDesign, sample: &Sample, beta: f64) -> Result<f64> {
    sample.check_against(design)?;
    let pt = blockops::project_instruments(design, &sample.treatment)?;
    let residual: Vec<f64> = sample
        .outcome
        .iter()
        .zip(&sample.treatment)
        .map(|(y, t)| y - t * beta)
        .collect();
    let e = blockops::demean_within_groups(design, &residual)?;
    let t_p_t = dot(&pt, &sample.treatment);
    check_denominator(t_p_t, &sample.treatment)?;
    let meat: f64 = pt.iter().zip(&e).map(|(p, e)| p * p * e * e).sum();
    Ok(meat / (t_p_t * t_p_t))
}

/// Point estimate, robust variance, Wald test and interval for SIVE.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct InferenceReport {
    pub beta_hat: f64,
    pub variance: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub beta0: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub reject: bool,
    pub fs_diag: FirstStage,
}

/// Full SIVE inference. Fails with [`Error::NonPositiveVariance`] when the
/// variance estimate is not positive rather than truncating it.
pub fn infer_sive(design: &SaturatedDesign, sample: &Sample, alpha: f64, beta0: f64) -> Result<InferenceReport> {
    let beta_hat = estimators::estimate_sive(design, sample)?;
    let variance = sive_variance(design, &sample.outcome, &sample.treatment, beta_hat)?;
    let test = t_test(beta_hat, variance, beta0, alpha)?;
    let (ci_low, ci_high) = confidence_interval(beta_hat, variance, alpha)?;
    let pi = estimators::estimated_complier_shares(design, &sample.treatment)?;
    Ok(InferenceReport {
        beta_hat,
        variance,
        std_error: sqrt(variance),
        ci_low,
        ci_high,
        alpha,
        beta0,
        t_stat: test.t,
        p_value: test.p_value,
        reject: test.reject,
        fs_diag: estimators::first_stage_strength(design, &pi)?,
    })
}
