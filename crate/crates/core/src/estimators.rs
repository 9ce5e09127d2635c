//! Saturated point estimators and their conditional population estimands.
//!
//! Each saturated estimator is a ratio `T' K Y / T' K T` for a symmetric
//! operator `K`:
//!
//! | kind            | operator `K`               |
//! |-----------------|----------------------------|
//! | `TslsSaturated` | `P`                        |
//! | `Jive1`         | `P - D_P`                  |
//! | `Jive2`         | `M_W (P - D_P) M_W`        |
//! | `Sive`          | `P - M_WZ D M_WZ`          |

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::blockops::{self, dot};
use crate::design::{SaturatedDesign, Sample};
use crate::{Error, Result};

/// Which estimator to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "SCREAMING_SNAKE_CASE")
)]
pub enum EstimatorKind {
    TslsSaturated,
    Jive1,
    Jive2,
    Sive,
    /// Textbook 2SLS on explicit design matrices; lives in the `sive` crate.
    TslsGeneric,
}

impl EstimatorKind {
    /// The four estimators that run on the block path.
    pub const SATURATED: [Self; 4] = [Self::TslsSaturated, Self::Jive1, Self::Jive2, Self::Sive];

    pub fn name(self) -> &'static str {
        match self {
            Self::TslsSaturated => "TSLS_SATURATED",
            Self::Jive1 => "JIVE1",
            Self::Jive2 => "JIVE2",
            Self::Sive => "SIVE",
            Self::TslsGeneric => "TSLS_GENERIC",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('-', "_");
        match lower.as_str() {
            "tsls" | "tsls_saturated" | "2sls" => Ok(Self::TslsSaturated),
            "jive1" => Ok(Self::Jive1),
            "jive2" => Ok(Self::Jive2),
            "sive" => Ok(Self::Sive),
            "tsls_generic" => Ok(Self::TslsGeneric),
            _ => Err(Error::InvalidParameter(alloc::format!("unknown estimator `{s}`"))),
        }
    }
}

/// Numerator and denominator of a ratio estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub numerator: f64,
    pub denominator: f64,
}

impl Ratio {
    pub fn beta(&self) -> f64 {
        self.numerator / self.denominator
    }
}

/// Relative size below which `|T'KT|` counts as zero.
pub const WEAK_DENOMINATOR_TOL: f64 = 1e-12;

pub(crate) fn check_denominator(denominator: f64, treatment: &[f64]) -> Result<()> {
    let scale = dot(treatment, treatment);
    if !(denominator.abs() > WEAK_DENOMINATOR_TOL * scale) {
        return Err(Error::WeakDenominator { value: denominator });
    }
    Ok(())
}

/// `K T` for the operator of `kind`.
pub fn apply_operator(kind: EstimatorKind, design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    match kind {
        EstimatorKind::TslsSaturated => blockops::project_instruments(design, v),
        EstimatorKind::Jive1 => blockops::apply_jive1_operator(design, v),
        EstimatorKind::Jive2 => blockops::apply_jive2_operator(design, v),
        EstimatorKind::Sive => blockops::apply_sive_operator(design, v),
        EstimatorKind::TslsGeneric => Err(Error::Unsupported("TSLS_GENERIC")),
    }
}

/// `T'KY` and `T'KT`, failing on a numerically zero denominator.
pub fn estimate_ratio(kind: EstimatorKind, design: &SaturatedDesign, sample: &Sample) -> Result<Ratio> {
    sample.check_against(design)?;
    let kt = apply_operator(kind, design, &sample.treatment)?;
    let ratio = Ratio {
        numerator: dot(&kt, &sample.outcome),
        denominator: dot(&kt, &sample.treatment),
    };
    check_denominator(ratio.denominator, &sample.treatment)?;
    Ok(ratio)
}

pub fn estimate(kind: EstimatorKind, design: &SaturatedDesign, sample: &Sample) -> Result<f64> {
    estimate_ratio(kind, design, sample).map(|r| r.beta())
}

/// `T'AY / T'AT`.
pub fn estimate_sive(design: &SaturatedDesign, sample: &Sample) -> Result<f64> {
    estimate(EstimatorKind::Sive, design, sample)
}

/// Saturated TSLS, `T'PY / T'PT`.
pub fn estimate_tsls(design: &SaturatedDesign, sample: &Sample) -> Result<f64> {
    estimate(EstimatorKind::TslsSaturated, design, sample)
}

pub fn estimate_jive1(design: &SaturatedDesign, sample: &Sample) -> Result<f64> {
    estimate(EstimatorKind::Jive1, design, sample)
}

pub fn estimate_jive2(design: &SaturatedDesign, sample: &Sample) -> Result<f64> {
    estimate(EstimatorKind::Jive2, design, sample)
}

/// Conditional (co)variance of the first-stage and reduced-form errors.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseMap {
    Homoskedastic(f64),
    PerObservation(Vec<f64>),
}

impl NoiseMap {
    fn at(&self, i: usize) -> f64 {
        match self {
            Self::Homoskedastic(s) => *s,
            Self::PerObservation(v) => v[i],
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self {
            Self::PerObservation(v) if v.len() != n => Err(Error::LengthMismatch {
                expected: n,
                found: v.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Population quantities entering the estimands, conditional on the design.
///
/// `pi` is the complier share per group, `tau` the group LATE, `psi` and
/// `phi` the mean treatment and outcome in the inactive cell, `sigma_ue` and
/// `sigma_uu` the conditional `E[u eps]` and `E[u^2]` per observation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PopulationInputs {
    pub pi: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma_ue: Option<NoiseMap>,
    pub sigma_uu: Option<NoiseMap>,
    pub psi: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
}

impl PopulationInputs {
    pub fn new(pi: Vec<f64>, tau: Vec<f64>) -> Self {
        Self {
            pi,
            tau,
            ..Self::default()
        }
    }

    pub fn with_noise(mut self, sigma_ue: NoiseMap, sigma_uu: NoiseMap) -> Self {
        self.sigma_ue = Some(sigma_ue);
        self.sigma_uu = Some(sigma_uu);
        self
    }

    pub fn with_intercepts(mut self, psi: Vec<f64>, phi: Vec<f64>) -> Self {
        self.psi = Some(psi);
        self.phi = Some(phi);
        self
    }
}

fn check_group_vec(v: &[f64], groups: usize) -> Result<()> {
    if v.len() != groups {
        return Err(Error::LengthMismatch {
            expected: groups,
            found: v.len(),
        });
    }
    Ok(())
}

/// Closed-form conditional estimand of `kind` at the realized `(n_g, m_g)`.
///
/// All sums are scaled by `1/n`. With `w_g = (n_g/n) pi_g^2 V_g`,
/// `V_g = (m_g/n_g)(1 - m_g/n_g)`:
///
/// * SIVE: `sum w_g tau_g / sum w_g`.
/// * TSLS: adds `(1/n) sum_i sigma_ue,i P_ii` and `(1/n) sum_i sigma_uu,i P_ii`.
/// * JIVE1: group weights shrink by `(1 - 1/m_g)` and the intercepts leak in
///   through `psi_g`, `phi_g`.
/// * JIVE2: weights lose `(1/n) pi_g^2 (1 - 3 V_g)`; noise enters through
///   `2 P_ii / n_g - 1/n_g^2`.
pub fn population_estimand(kind: EstimatorKind, design: &SaturatedDesign, inputs: &PopulationInputs) -> Result<f64> {
    let ratio = population_ratio(kind, design, inputs)?;
    if ratio.denominator == 0.0 {
        return Err(Error::WeakDenominator { value: 0.0 });
    }
    Ok(ratio.beta())
}

/// Numerator and denominator of [`population_estimand`], i.e. the
/// conditional expectations of `T'KY / n` and `T'KT / n`.
pub fn population_ratio(kind: EstimatorKind, design: &SaturatedDesign, inputs: &PopulationInputs) -> Result<Ratio> {
    let groups = design.groups();
    check_group_vec(&inputs.pi, groups)?;
    check_group_vec(&inputs.tau, groups)?;
    let n = design.n() as f64;
    let shares: Vec<(f64, f64, f64)> = design
        .group_sizes()
        .iter()
        .zip(design.treated_counts())
        .map(|(&ng, &mg)| {
            let (ng, mg) = (ng as f64, mg as f64);
            (ng, mg, (mg / ng) * (1.0 - mg / ng))
        })
        .collect();
    let signal = |g: usize| {
        let (ng, _, v) = shares[g];
        ng / n * inputs.pi[g] * inputs.pi[g] * v
    };

    let (numerator, denominator) = match kind {
        EstimatorKind::Sive => (0..groups).fold((0.0, 0.0), |(a, b), g| {
            (a + signal(g) * inputs.tau[g], b + signal(g))
        }),
        EstimatorKind::TslsSaturated | EstimatorKind::Jive2 => {
            let ue = inputs.sigma_ue.as_ref().ok_or(Error::MissingInput("sigma_ue"))?;
            let uu = inputs.sigma_uu.as_ref().ok_or(Error::MissingInput("sigma_uu"))?;
            ue.check(design.n())?;
            uu.check(design.n())?;
            let p = blockops::projection_diagonal(design)?;
            let leverage: Vec<f64> = if kind == EstimatorKind::TslsSaturated {
                p
            } else {
                p.iter()
                    .zip(design.group_of())
                    .map(|(pii, &g)| {
                        let ng = shares[g].0;
                        2.0 * pii / ng - 1.0 / (ng * ng)
                    })
                    .collect()
            };
            let (mut num, mut den) = (0.0, 0.0);
            for g in 0..groups {
                num += signal(g) * inputs.tau[g];
                den += signal(g);
                if kind == EstimatorKind::Jive2 {
                    let drop = inputs.pi[g] * inputs.pi[g] * (1.0 - 3.0 * shares[g].2) / n;
                    num -= drop * inputs.tau[g];
                    den -= drop;
                }
            }
            for (i, l) in leverage.iter().enumerate() {
                num += ue.at(i) * l / n;
                den += uu.at(i) * l / n;
            }
            (num, den)
        }
        EstimatorKind::Jive1 => {
            let psi = inputs.psi.as_ref().ok_or(Error::MissingInput("psi"))?;
            let phi = inputs.phi.as_ref().ok_or(Error::MissingInput("phi"))?;
            check_group_vec(psi, groups)?;
            check_group_vec(phi, groups)?;
            design.require_variation()?;
            let (mut num, mut den) = (0.0, 0.0);
            for g in 0..groups {
                let (ng, mg, v) = shares[g];
                let (pi, tau) = (inputs.pi[g], inputs.tau[g]);
                let keep = 1.0 - 1.0 / mg;
                let lean = ng / n * v / mg;
                num += signal(g) * keep * tau - (lean * pi * (phi[g] + tau * psi[g]) + psi[g] * phi[g] / n);
                den += signal(g) * keep - (2.0 * lean * pi * psi[g] + psi[g] * psi[g] / n);
            }
            (num, den)
        }
        EstimatorKind::TslsGeneric => return Err(Error::Unsupported("TSLS_GENERIC")),
    };
    Ok(Ratio { numerator, denominator })
}

/// First-stage signal and concentration parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FirstStage {
    /// `sum_g (n_g/n) pi_g^2 (m_g/n_g)(1 - m_g/n_g)`.
    pub fs: f64,
    /// `(n/G) FS`.
    pub mu_n: f64,
}

pub fn first_stage_strength(design: &SaturatedDesign, pi: &[f64]) -> Result<FirstStage> {
    check_group_vec(pi, design.groups())?;
    let n = design.n() as f64;
    let fs = design
        .group_sizes()
        .iter()
        .zip(design.treated_counts())
        .zip(pi)
        .map(|((&ng, &mg), p)| {
            let share = mg as f64 / ng as f64;
            ng as f64 / n * p * p * share * (1.0 - share)
        })
        .sum::<f64>();
    Ok(FirstStage {
        fs,
        mu_n: n / design.groups() as f64 * fs,
    })
}

/// `mean(T | active, g) - mean(T | inactive, g)` per group.
pub fn estimated_complier_shares(design: &SaturatedDesign, treatment: &[f64]) -> Result<Vec<f64>> {
    if treatment.len() != design.n() {
        return Err(Error::LengthMismatch {
            expected: design.n(),
            found: treatment.len(),
        });
    }
    design.require_variation()?;
    let sums = blockops::cell_sums(design, treatment);
    Ok((0..design.groups())
        .map(|g| sums[2 * g] / design.cell_size(2 * g) as f64 - sums[2 * g + 1] / design.cell_size(2 * g + 1) as f64)
        .collect())
}
