//! Monte Carlo harness: the data generating process with a binary
//! instrument and endogenous binary treatment, bias and size experiments, and
//! plot-ready summary tables.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sive_core::design::{audit_groups, filter_design, GroupThresholds};
use sive_core::{blockops, estimators, halton, inference, normal, EstimatorKind, Sample, SaturatedDesign};

use crate::{Error, Result};

/// Propensity of the instrument is clamped to `[EPS, 1 - EPS]`.
pub const PROPENSITY_EPS: f64 = 0.01;

fn default_threshold() -> usize {
    2
}

fn default_alpha() -> f64 {
    0.05
}

/// Parameters of one design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub p0: f64,
    pub p1: f64,
    pub rho: f64,
    pub beta: f64,
    pub h: f64,
    pub n_hetero: usize,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default = "default_threshold")]
    pub min_active: usize,
    #[serde(default = "default_threshold")]
    pub min_inactive: usize,
}

impl SimConfig {
    /// The full-scale design: n = 3000 with the 900 smallest-X units
    /// heterogeneous.
    pub fn full_scale(l: usize, p1: f64, h: f64, replications: usize, master_seed: u64) -> Self {
        Self {
            n: 3000,
            l,
            p0: 0.22,
            p1,
            rho: 0.527,
            beta: 0.2,
            h,
            n_hetero: 900,
            replications,
            master_seed,
            min_active: 2,
            min_inactive: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if !(self.p0 > 0.0 && self.p0 < 1.0 && self.p1 > 0.0 && self.p1 < 1.0) {
            return bad(format!("p0 = {} and p1 = {} must lie in (0, 1)", self.p0, self.p1));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be below 1, got {}", self.rho));
        }
        if self.l == 0 || self.n == 0 {
            return bad("n and L must be positive".into());
        }
        if self.n_hetero > self.n {
            return bad(format!("n_hetero = {} exceeds n = {}", self.n_hetero, self.n));
        }
        if self.min_active == 0 || self.min_inactive == 0 {
            return bad("group size thresholds must be at least 1".into());
        }
        if !(self.beta.is_finite() && self.h.is_finite()) {
            return bad("beta and h must be finite".into());
        }
        Ok(())
    }

    fn thresholds(&self) -> GroupThresholds {
        GroupThresholds {
            min_active: self.min_active,
            min_inactive: self.min_inactive,
            min_size: 1,
        }
    }
}

/// Population quantities for one draw, conditional on the realized design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    /// `p1 - p0` in every group.
    pub pi: Vec<f64>,
    /// `beta` times the mean heterogeneity factor in the group.
    pub tau: Vec<f64>,
    /// `E[T'AY | Q, X] / E[T'AT | Q, X]`; `None` when `p1 = p0`.
    pub beta_sive: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDraw {
    pub design: SaturatedDesign,
    pub sample: Sample,
    pub truth: Truth,
    pub groups_before: usize,
    pub groups_dropped: usize,
}

/// Seed of replication `rep`, independent of scheduling.
pub fn replication_seed(master_seed: u64, rep: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(master_seed) ^ rep)
}

fn instrument_propensity(x: f64) -> f64 {
    (0.119 + 1.785 * x - 1.534 * x * x + 0.597 * x * x * x).clamp(PROPENSITY_EPS, 1.0 - PROPENSITY_EPS)
}

fn outcome_mean(x: f64) -> f64 {
    (129.7 + 1247.7 * x - 2149.0 * x * x + 1515.7 * x * x * x).ln()
}

/// Covariate values and heterogeneity factors, which do not depend on the
/// seed.
fn fixed_covariates(config: &SimConfig) -> Result<(Vec<f64>, Vec<usize>, Vec<f64>)> {
    let points = halton::halton_points(config.l, 2)?;
    let group: Vec<usize> = (0..config.n).map(|i| i % config.l).collect();
    let x: Vec<f64> = group.iter().map(|&g| points[g]).collect();
    let mut order: Vec<usize> = (0..config.n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut gamma = vec![1.0; config.n];
    for &i in &order[..config.n_hetero] {
        gamma[i] = 1.0 + config.h;
    }
    Ok((x, group, gamma))
}

/// One draw from the design, filtered to groups meeting the size thresholds.
pub fn generate_sample(config: &SimConfig, seed: u64) -> Result<SimDraw> {
    config.validate()?;
    let (x, group, gamma) = fixed_covariates(config)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = config.n;
    let scale = (1.0 - config.rho * config.rho).sqrt();
    let (mut q, mut t, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let qi = rng.random::<f64>() < instrument_propensity(x[i]);
        let u: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        let eps = config.rho * u + scale * e;
        let cutoff = if qi { config.p1 } else { config.p0 };
        let ti = f64::from(u8::from(normal::cdf(u) <= cutoff));
        q.push(qi);
        t.push(ti);
        y.push(outcome_mean(x[i]) + config.beta * gamma[i] * ti + eps);
    }
    let full = SaturatedDesign::from_parts(group, q)?;
    let sample = Sample::new(y, t)?;
    let audit = audit_groups(&full, config.thresholds());
    let groups_before = full.groups();
    let groups_dropped = audit.violations.len();
    // Row order survives filtering, so heterogeneity factors follow along.
    let kept_rows: Vec<usize> = (0..n).filter(|&i| audit.kept_groups.contains(&full.group_of()[i])).collect();
    let (design, sample) = filter_design(&full, &audit, &sample)?;
    let gamma: Vec<f64> = kept_rows.iter().map(|&i| gamma[i]).collect();
    let truth = conditional_truth(config, &design, &gamma)?;
    Ok(SimDraw {
        design,
        sample,
        truth,
        groups_before,
        groups_dropped,
    })
}

/// Exact conditional estimand. With `mu = E[T | Q, X] = p0 + (p1 - p0) Q` and
/// independence across units, `E[T'AY] = mu'A(beta gamma o mu)` because `A`
/// has a zero diagonal and annihilates group-constant vectors, and
/// `E[T'AT] = mu'A mu`.
fn conditional_truth(config: &SimConfig, design: &SaturatedDesign, gamma: &[f64]) -> Result<Truth> {
    let pi = config.p1 - config.p0;
    let groups = design.groups();
    let mut tau = vec![0.0; groups];
    for (i, &g) in design.group_of().iter().enumerate() {
        tau[g] += config.beta * gamma[i] / design.group_sizes()[g] as f64;
    }
    let beta_sive = if pi == 0.0 {
        None
    } else {
        let mu: Vec<f64> = design
            .instrument()
            .iter()
            .map(|&q| if q { config.p1 } else { config.p0 })
            .collect();
        let a_mu = blockops::apply_sive_operator(design, &mu)?;
        let effect: Vec<f64> = mu.iter().zip(gamma).map(|(m, g)| config.beta * g * m).collect();
        Some(blockops::dot(&a_mu, &effect) / blockops::dot(&a_mu, &mu))
    };
    Ok(Truth {
        pi: vec![pi; groups],
        tau,
        beta_sive,
    })
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub p1: f64,
    pub h: f64,
    pub estimator: String,
    pub metric: String,
    /// Empty when undefined, e.g. the median of zero successful replications.
    pub value: Option<f64>,
    pub mc_se: Option<f64>,
    pub replications: usize,
}

/// A grid of design points sharing the remaining parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlan {
    #[serde(flatten)]
    pub base: SimConfig,
    #[serde(default)]
    pub l_values: Option<Vec<usize>>,
    #[serde(default)]
    pub p1_values: Option<Vec<f64>>,
    #[serde(default)]
    pub h_values: Option<Vec<f64>>,
    /// Replications for the size experiment; defaults to `replications`.
    #[serde(default)]
    pub size_replications: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Tests run in the size experiment; defaults to all of them.
    #[serde(default)]
    pub variants: Option<Vec<VarianceVariant>>,
}

impl SimPlan {
    pub fn single(base: SimConfig) -> Self {
        Self {
            base,
            l_values: None,
            p1_values: None,
            h_values: None,
            size_replications: None,
            alpha: default_alpha(),
            variants: None,
        }
    }

    /// Every `(L, p1, h)` combination, in that nesting order.
    pub fn cells(&self) -> Vec<SimConfig> {
        let ls = self.l_values.clone().unwrap_or_else(|| vec![self.base.l]);
        let ps = self.p1_values.clone().unwrap_or_else(|| vec![self.base.p1]);
        let hs = self.h_values.clone().unwrap_or_else(|| vec![self.base.h]);
        let mut out = Vec::new();
        for &l in &ls {
            for &p1 in &ps {
                for &h in &hs {
                    out.push(SimConfig { l, p1, h, ..self.base.clone() });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.cells().iter().try_for_each(SimConfig::validate)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Standard error of the median from the distribution-free 95% order
/// statistic interval, `(x_(u) - x_(l)) / (2 * 1.96)`. Expects sorted input.
fn median_se(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k < 4 {
        return f64::NAN;
    }
    let half = 1.96 * (k as f64).sqrt() / 2.0;
    let lo = ((k as f64 / 2.0 - half).floor().max(0.0)) as usize;
    let hi = ((k as f64 / 2.0 + half).ceil() as usize).min(k - 1);
    (sorted[hi] - sorted[lo]) / (2.0 * 1.96)
}

fn proportion_se(p: f64, k: usize) -> f64 {
    (p * (1.0 - p) / k as f64).sqrt()
}

fn row(experiment: &str, c: &SimConfig, estimator: &str, metric: &str, value: f64, mc_se: f64, reps: usize) -> SummaryRow {
    SummaryRow {
        experiment: experiment.into(),
        l: c.l,
        p1: c.p1,
        h: c.h,
        estimator: estimator.into(),
        metric: metric.into(),
        value: value.is_finite().then_some(value),
        mc_se: mc_se.is_finite().then_some(mc_se),
        replications: reps,
    }
}

/// Draws in replication order, generated in parallel.
fn draws(config: &SimConfig, replications: usize) -> Vec<Result<SimDraw>> {
    (0..replications as u64)
        .into_par_iter()
        .map(|r| generate_sample(config, replication_seed(config.master_seed, r)))
        .collect()
}

fn design_rows(experiment: &str, config: &SimConfig, draws: &[Result<SimDraw>], reps: usize) -> Vec<SummaryRow> {
    let shares: Vec<f64> = draws
        .iter()
        .filter_map(|d| d.as_ref().ok())
        .map(|d| d.groups_dropped as f64 / d.groups_before as f64)
        .collect();
    let failed = draws.iter().filter(|d| d.is_err()).count() as f64 / reps.max(1) as f64;
    let k = shares.len().max(1) as f64;
    let mean_share = shares.iter().sum::<f64>() / k;
    let sd = (shares.iter().map(|s| (s - mean_share).powi(2)).sum::<f64>() / (k - 1.0).max(1.0)).sqrt();
    vec![
        row(experiment, config, "DESIGN", "groups_dropped_share", mean_share, sd / k.sqrt(), reps),
        row(experiment, config, "DESIGN", "draw_failure_rate", failed, proportion_se(failed, reps.max(1)), reps),
    ]
}

/// Median bias against the per-draw SIVE estimand for the four saturated
/// estimators. Failed replications are counted in `attrition`.
pub fn run_bias_experiment(plan: &SimPlan) -> Result<Vec<SummaryRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for config in plan.cells() {
        let reps = config.replications;
        let draws = draws(&config, reps);
        rows.extend(design_rows("bias", &config, &draws, reps));
        for kind in EstimatorKind::SATURATED {
            let results: Vec<Option<f64>> = draws
                .par_iter()
                .map(|d| {
                    let d = d.as_ref().ok()?;
                    let truth = d.truth.beta_sive?;
                    let b = estimators::estimate(kind, &d.design, &d.sample).ok()?;
                    b.is_finite().then_some(b - truth)
                })
                .collect();
            let mut errors: Vec<f64> = results.iter().flatten().copied().collect();
            let attrition = 1.0 - errors.len() as f64 / reps.max(1) as f64;
            let med = median(&mut errors);
            let se = median_se(&errors);
            rows.push(row("bias", &config, kind.name(), "median_bias", med, se, reps));
            rows.push(row("bias", &config, kind.name(), "abs_median_bias", med.abs(), se, reps));
            rows.push(row("bias", &config, kind.name(), "attrition", attrition, proportion_se(attrition, reps.max(1)), reps));
        }
    }
    Ok(rows)
}

/// Which variance backs the Wald test in the size experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VarianceVariant {
    /// The heterogeneity-robust estimator.
    Vhat,
    /// The comparison estimator built for a homogeneous slope.
    Chao,
    /// The score test at the hypothesized value.
    Robust,
}

impl VarianceVariant {
    pub const ALL: [Self; 3] = [Self::Vhat, Self::Chao, Self::Robust];

    pub fn label(self) -> &'static str {
        match self {
            Self::Vhat => "SIVE",
            Self::Chao => "SIVE_CHAO",
            Self::Robust => "SIVE_ROBUST",
        }
    }
}

/// Test decision at the true estimand; `None` when the replication fails
/// (draw error, weak denominator or nonpositive variance).
pub fn size_decision(draw: &SimDraw, variant: VarianceVariant, alpha: f64, beta0: f64) -> Option<bool> {
    let (d, s) = (&draw.design, &draw.sample);
    match variant {
        VarianceVariant::Robust => inference::robust_test(d, s, beta0, alpha).ok().map(|t| t.reject),
        VarianceVariant::Vhat | VarianceVariant::Chao => {
            let b = estimators::estimate_sive(d, s).ok()?;
            let v = match variant {
                VarianceVariant::Vhat => inference::sive_variance(d, &s.outcome, &s.treatment, b).ok()?,
                _ => inference::chao_variance(d, &s.outcome, &s.treatment, b).ok()?,
            };
            inference::t_test(b, v, beta0, alpha).ok().map(|t| t.reject)
        }
    }
}

/// Rejection rates at level `plan.alpha` of tests of the per-draw SIVE
/// estimand. Draws where the estimand is not identified are tested at
/// `beta`, which is what the score test targets when `p1 = p0`.
pub fn run_size_experiment(plan: &SimPlan, variants: &[VarianceVariant]) -> Result<Vec<SummaryRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for mut config in plan.cells() {
        config.replications = plan.size_replications.unwrap_or(config.replications);
        let reps = config.replications;
        let draws = draws(&config, reps);
        rows.extend(design_rows("size", &config, &draws, reps));
        for &variant in variants {
            let decisions: Vec<Option<bool>> = draws
                .par_iter()
                .map(|d| {
                    let d = d.as_ref().ok()?;
                    let beta0 = d.truth.beta_sive.unwrap_or(config.beta);
                    size_decision(d, variant, plan.alpha, beta0)
                })
                .collect();
            let valid = decisions.iter().flatten().count();
            let rejected = decisions.iter().flatten().filter(|&&r| r).count();
            let rate = rejected as f64 / valid.max(1) as f64;
            let attrition = 1.0 - valid as f64 / reps.max(1) as f64;
            rows.push(row("size", &config, variant.label(), "rejection_rate", rate, proportion_se(rate, valid.max(1)), reps));
            rows.push(row("size", &config, variant.label(), "attrition", attrition, proportion_se(attrition, reps.max(1)), reps));
        }
    }
    Ok(rows)
}

/// CSV text with the fixed column order; header only for an empty table.
pub fn rows_to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["experiment", "L", "p1", "h", "estimator", "metric", "value", "mc_se", "replications"])?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn summarize(rows: &[SummaryRow], dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&csv_path, rows_to_csv(rows)?).map_err(|e| Error::io(&csv_path, e))?;
    crate::io::write_json(&json_path, &rows)?;
    Ok(vec![csv_path, json_path])
}
