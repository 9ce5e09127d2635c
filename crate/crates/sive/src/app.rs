//! Command implementations. Each command is a pure function of the input
//! bytes and its request; the binary only parses flags and prints.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sive_core::design::{audit_groups, design_summary, filter_design, GroupThresholds};
use sive_core::inference::{self, Alternative, Grid};
use sive_core::{
    design::build_design, estimators, DesignSummary, EstimatorKind, FirstStage, GroupAudit, Sample, SaturatedDesign,
};

use crate::generic::{self, GenericFit};
use crate::io::{read_dataset, Binarize, Dataset, DatasetSchema};
use crate::simulation::{self, SimPlan, VarianceVariant};
use crate::{reference, Error, Result};

/// Version of every JSON document written by the commands.
pub const SCHEMA_VERSION: u32 = 1;

/// How controls and instruments enter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpecChoice {
    /// Single instrument, controls entered linearly.
    NotSaturated,
    /// Group dummies and instrument-by-group interactions.
    FullySaturated,
    /// Instrument-by-group interactions, controls entered linearly.
    SaturatedInstruments,
    /// Group dummies, single uninteracted instrument.
    SaturatedControls,
}

impl std::str::FromStr for SpecChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "not_saturated" => Ok(Self::NotSaturated),
            "fully_saturated" => Ok(Self::FullySaturated),
            "saturated_instruments" => Ok(Self::SaturatedInstruments),
            "saturated_controls" => Ok(Self::SaturatedControls),
            _ => Err(Error::Validation(format!("unknown specification `{s}`"))),
        }
    }
}

/// Everything `estimate` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRequest {
    pub spec: SpecChoice,
    pub estimator: EstimatorKind,
    pub alpha: f64,
    pub beta0: f64,
    pub thresholds: GroupThresholds,
    /// Cross-check the block path against the dense reference.
    pub reference: bool,
}

impl Default for EstimateRequest {
    fn default() -> Self {
        Self {
            spec: SpecChoice::FullySaturated,
            estimator: EstimatorKind::Sive,
            alpha: 0.05,
            beta0: 0.0,
            thresholds: GroupThresholds::STANDARD,
            reference: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSection {
    pub thresholds: GroupThresholds,
    pub groups_before: usize,
    pub observations_before: usize,
    pub dropped_observations: usize,
    #[serde(flatten)]
    pub audit: GroupAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceCheck {
    pub beta_hat: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub spec: SpecChoice,
    pub estimator: EstimatorKind,
    pub n: usize,
    pub groups: usize,
    pub beta_hat: f64,
    pub variance: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub alpha: f64,
    pub beta0: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    /// `HARTLEY`, `HARTLEY_DENSE`, `HC0`, or `NONE`.
    pub variance_method: &'static str,
    pub first_stage: FirstStage,
    pub design_summary: DesignSummary,
    pub audit: AuditSection,
    pub dropped_instruments: Vec<usize>,
    pub dropped_controls: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceCheck>,
}

/// Saturated design of a dataset, its audit, and the filtered data.
pub struct Prepared {
    pub design: SaturatedDesign,
    pub sample: Sample,
    pub data: Dataset,
    pub audit: AuditSection,
}

pub fn prepare(data: &Dataset, thresholds: GroupThresholds) -> Result<Prepared> {
    let full = build_design(&data.covariates, &data.instrument)?;
    let audit = audit_groups(&full, thresholds);
    let sample = Sample::new(data.outcome.clone(), data.treatment.clone())?;
    let (design, sample) = filter_design(&full, &audit, &sample)?;
    let rows: Vec<usize> = (0..full.n()).filter(|&i| audit.kept_groups.contains(&full.group_of()[i])).collect();
    Ok(Prepared {
        audit: AuditSection {
            thresholds,
            groups_before: full.groups(),
            observations_before: full.n(),
            dropped_observations: full.n() - design.n(),
            audit,
        },
        data: data.select_rows(&rows),
        design,
        sample,
    })
}

fn linear_controls(data: &Dataset) -> Result<DMatrix<f64>> {
    let n = data.len();
    let mut c = DMatrix::from_element(n, 1 + data.covariate_names.len(), 1.0);
    for j in 0..data.covariate_names.len() {
        c.column_mut(j + 1).copy_from_slice(&data.covariate_column(j)?);
    }
    Ok(c)
}

fn group_dummies(design: &SaturatedDesign, only_active: bool) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(design.n(), design.groups());
    for (i, &g) in design.group_of().iter().enumerate() {
        if !only_active || design.instrument()[i] {
            m[(i, g)] = 1.0;
        }
    }
    m
}

/// `(instruments, controls)` for a specification.
pub fn spec_matrices(spec: SpecChoice, prepared: &Prepared) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = prepared.design.n();
    let q = DMatrix::from_column_slice(n, 1, &prepared.data.instrument);
    Ok(match spec {
        SpecChoice::NotSaturated => (q, linear_controls(&prepared.data)?),
        SpecChoice::SaturatedInstruments => (group_dummies(&prepared.design, true), linear_controls(&prepared.data)?),
        SpecChoice::SaturatedControls => (q, group_dummies(&prepared.design, false)),
        SpecChoice::FullySaturated => (group_dummies(&prepared.design, true), group_dummies(&prepared.design, false)),
    })
}

struct Fit {
    beta: f64,
    variance: Option<f64>,
    method: &'static str,
    dropped_instruments: Vec<usize>,
    dropped_controls: Vec<usize>,
}

fn from_generic(fit: GenericFit, method: &'static str) -> Fit {
    Fit {
        beta: fit.beta,
        variance: Some(fit.variance),
        method,
        dropped_instruments: fit.dropped_instruments,
        dropped_controls: fit.dropped_controls,
    }
}

fn fit(req: &EstimateRequest, p: &Prepared) -> Result<Fit> {
    use EstimatorKind as K;
    use SpecChoice as S;
    let (d, s) = (&p.design, &p.sample);
    let block = |beta: f64, variance: Option<f64>, method| Fit {
        beta,
        variance,
        method,
        dropped_instruments: Vec::new(),
        dropped_controls: Vec::new(),
    };
    match (req.spec, req.estimator) {
        (S::FullySaturated, K::Sive) => {
            let beta = estimators::estimate_sive(d, s)?;
            Ok(block(beta, Some(inference::sive_variance(d, &s.outcome, &s.treatment, beta)?), "HARTLEY"))
        }
        (S::FullySaturated, K::TslsSaturated) => {
            let beta = estimators::estimate_tsls(d, s)?;
            Ok(block(beta, Some(inference::tsls_hc0_variance(d, s, beta)?), "HC0"))
        }
        (S::FullySaturated, kind @ (K::Jive1 | K::Jive2)) => Ok(block(estimators::estimate(kind, d, s)?, None, "NONE")),
        (spec, K::TslsSaturated | K::TslsGeneric) => {
            let (zi, c) = spec_matrices(spec, p)?;
            Ok(from_generic(generic::estimate_tsls_generic(&s.outcome, &s.treatment, &zi, &c)?, "HC0"))
        }
        (S::SaturatedInstruments | S::SaturatedControls, K::Sive) => {
            let (zi, c) = spec_matrices(req.spec, p)?;
            Ok(from_generic(generic::estimate_sive_generic(&s.outcome, &s.treatment, &zi, &c)?, "HARTLEY_DENSE"))
        }
        (spec, kind) => Err(Error::Validation(format!(
            "{kind} is not available with the {} specification",
            serde_json::to_value(spec)?.as_str().unwrap_or_default()
        ))),
    }
}

/// Estimation and Wald inference on an in-memory dataset.
pub fn run_estimate(data: &Dataset, req: &EstimateRequest) -> Result<EstimateReport> {
    if !(req.alpha > 0.0 && req.alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {}", req.alpha)));
    }
    let p = prepare(data, req.thresholds)?;
    let f = fit(req, &p)?;
    // A zero variance (an exact fit) is reported with a degenerate interval
    // and no test; a negative one is an error.
    let test = match f.variance {
        Some(v) if v > 0.0 && v.is_finite() => Some(inference::t_test(f.beta, v, req.beta0, req.alpha)?),
        Some(v) if v == 0.0 => None,
        Some(v) => return Err(sive_core::Error::NonPositiveVariance { value: v }.into()),
        None => None,
    };
    let ci = match (f.variance, test) {
        (Some(v), Some(_)) => Some(inference::confidence_interval(f.beta, v, req.alpha)?),
        (Some(_), None) => Some((f.beta, f.beta)),
        _ => None,
    };
    let pi = estimators::estimated_complier_shares(&p.design, &p.sample.treatment)?;
    let reference = if req.reference {
        Some(reference_check(req, &p)?)
    } else {
        None
    };
    Ok(EstimateReport {
        schema_version: SCHEMA_VERSION,
        spec: req.spec,
        estimator: req.estimator,
        n: p.design.n(),
        groups: p.design.groups(),
        beta_hat: f.beta,
        variance: f.variance,
        std_error: f.variance.map(f64::sqrt),
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        alpha: req.alpha,
        beta0: req.beta0,
        t_stat: test.map(|t| t.t),
        p_value: test.map(|t| t.p_value),
        reject: test.map(|t| t.reject),
        variance_method: f.method,
        first_stage: estimators::first_stage_strength(&p.design, &pi)?,
        design_summary: design_summary(&p.design),
        audit: p.audit,
        dropped_instruments: f.dropped_instruments,
        dropped_controls: f.dropped_controls,
        reference,
    })
}

fn reference_check(req: &EstimateRequest, p: &Prepared) -> Result<ReferenceCheck> {
    if req.spec != SpecChoice::FullySaturated || !EstimatorKind::SATURATED.contains(&req.estimator) {
        return Err(Error::Validation("the dense reference covers the fully saturated estimators only".into()));
    }
    let dense = reference::assemble(&p.design, reference::DEFAULT_CAP)?;
    let (y, t) = (&p.sample.outcome, &p.sample.treatment);
    let beta_hat = reference::oracle_estimate(req.estimator, &dense, y, t)?;
    let variance = match req.estimator {
        EstimatorKind::Sive => Some(reference::oracle_variance(&dense, y, t, beta_hat)?),
        _ => None,
    };
    Ok(ReferenceCheck { beta_hat, variance })
}

pub fn cmd_estimate(path: &Path, schema: &DatasetSchema, binarize: &[Binarize], req: &EstimateRequest) -> Result<EstimateReport> {
    run_estimate(&read_dataset(path, schema, binarize)?, req)
}

/// Grid bounds; any missing piece is filled from the default grid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridFlags {
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustCiReport {
    pub schema_version: u32,
    pub n: usize,
    pub groups: usize,
    pub alpha: f64,
    pub alternative: Alternative,
    pub beta_hat: Option<f64>,
    pub std_error: Option<f64>,
    pub grid: GridSection,
    pub intervals: Vec<(f64, f64)>,
    pub accepted_points: usize,
    pub grid_points: usize,
    pub empty: bool,
    pub unbounded_within_grid: bool,
    pub open_below: bool,
    pub open_above: bool,
    pub design_summary: DesignSummary,
    pub audit: AuditSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSection {
    pub low: f64,
    pub high: f64,
    pub step: f64,
}

/// Test inversion on the fully saturated design.
pub fn run_robust_ci(data: &Dataset, thresholds: GroupThresholds, flags: GridFlags, alpha: f64) -> Result<RobustCiReport> {
    run_robust_ci_with(data, thresholds, flags, alpha, Alternative::TwoSided)
}

/// Like [`run_robust_ci`] with a one-sided alternative if requested.
pub fn run_robust_ci_with(
    data: &Dataset,
    thresholds: GroupThresholds,
    flags: GridFlags,
    alpha: f64,
    alternative: Alternative,
) -> Result<RobustCiReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let p = prepare(data, thresholds)?;
    let (d, s) = (&p.design, &p.sample);
    let beta_hat = estimators::estimate_sive(d, s).ok();
    let std_error = beta_hat
        .and_then(|b| inference::sive_variance(d, &s.outcome, &s.treatment, b).ok())
        .filter(|v| *v > 0.0)
        .map(f64::sqrt);
    let default = match (beta_hat, std_error) {
        (Some(b), Some(se)) => Some(Grid::around(b, se)),
        _ => None,
    };
    let low = flags.low.or(default.map(|g| g.low));
    let high = flags.high.or(default.map(|g| g.high));
    let (low, high) = match (low, high) {
        (Some(l), Some(h)) => (l, h),
        _ => {
            return Err(Error::Validation(
                "no standard error is available for a default grid; pass --grid-low and --grid-high".into(),
            ))
        }
    };
    let step = flags.step.unwrap_or((high - low) / 400.0);
    let grid = Grid { low, high, step };
    let set = inference::robust_ci_with(d, s, &grid, alpha, alternative)?;
    Ok(RobustCiReport {
        schema_version: SCHEMA_VERSION,
        n: d.n(),
        groups: d.groups(),
        alpha,
        alternative,
        beta_hat,
        std_error,
        grid: GridSection { low, high, step },
        empty: set.is_empty(),
        unbounded_within_grid: set.unbounded_within_grid(),
        intervals: set.intervals,
        accepted_points: set.accepted_points,
        grid_points: set.grid_points,
        open_below: set.open_below,
        open_above: set.open_above,
        design_summary: design_summary(d),
        audit: p.audit,
    })
}

pub fn cmd_robust_ci(
    path: &Path,
    schema: &DatasetSchema,
    binarize: &[Binarize],
    thresholds: GroupThresholds,
    flags: GridFlags,
    alpha: f64,
    alternative: Alternative,
) -> Result<RobustCiReport> {
    run_robust_ci_with(&read_dataset(path, schema, binarize)?, thresholds, flags, alpha, alternative)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub design_summary: DesignSummary,
    pub audit: GroupAudit,
    pub thresholds: GroupThresholds,
    /// Summary after dropping violating groups; absent when none survive.
    pub filtered_summary: Option<DesignSummary>,
}

pub fn run_audit(data: &Dataset, thresholds: GroupThresholds) -> Result<AuditReport> {
    let design = build_design(&data.covariates, &data.instrument)?;
    let audit = audit_groups(&design, thresholds);
    let filtered_summary = design
        .retain_groups(&audit.kept_groups)
        .ok()
        .map(|(d, _)| design_summary(&d));
    Ok(AuditReport {
        schema_version: SCHEMA_VERSION,
        design_summary: design_summary(&design),
        audit,
        thresholds,
        filtered_summary,
    })
}

pub fn cmd_audit(path: &Path, schema: &DatasetSchema, binarize: &[Binarize], thresholds: GroupThresholds) -> Result<AuditReport> {
    run_audit(&read_dataset(path, schema, binarize)?, thresholds)
}

/// Written next to the tables; the only artifact carrying a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub master_seed: u64,
    pub created_unix: u64,
    pub files: Vec<String>,
}

/// Runs the bias and size experiments described by a JSON plan and writes
/// `bias.{csv,json}`, `size.{csv,json}` and `manifest.json` into `out_dir`.
pub fn cmd_simulate(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<Manifest> {
    let bytes = std::fs::read(config_path).map_err(|e| Error::io(config_path, e))?;
    let mut plan: SimPlan = serde_json::from_slice(&bytes).map_err(|e| Error::Validation(format!("invalid config: {e}")))?;
    if let Some(seed) = seed {
        plan.base.master_seed = seed;
    }
    plan.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let variants = plan.variants.clone().unwrap_or_else(|| VarianceVariant::ALL.to_vec());
    let bias = simulation::run_bias_experiment(&plan)?;
    let size = simulation::run_size_experiment(&plan, &variants)?;
    let mut files: Vec<PathBuf> = simulation::summarize(&bias, out_dir, "bias")?;
    files.extend(simulation::summarize(&size, out_dir, "size")?);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
        master_seed: plan.base.master_seed,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    crate::io::write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

