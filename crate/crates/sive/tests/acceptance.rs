//! Acceptance suite. Prints one PASS / FAIL / SKIP line per criterion.
//!
//! The target is a report: failures are printed and counted, and only make
//! the process exit nonzero when `SIVE_ACCEPTANCE_STRICT` is set.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{random_design, random_sample, rel_err, rel_err_vec, rng};
use rand::Rng;
use rand_distr::StandardNormal;
use sive::app::{self, EstimateRequest, SpecChoice};
use sive::io::{Binarize, DatasetSchema};
use sive::reference::{self, DEFAULT_CAP};
use sive::simulation::{self, SimConfig, SimPlan, SummaryRow, VarianceVariant};
use sive::sive_core::design::GroupThresholds;
use sive::sive_core::estimators::{self, population_ratio};
use sive::sive_core::{blockops, inference, EstimatorKind, NoiseMap, PopulationInputs, SaturatedDesign};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn diagonal_identity() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = random_design(&mut r, (1, 20), (4, 12));
        let dense = reference::assemble(&d, DEFAULT_CAP).unwrap();
        worst = worst.max(reference::diagonal_identity_error(&dense));
    }
    verdict(worst < 1e-10, format!("max |[P - M D M]_ii| = {worst:.2e} over 200 designs"))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(202);
    let mut worst = [0.0f64; 4];
    let mut count = 0;
    while count < 100 {
        let d = random_design(&mut r, (1, 25), (4, 16));
        if d.n() > 200 {
            continue;
        }
        count += 1;
        let s = random_sample(&mut r, &d);
        let dense = reference::assemble(&d, DEFAULT_CAP).unwrap();
        for kind in EstimatorKind::SATURATED {
            let fast = estimators::estimate(kind, &d, &s).unwrap();
            let slow = reference::oracle_estimate(kind, &dense, &s.outcome, &s.treatment).unwrap();
            worst[0] = worst[0].max(rel_err(fast, slow));
        }
        let b = estimators::estimate_sive(&d, &s).unwrap();
        let v = inference::sive_variance_parts(&d, &s.outcome, &s.treatment, b).unwrap().variance();
        let v_ref = reference::oracle_variance(&dense, &s.outcome, &s.treatment, b).unwrap();
        worst[1] = worst[1].max(rel_err(v, v_ref));
        let resid: Vec<f64> = s.outcome.iter().zip(&s.treatment).map(|(y, t)| y - b * t).collect();
        let fast = inference::hartley_sigma(&d, &s.treatment, &resid).unwrap();
        let slow = reference::oracle_sigma(&dense, &s.treatment, &resid).unwrap();
        for (a, c) in [
            (&fast.sigma_u2, &slow.sigma_u2),
            (&fast.sigma_v2, &slow.sigma_v2),
            (&fast.sigma_uv, &slow.sigma_uv),
        ] {
            worst[2] = worst[2].max(rel_err_vec(a, c));
        }
        assert_eq!(fast.used_fallback, slow.used_fallback);
        let c = inference::chao_variance(&d, &s.outcome, &s.treatment, b).unwrap();
        let c_ref = reference::oracle_chao_variance(&dense, &s.outcome, &s.treatment, b).unwrap();
        worst[3] = worst[3].max(rel_err(c, c_ref));
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    verdict(
        max < 1e-8,
        format!(
            "relative error: estimates {:.1e}, variance {:.1e}, sigma {:.1e}, comparison variance {:.1e} (100 instances)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn trace_bounds() -> Outcome {
    let mut r = rng(303);
    let mut worst_trace = 0.0f64;
    let (mut low, mut high) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ok = true;
    for k in 0..300 {
        let d = if k % 2 == 0 {
            random_design(&mut r, (1, 20), (4, 12))
        } else {
            random_design(&mut r, (1, 25), (4, 16))
        };
        let g = d.groups() as f64;
        let tr_p: f64 = blockops::projection_diagonal(&d).unwrap().iter().sum();
        worst_trace = worst_trace.max((tr_p - g).abs());
        let t2 = blockops::trace_sive_squared(&d).unwrap();
        if k < 60 {
            let dense = reference::assemble(&d, DEFAULT_CAP).unwrap();
            let dense_t2 = (&dense.a * &dense.a).trace();
            ok &= rel_err(t2, dense_t2) < 1e-10;
            worst_trace = worst_trace.max((dense.p.trace() - g).abs());
        }
        low = low.min(t2 / g);
        high = high.max(t2 / g);
    }
    ok &= worst_trace < 1e-9 && low >= 1.0 - 1e-12 && high <= 3.0 + 1e-12;
    verdict(
        ok,
        format!("|tr(P) - G| <= {worst_trace:.1e}; tr(A^2)/G in [{low:.4}, {high:.4}] over 300 designs"),
    )
}

/// Fixed heteroskedastic model for the variance checks: per-observation
/// standard deviations and a common correlation.
struct Noise {
    sd_u: Vec<f64>,
    sd_v: Vec<f64>,
    rho: f64,
}

impl Noise {
    fn new(n: usize, rho: f64) -> Self {
        Self {
            sd_u: (0..n).map(|i| 0.3 + 0.05 * i as f64).collect(),
            sd_v: (0..n).map(|i| 0.5 + 0.03 * ((7 * i) % n) as f64).collect(),
            rho,
        }
    }

    fn draw(&self, r: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let scale = (1.0 - self.rho * self.rho).sqrt();
        let mut u = Vec::with_capacity(self.sd_u.len());
        let mut v = Vec::with_capacity(self.sd_u.len());
        for i in 0..self.sd_u.len() {
            let a: f64 = r.sample(StandardNormal);
            let b: f64 = r.sample(StandardNormal);
            u.push(self.sd_u[i] * a);
            v.push(self.sd_v[i] * (self.rho * a + scale * b));
        }
        (u, v)
    }
}

fn balanced(groups: usize, size: usize, active: usize) -> SaturatedDesign {
    let group_of = (0..groups * size).map(|i| i / size).collect();
    let instrument = (0..groups * size).map(|i| i % size < active).collect();
    SaturatedDesign::from_parts(group_of, instrument).unwrap()
}

fn hartley_unbiasedness() -> Outcome {
    let draws = 50_000;
    let d = balanced(5, 8, 4);
    let n = d.n();
    let noise = Noise::new(n, 0.4);
    let mean_t: Vec<f64> = (0..n).map(|i| if d.instrument()[i] { 0.7 } else { 0.2 } + 0.1 * d.group_of()[i] as f64).collect();
    let mut r = rng(404);
    let mut sum = vec![[0.0f64; 3]; n];
    let mut sum_sq = vec![[0.0f64; 3]; n];
    for _ in 0..draws {
        let (u, v) = noise.draw(&mut r);
        let t: Vec<f64> = mean_t.iter().zip(&u).map(|(m, u)| m + u).collect();
        let resid: Vec<f64> = v.iter().map(|v| 1.5 + v).collect();
        let s = inference::hartley_sigma(&d, &t, &resid).unwrap();
        for i in 0..n {
            for (k, x) in [s.sigma_u2[i], s.sigma_v2[i], s.sigma_uv[i]].into_iter().enumerate() {
                sum[i][k] += x;
                sum_sq[i][k] += x * x;
            }
        }
    }
    let mut max_z = [0.0f64; 3];
    for i in 0..n {
        let truth = [
            noise.sd_u[i].powi(2),
            noise.sd_v[i].powi(2),
            noise.rho * noise.sd_u[i] * noise.sd_v[i],
        ];
        for k in 0..3 {
            let m = sum[i][k] / draws as f64;
            let var = (sum_sq[i][k] / draws as f64 - m * m) * draws as f64 / (draws - 1) as f64;
            let z = (m - truth[k]).abs() / (var / draws as f64).sqrt();
            max_z[k] = max_z[k].max(z);
        }
    }

    // Cells of two: within-cell mean differences and the partner's variance
    // both load on the factor-four estimator.
    let small = balanced(5, 4, 2);
    let m = small.n();
    let noise = Noise::new(m, 0.3);
    let beta = 0.5;
    let mu_t: Vec<f64> = (0..m).map(|i| 0.2 + 3.0 * f64::from(u8::from(small.instrument()[i])) + 0.15 * (i % 2) as f64).collect();
    let mu_r: Vec<f64> = (0..m).map(|i| 0.3 * ((i * 5) % 3) as f64).collect();
    let (mut mean_hat, mut mean_inf) = (0.0, 0.0);
    let reps = 20_000;
    for _ in 0..reps {
        let (u, v) = noise.draw(&mut r);
        let t: Vec<f64> = mu_t.iter().zip(&u).map(|(a, b)| a + b).collect();
        let resid: Vec<f64> = mu_r.iter().zip(&v).map(|(a, b)| a + b).collect();
        let y: Vec<f64> = resid.iter().zip(&t).map(|(r, t)| r + beta * t).collect();
        mean_hat += inference::sive_variance_parts(&small, &y, &t, beta).unwrap().variance();
        let at = blockops::apply_sive_operator(&small, &t).unwrap();
        let ar = blockops::apply_sive_operator(&small, &resid).unwrap();
        let tat = blockops::dot(&at, &t);
        let num: f64 = (0..m)
            .map(|i| {
                let (su, sv) = (noise.sd_u[i], noise.sd_v[i]);
                su * su * ar[i] * ar[i] + sv * sv * at[i] * at[i] + 2.0 * noise.rho * su * sv * ar[i] * at[i]
            })
            .sum();
        mean_inf += num / (tat * tat);
    }
    mean_hat /= reps as f64;
    mean_inf /= reps as f64;
    verdict(
        max_z[0] <= 3.0 && mean_hat >= mean_inf,
        format!(
            "max |z| for sigma_u2 = {:.2} (sigma_v2 {:.2}, sigma_uv {:.2}; 40 units, 50000 draws); \
             cells of two: mean V = {mean_hat:.4} >= infeasible {mean_inf:.4}",
            max_z[0], max_z[1], max_z[2]
        ),
    )
}

fn estimand_identities() -> Outcome {
    let draws = 100_000;
    let sizes = [8usize, 10, 12, 9, 11, 14];
    let active = [4usize, 3, 7, 2, 5, 9];
    let mut group_of = Vec::new();
    let mut instrument = Vec::new();
    for (g, (&ng, &mg)) in sizes.iter().zip(&active).enumerate() {
        for i in 0..ng {
            group_of.push(g);
            instrument.push(i < mg);
        }
    }
    let d = SaturatedDesign::from_parts(group_of, instrument).unwrap();
    let n = d.n();
    let pi = vec![0.5, 0.3, 0.7, 0.4, 0.6, 0.2];
    let tau = vec![1.0, -0.5, 2.0, 0.3, 1.5, -1.0];
    let psi = vec![0.2, 0.1, 0.15, 0.3, 0.05, 0.25];
    let phi = vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.0];
    let noise = Noise::new(n, 0.5);
    let sigma_ue: Vec<f64> = (0..n).map(|i| noise.rho * noise.sd_u[i] * noise.sd_v[i]).collect();
    let sigma_uu: Vec<f64> = noise.sd_u.iter().map(|s| s * s).collect();
    let inputs = PopulationInputs::new(pi.clone(), tau.clone())
        .with_noise(NoiseMap::PerObservation(sigma_ue), NoiseMap::PerObservation(sigma_uu))
        .with_intercepts(psi.clone(), phi.clone());
    let mean_t: Vec<f64> = (0..n)
        .map(|i| {
            let g = d.group_of()[i];
            psi[g] + if d.instrument()[i] { pi[g] } else { 0.0 }
        })
        .collect();
    let mean_y: Vec<f64> = (0..n)
        .map(|i| {
            let g = d.group_of()[i];
            phi[g] + if d.instrument()[i] { pi[g] * tau[g] } else { 0.0 }
        })
        .collect();
    let kinds = EstimatorKind::SATURATED;
    let mut r = rng(505);
    let mut acc = [[0.0f64; 4]; 4];
    for _ in 0..draws {
        let (u, e) = noise.draw(&mut r);
        let t: Vec<f64> = mean_t.iter().zip(&u).map(|(a, b)| a + b).collect();
        let y: Vec<f64> = mean_y.iter().zip(&e).map(|(a, b)| a + b).collect();
        for (k, &kind) in kinds.iter().enumerate() {
            let kt = estimators::apply_operator(kind, &d, &t).unwrap();
            let num = blockops::dot(&kt, &y) / n as f64;
            let den = blockops::dot(&kt, &t) / n as f64;
            acc[k][0] += num;
            acc[k][1] += num * num;
            acc[k][2] += den;
            acc[k][3] += den * den;
        }
    }
    let mut max_z = 0.0f64;
    let mut parts = Vec::new();
    for (k, &kind) in kinds.iter().enumerate() {
        let ratio = population_ratio(kind, &d, &inputs).unwrap();
        let mut z_kind = 0.0f64;
        for (j, target) in [(0usize, ratio.numerator), (2, ratio.denominator)] {
            let m = acc[k][j] / draws as f64;
            let var = acc[k][j + 1] / draws as f64 - m * m;
            let z = (m - target).abs() / (var / draws as f64).sqrt();
            z_kind = z_kind.max(z);
        }
        max_z = max_z.max(z_kind);
        parts.push(format!("{kind} {z_kind:.2}"));
    }
    verdict(
        max_z <= 3.0,
        format!("max |z| of numerator and denominator vs closed form: {} (100000 draws)", parts.join(", ")),
    )
}

fn scaled(l: usize, p1: f64, h: f64, reps: usize, seed: u64) -> SimConfig {
    SimConfig {
        n: 1000,
        n_hetero: 300,
        ..SimConfig::full_scale(l, p1, h, reps, seed)
    }
}

fn find<'a>(rows: &'a [SummaryRow], l: usize, p1: f64, estimator: &str, metric: &str) -> &'a SummaryRow {
    rows.iter()
        .find(|r| r.l == l && r.p1 == p1 && r.estimator == estimator && r.metric == metric)
        .expect("summary row")
}

fn bias_replication() -> Outcome {
    let plan = SimPlan {
        l_values: Some(vec![1, 25, 100]),
        p1_values: Some(vec![0.39, 0.69]),
        ..SimPlan::single(scaled(1, 0.39, 0.0, 500, 606))
    };
    let rows = simulation::run_bias_experiment(&plan).unwrap();
    let mut ok = true;
    let mut sive = Vec::new();
    for l in [1, 25, 100] {
        for p1 in [0.39, 0.69] {
            let b = find(&rows, l, p1, "SIVE", "abs_median_bias").value.unwrap_or(f64::NAN);
            ok &= b < 0.05;
            sive.push(format!("L={l},p1={p1}: {b:.3}"));
        }
    }
    let tsls: Vec<f64> = [1, 25, 100]
        .iter()
        .map(|&l| find(&rows, l, 0.39, "TSLS_SATURATED", "abs_median_bias").value.unwrap_or(f64::NAN))
        .collect();
    ok &= tsls[0] < tsls[1] && tsls[1] < tsls[2];
    verdict(
        ok,
        format!(
            "SIVE |median bias| [{}]; TSLS at p1=0.39 over L=1,25,100: {:.3} < {:.3} < {:.3}",
            sive.join("; "),
            tsls[0],
            tsls[1],
            tsls[2]
        ),
    )
}

fn size_cell(l: usize, p1: f64, h: f64, variant: VarianceVariant, seed: u64) -> (f64, f64) {
    let plan = SimPlan::single(scaled(l, p1, h, 2000, seed));
    let rows = simulation::run_size_experiment(&plan, &[variant]).unwrap();
    let rate = find(&rows, l, p1, variant.label(), "rejection_rate").value.unwrap_or(f64::NAN);
    let attrition = find(&rows, l, p1, variant.label(), "attrition").value.unwrap_or(f64::NAN);
    (rate, attrition)
}

fn size_replication() -> Outcome {
    let (strong, a1) = size_cell(1, 0.69, 0.0, VarianceVariant::Vhat, 707);
    let (weak, a2) = size_cell(100, 0.39, 0.0, VarianceVariant::Vhat, 708);
    let (chao, a3) = size_cell(100, 0.69, 10.0, VarianceVariant::Chao, 709);
    verdict(
        (0.03..=0.07).contains(&strong) && weak <= 0.07 && chao > 0.07,
        format!(
            "SIVE L=1,p1=0.69: {strong:.4} (attrition {a1:.3}); SIVE L=100,p1=0.39: {weak:.4} (attrition {a2:.3}); \
             comparison variance L=100,p1=0.69,h=10: {chao:.4} (attrition {a3:.3})"
        ),
    )
}

fn card_data() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("SIVE_CARD_DATA").map(PathBuf::from),
        Some(PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/card.csv"))),
    ];
    candidates.into_iter().flatten().find(|p| p.is_file())
}

fn card_reproduction() -> Outcome {
    let Some(path) = card_data() else {
        return Outcome::Skip("Card (1995) extract not found (set SIVE_CARD_DATA or add data/card.csv)".into());
    };
    let schema = DatasetSchema::new("lwage", "educ", "nearc4", &["black", "smsa66", "smsa", "south66", "south"]);
    let binarize = [Binarize {
        column: "educ".into(),
        threshold: 12.0,
    }];
    let req = EstimateRequest {
        spec: SpecChoice::FullySaturated,
        estimator: EstimatorKind::Sive,
        thresholds: GroupThresholds {
            min_size: 5,
            ..GroupThresholds::STANDARD
        },
        ..EstimateRequest::default()
    };
    match app::cmd_estimate(&path, &schema, &binarize, &req) {
        Ok(rep) => {
            let se = rep.std_error.unwrap_or(f64::NAN);
            verdict(
                (rep.beta_hat - 0.125).abs() <= 0.001 && (se - 0.342).abs() <= 0.001,
                format!("n = {}, G = {}, estimate {:.4}, SE {:.4}", rep.n, rep.groups, rep.beta_hat, se),
            )
        }
        Err(e) => Outcome::Fail(format!("{}: {e}", path.display())),
    }
}

fn robust_coverage() -> Outcome {
    let plan = SimPlan {
        size_replications: Some(1000),
        ..SimPlan::single(scaled(25, 0.22, 0.0, 1000, 909))
    };
    let rows = simulation::run_size_experiment(&plan, &[VarianceVariant::Robust]).unwrap();
    let rate = find(&rows, 25, 0.22, "SIVE_ROBUST", "rejection_rate").value.unwrap_or(f64::NAN);
    let attrition = find(&rows, 25, 0.22, "SIVE_ROBUST", "attrition").value.unwrap_or(f64::NAN);
    verdict(
        rate <= 0.07,
        format!("p1 = p0 = 0.22, L = 25, n = 1000: score test rejects {rate:.4} at beta (attrition {attrition:.3})"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("diagonal identity", diagonal_identity),
        ("oracle equivalence", oracle_equivalence),
        ("trace bounds", trace_bounds),
        ("Hartley unbiasedness", hartley_unbiasedness),
        ("estimand identities", estimand_identities),
        ("bias replication", bias_replication),
        ("size replication", size_replication),
        ("Card reproduction", card_reproduction),
        ("identification-robust coverage", robust_coverage),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == (k + 1).to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{}] {name}: {detail} ({secs:.1} s)", k + 1);
    }
    println!("acceptance: {failed} failed");
    if failed > 0 && std::env::var_os("SIVE_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
