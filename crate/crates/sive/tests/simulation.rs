use sive::app;
use sive::io::{parse_dataset, DatasetSchema};
use sive::simulation::{
    generate_sample, replication_seed, rows_from_csv, rows_to_csv, run_bias_experiment, run_size_experiment, summarize,
    SimConfig, SimPlan, SummaryRow, VarianceVariant,
};
use sive::sive_core::design::GroupThresholds;
use sive::sive_core::estimators::population_estimand;
use sive::sive_core::{EstimatorKind, PopulationInputs};

fn small(l: usize, n_hetero: usize, h: f64, reps: usize) -> SimConfig {
    SimConfig {
        n: 400,
        n_hetero,
        ..SimConfig::full_scale(l, 0.69, h, reps, 5)
    }
}

#[test]
fn truth_matches_closed_form_when_effects_are_group_constant() {
    // 100 units per group, so the 100 smallest-X units are exactly one group
    let config = small(4, 100, 3.0, 1);
    for rep in 0..5 {
        let draw = generate_sample(&config, replication_seed(config.master_seed, rep)).unwrap();
        let inputs = PopulationInputs::new(draw.truth.pi.clone(), draw.truth.tau.clone());
        let closed = population_estimand(EstimatorKind::Sive, &draw.design, &inputs).unwrap();
        let exact = draw.truth.beta_sive.unwrap();
        assert!((closed - exact).abs() < 1e-12, "{closed} vs {exact}");
        assert!(draw.truth.tau.iter().any(|&t| (t - 0.8).abs() < 1e-12));
    }
}

#[test]
fn inactive_units_take_up_at_the_base_rate() {
    let config = SimConfig::full_scale(10, 0.69, 0.0, 1, 8);
    let (mut taken, mut total) = (0.0, 0.0);
    for rep in 0..20 {
        let draw = generate_sample(&config, replication_seed(8, rep)).unwrap();
        for (t, &z) in draw.sample.treatment.iter().zip(draw.design.instrument()) {
            if !z {
                taken += t;
                total += 1.0;
            }
        }
    }
    let rate = taken / total;
    let se = (0.22 * 0.78 / total).sqrt();
    assert!((rate - 0.22).abs() < 4.0 * se, "{rate} over {total}");
}

#[test]
fn no_first_stage_has_no_estimand() {
    let config = SimConfig {
        p1: 0.22,
        ..small(4, 100, 0.0, 1)
    };
    let draw = generate_sample(&config, 1).unwrap();
    assert!(draw.truth.beta_sive.is_none());
    assert!(draw.truth.pi.iter().all(|&p| p == 0.0));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let plan = SimPlan::single(small(2, 60, 1.0, 40));
    let many = run_bias_experiment(&plan).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let one = pool.install(|| run_bias_experiment(&plan).unwrap());
    assert_eq!(many, one);
}

#[test]
fn replications_are_a_prefix_of_longer_runs() {
    let config = small(2, 60, 1.0, 10);
    let short: Vec<f64> = (0..10)
        .map(|r| generate_sample(&config, replication_seed(5, r)).unwrap().sample.outcome[0])
        .collect();
    let long: Vec<f64> = (0..20)
        .map(|r| generate_sample(&config, replication_seed(5, r)).unwrap().sample.outcome[0])
        .collect();
    assert_eq!(short[..], long[..10]);
}

#[test]
fn size_experiment_reports_every_variant() {
    let mut plan = SimPlan::single(small(2, 60, 0.0, 30));
    plan.p1_values = Some(vec![0.22, 0.69]);
    let rows = run_size_experiment(&plan, &VarianceVariant::ALL).unwrap();
    for variant in VarianceVariant::ALL {
        for p1 in [0.22, 0.69] {
            let rate = rows
                .iter()
                .find(|r| r.estimator == variant.label() && r.metric == "rejection_rate" && r.p1 == p1)
                .unwrap();
            assert_eq!(rate.replications, 30);
            if let Some(v) = rate.value {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

#[test]
fn summary_tables_round_trip() {
    let mut rows = run_bias_experiment(&SimPlan::single(small(2, 60, 1.0, 20))).unwrap();
    rows.push(SummaryRow {
        experiment: "bias".into(),
        l: 7,
        p1: 0.1 + 0.2,
        h: -0.0,
        estimator: "SIVE".into(),
        metric: "median_bias".into(),
        value: None,
        mc_se: Some(f64::MIN_POSITIVE),
        replications: 0,
    });
    let dir = tempfile::tempdir().unwrap();
    let files = summarize(&rows, dir.path(), "bias").unwrap();
    assert_eq!(files.len(), 2);
    let from_csv = rows_from_csv(&std::fs::read_to_string(dir.path().join("bias.csv")).unwrap()).unwrap();
    let from_json: Vec<SummaryRow> = serde_json::from_slice(&std::fs::read(dir.path().join("bias.json")).unwrap()).unwrap();
    assert_eq!(from_csv, rows);
    assert_eq!(from_json, rows);
    for (a, b) in from_csv.iter().zip(&from_json) {
        assert_eq!(a.value.map(f64::to_bits), b.value.map(f64::to_bits));
        assert_eq!(a.p1.to_bits(), b.p1.to_bits());
    }
}

#[test]
fn empty_table_is_header_only() {
    let text = rows_to_csv(&[]).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(rows_from_csv(&text).unwrap().is_empty());
}

#[test]
fn audit_of_edge_files() {
    let schema = DatasetSchema::new("y", "t", "z", &["g"]);
    let one = "y,t,z,g\n1,1,1,a\n2,0,1,a\n3,1,0,a\n4,0,0,a\n";
    let data = parse_dataset(one.as_bytes(), &schema, &[]).unwrap();
    let report = app::run_audit(&data, GroupThresholds::STANDARD).unwrap();
    assert_eq!(report.design_summary.groups, 1);
    assert!(report.audit.violations.is_empty());

    // every group has a single active unit
    let bad = "y,t,z,g\n1,1,1,a\n2,0,0,a\n3,0,0,a\n1,1,1,b\n2,0,0,b\n3,0,0,b\n";
    let data = parse_dataset(bad.as_bytes(), &schema, &[]).unwrap();
    let report = app::run_audit(&data, GroupThresholds::STANDARD).unwrap();
    assert_eq!(report.audit.violations.len(), 2);
    assert!(report.audit.kept_groups.is_empty());
    assert!(report.filtered_summary.is_none());
}
