#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sive::sive_core::{Sample, SaturatedDesign};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random design with `groups` in the given range, group sizes in
/// `sizes`, and between 2 and `n_g - 2` active units per group, shuffled.
pub fn random_design(rng: &mut ChaCha8Rng, groups: (usize, usize), sizes: (usize, usize)) -> SaturatedDesign {
    let g = rng.random_range(groups.0..=groups.1);
    let mut rows: Vec<(usize, bool)> = Vec::new();
    for k in 0..g {
        let ng = rng.random_range(sizes.0..=sizes.1);
        let mg = rng.random_range(2..=ng - 2);
        rows.extend((0..ng).map(|i| (k, i < mg)));
    }
    for i in (1..rows.len()).rev() {
        rows.swap(i, rng.random_range(0..=i));
    }
    // relabel groups by first appearance
    let mut label = vec![usize::MAX; g];
    let mut next = 0;
    let mut group_of = Vec::new();
    for &(k, _) in &rows {
        if label[k] == usize::MAX {
            label[k] = next;
            next += 1;
        }
        group_of.push(label[k]);
    }
    SaturatedDesign::from_parts(group_of, rows.iter().map(|r| r.1).collect()).unwrap()
}

/// Binary treatment with group-specific first stages and an outcome with
/// heterogeneous effects and heteroskedastic, correlated errors.
pub fn random_sample(rng: &mut ChaCha8Rng, design: &SaturatedDesign) -> Sample {
    let groups = design.groups();
    let base: Vec<f64> = (0..groups).map(|_| rng.random_range(0.1..0.4)).collect();
    let pi: Vec<f64> = (0..groups).map(|_| rng.random_range(0.2..0.55)).collect();
    let tau: Vec<f64> = (0..groups).map(|_| rng.random_range(-1.0..2.0)).collect();
    let level: Vec<f64> = (0..groups).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut y = Vec::new();
    let mut t = Vec::new();
    for i in 0..design.n() {
        let g = design.group_of()[i];
        let p = base[g] + if design.instrument()[i] { pi[g] } else { 0.0 };
        let u: f64 = rng.random();
        let ti = f64::from(u8::from(u < p));
        let scale = 0.5 + 1.5 * rng.random::<f64>();
        let e: f64 = rng.sample(StandardNormal);
        t.push(ti);
        y.push(level[g] + tau[g] * ti + scale * (e + 0.8 * (u - 0.5)));
    }
    Sample::new(y, t).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.abs().max(a.abs())
    }
}

/// `max |a - b| / max |b|`.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().chain(a).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// CSV text with columns `y,t,z,g`, the group label as a covariate.
pub fn to_csv(design: &SaturatedDesign, sample: &Sample) -> String {
    let mut out = String::from("y,t,z,g\n");
    for i in 0..design.n() {
        out.push_str(&format!(
            "{},{},{},grp{}\n",
            sample.outcome[i],
            sample.treatment[i],
            u8::from(design.instrument()[i]),
            design.group_of()[i]
        ));
    }
    out
}
