//! Matrix-free operators on the saturated design.
//!
//! Every operator here is block diagonal by covariate group, and within a
//! group it only depends on cell (group x instrument status) sums, so each
//! application is `O(n)`. No `n x n` matrix is ever formed.
//!
//! Notation: `M_W` demeans within groups, `M_WZ` demeans within cells, `P`
//! projects onto the group-demeaned instrument interactions, `D` is the
//! diagonal with `P_ii = [M_WZ D M_WZ]_ii`, and `A = P - M_WZ D M_WZ` is the
//! SIVE operator.

use alloc::vec;
use alloc::vec::Vec;

use crate::design::SaturatedDesign;
use crate::{Error, Result};

fn check_len(design: &SaturatedDesign, v: &[f64]) -> Result<()> {
    if v.len() != design.n() {
        return Err(Error::LengthMismatch {
            expected: design.n(),
            found: v.len(),
        });
    }
    Ok(())
}

/// Per-cell sums of `v`, indexed like [`SaturatedDesign::cell_of`].
pub fn cell_sums(design: &SaturatedDesign, v: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; design.cells()];
    for (i, x) in v.iter().enumerate() {
        sums[design.cell_of(i)] += x;
    }
    sums
}

fn group_sums(design: &SaturatedDesign, v: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; design.groups()];
    for (&g, x) in design.group_of().iter().zip(v) {
        sums[g] += x;
    }
    sums
}

/// Diagonal of `P`.
///
/// Active units get `1/m_g - 1/n_g`, inactive units `(m_g/n_g) / (n_g - m_g)`.
/// The entries sum to the number of groups.
pub fn projection_diagonal(design: &SaturatedDesign) -> Result<Vec<f64>> {
    design.require_variation()?;
    let sizes = design.group_sizes();
    let active = design.treated_counts();
    Ok((0..design.n())
        .map(|i| {
            let g = design.group_of()[i];
            let (n, m) = (sizes[g] as f64, active[g] as f64);
            if design.instrument()[i] {
                1.0 / m - 1.0 / n
            } else {
                (m / n) / (n - m)
            }
        })
        .collect())
}

/// Per-cell value of `D`: `(n - m) / (n (m - 1))` on the active cell and
/// `m / (n (n - m - 1))` on the inactive cell.
fn sive_cell_weights(design: &SaturatedDesign) -> Result<Vec<f64>> {
    design.require_group_sizes()?;
    let mut w = vec![0.0; design.cells()];
    for (g, (&n, &m)) in design.group_sizes().iter().zip(design.treated_counts()).enumerate() {
        let (n, m) = (n as f64, m as f64);
        w[2 * g] = (n - m) / (n * (m - 1.0));
        w[2 * g + 1] = m / (n * (n - m - 1.0));
    }
    Ok(w)
}

/// Diagonal of `D`, the unique diagonal with `P_ii = [M_WZ D M_WZ]_ii`.
///
/// Requires `m_g >= 2` and `n_g - m_g >= 2` in every group.
pub fn sive_diagonal(design: &SaturatedDesign) -> Result<Vec<f64>> {
    let w = sive_cell_weights(design)?;
    Ok((0..design.n()).map(|i| w[design.cell_of(i)]).collect())
}

/// `M_W v`: subtract the group mean.
pub fn demean_within_groups(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    check_len(design, v)?;
    let sums = group_sums(design, v);
    let sizes = design.group_sizes();
    Ok(v
        .iter()
        .zip(design.group_of())
        .map(|(x, &g)| x - sums[g] / sizes[g] as f64)
        .collect())
}

/// `M_WZ v`: subtract the cell mean.
pub fn demean_within_cells(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    check_len(design, v)?;
    let sums = cell_sums(design, v);
    Ok(v
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = design.cell_of(i);
            x - sums[c] / design.cell_size(c) as f64
        })
        .collect())
}

/// `P v`. Within group `g`, `P v = c_g (Z_g - (m_g/n_g) 1)` with
/// `c_g = (Z_g - (m_g/n_g) 1)' v / (m_g (1 - m_g/n_g))`.
pub fn project_instruments(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    check_len(design, v)?;
    design.require_variation()?;
    let sums = cell_sums(design, v);
    let coef: Vec<f64> = design
        .group_sizes()
        .iter()
        .zip(design.treated_counts())
        .enumerate()
        .map(|(g, (&n, &m))| {
            let (n, m) = (n as f64, m as f64);
            let share = m / n;
            let cross = sums[2 * g] - share * (sums[2 * g] + sums[2 * g + 1]);
            cross / (m * (1.0 - share))
        })
        .collect();
    Ok((0..design.n())
        .map(|i| {
            let g = design.group_of()[i];
            let share = design.treated_counts()[g] as f64 / design.group_sizes()[g] as f64;
            let centered = if design.instrument()[i] { 1.0 - share } else { -share };
            coef[g] * centered
        })
        .collect())
}

/// `A v = P v - M_WZ (D (M_WZ v))`.
pub fn apply_sive_operator(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    let weights = sive_cell_weights(design)?;
    let mut pv = project_instruments(design, v)?;
    let mut inner = demean_within_cells(design, v)?;
    for (i, x) in inner.iter_mut().enumerate() {
        *x *= weights[design.cell_of(i)];
    }
    let correction = demean_within_cells(design, &inner)?;
    for (p, c) in pv.iter_mut().zip(correction) {
        *p -= c;
    }
    Ok(pv)
}

/// `(P - D_P) v`: the projection with its diagonal removed (JIVE1).
pub fn apply_jive1_operator(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    let diag = projection_diagonal(design)?;
    let mut pv = project_instruments(design, v)?;
    for ((p, d), x) in pv.iter_mut().zip(diag).zip(v) {
        *p -= d * x;
    }
    Ok(pv)
}

/// `M_W (P - D_P) M_W v` (JIVE2).
pub fn apply_jive2_operator(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    let inner = demean_within_groups(design, v)?;
    let jack = apply_jive1_operator(design, &inner)?;
    demean_within_groups(design, &jack)
}

/// Within a block of size `k`, `(M o M)^{-1} v = k/(k-2) (v - (1'v)/(k(k-1)) 1)`.
#[inline]
fn hartley_block(k: f64, value: f64, block_sum: f64) -> f64 {
    k / (k - 2.0) * (value - block_sum / (k * (k - 1.0)))
}

/// `(M_WZ o M_WZ)^{-1} v`, block by block over cells.
///
/// A cell of size `<= 2` has a singular block. It is accepted only when `v`
/// vanishes on it, in which case the output is zero there too; otherwise
/// [`Error::SmallCell`] is returned so the caller can switch to the small-cell
/// estimator.
pub fn hartley_inverse_cells(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    check_len(design, v)?;
    let sums = cell_sums(design, v);
    let mut out = vec![0.0; v.len()];
    for (i, (&x, o)) in v.iter().zip(out.iter_mut()).enumerate() {
        let c = design.cell_of(i);
        let k = design.cell_size(c);
        if k <= 2 {
            if x != 0.0 {
                return Err(Error::SmallCell {
                    group: c / 2,
                    status: u8::from(c % 2 == 0),
                    size: k,
                });
            }
            continue;
        }
        *o = hartley_block(k as f64, x, sums[c]);
    }
    Ok(out)
}

/// `(M_W o M_W)^{-1} v`, block by block over groups. Requires `n_g >= 3`.
pub fn hartley_inverse_groups(design: &SaturatedDesign, v: &[f64]) -> Result<Vec<f64>> {
    check_len(design, v)?;
    if let Some(g) = design.group_sizes().iter().position(|&s| s < 3) {
        return Err(Error::GroupTooSmall {
            group: g,
            size: design.group_sizes()[g],
        });
    }
    let sums = group_sums(design, v);
    Ok(v
        .iter()
        .zip(design.group_of())
        .map(|(&x, &g)| hartley_block(design.group_sizes()[g] as f64, x, sums[g]))
        .collect())
}

/// Off-diagonal entries of `A` within one group.
///
/// `A` has a zero diagonal. Two distinct units in the active cell share
/// `(n - m) / (n (m - 1))`, two in the inactive cell share
/// `m / (n (n - m - 1))`, and units in different cells of the same group
/// share `-1/n`. Units in different groups share zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiveBlock {
    pub active: f64,
    pub inactive: f64,
    pub cross: f64,
}

pub fn sive_blocks(design: &SaturatedDesign) -> Result<Vec<SiveBlock>> {
    design.require_group_sizes()?;
    Ok(design
        .group_sizes()
        .iter()
        .zip(design.treated_counts())
        .map(|(&n, &m)| {
            let (n, m) = (n as f64, m as f64);
            SiveBlock {
                active: (n - m) / (n * (m - 1.0)),
                inactive: m / (n * (n - m - 1.0)),
                cross: -1.0 / n,
            }
        })
        .collect())
}

/// `A_ij` from the closed-form block entries.
pub fn sive_entry(design: &SaturatedDesign, blocks: &[SiveBlock], i: usize, j: usize) -> f64 {
    if i == j || design.group_of()[i] != design.group_of()[j] {
        return 0.0;
    }
    let b = blocks[design.group_of()[i]];
    match (design.instrument()[i], design.instrument()[j]) {
        (true, true) => b.active,
        (false, false) => b.inactive,
        _ => b.cross,
    }
}

/// `x' (A o A) x = sum_{i != j} A_ij^2 x_i x_j`, evaluated from cell sums.
pub fn sive_hadamard_form(design: &SaturatedDesign, x: &[f64]) -> Result<f64> {
    check_len(design, x)?;
    let blocks = sive_blocks(design)?;
    let sums = cell_sums(design, x);
    let mut squares = vec![0.0; design.cells()];
    for (i, v) in x.iter().enumerate() {
        squares[design.cell_of(i)] += v * v;
    }
    Ok(blocks
        .iter()
        .enumerate()
        .map(|(g, b)| {
            let (sa, sb) = (sums[2 * g], sums[2 * g + 1]);
            b.active * b.active * (sa * sa - squares[2 * g])
                + b.inactive * b.inactive * (sb * sb - squares[2 * g + 1])
                + 2.0 * b.cross * b.cross * sa * sb
        })
        .sum())
}

/// `tr(A^2)` in closed form. Always lies in `[G, 3G]`.
pub fn trace_sive_squared(design: &SaturatedDesign) -> Result<f64> {
    let blocks = sive_blocks(design)?;
    Ok(blocks
        .iter()
        .zip(design.group_sizes().iter().zip(design.treated_counts()))
        .map(|(b, (&n, &m))| {
            let (n, m) = (n as f64, m as f64);
            m * (m - 1.0) * b.active * b.active
                + (n - m) * (n - m - 1.0) * b.inactive * b.inactive
                + 2.0 * m * (n - m) * b.cross * b.cross
        })
        .sum())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
