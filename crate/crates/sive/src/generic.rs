//! Estimators on explicit design matrices, for specifications that are only
//! partly saturated (linear controls, or a single uninteracted instrument).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::{Error, Result};

/// Relative pivot tolerance for dropping collinear columns.
pub const PIVOT_TOL: f64 = 1e-10;

/// Largest `n` accepted by the dense generic SIVE path.
pub const GENERIC_SIVE_CAP: usize = 4000;

/// Orthonormal basis for the span of the columns of `x`, built by modified
/// Gram-Schmidt with re-orthogonalization. A column is dropped when its
/// residual norm falls below `tol` times its original norm. Returns the
/// basis and the indices of the kept columns.
pub fn orthonormal_basis(x: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, Vec<usize>) {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..x.ncols() {
        let original = x.column(j).into_owned();
        let norm0 = original.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = original;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > tol * norm0 {
            basis.push(v / norm);
            kept.push(j);
        }
    }
    let q = if basis.is_empty() {
        DMatrix::zeros(x.nrows(), 0)
    } else {
        DMatrix::from_columns(&basis)
    };
    (q, kept)
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Controls first, then instruments; reports which columns survived.
struct Selection {
    basis: DMatrix<f64>,
    control_basis: DMatrix<f64>,
    controls: DMatrix<f64>,
    dropped_controls: Vec<usize>,
    dropped_instruments: Vec<usize>,
}

fn select(instruments: &DMatrix<f64>, controls: &DMatrix<f64>, n: usize) -> Result<Selection> {
    if instruments.nrows() != n || controls.nrows() != n {
        return Err(Error::Validation(format!(
            "design matrices have {} and {} rows for {n} observations",
            instruments.nrows(),
            controls.nrows()
        )));
    }
    let (control_basis, kept_c) = orthonormal_basis(controls, PIVOT_TOL);
    let stacked = hstack(controls, instruments);
    let (basis, kept_all) = orthonormal_basis(&stacked, PIVOT_TOL);
    let kc = controls.ncols();
    let kept_i: Vec<usize> = kept_all.iter().filter(|&&j| j >= kc).map(|j| j - kc).collect();
    let dropped_controls: Vec<usize> = (0..kc).filter(|j| !kept_c.contains(j)).collect();
    let dropped_instruments: Vec<usize> = (0..instruments.ncols()).filter(|j| !kept_i.contains(j)).collect();
    if kept_i.is_empty() {
        return Err(Error::Validation(format!(
            "no instrument survives elimination: dropped instrument columns {dropped_instruments:?}, \
             dropped control columns {dropped_controls:?}"
        )));
    }
    let controls = controls.select_columns(&kept_c);
    Ok(Selection {
        basis,
        control_basis,
        controls,
        dropped_controls,
        dropped_instruments,
    })
}

/// Result of a generic estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenericFit {
    pub beta: f64,
    pub variance: f64,
    /// Column indices (within the supplied matrices) removed as collinear.
    pub dropped_instruments: Vec<usize>,
    pub dropped_controls: Vec<usize>,
}

/// Two-stage least squares of `y` on `t` and `controls`, instrumenting `t`
/// with `instruments`, and the HC0 sandwich variance of the coefficient on
/// `t`.
pub fn estimate_tsls_generic(
    y: &[f64],
    t: &[f64],
    instruments: &DMatrix<f64>,
    controls: &DMatrix<f64>,
) -> Result<GenericFit> {
    let n = y.len();
    if t.len() != n {
        return Err(sive_core::Error::LengthMismatch { expected: n, found: t.len() }.into());
    }
    let sel = select(instruments, controls, n)?;
    let yv = DVector::from_column_slice(y);
    let x = hstack(&DMatrix::from_column_slice(n, 1, t), &sel.controls);
    let q = &sel.basis;
    let xhat = q * (q.transpose() * &x);
    let bread = (xhat.transpose() * &xhat)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("second stage is rank deficient: treatment is collinear with the controls in the first stage".into()))?;
    let coef = &bread * (xhat.transpose() * &yv);
    let resid = &yv - &x * &coef;
    let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
    for i in 0..n {
        let row = xhat.row(i);
        meat += row.transpose() * row * (resid[i] * resid[i]);
    }
    let cov = &bread * meat * &bread;
    Ok(GenericFit {
        beta: coef[0],
        variance: cov[(0, 0)],
        dropped_instruments: sel.dropped_instruments,
        dropped_controls: sel.dropped_controls,
    })
}

/// SIVE on explicit matrices. With `V = [instruments, controls]`,
/// `M = I - H_V` and `P = H_V - H_C`, the operator is `A = P - M diag(d) M`
/// where `d` solves `(M o M) d = diag(P)`, so `A` has a zero diagonal. The
/// variance uses Hartley estimators from a dense solve of the same system.
/// Dense in `n`; limited to [`GENERIC_SIVE_CAP`] observations.
pub fn estimate_sive_generic(
    y: &[f64],
    t: &[f64],
    instruments: &DMatrix<f64>,
    controls: &DMatrix<f64>,
) -> Result<GenericFit> {
    let n = y.len();
    if t.len() != n {
        return Err(sive_core::Error::LengthMismatch { expected: n, found: t.len() }.into());
    }
    if n > GENERIC_SIVE_CAP {
        return Err(Error::CapExceeded { n, cap: GENERIC_SIVE_CAP });
    }
    let sel = select(instruments, controls, n)?;
    let h_v = &sel.basis * sel.basis.transpose();
    let h_c = &sel.control_basis * sel.control_basis.transpose();
    let p = &h_v - &h_c;
    let m = DMatrix::identity(n, n) - &h_v;
    let lu = m.component_mul(&m).lu();
    let solve = |rhs: DVector<f64>| -> Result<DVector<f64>> {
        lu.solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Numerical("M o M is singular for this specification".into()))
    };
    let d = solve(p.diagonal())?;
    let apply_a = |v: &DVector<f64>| &p * v - &m * (&m * v).component_mul(&d);

    let yv = DVector::from_column_slice(y);
    let tv = DVector::from_column_slice(t);
    let at = apply_a(&tv);
    let t_a_t = at.dot(&tv);
    if t_a_t.abs() <= sive_core::estimators::WEAK_DENOMINATOR_TOL * tv.norm_squared() {
        return Err(sive_core::Error::WeakDenominator { value: t_a_t }.into());
    }
    let beta = at.dot(&yv) / t_a_t;
    let r = &yv - &tv * beta;
    let ar = apply_a(&r);
    let mt = &m * &tv;
    let mr = &m * &r;
    let su = solve(mt.component_mul(&mt))?;
    let sv = solve(mr.component_mul(&mr))?;
    let suv = solve(mr.component_mul(&mt))?;
    let numerator: f64 = (0..n)
        .map(|i| su[i] * ar[i] * ar[i] + sv[i] * at[i] * at[i] + 2.0 * suv[i] * ar[i] * at[i])
        .sum();
    Ok(GenericFit {
        beta,
        variance: numerator / (t_a_t * t_a_t),
        dropped_instruments: sel.dropped_instruments,
        dropped_controls: sel.dropped_controls,
    })
}
