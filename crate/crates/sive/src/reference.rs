//! Dense brute-force reference.
//!
//! Builds every matrix of the saturated design explicitly from the dummy
//! matrices `W` and `Z` and evaluates each estimator and variance formula by
//! literal matrix algebra with general-purpose solves. It shares no code
//! with the block operators in `sive_core::blockops`, which makes it usable as
//! ground truth for small designs.

use nalgebra::{DMatrix, DVector};
use sive_core::{EstimatorKind, SaturatedDesign, SigmaEstimates};

use crate::{Error, Result};

/// Default limit on `n` for dense assembly.
pub const DEFAULT_CAP: usize = 2000;

/// All operators of a design as dense matrices.
#[derive(Debug, Clone)]
pub struct DenseDesign {
    /// `n x G` group dummies.
    pub w: DMatrix<f64>,
    /// `n x G` instrument interactions.
    pub z: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub m_w: DMatrix<f64>,
    pub m_wz: DMatrix<f64>,
    /// Diagonal of `D`.
    pub d: DVector<f64>,
    pub a: DMatrix<f64>,
}

fn residual_maker(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    let gram = v.transpose() * v;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Gram matrix in residual maker".into()))?;
    Ok(DMatrix::identity(n, n) - v * inv * v.transpose())
}

impl DenseDesign {
    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn groups(&self) -> usize {
        self.w.ncols()
    }

    /// Cell of each observation and the size of that cell, read off `W`, `Z`.
    pub fn cell_sizes(&self) -> Vec<usize> {
        let n = self.n();
        let key = |i: usize| {
            let g = (0..self.groups()).find(|&g| self.w[(i, g)] == 1.0).unwrap();
            (g, self.z[(i, g)] == 1.0)
        };
        let keys: Vec<_> = (0..n).map(key).collect();
        keys.iter().map(|k| keys.iter().filter(|j| *j == k).count()).collect()
    }

    pub fn operator(&self, kind: EstimatorKind) -> Result<DMatrix<f64>> {
        let p_minus_diag = || {
            let mut m = self.p.clone();
            m.fill_diagonal(0.0);
            m
        };
        Ok(match kind {
            EstimatorKind::TslsSaturated => self.p.clone(),
            EstimatorKind::Jive1 => p_minus_diag(),
            EstimatorKind::Jive2 => &self.m_w * p_minus_diag() * &self.m_w,
            EstimatorKind::Sive => self.a.clone(),
            EstimatorKind::TslsGeneric => return Err(sive_core::Error::Unsupported("TSLS_GENERIC").into()),
        })
    }
}

/// Assembles the dense matrices. `P = M_W Z (Z'M_W Z)^{-1} Z'M_W`,
/// `M_WZ = I - V(V'V)^{-1}V'` with `V = [Z, W]`, `D` from its closed form in
/// terms of column sums of `W` and `Z`, and `A = P - M_WZ D M_WZ`.
pub fn assemble(design: &SaturatedDesign, cap: usize) -> Result<DenseDesign> {
    let n = design.n();
    if n > cap {
        return Err(Error::CapExceeded { n, cap });
    }
    let groups = design.groups();
    let mut w = DMatrix::zeros(n, groups);
    let mut z = DMatrix::zeros(n, groups);
    for i in 0..n {
        let g = design.group_of()[i];
        w[(i, g)] = 1.0;
        if design.instrument()[i] {
            z[(i, g)] = 1.0;
        }
    }
    let m_w = residual_maker(&w)?;
    let mz = &m_w * &z;
    let inner = (z.transpose() * &mz)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("Z'M_W Z is singular: a group lacks instrument variation".into()))?;
    let p = &mz * inner * mz.transpose();

    let mut v = DMatrix::zeros(n, 2 * groups);
    v.columns_mut(0, groups).copy_from(&z);
    v.columns_mut(groups, groups).copy_from(&w);
    let m_wz = residual_maker(&v)?;

    let n_g = w.row_sum();
    let m_g = z.row_sum();
    let d = DVector::from_fn(n, |i, _| {
        (0..groups)
            .map(|g| {
                let (ng, mg) = (n_g[g], m_g[g]);
                w[(i, g)] / ng * ((ng - mg) / (mg - 1.0) * z[(i, g)] + mg / (ng - mg - 1.0) * (1.0 - z[(i, g)]))
            })
            .sum()
    });
    let a = &p - &m_wz * DMatrix::from_diagonal(&d) * &m_wz;
    Ok(DenseDesign { w, z, p, m_w, m_wz, d, a })
}

fn vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// `T'KY / T'KT` by dense products.
pub fn oracle_estimate(kind: EstimatorKind, dense: &DenseDesign, outcome: &[f64], treatment: &[f64]) -> Result<f64> {
    let k = dense.operator(kind)?;
    let (y, t) = (vec(outcome), vec(treatment));
    Ok((t.transpose() * &k * &y)[0] / (t.transpose() * &k * &t)[0])
}

/// Hartley estimators with a dense solve of `(M_WZ o M_WZ)` restricted to
/// the observations in cells of size three or more, and four times the
/// Hadamard product in cells of size two.
pub fn oracle_sigma(dense: &DenseDesign, treatment: &[f64], residual: &[f64]) -> Result<SigmaEstimates> {
    let n = dense.n();
    let mt = &dense.m_wz * vec(treatment);
    let mr = &dense.m_wz * vec(residual);
    let uu = mt.component_mul(&mt);
    let vv = mr.component_mul(&mr);
    let uv = mr.component_mul(&mt);
    let sizes = dense.cell_sizes();
    if let Some(i) = sizes.iter().position(|&s| s < 2) {
        return Err(Error::Validation(format!("observation {i} is alone in its cell")));
    }
    let big: Vec<usize> = (0..n).filter(|&i| sizes[i] >= 3).collect();
    let hadamard = dense.m_wz.component_mul(&dense.m_wz);
    let sub = DMatrix::from_fn(big.len(), big.len(), |r, c| hadamard[(big[r], big[c])]);
    let lu = sub.lu();
    let solve = |rhs: &DVector<f64>| -> Result<DVector<f64>> {
        let b = DVector::from_fn(big.len(), |r, _| rhs[big[r]]);
        lu.solve(&b)
            .ok_or_else(|| Error::Numerical("singular Hadamard system".into()))
    };
    let (su, sv, suv) = (solve(&uu)?, solve(&vv)?, solve(&uv)?);
    let mut out = SigmaEstimates {
        sigma_u2: (0..n).map(|i| 4.0 * uu[i]).collect(),
        sigma_v2: (0..n).map(|i| 4.0 * vv[i]).collect(),
        sigma_uv: (0..n).map(|i| 4.0 * uv[i]).collect(),
        used_fallback: sizes.iter().map(|&s| s == 2).collect(),
    };
    for (r, &i) in big.iter().enumerate() {
        out.sigma_u2[i] = su[r];
        out.sigma_v2[i] = sv[r];
        out.sigma_uv[i] = suv[r];
    }
    Ok(out)
}

/// Variance numerator `r'A S_u A r + T'A S_v A T + 2 r'A S_uv A T` with
/// explicit diagonal matrices, and `T'AT`.
pub fn oracle_variance_parts(dense: &DenseDesign, outcome: &[f64], treatment: &[f64], beta: f64) -> Result<(f64, f64)> {
    let (y, t) = (vec(outcome), vec(treatment));
    let r = &y - &t * beta;
    let sigma = oracle_sigma(dense, treatment, r.as_slice())?;
    let du = DMatrix::from_diagonal(&vec(&sigma.sigma_u2));
    let dv = DMatrix::from_diagonal(&vec(&sigma.sigma_v2));
    let duv = DMatrix::from_diagonal(&vec(&sigma.sigma_uv));
    let a = &dense.a;
    let num = (r.transpose() * a * du * a * &r)[0]
        + (t.transpose() * a * dv * a * &t)[0]
        + 2.0 * (r.transpose() * a * duv * a * &t)[0];
    let tat = (t.transpose() * a * &t)[0];
    Ok((num, tat))
}

pub fn oracle_variance(dense: &DenseDesign, outcome: &[f64], treatment: &[f64], beta: f64) -> Result<f64> {
    let (num, tat) = oracle_variance_parts(dense, outcome, treatment, beta)?;
    Ok(num / (tat * tat))
}

/// Comparison variance with `J = (M_W o M_W)^{-1}` inverted densely and
/// `A o A` formed explicitly.
pub fn oracle_chao_variance(dense: &DenseDesign, outcome: &[f64], treatment: &[f64], beta: f64) -> Result<f64> {
    let (y, t) = (vec(outcome), vec(treatment));
    let eps = &dense.m_wz * (&y - &t * beta);
    let u = &dense.m_wz * &t;
    let j = dense
        .m_w
        .component_mul(&dense.m_w)
        .try_inverse()
        .ok_or_else(|| Error::Numerical("M_W o M_W is singular".into()))?;
    let d1 = DMatrix::from_diagonal(&(&j * eps.component_mul(&eps)));
    let aa = dense.a.component_mul(&dense.a);
    let x = &j * eps.component_mul(&u);
    let a = &dense.a;
    let tat = (t.transpose() * a * &t)[0];
    let num = (t.transpose() * a * d1 * a * &t)[0] + (x.transpose() * aa * &x)[0];
    Ok(num / (tat * tat))
}

/// Score `T'A(Y - T beta0)` by dense products.
pub fn oracle_score(dense: &DenseDesign, outcome: &[f64], treatment: &[f64], beta0: f64) -> f64 {
    let (y, t) = (vec(outcome), vec(treatment));
    (t.transpose() * &dense.a * (y - &t * beta0))[0]
}

/// Largest absolute deviation of `[P - M_WZ D M_WZ]_ii` from zero.
pub fn diagonal_identity_error(dense: &DenseDesign) -> f64 {
    let m = &dense.m_wz * DMatrix::from_diagonal(&dense.d) * &dense.m_wz;
    (0..dense.n())
        .map(|i| (dense.p[(i, i)] - m[(i, i)]).abs())
        .fold(0.0, f64::max)
}
