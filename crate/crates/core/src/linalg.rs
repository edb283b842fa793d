//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Cholesky factor, retrying with a small diagonal jitter when the matrix is
/// positive semidefinite up to rounding.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c.unpack());
    }
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut eps = scale * 1e-12;
    for _ in 0..6 {
        let mut j = m.clone();
        for i in 0..n {
            j[(i, i)] += eps;
        }
        if let Some(c) = j.cholesky() {
            return Some(c.unpack());
        }
        eps *= 100.0;
    }
    None
}

/// `log|A|` from the lower Cholesky factor of `A`.
pub fn chol_log_det(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Multivariate normal log density of `residual` with covariance `L Lᵀ`.
pub fn mvn_log_density_chol(l: &DMatrix<f64>, residual: &DVector<f64>) -> f64 {
    let n = residual.len() as f64;
    let z = l.solve_lower_triangular(residual).expect("non-singular factor");
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol_log_det(l) + z.norm_squared())
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}
