//! Precision and covariance assembly for one country block.
//!
//! A country block stacks the three population series (MSM, FSW, PWID) of
//! `n_years` cells each. Its precision is a 3×3 grid of `n_years`-square
//! blocks: tridiagonal temporal blocks on the grid diagonal and scaled
//! identities coupling same-year cells across populations. The covariance is
//! the inverse precision plus one constant `tau_k` block per population for the
//! country random effect. Every country shares the same block, so the global
//! covariance is never formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelData, PopulationCode, RegionCode, N_POPULATIONS, N_REGIONS};

pub const N_PARAMS: usize = 33;
pub const N_MEANS: usize = N_REGIONS * N_POPULATIONS;
pub const TAU_OFFSET: usize = N_MEANS;
pub const S_OFFSET: usize = TAU_OFFSET + 3;
pub const GAMMA_OFFSET: usize = S_OFFSET + 3;
pub const RHO_OFFSET: usize = GAMMA_OFFSET + 3;

/// Population pairs for the cross-population couplings, in storage order.
pub const POPULATION_PAIRS: [(PopulationCode, PopulationCode); 3] = [
    (PopulationCode::Msm, PopulationCode::Fsw),
    (PopulationCode::Msm, PopulationCode::Pwid),
    (PopulationCode::Fsw, PopulationCode::Pwid),
];

/// The 33 structural parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    /// Regional mean log prevalence, indexed `[region][population]`.
    pub mu: [[f64; N_POPULATIONS]; N_REGIONS],
    /// Random-effect variance per population.
    pub tau: [f64; 3],
    /// Temporal precision diagonal per population.
    pub s: [f64; 3],
    /// Temporal precision off-diagonal per population.
    pub gamma: [f64; 3],
    /// Cross-population precision, ordered as [`POPULATION_PAIRS`].
    pub rho: [f64; 3],
}

impl Default for StructuralParams {
    /// Independent unit-precision series with unit random-effect variance.
    fn default() -> Self {
        StructuralParams {
            mu: [[0.0; 3]; N_REGIONS],
            tau: [1.0; 3],
            s: [1.0; 3],
            gamma: [0.0; 3],
            rho: [0.0; 3],
        }
    }
}

pub fn mean_index(region: RegionCode, population: PopulationCode) -> usize {
    region.index() * N_POPULATIONS + population.index()
}

pub fn pair_index(a: PopulationCode, b: PopulationCode) -> Option<usize> {
    POPULATION_PAIRS.iter().position(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b))
}

impl StructuralParams {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(N_PARAMS);
        for row in &self.mu {
            v.extend_from_slice(row);
        }
        v.extend_from_slice(&self.tau);
        v.extend_from_slice(&self.s);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.rho);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != N_PARAMS {
            return Err(Error::InvalidConfig(format!(
                "expected {N_PARAMS} parameters, got {}",
                v.len()
            )));
        }
        let mut mu = [[0.0; 3]; N_REGIONS];
        for (r, row) in mu.iter_mut().enumerate() {
            row.copy_from_slice(&v[r * 3..r * 3 + 3]);
        }
        let take = |o: usize| [v[o], v[o + 1], v[o + 2]];
        Ok(StructuralParams {
            mu,
            tau: take(TAU_OFFSET),
            s: take(S_OFFSET),
            gamma: take(GAMMA_OFFSET),
            rho: take(RHO_OFFSET),
        })
    }

    pub fn mean(&self, region: RegionCode, population: PopulationCode) -> f64 {
        self.mu[region.index()][population.index()]
    }

    /// Multiplies every precision entry (`s`, `gamma`, `rho`) by `c`.
    pub fn scale_precision(&self, c: f64) -> Self {
        let mut out = self.clone();
        for k in 0..3 {
            out.s[k] *= c;
            out.gamma[k] *= c;
            out.rho[k] *= c;
        }
        out
    }
}

/// Column names for the parameter vector, in storage order.
pub fn param_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_PARAMS);
    for r in RegionCode::ALL {
        for k in PopulationCode::ALL {
            names.push(format!("mu_{}_{}", r.code(), k.code()));
        }
    }
    for prefix in ["tau", "s", "gamma"] {
        for k in PopulationCode::ALL {
            names.push(format!("{prefix}_{}", k.code()));
        }
    }
    for (a, b) in POPULATION_PAIRS {
        names.push(format!("rho_{}_{}", a.code(), b.code()));
    }
    names
}

/// Tridiagonal temporal precision with `s` on the diagonal and `gamma` beside it.
pub fn build_temporal_block(s: f64, gamma: f64, n_years: usize) -> Result<DMatrix<f64>> {
    if !(s > 0.0) {
        return Err(Error::NonPositiveDiagonal(s));
    }
    if n_years == 0 {
        return Err(Error::InvalidConfig("n_years must be at least 1".into()));
    }
    let mut m = DMatrix::zeros(n_years, n_years);
    for t in 0..n_years {
        m[(t, t)] = s;
        if t + 1 < n_years {
            m[(t, t + 1)] = gamma;
            m[(t + 1, t)] = gamma;
        }
    }
    Ok(m)
}

/// Same-year coupling block `rho * I`.
pub fn build_cross_block(rho: f64, n_years: usize) -> DMatrix<f64> {
    DMatrix::identity(n_years, n_years) * rho
}

fn assemble_precision(params: &StructuralParams, n_years: usize) -> Result<DMatrix<f64>> {
    let dim = N_POPULATIONS * n_years;
    let mut q = DMatrix::zeros(dim, dim);
    for k in PopulationCode::ALL {
        let block = build_temporal_block(params.s[k.index()], params.gamma[k.index()], n_years)?;
        let o = k.index() * n_years;
        q.view_mut((o, o), (n_years, n_years)).copy_from(&block);
    }
    for (p, (a, b)) in POPULATION_PAIRS.iter().enumerate() {
        let block = build_cross_block(params.rho[p], n_years);
        let (oa, ob) = (a.index() * n_years, b.index() * n_years);
        q.view_mut((oa, ob), (n_years, n_years)).copy_from(&block);
        q.view_mut((ob, oa), (n_years, n_years)).copy_from(&block);
    }
    Ok(q)
}

/// Assembles the country precision block and checks it is positive definite.
pub fn build_country_precision(params: &StructuralParams, n_years: usize) -> Result<DMatrix<f64>> {
    let q = assemble_precision(params, n_years)?;
    if q.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(q)
}

/// Covariance of one country block, `inverse(Q) + Omega`, with its Cholesky factor.
///
/// The same block applies to every country.
#[derive(Debug, Clone)]
pub struct CountryCovariance {
    pub n_years: usize,
    pub precision: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Lower-triangular factor of `sigma`.
    pub chol: DMatrix<f64>,
}

impl CountryCovariance {
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

pub fn build_country_covariance(params: &StructuralParams, n_years: usize) -> Result<CountryCovariance> {
    for &t in &params.tau {
        if !(t >= 0.0) {
            return Err(Error::NegativeVariance(t));
        }
    }
    let precision = assemble_precision(params, n_years)?;
    let q_chol = precision.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let mut sigma = symmetrize(&q_chol.inverse());
    for k in PopulationCode::ALL {
        let tau = params.tau[k.index()];
        let o = k.index() * n_years;
        for i in o..o + n_years {
            for j in o..o + n_years {
                sigma[(i, j)] += tau;
            }
        }
    }
    let chol = sigma.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.unpack();
    Ok(CountryCovariance { n_years, precision, sigma, chol })
}

/// Mean of one country block: the regional mean repeated across years.
pub fn country_mean(params: &StructuralParams, region: RegionCode, n_years: usize) -> DVector<f64> {
    DVector::from_fn(N_POPULATIONS * n_years, |l, _| {
        let k = PopulationCode::from_index(l / n_years).expect("population index");
        params.mean(region, k)
    })
}

/// Full mean vector in flat layout order.
pub fn build_mean(params: &StructuralParams, panel: &PanelData) -> Vec<f64> {
    let ny = panel.n_years();
    let mut out = Vec::with_capacity(panel.len());
    for c in 0..panel.n_countries() {
        out.extend(country_mean(params, panel.region_of(c), ny).iter());
    }
    out
}

/// Implied correlations under the country covariance.
///
/// `matrix[k][k]` is the lag-1 autocorrelation of population `k` between the
/// mid-series year and the next; `matrix[a][b]` is the same-year correlation
/// of populations `a` and `b` at the mid-series year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationSummary {
    pub matrix: [[f64; 3]; 3],
}

impl CorrelationSummary {
    pub fn temporal(&self, k: PopulationCode) -> f64 {
        self.matrix[k.index()][k.index()]
    }

    pub fn cross(&self, a: PopulationCode, b: PopulationCode) -> f64 {
        self.matrix[a.index()][b.index()]
    }
}

/// Zero-based year index used for correlation summaries.
pub fn mid_year_index(n_years: usize) -> usize {
    (n_years - 1) / 2
}

pub fn correlations_from_covariance(cov: &CountryCovariance) -> CorrelationSummary {
    let n = cov.n_years;
    let t = mid_year_index(n);
    let s = &cov.sigma;
    let corr = |i: usize, j: usize| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt();
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        let i = a * n + t;
        m[a][a] = if t + 1 < n { corr(i, i + 1) } else { f64::NAN };
        for b in (a + 1)..3 {
            let c = corr(i, b * n + t);
            m[a][b] = c;
            m[b][a] = c;
        }
    }
    CorrelationSummary { matrix: m }
}

pub fn implied_correlations(params: &StructuralParams, n_years: usize) -> Result<CorrelationSummary> {
    Ok(correlations_from_covariance(&build_country_covariance(params, n_years)?))
}
