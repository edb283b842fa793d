//! Split-R̂ and effective sample size.
//!
//! Both statistics work on split chains: each of the `m` chains is cut into
//! a first and second half of `n` draws (the middle draw of an odd-length
//! chain is dropped), giving `M = 2m` sequences.
//!
//! With sequence means `x̄_j`, grand mean `x̄`, and sequence variances `s_j²`
//! (denominator `n − 1`):
//!
//! ```text
//! W     = mean_j s_j²
//! B     = n/(M − 1) · Σ_j (x̄_j − x̄)²
//! var⁺  = (n − 1)/n · W + B/n
//! R̂     = sqrt(var⁺ / W)
//! ```
//!
//! For the effective sample size, `γ_j(t)` is the lag-`t` autocovariance of
//! sequence `j` (denominator `n`) and
//!
//! ```text
//! ρ(t)  = 1 − (W − mean_j γ_j(t)) / var⁺,   ρ(0) = 1
//! P(k)  = ρ(2k) + ρ(2k + 1)
//! τ     = −1 + 2 · Σ_{k < K} P(k)    (K: first k with P(k) ≤ 0)
//! n_eff = min(M·n / τ, M·n)
//! ```
//!
//! A parameter whose draws have zero within-sequence variance reports
//! `R̂ = 1`, `n_eff = M·n` and sets the zero-variance flag.

use crate::error::{Error, Result};
use crate::linalg::median;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub n_eff: f64,
    pub zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub n_chains: usize,
    pub draws_per_chain: usize,
}

impl DiagnosticsReport {
    fn varying(&self) -> impl Iterator<Item = &ParamDiagnostics> {
        self.params.iter().filter(|p| !p.zero_variance)
    }

    pub fn max_rhat(&self) -> f64 {
        self.varying().map(|p| p.rhat).fold(1.0, f64::max)
    }

    /// (median, min, max) of n_eff over parameters that vary.
    pub fn n_eff_summary(&self) -> (f64, f64, f64) {
        let v: Vec<f64> = self.varying().map(|p| p.n_eff).collect();
        if v.is_empty() {
            return (f64::NAN, f64::NAN, f64::NAN);
        }
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (median(&v), min, max)
    }

    pub fn converged(&self, rhat_threshold: f64) -> bool {
        self.varying().all(|p| p.rhat <= rhat_threshold)
    }

    /// Names of parameters whose R̂ exceeds the threshold.
    pub fn flagged(&self, rhat_threshold: f64) -> Vec<&str> {
        self.varying().filter(|p| !(p.rhat <= rhat_threshold)).map(|p| p.name.as_str()).collect()
    }
}

struct SplitStats {
    seqs: Vec<Vec<f64>>,
    n: usize,
    means: Vec<f64>,
    w: f64,
    var_plus: f64,
}

fn split_stats(chains: &[Vec<f64>]) -> Result<SplitStats> {
    if chains.len() < 2 {
        return Err(Error::InsufficientDraws(format!("need at least 2 chains, got {}", chains.len())));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::InsufficientDraws("chains have unequal lengths".into()));
    }
    if len < 4 {
        return Err(Error::InsufficientDraws(format!("need at least 4 draws per chain, got {len}")));
    }
    let n = len / 2;
    let seqs: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| [c[..n].to_vec(), c[len - n..].to_vec()])
        .collect();
    let m = seqs.len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m;
    let b = n as f64 / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Ok(SplitStats { seqs, n, means, w, var_plus })
}

/// Split-R̂ and the zero-variance flag.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<(f64, bool)> {
    let st = split_stats(chains)?;
    if st.w == 0.0 {
        return Ok(if st.var_plus == 0.0 { (1.0, true) } else { (f64::INFINITY, false) });
    }
    Ok(((st.var_plus / st.w).sqrt(), false))
}

pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    let st = split_stats(chains)?;
    let total = (st.seqs.len() * st.n) as f64;
    if st.w == 0.0 {
        return Ok(total);
    }
    let n = st.n;
    let acov = |t: usize| -> f64 {
        st.seqs
            .iter()
            .zip(&st.means)
            .map(|(s, mu)| (0..n - t).map(|i| (s[i] - mu) * (s[i + t] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / st.seqs.len() as f64
    };
    let rho = |t: usize| 1.0 - (st.w - acov(t)) / st.var_plus;

    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = if k == 0 { 1.0 + rho(1) } else { rho(2 * k) + rho(2 * k + 1) };
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum).max(f64::MIN_POSITIVE);
    Ok((total / tau).min(total))
}

/// Diagnostics for named parameter columns grouped by chain:
/// `columns[p][c]` is the trace of parameter `p` in chain `c`.
pub fn diagnose_columns(names: &[String], columns: &[Vec<Vec<f64>>]) -> Result<DiagnosticsReport> {
    let mut params = Vec::with_capacity(names.len());
    let (mut n_chains, mut per_chain) = (0, 0);
    for (name, chains) in names.iter().zip(columns) {
        let (rhat, zero_variance) = split_rhat(chains)?;
        let n_eff = effective_sample_size(chains)?;
        n_chains = chains.len();
        per_chain = chains[0].len();
        params.push(ParamDiagnostics { name: name.clone(), rhat, n_eff, zero_variance });
    }
    Ok(DiagnosticsReport { params, n_chains, draws_per_chain: per_chain })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_chains_are_flagged() {
        let chains = vec![vec![2.0; 10], vec![2.0; 10]];
        assert_eq!(split_rhat(&chains).unwrap(), (1.0, true));
        assert_eq!(effective_sample_size(&chains).unwrap(), 20.0);
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let mut rng = stream(5, &[]);
        let chains: Vec<Vec<f64>> = (0..2)
            .map(|c| (0..200).map(|_| c as f64 * 5.0 + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        assert!(split_rhat(&chains).unwrap().0 > 2.0);
    }

    #[test]
    fn trend_within_chain_is_detected_by_splitting() {
        let chains: Vec<Vec<f64>> = (0..2).map(|_| (0..400).map(|i| i as f64 / 100.0).collect()).collect();
        assert!(split_rhat(&chains).unwrap().0 > 1.5);
    }

    #[test]
    fn insufficient_draws() {
        assert!(matches!(split_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]), Err(Error::InsufficientDraws(_))));
        assert!(matches!(split_rhat(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]), Err(Error::InsufficientDraws(_))));
        assert!(matches!(split_rhat(&[vec![1.0; 5], vec![1.0; 6]]), Err(Error::InsufficientDraws(_))));
    }
}
