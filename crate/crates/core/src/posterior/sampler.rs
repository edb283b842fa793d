//! Adaptive random-walk Metropolis over a fixed-dimension target.
//!
//! Each iteration runs a systematic scan of one-dimensional Gaussian
//! random-walk updates, one per free coordinate, followed by
//! `joint_steps` Gaussian proposals for each joint block (by default a
//! single block holding every free coordinate). During warmup the
//! per-coordinate scales follow a Robbins–Monro recursion toward
//! [`COMPONENT_TARGET_ACCEPT`], each block's proposal covariance tracks the
//! empirical covariance of the warmup draws and its global scale is adapted
//! toward [`JOINT_TARGET_ACCEPT`]. All adaptation stops at the end of warmup,
//! so the retained draws come from a fixed Markov kernel.
//!
//! Coordinates flagged positive are reflected at zero in the one-dimensional
//! updates (a symmetric proposal); the joint update simply rejects proposals
//! that leave the support.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;
use crate::rng::{stream, StreamRng};

pub const COMPONENT_TARGET_ACCEPT: f64 = 0.44;
pub const JOINT_TARGET_ACCEPT: f64 = 0.234;
const ADAPT_EXPONENT: f64 = 0.6;
const INITIAL_SCALE: f64 = 0.1;
const COVARIANCE_REFRESH: usize = 50;

pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Unnormalised log density; `-inf` outside the support.
    fn log_density(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Retained draws per chain.
    pub draws: usize,
    /// Iterations per retained draw.
    pub thin: usize,
    pub seed: u64,
    /// Enables the joint adaptive-covariance updates.
    pub joint: bool,
    /// Joint proposals per block per iteration.
    pub joint_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { chains: 12, warmup: 1000, draws: 1000, thin: 1, seed: 1, joint: true, joint_steps: 5 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 || self.thin == 0 {
            return Err(Error::InvalidConfig(
                "chains, draws and thin must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which coordinates move and which are constrained positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub free: Vec<bool>,
    pub positive: Vec<bool>,
    /// Coordinate groups updated jointly; empty means one group of all free coordinates.
    /// Fixed coordinates listed here are ignored.
    pub blocks: Vec<Vec<usize>>,
}

impl Support {
    pub fn unconstrained(dim: usize) -> Self {
        Support { free: vec![true; dim], positive: vec![false; dim], blocks: Vec::new() }
    }

    fn free_indices(&self) -> Vec<usize> {
        (0..self.free.len()).filter(|&j| self.free[j]).collect()
    }

    fn joint_blocks(&self) -> Vec<Vec<usize>> {
        if self.blocks.is_empty() {
            return vec![self.free_indices()];
        }
        self.blocks
            .iter()
            .map(|b| b.iter().copied().filter(|&j| self.free[j]).collect::<Vec<_>>())
            .filter(|b| !b.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    /// Post-warmup acceptance rate of the one-dimensional updates, per free coordinate.
    pub component_accept: Vec<f64>,
    /// Post-warmup acceptance rate of the joint updates, per block (NaN when disabled).
    pub joint_accept: Vec<f64>,
}

struct JointBlock {
    coords: Vec<usize>,
    log_scale: f64,
    base: f64,
    factor: Option<DMatrix<f64>>,
    moments: RunningMoments,
    accepts: usize,
}

impl JointBlock {
    fn new(coords: Vec<usize>) -> Self {
        let d = coords.len();
        JointBlock {
            base: 2.38 / (d as f64).sqrt(),
            moments: RunningMoments::new(d),
            coords,
            log_scale: 0.0,
            factor: None,
            accepts: 0,
        }
    }
}

struct RunningMoments {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl RunningMoments {
    fn new(d: usize) -> Self {
        RunningMoments { n: 0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> DMatrix<f64> {
        &self.m2 / (self.n.max(2) - 1) as f64
    }
}

fn accept_prob(current: f64, proposed: f64) -> f64 {
    if proposed.is_nan() || proposed == f64::NEG_INFINITY {
        0.0
    } else {
        (proposed - current).exp().min(1.0)
    }
}

fn run_chain<T: LogDensity>(
    target: &T,
    support: &Support,
    init: &[f64],
    config: &SamplerConfig,
    rng: &mut StreamRng,
) -> Result<ChainOutput> {
    let free = support.free_indices();
    let d = free.len();
    let mut x = init.to_vec();
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::AllProposalsInvalid { attempts: 1 });
    }

    let mut log_scale = vec![INITIAL_SCALE.ln(); target.dim()];
    let mut blocks: Vec<JointBlock> = if config.joint {
        support.joint_blocks().into_iter().map(JointBlock::new).collect()
    } else {
        Vec::new()
    };
    // moments are collected over the second half of warmup only
    let collect_from = config.warmup / 2;

    let mut comp_accepts = vec![0usize; d];
    let total = config.warmup + config.draws * config.thin;
    let mut out = ChainOutput {
        draws: Vec::with_capacity(config.draws),
        log_density: Vec::with_capacity(config.draws),
        component_accept: vec![0.0; d],
        joint_accept: Vec::new(),
    };
    let mut proposal = x.clone();

    for iter in 0..total {
        let adapting = iter < config.warmup;
        let step = 1.0 / ((iter + 1) as f64).powf(ADAPT_EXPONENT);

        for (fi, &j) in free.iter().enumerate() {
            proposal.copy_from_slice(&x);
            let z: f64 = rng.sample(StandardNormal);
            let mut v = x[j] + log_scale[j].exp() * z;
            if support.positive[j] {
                v = v.abs();
            }
            proposal[j] = v;
            let lp_new = target.log_density(&proposal);
            let a = accept_prob(lp, lp_new);
            let u: f64 = rng.random();
            if u < a {
                x[j] = v;
                lp = lp_new;
                if !adapting {
                    comp_accepts[fi] += 1;
                }
            }
            if adapting {
                log_scale[j] += step * (a - COMPONENT_TARGET_ACCEPT);
            }
        }

        for block in blocks.iter_mut() {
            let Some(factor) = &block.factor else { continue };
            for _ in 0..config.joint_steps {
                let z = DVector::from_fn(block.coords.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                let delta = factor * z * (block.base * block.log_scale.exp());
                proposal.copy_from_slice(&x);
                let mut inside = true;
                for (bi, &j) in block.coords.iter().enumerate() {
                    proposal[j] += delta[bi];
                    if support.positive[j] && proposal[j] <= 0.0 {
                        inside = false;
                    }
                }
                let lp_new = if inside { target.log_density(&proposal) } else { f64::NEG_INFINITY };
                let a = accept_prob(lp, lp_new);
                let u: f64 = rng.random();
                if u < a {
                    x.copy_from_slice(&proposal);
                    lp = lp_new;
                    if !adapting {
                        block.accepts += 1;
                    }
                }
                if adapting {
                    block.log_scale += step * (a - JOINT_TARGET_ACCEPT);
                }
            }
        }

        if adapting && iter >= collect_from {
            for block in blocks.iter_mut() {
                let bd = block.coords.len();
                block.moments.push(&DVector::from_fn(bd, |bi, _| x[block.coords[bi]]));
                let n = block.moments.n;
                if n >= (2 * bd).max(COVARIANCE_REFRESH) && n % COVARIANCE_REFRESH == 0 {
                    let mut cov = block.moments.covariance();
                    for (bi, &j) in block.coords.iter().enumerate() {
                        cov[(bi, bi)] += (log_scale[j].exp().powi(2) * 1e-3).max(1e-12);
                    }
                    if let Some(l) = cholesky_jittered(&cov) {
                        block.factor = Some(l);
                    }
                }
            }
        }

        if !adapting && (iter - config.warmup + 1) % config.thin == 0 {
            out.draws.push(x.clone());
            out.log_density.push(lp);
        }
    }

    let kept_iters = (config.draws * config.thin) as f64;
    out.component_accept = comp_accepts.iter().map(|&a| a as f64 / kept_iters).collect();
    out.joint_accept = blocks
        .iter()
        .map(|b| {
            if b.factor.is_some() {
                b.accepts as f64 / (kept_iters * config.joint_steps.max(1) as f64)
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(out)
}

/// Runs `inits.len()` chains in parallel. Chain `c` draws from the RNG stream
/// `(seed, c)`, so output does not depend on scheduling.
pub fn run_chains<T: LogDensity>(
    target: &T,
    support: &Support,
    inits: &[Vec<f64>],
    config: &SamplerConfig,
) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    if support.free.len() != target.dim() || inits.iter().any(|x| x.len() != target.dim()) {
        return Err(Error::InvalidConfig("dimension mismatch between target and inits".into()));
    }
    inits
        .par_iter()
        .enumerate()
        .map(|(c, init)| {
            let mut rng = stream(config.seed, &[0x5A3D_1E, c as u64]);
            run_chain(target, support, init, config, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(&self.mean)
                .zip(&self.sd)
                .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2))
                .sum()
        }
    }

    struct HalfNormal;

    impl LogDensity for HalfNormal {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, x: &[f64]) -> f64 {
            if x[0] <= 0.0 {
                f64::NEG_INFINITY
            } else {
                -0.5 * x[0] * x[0]
            }
        }
    }

    fn mean(v: impl Iterator<Item = f64>) -> (f64, f64) {
        let v: Vec<f64> = v.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    }

    #[test]
    fn recovers_independent_gaussian_moments() {
        let target = Gaussian { mean: vec![1.0, -3.0, 0.0], sd: vec![0.5, 2.0, 0.01] };
        let config = SamplerConfig { chains: 4, warmup: 1000, draws: 2000, thin: 1, seed: 3, joint: true, joint_steps: 1 };
        let inits = vec![vec![0.0; 3]; 4];
        let out = run_chains(&target, &Support::unconstrained(3), &inits, &config).unwrap();
        for j in 0..3 {
            let (m, v) = mean(out.iter().flat_map(|c| c.draws.iter().map(move |x| x[j])));
            let sd = target.sd[j];
            assert!((m - target.mean[j]).abs() < 0.1 * sd, "coord {j}: mean {m}");
            assert!((v.sqrt() / sd - 1.0).abs() < 0.1, "coord {j}: sd {}", v.sqrt());
        }
        for c in &out {
            for &a in &c.component_accept {
                assert!((0.3..0.6).contains(&a), "acceptance {a}");
            }
        }
    }

    #[test]
    fn reflection_keeps_positive_and_matches_half_normal() {
        let support = Support { free: vec![true], positive: vec![true], blocks: Vec::new() };
        let config = SamplerConfig { chains: 2, warmup: 1000, draws: 20000, thin: 1, seed: 11, joint: true, joint_steps: 1 };
        let out = run_chains(&HalfNormal, &support, &[vec![1.0], vec![2.0]], &config).unwrap();
        let draws: Vec<f64> = out.iter().flat_map(|c| c.draws.iter().map(|x| x[0])).collect();
        assert!(draws.iter().all(|&x| x > 0.0));
        let (m, _) = mean(draws.into_iter());
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((m - expected).abs() < 0.03, "mean {m} vs {expected}");
    }

    #[test]
    fn fixed_coordinates_do_not_move() {
        let target = Gaussian { mean: vec![0.0, 0.0], sd: vec![1.0, 1.0] };
        let support = Support { free: vec![true, false], positive: vec![false, false], blocks: Vec::new() };
        let config = SamplerConfig { chains: 1, warmup: 50, draws: 100, thin: 2, seed: 1, joint: true, joint_steps: 1 };
        let out = run_chains(&target, &support, &[vec![0.0, 5.0]], &config).unwrap();
        assert_eq!(out[0].draws.len(), 100);
        assert!(out[0].draws.iter().all(|x| x[1] == 5.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let target = Gaussian { mean: vec![0.0, 1.0], sd: vec![1.0, 2.0] };
        let config = SamplerConfig { chains: 3, warmup: 100, draws: 50, thin: 1, seed: 99, joint: true, joint_steps: 1 };
        let inits = vec![vec![0.0, 0.0]; 3];
        let a = run_chains(&target, &Support::unconstrained(2), &inits, &config).unwrap();
        let b = run_chains(&target, &Support::unconstrained(2), &inits, &config).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.draws, y.draws);
        }
    }

    #[test]
    fn invalid_start_is_reported() {
        let err = run_chains(&HalfNormal, &Support::unconstrained(1), &[vec![-1.0]], &SamplerConfig::default());
        assert!(matches!(err, Err(Error::AllProposalsInvalid { .. })));
    }
}
