//! Posterior of the structural parameters given an observed panel.

pub mod diagnostics;
pub mod sampler;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::rc::Rc;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{
    build_country_covariance, implied_correlations, mean_index, param_names, StructuralParams,
    GAMMA_OFFSET, N_PARAMS, POPULATION_PAIRS, RHO_OFFSET, S_OFFSET, TAU_OFFSET,
};
use crate::linalg::{chol_log_det, median, quantile_sorted, submatrix};
use crate::panel::{PanelData, PopulationCode, RegionCode};
use crate::rng::stream;

pub use diagnostics::{DiagnosticsReport, ParamDiagnostics};
pub use sampler::{LogDensity, SamplerConfig, Support};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorFamily {
    Laplace,
    Normal,
}

/// Zero-location prior applied independently to every parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub family: PriorFamily,
    /// Laplace scale `b`, or Normal standard deviation.
    pub scale: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { family: PriorFamily::Laplace, scale: 0.1 }
    }
}

impl PriorSpec {
    pub fn laplace(scale: f64) -> Self {
        PriorSpec { family: PriorFamily::Laplace, scale }
    }

    pub fn normal(scale: f64) -> Self {
        PriorSpec { family: PriorFamily::Normal, scale }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let b = self.scale;
        match self.family {
            PriorFamily::Laplace => -(2.0 * b).ln() - x.abs() / b,
            PriorFamily::Normal => {
                -0.5 * (2.0 * std::f64::consts::PI * b * b).ln() - 0.5 * (x / b).powi(2)
            }
        }
    }
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            PriorFamily::Laplace => "laplace",
            PriorFamily::Normal => "normal",
        };
        write!(f, "{family}:{}", self.scale)
    }
}

impl FromStr for PriorSpec {
    type Err = Error;

    /// Parses `laplace:<scale>` or `normal:<scale>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("invalid prior `{s}`, expected family:scale"));
        let (family, scale) = s.split_once(':').ok_or_else(bad)?;
        let scale: f64 = scale.trim().parse().map_err(|_| bad())?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(bad());
        }
        match family.trim().to_ascii_lowercase().as_str() {
            "laplace" => Ok(PriorSpec::laplace(scale)),
            "normal" => Ok(PriorSpec::normal(scale)),
            _ => Err(bad()),
        }
    }
}

/// Sum of independent prior log densities over all 33 parameters.
pub fn log_prior(params: &StructuralParams, prior: &PriorSpec) -> f64 {
    params.to_vec().into_iter().map(|x| prior.log_density(x)).sum()
}

/// Model variants used for component-exclusion analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Full,
    /// All cross-population couplings fixed at zero.
    NoCrossPop,
    /// All random-effect variances fixed at zero.
    NoCountry,
    /// All temporal off-diagonals fixed at zero.
    NoTime,
}

impl ModelVariant {
    pub const ABLATIONS: [ModelVariant; 3] =
        [ModelVariant::NoCrossPop, ModelVariant::NoCountry, ModelVariant::NoTime];

    /// Parameter indices pinned to zero by this variant.
    pub fn zeroed(self) -> std::ops::Range<usize> {
        match self {
            ModelVariant::Full => 0..0,
            ModelVariant::NoCrossPop => RHO_OFFSET..RHO_OFFSET + 3,
            ModelVariant::NoCountry => TAU_OFFSET..TAU_OFFSET + 3,
            ModelVariant::NoTime => GAMMA_OFFSET..GAMMA_OFFSET + 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoCrossPop => "no_cross_pop",
            ModelVariant::NoCountry => "no_country",
            ModelVariant::NoTime => "no_time",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(ModelVariant::Full),
            "no_cross_pop" => Ok(ModelVariant::NoCrossPop),
            "no_country" => Ok(ModelVariant::NoCountry),
            "no_time" => Ok(ModelVariant::NoTime),
            other => Err(Error::InvalidConfig(format!("unknown model variant `{other}`"))),
        }
    }
}

struct ObservedPattern {
    local: Vec<usize>,
    members: Vec<(RegionCode, DVector<f64>)>,
}

/// Likelihood of the observed cells with countries grouped by observation
/// pattern, so each distinct pattern is factorised once per evaluation.
///
/// The factors depend only on `tau`, `s`, `gamma` and `rho`; the most recent
/// set is cached per thread, which makes mean-only updates cheap.
pub struct LikelihoodEvaluator {
    id: u64,
    n_years: usize,
    patterns: Vec<ObservedPattern>,
    n_observed: usize,
}

struct FactorCache {
    evaluator: u64,
    key: [f64; N_DISPERSION],
    factors: Option<Rc<Vec<(DMatrix<f64>, f64)>>>,
}

const N_DISPERSION: usize = N_PARAMS - TAU_OFFSET;

static NEXT_EVALUATOR: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static FACTORS: RefCell<Option<FactorCache>> = const { RefCell::new(None) };
}

impl LikelihoodEvaluator {
    pub fn new(panel: &PanelData) -> Self {
        let mut index: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut patterns: Vec<ObservedPattern> = Vec::new();
        let block = panel.block_len();
        for c in 0..panel.n_countries() {
            let local = panel.country_observed_local(c);
            if local.is_empty() {
                continue;
            }
            let y = DVector::from_iterator(
                local.len(),
                local.iter().map(|&l| panel.values()[c * block + l]),
            );
            let slot = *index.entry(local.clone()).or_insert_with(|| {
                patterns.push(ObservedPattern { local, members: Vec::new() });
                patterns.len() - 1
            });
            patterns[slot].members.push((panel.region_of(c), y));
        }
        LikelihoodEvaluator {
            id: NEXT_EVALUATOR.fetch_add(1, Ordering::Relaxed),
            n_years: panel.n_years(),
            patterns,
            n_observed: panel.n_observed(),
        }
    }

    pub fn n_observed(&self) -> usize {
        self.n_observed
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    fn factorize(&self, params: &StructuralParams) -> Option<Vec<(DMatrix<f64>, f64)>> {
        let cov = build_country_covariance(params, self.n_years).ok()?;
        self.patterns
            .iter()
            .map(|pat| {
                let l = submatrix(&cov.sigma, &pat.local, &pat.local).cholesky()?.unpack();
                let log_det = chol_log_det(&l);
                Some((l, log_det))
            })
            .collect()
    }

    fn cached_factors(&self, params: &StructuralParams) -> Option<Rc<Vec<(DMatrix<f64>, f64)>>> {
        let v = params.to_vec();
        let mut key = [0.0; N_DISPERSION];
        key.copy_from_slice(&v[TAU_OFFSET..]);
        FACTORS.with(|cell| {
            let mut slot = cell.borrow_mut();
            if let Some(c) = slot.as_ref() {
                if c.evaluator == self.id && c.key.iter().zip(&key).all(|(a, b)| a.to_bits() == b.to_bits()) {
                    return c.factors.clone();
                }
            }
            let factors = self.factorize(params).map(Rc::new);
            *slot = Some(FactorCache { evaluator: self.id, key, factors: factors.clone() });
            factors
        })
    }

    /// Log likelihood; `-inf` when the parameters do not give a valid covariance.
    pub fn log_likelihood(&self, params: &StructuralParams) -> f64 {
        let Some(factors) = self.cached_factors(params) else {
            return f64::NEG_INFINITY;
        };
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let ny = self.n_years;
        let mut total = 0.0;
        for (pat, (l, log_det)) in self.patterns.iter().zip(factors.iter()) {
            let n = pat.local.len() as f64;
            for (region, y) in &pat.members {
                let r = DVector::from_fn(y.len(), |i, _| {
                    let k = PopulationCode::from_index(pat.local[i] / ny).expect("population");
                    y[i] - params.mean(*region, k)
                });
                let z = l.solve_lower_triangular(&r).expect("non-singular factor");
                total += -0.5 * (n * ln2pi + log_det + z.norm_squared());
            }
        }
        total
    }
}

pub fn log_likelihood(params: &StructuralParams, panel: &PanelData) -> f64 {
    LikelihoodEvaluator::new(panel).log_likelihood(params)
}

/// Coordinates the sampler moves in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The 33 parameters as they are; `tau` and `s` reflected at zero.
    Natural,
    /// Free `tau` and `s` on the log scale, `gamma_k / s_k`, and
    /// `rho_kl / sqrt(s_k s_l)`. Mean parameters are unchanged. The log
    /// Jacobian is added to the target, so the posterior on the natural
    /// scale is the same as under [`Parameterization::Natural`].
    #[default]
    Scaled,
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "natural" => Ok(Parameterization::Natural),
            "scaled" => Ok(Parameterization::Scaled),
            other => Err(Error::InvalidConfig(format!("unknown parameterization `{other}`"))),
        }
    }
}

/// Unnormalised log posterior in sampler coordinates.
pub struct ModelTarget {
    evaluator: LikelihoodEvaluator,
    prior: PriorSpec,
    free: Vec<bool>,
    parameterization: Parameterization,
}

impl ModelTarget {
    pub fn new(panel: &PanelData, prior: PriorSpec, free: Vec<bool>, parameterization: Parameterization) -> Self {
        ModelTarget { evaluator: LikelihoodEvaluator::new(panel), prior, free, parameterization }
    }

    pub fn support(&self) -> Support {
        let positive = match self.parameterization {
            Parameterization::Natural => positive_mask(),
            Parameterization::Scaled => vec![false; N_PARAMS],
        };
        Support {
            free: self.free.clone(),
            positive,
            blocks: vec![(0..N_PARAMS).collect(), (TAU_OFFSET..N_PARAMS).collect()],
        }
    }

    /// Maps natural parameters to sampler coordinates. Fixed coordinates keep
    /// their natural value.
    pub fn to_internal(&self, natural: &[f64]) -> Vec<f64> {
        let mut u = natural.to_vec();
        if self.parameterization == Parameterization::Natural {
            return u;
        }
        let s = &natural[S_OFFSET..S_OFFSET + 3];
        for k in 0..3 {
            if self.free[TAU_OFFSET + k] {
                u[TAU_OFFSET + k] = natural[TAU_OFFSET + k].ln();
            }
            if self.free[S_OFFSET + k] {
                u[S_OFFSET + k] = s[k].ln();
            }
            if self.free[GAMMA_OFFSET + k] {
                u[GAMMA_OFFSET + k] = natural[GAMMA_OFFSET + k] / s[k];
            }
        }
        for (p, (a, b)) in POPULATION_PAIRS.iter().enumerate() {
            if self.free[RHO_OFFSET + p] {
                u[RHO_OFFSET + p] = natural[RHO_OFFSET + p] / (s[a.index()] * s[b.index()]).sqrt();
            }
        }
        u
    }

    /// Maps sampler coordinates back to natural parameters, with the log
    /// Jacobian of that map.
    pub fn to_natural(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let mut x = u.to_vec();
        if self.parameterization == Parameterization::Natural {
            return (x, 0.0);
        }
        let mut log_jac = 0.0;
        for k in 0..3 {
            if self.free[TAU_OFFSET + k] {
                x[TAU_OFFSET + k] = u[TAU_OFFSET + k].exp();
                log_jac += u[TAU_OFFSET + k];
            }
            if self.free[S_OFFSET + k] {
                x[S_OFFSET + k] = u[S_OFFSET + k].exp();
                log_jac += u[S_OFFSET + k];
            }
        }
        let s = [x[S_OFFSET], x[S_OFFSET + 1], x[S_OFFSET + 2]];
        for k in 0..3 {
            if self.free[GAMMA_OFFSET + k] {
                x[GAMMA_OFFSET + k] = s[k] * u[GAMMA_OFFSET + k];
                log_jac += s[k].ln();
            }
        }
        for (p, (a, b)) in POPULATION_PAIRS.iter().enumerate() {
            if self.free[RHO_OFFSET + p] {
                let scale = (s[a.index()] * s[b.index()]).sqrt();
                x[RHO_OFFSET + p] = scale * u[RHO_OFFSET + p];
                log_jac += scale.ln();
            }
        }
        (x, log_jac)
    }

    /// Log posterior at natural parameters (no Jacobian).
    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        for j in 0..N_PARAMS {
            if self.free[j] && positive_mask()[j] && !(x[j] > 0.0) {
                return f64::NEG_INFINITY;
            }
        }
        let params = StructuralParams::from_slice(x).expect("33 parameters");
        let ll = self.evaluator.log_likelihood(&params);
        if ll == f64::NEG_INFINITY {
            return ll;
        }
        ll + log_prior(&params, &self.prior)
    }
}

impl LogDensity for ModelTarget {
    fn dim(&self) -> usize {
        N_PARAMS
    }

    fn log_density(&self, u: &[f64]) -> f64 {
        let (x, log_jac) = self.to_natural(u);
        let lp = self.log_posterior(&x);
        if lp.is_finite() {
            lp + log_jac
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// `tau` and `s` live on the positive half-line.
fn positive_mask() -> Vec<bool> {
    (0..N_PARAMS).map(|j| (TAU_OFFSET..S_OFFSET + 3).contains(&j)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub sampler: SamplerConfig,
    pub variant: ModelVariant,
    /// Extra parameters held at fixed values, by vector index.
    pub fixed: Vec<(usize, f64)>,
    /// Overrides the data-informed starting point.
    pub init: Option<StructuralParams>,
    /// Spread of the per-chain perturbation of the starting point.
    pub init_jitter: f64,
    pub parameterization: Parameterization,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            sampler: SamplerConfig::default(),
            variant: ModelVariant::Full,
            fixed: Vec::new(),
            init: None,
            init_jitter: 0.3,
            parameterization: Parameterization::default(),
        }
    }
}

impl FitConfig {
    pub fn free_mask(&self) -> Vec<bool> {
        let mut free = vec![true; N_PARAMS];
        for j in self.variant.zeroed() {
            free[j] = false;
        }
        for &(j, _) in &self.fixed {
            free[j] = false;
        }
        free
    }
}

/// Starting point: regional means at the observed median of their
/// region-population (falling back to the population median, then the
/// overall median), unit `tau` and `s`, zero couplings.
pub fn initial_params(panel: &PanelData) -> StructuralParams {
    let mut by_rk: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for j in panel.observed_offsets() {
        let (c, k, _) = panel.layout().decompose(j);
        let v = panel.values()[j];
        by_rk.entry((panel.region_of(c).index(), k.index())).or_default().push(v);
        by_k.entry(k.index()).or_default().push(v);
        all.push(v);
    }
    let overall = if all.is_empty() { 0.0 } else { median(&all) };
    let mut params = StructuralParams::default();
    for r in RegionCode::ALL {
        for k in PopulationCode::ALL {
            params.mu[r.index()][k.index()] = by_rk
                .get(&(r.index(), k.index()))
                .or_else(|| by_k.get(&k.index()))
                .map(|v| median(v))
                .unwrap_or(overall);
        }
    }
    params
}

const INIT_ATTEMPTS: usize = 200;

fn chain_inits(target: &ModelTarget, base: &[f64], config: &FitConfig) -> Result<Vec<Vec<f64>>> {
    let free = config.free_mask();
    let positive = positive_mask();
    let mut inits = Vec::with_capacity(config.sampler.chains);
    for c in 0..config.sampler.chains {
        let mut rng = stream(config.sampler.seed, &[0x1A17, c as u64]);
        let mut found = None;
        for attempt in 0..INIT_ATTEMPTS {
            let mut x = base.to_vec();
            if c > 0 || attempt > 0 {
                let spread = config.init_jitter / (1.0 + attempt as f64 / 20.0);
                for j in 0..N_PARAMS {
                    if !free[j] {
                        continue;
                    }
                    let z: f64 = rng.sample(StandardNormal);
                    if positive[j] {
                        x[j] *= (spread * z).exp();
                    } else if (GAMMA_OFFSET..RHO_OFFSET + 3).contains(&j) {
                        x[j] += 0.1 * spread * z;
                    } else {
                        x[j] += spread * z;
                    }
                }
            }
            if target.log_posterior(&x).is_finite() {
                found = Some(target.to_internal(&x));
                break;
            }
        }
        inits.push(found.ok_or(Error::AllProposalsInvalid { attempts: INIT_ATTEMPTS })?);
    }
    Ok(inits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SamplerMeta {
    pub seed: u64,
    pub chains: usize,
    pub warmup: usize,
    pub draws_per_chain: usize,
    pub thin: usize,
    pub variant: ModelVariant,
    pub prior: Option<PriorSpec>,
    pub parameterization: Parameterization,
    /// Mean post-warmup acceptance of the per-coordinate updates, per chain.
    pub component_accept: Vec<f64>,
    /// Mean post-warmup acceptance of each joint block, per chain.
    pub joint_accept: Vec<Vec<f64>>,
}

/// Post-warmup parameter draws, chain-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chain: Vec<usize>,
    pub iteration: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub meta: SamplerMeta,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn params(&self, d: usize) -> StructuralParams {
        StructuralParams::from_slice(&self.values[d]).expect("33 parameters")
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j]).collect()
    }

    pub fn n_chains(&self) -> usize {
        let mut ids: Vec<usize> = self.chain.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Traces of parameter `j`, one vector per chain in chain-id order.
    pub fn chains_of(&self, j: usize) -> Vec<Vec<f64>> {
        let mut by_chain: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (d, &c) in self.chain.iter().enumerate() {
            by_chain.entry(c).or_default().push(self.values[d][j]);
        }
        by_chain.into_values().collect()
    }

    pub fn posterior_mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.names.len()).map(|j| self.values.iter().map(|v| v[j]).sum::<f64>() / n).collect()
    }

    /// Indices of every `step`-th draw.
    pub fn thinned_indices(&self, step: usize) -> Vec<usize> {
        (0..self.len()).step_by(step.max(1)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("log_density".into());
        w.write_record(&header)?;
        for d in 0..self.len() {
            let mut row = vec![self.chain[d].to_string(), self.iteration[d].to_string()];
            row.extend(self.values[d].iter().map(|v| v.to_string()));
            row.push(self.log_density[d].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let expected_names = param_names();
        if header.len() != N_PARAMS + 3
            || header[0] != "chain"
            || header[1] != "iteration"
            || header[2..2 + N_PARAMS] != expected_names[..]
            || header[N_PARAMS + 2] != "log_density"
        {
            return Err(Error::MalformedRow { line: 1, message: "unexpected draws header".into() });
        }
        let mut out = PosteriorDraws {
            names: expected_names,
            chain: Vec::new(),
            iteration: Vec::new(),
            values: Vec::new(),
            log_density: Vec::new(),
            meta: SamplerMeta::default(),
        };
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |what: &str| Error::MalformedRow { line, message: format!("invalid {what}") };
            out.chain.push(rec[0].parse().map_err(|_| bad("chain"))?);
            out.iteration.push(rec[1].parse().map_err(|_| bad("iteration"))?);
            let mut v = Vec::with_capacity(N_PARAMS);
            for j in 0..N_PARAMS {
                v.push(rec[2 + j].parse::<f64>().map_err(|_| bad("parameter value"))?);
            }
            out.values.push(v);
            out.log_density.push(rec[N_PARAMS + 2].parse().map_err(|_| bad("log density"))?);
        }
        out.meta.chains = out.n_chains();
        if out.meta.chains > 0 {
            out.meta.draws_per_chain = out.len() / out.meta.chains;
        }
        Ok(out)
    }
}

/// Draws from the posterior of the structural parameters.
pub fn sample_posterior(panel: &PanelData, prior: &PriorSpec, config: &FitConfig) -> Result<PosteriorDraws> {
    config.sampler.validate()?;
    if panel.n_observed() == 0 {
        return Err(Error::TooFewObservations("panel has no observed cells".into()));
    }
    let free = config.free_mask();
    let target = ModelTarget::new(panel, *prior, free, config.parameterization);
    let mut base = config.init.clone().unwrap_or_else(|| initial_params(panel)).to_vec();
    for j in config.variant.zeroed() {
        base[j] = 0.0;
    }
    for &(j, v) in &config.fixed {
        if j >= N_PARAMS {
            return Err(Error::IndexOutOfRange(format!("fixed parameter index {j}")));
        }
        base[j] = v;
    }
    let inits = chain_inits(&target, &base, config)?;
    let chains = sampler::run_chains(&target, &target.support(), &inits, &config.sampler)?;

    let mut draws = PosteriorDraws {
        names: param_names(),
        chain: Vec::new(),
        iteration: Vec::new(),
        values: Vec::new(),
        log_density: Vec::new(),
        meta: SamplerMeta {
            seed: config.sampler.seed,
            chains: config.sampler.chains,
            warmup: config.sampler.warmup,
            draws_per_chain: config.sampler.draws,
            thin: config.sampler.thin,
            variant: config.variant,
            prior: Some(*prior),
            parameterization: config.parameterization,
            component_accept: Vec::new(),
            joint_accept: Vec::new(),
        },
    };
    for (c, out) in chains.into_iter().enumerate() {
        let acc = &out.component_accept;
        draws.meta.component_accept.push(if acc.is_empty() {
            f64::NAN
        } else {
            acc.iter().sum::<f64>() / acc.len() as f64
        });
        draws.meta.joint_accept.push(out.joint_accept);
        for (i, (u, lp)) in out.draws.into_iter().zip(out.log_density).enumerate() {
            let (v, log_jac) = target.to_natural(&u);
            draws.chain.push(c);
            draws.iteration.push(i);
            draws.values.push(v);
            draws.log_density.push(lp - log_jac);
        }
    }
    Ok(draws)
}

/// Split-R̂ and n_eff for every parameter.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<DiagnosticsReport> {
    let columns: Vec<Vec<Vec<f64>>> = (0..draws.names.len()).map(|j| draws.chains_of(j)).collect();
    diagnostics::diagnose_columns(&draws.names, &columns)
}

/// Index of `mu` for a region/population, re-exported for fixed-parameter configs.
pub fn mu_index(region: RegionCode, population: PopulationCode) -> usize {
    mean_index(region, population)
}

/// Posterior summary of one implied correlation of the latent process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    /// `temporal` (lag-1 within a population) or `cross` (same year).
    pub kind: &'static str,
    pub a: PopulationCode,
    pub b: PopulationCode,
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

pub const CORRELATION_HEADER: [&str; 7] = ["kind", "population_a", "population_b", "mean", "median", "q2.5", "q97.5"];

/// Implied mid-window correlations evaluated at each selected draw: three
/// temporal rows in population order, then the three pairs.
pub fn correlation_posterior(draws: &PosteriorDraws, draw_ids: &[usize], n_years: usize) -> Result<Vec<CorrelationRow>> {
    use rayon::prelude::*;
    if draw_ids.is_empty() {
        return Err(Error::InsufficientDraws("no draws selected".into()));
    }
    if let Some(&d) = draw_ids.iter().find(|&&d| d >= draws.len()) {
        return Err(Error::IndexOutOfRange(format!("draw {d} of {}", draws.len())));
    }
    let summaries = draw_ids
        .par_iter()
        .map(|&d| implied_correlations(&draws.params(d), n_years))
        .collect::<Result<Vec<_>>>()?;
    let mut slots: Vec<(&'static str, PopulationCode, PopulationCode)> =
        PopulationCode::ALL.iter().map(|&k| ("temporal", k, k)).collect();
    slots.extend(POPULATION_PAIRS.iter().map(|&(a, b)| ("cross", a, b)));
    Ok(slots
        .into_iter()
        .map(|(kind, a, b)| {
            let mut v: Vec<f64> = summaries.iter().map(|c| c.matrix[a.index()][b.index()]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.sort_by(f64::total_cmp);
            CorrelationRow {
                kind,
                a,
                b,
                mean,
                median: quantile_sorted(&v, 0.5),
                q025: quantile_sorted(&v, 0.025),
                q975: quantile_sorted(&v, 0.975),
            }
        })
        .collect())
}

pub fn write_correlations<W: Write>(rows: &[CorrelationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CORRELATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.a.code().to_string(),
            r.b.code().to_string(),
            r.mean.to_string(),
            r.median.to_string(),
            r.q025.to_string(),
            r.q975.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CountryTable, YearWindow};
    use approx::assert_relative_eq;

    fn table(n: usize) -> CountryTable {
        CountryTable::new(
            (0..n).map(|i| (format!("C{i:02}"), RegionCode::from_index(i % 7).unwrap())).collect(),
        )
        .unwrap()
    }

    fn identity_params(tau: f64) -> StructuralParams {
        StructuralParams { tau: [tau; 3], ..Default::default() }
    }

    #[test]
    fn prior_examples() {
        let zero = StructuralParams::from_slice(&[0.0; N_PARAMS]).unwrap();
        let p = PriorSpec::default();
        assert_relative_eq!(log_prior(&zero, &p), 33.0 * 5f64.ln(), epsilon = 1e-12);
        let mut v = vec![0.0; N_PARAMS];
        v[5] = 0.1;
        let one = StructuralParams::from_slice(&v).unwrap();
        assert_relative_eq!(log_prior(&one, &p) - log_prior(&zero, &p), -1.0, epsilon = 1e-12);
        assert_relative_eq!(p.log_density(0.1), 5f64.ln() - 1.0, epsilon = 1e-12);
        let n = PriorSpec::normal(0.1);
        assert_relative_eq!(
            n.log_density(0.1),
            -0.5 * (2.0 * std::f64::consts::PI * 0.01).ln() - 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn prior_parsing() {
        assert_eq!("laplace:0.5".parse::<PriorSpec>().unwrap(), PriorSpec::laplace(0.5));
        assert_eq!("Normal:0.1".parse::<PriorSpec>().unwrap(), PriorSpec::normal(0.1));
        assert!("cauchy:1".parse::<PriorSpec>().is_err());
        assert!("laplace:-1".parse::<PriorSpec>().is_err());
        assert!("laplace".parse::<PriorSpec>().is_err());
        assert_eq!(PriorSpec::laplace(0.5).to_string(), "laplace:0.5");
    }

    #[test]
    fn univariate_likelihood() {
        let t = table(1);
        let panel = PanelData::from_observed(&t, YearWindow::default(), [(3, -1.2)]).unwrap();
        let mut params = identity_params(0.0);
        params.mu[0][0] = -2.0;
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 0.8f64.powi(2);
        assert_relative_eq!(log_likelihood(&params, &panel), expected, epsilon = 1e-12);
    }

    #[test]
    fn independent_countries_factorize() {
        let t = table(2);
        let panel = PanelData::from_observed(&t, YearWindow::default(), [(0, -1.0), (33 + 12, -3.0)]).unwrap();
        let mut params = identity_params(0.0);
        params.mu[0][0] = -2.0;
        params.mu[1][1] = -2.5;
        let uni = |r: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * r * r;
        assert_relative_eq!(log_likelihood(&params, &panel), uni(1.0) + uni(-0.5), epsilon = 1e-12);
    }

    #[test]
    fn invalid_params_give_negative_infinity() {
        let t = table(1);
        let panel = PanelData::from_observed(&t, YearWindow::default(), [(0, -1.0)]).unwrap();
        let mut params = identity_params(0.5);
        params.gamma = [0.9; 3];
        assert_eq!(log_likelihood(&params, &panel), f64::NEG_INFINITY);
    }

    #[test]
    fn variant_fixes_parameters() {
        let cfg = FitConfig { variant: ModelVariant::NoTime, ..Default::default() };
        let free = cfg.free_mask();
        assert!(!free[GAMMA_OFFSET] && !free[GAMMA_OFFSET + 2]);
        assert!(free[RHO_OFFSET] && free[TAU_OFFSET]);
        assert_eq!("no-cross-pop".parse::<ModelVariant>().unwrap(), ModelVariant::NoCrossPop);
    }

    #[test]
    fn initial_params_use_medians() {
        let t = table(7);
        let panel = PanelData::from_observed(
            &t,
            YearWindow::default(),
            [(11, -2.0), (12, -1.0), (13, -3.0), (33, -4.0)],
        )
        .unwrap();
        let p = initial_params(&panel);
        assert_eq!(p.mean(RegionCode::EasternSouthernAfrica, PopulationCode::Fsw), -2.0);
        assert_eq!(p.mean(RegionCode::WesternCentralAfrica, PopulationCode::Msm), -4.0);
        // no ESA/MSM data: population median fallback
        assert_eq!(p.mean(RegionCode::EasternSouthernAfrica, PopulationCode::Msm), -4.0);
        assert_eq!(p.mean(RegionCode::AsiaPacific, PopulationCode::Fsw), -2.0);
        // no PWID anywhere: overall median
        assert_eq!(p.mean(RegionCode::AsiaPacific, PopulationCode::Pwid), -2.5);
        assert_eq!(p.s, [1.0; 3]);
        assert_eq!(p.rho, [0.0; 3]);
    }

    #[test]
    fn draws_csv_roundtrip() {
        let t = table(3);
        let panel = PanelData::from_observed(&t, YearWindow::default(), [(0, -1.0), (1, -1.1), (40, -2.0)]).unwrap();
        let config = FitConfig {
            sampler: SamplerConfig { chains: 2, warmup: 20, draws: 10, seed: 4, ..Default::default() },
            ..Default::default()
        };
        let draws = sample_posterior(&panel, &PriorSpec::laplace(1.0), &config).unwrap();
        assert_eq!(draws.len(), 20);
        assert!(draws.log_density.iter().all(|l| l.is_finite()));
        let mut buf = Vec::new();
        draws.write_csv(&mut buf).unwrap();
        let back = PosteriorDraws::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values, draws.values);
        assert_eq!(back.log_density, draws.log_density);
        assert_eq!(back.chain, draws.chain);
        assert_eq!(back.n_chains(), 2);
    }

    #[test]
    fn empty_panel_cannot_be_fit() {
        let panel = PanelData::from_observed(&table(2), YearWindow::default(), []).unwrap();
        assert!(matches!(
            sample_posterior(&panel, &PriorSpec::default(), &FitConfig::default()),
            Err(Error::TooFewObservations(_))
        ));
    }
}
