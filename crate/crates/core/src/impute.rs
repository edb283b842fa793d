//! Posterior draws of log prevalence at every cell.
//!
//! Missing cells are predicted from the conditional normal of each country
//! block given its observed cells. Observed cells are reconstructed with a
//! Gibbs sampler over country-population random effects `b` and the
//! structured error `eps`, then `Y = mu + b + eps`.
//!
//! The reconstruction follows the model's stated full conditionals as given:
//! `b_ik` has precision `1/tau_k + n_ik` (a unit residual precision is
//! assumed), and each `eps_j` is drawn from its `N(0, Q^-1)` conditional
//! without conditioning on `Y`. Reconstructed observed cells are therefore a
//! model-based reconstruction, not the posterior of a latent true value.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{build_country_covariance, build_country_precision, country_mean, StructuralParams};
use crate::linalg::{cholesky_jittered, quantile_sorted, standard_normal_vector, submatrix, subvector};
use crate::panel::{PanelData, PanelLayout, PopulationCode};
use crate::posterior::PosteriorDraws;
use crate::rng::stream;

/// Conditional normal of the `miss` coordinates given the `obs` coordinates,
/// prepared for repeated use with different observed values.
#[derive(Debug, Clone)]
pub struct Conditioner {
    obs: Vec<usize>,
    miss: Vec<usize>,
    l_oo: DMatrix<f64>,
    /// `L_oo^-1 Σ_om`.
    a: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
}

impl Conditioner {
    /// `obs` may be empty, in which case the result is the marginal of `miss`.
    pub fn new(cov: &DMatrix<f64>, obs: &[usize], miss: &[usize]) -> Result<Self> {
        let s_mm = submatrix(cov, miss, miss);
        if obs.is_empty() {
            return Ok(Conditioner {
                obs: Vec::new(),
                miss: miss.to_vec(),
                l_oo: DMatrix::zeros(0, 0),
                a: DMatrix::zeros(0, miss.len()),
                cond_cov: s_mm,
            });
        }
        let l_oo = submatrix(cov, obs, obs).cholesky().ok_or(Error::SingularObservedBlock)?.unpack();
        let s_om = submatrix(cov, obs, miss);
        let a = l_oo.solve_lower_triangular(&s_om).ok_or(Error::SingularObservedBlock)?;
        let reduced = s_mm - a.transpose() * &a;
        let n = reduced.nrows();
        let cond_cov = DMatrix::from_fn(n, n, |i, j| 0.5 * (reduced[(i, j)] + reduced[(j, i)]));
        Ok(Conditioner { obs: obs.to_vec(), miss: miss.to_vec(), l_oo, a, cond_cov })
    }

    pub fn cond_cov(&self) -> &DMatrix<f64> {
        &self.cond_cov
    }

    /// Conditional mean given the full mean vector and the observed values.
    pub fn cond_mean(&self, mean: &DVector<f64>, y_obs: &DVector<f64>) -> DVector<f64> {
        let mu_m = subvector(mean, &self.miss);
        if self.obs.is_empty() {
            return mu_m;
        }
        let r = y_obs - subvector(mean, &self.obs);
        let z = self.l_oo.solve_lower_triangular(&r).expect("non-singular factor");
        mu_m + self.a.transpose() * z
    }
}

/// Mean and covariance of the coordinates outside `obs_idx` given
/// `y_obs` at `obs_idx`, via Cholesky solves on the observed block.
pub fn conditional_gaussian(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    obs_idx: &[usize],
    y_obs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::InvalidPartition(format!("mean has length {n}, covariance is {}x{}", cov.nrows(), cov.ncols())));
    }
    let mut is_obs = vec![false; n];
    for &i in obs_idx {
        if i >= n || is_obs[i] {
            return Err(Error::InvalidPartition(format!("observed index {i} is out of range or repeated")));
        }
        is_obs[i] = true;
    }
    if obs_idx.is_empty() || obs_idx.len() == n {
        return Err(Error::InvalidPartition("observed set must be a non-empty proper subset".into()));
    }
    if y_obs.len() != obs_idx.len() {
        return Err(Error::InvalidPartition(format!(
            "{} observed values for {} observed indices",
            y_obs.len(),
            obs_idx.len()
        )));
    }
    let miss: Vec<usize> = (0..n).filter(|&i| !is_obs[i]).collect();
    let c = Conditioner::new(cov, obs_idx, &miss)?;
    Ok((c.cond_mean(mean, y_obs), c.cond_cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSource {
    Predicted,
    Reconstructed,
}

/// Summary of one cell's draws on the log scale and after exponentiation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub log_mean: f64,
    pub log_median: f64,
    pub log_q025: f64,
    pub log_q975: f64,
    /// Mean of `exp(draws)`.
    pub nat_mean: f64,
    pub nat_median: f64,
    pub nat_q025: f64,
    pub nat_q975: f64,
}

impl CellSummary {
    pub fn from_draws(draws: &[f64]) -> Self {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let q = |p| quantile_sorted(&sorted, p);
        let nat: Vec<f64> = sorted.iter().map(|v| v.exp()).collect();
        let nq = |p| quantile_sorted(&nat, p);
        CellSummary {
            log_mean: draws.iter().sum::<f64>() / n,
            log_median: q(0.5),
            log_q025: q(0.025),
            log_q975: q(0.975),
            nat_mean: draws.iter().map(|v| v.exp()).sum::<f64>() / n,
            nat_median: nq(0.5),
            nat_q025: nq(0.025),
            nat_q975: nq(0.975),
        }
    }
}

/// Posterior draws of log prevalence for a set of cells.
///
/// `samples[i][d]` is draw `d` of cell `cells[i]`; draw `d` of every cell
/// comes from the same parameter draw `draw_ids[d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPosterior {
    pub layout: PanelLayout,
    pub countries: Vec<String>,
    pub cells: Vec<usize>,
    pub sources: Vec<CellSource>,
    pub draw_ids: Vec<usize>,
    pub samples: Vec<Vec<f64>>,
}

impl CellPosterior {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn n_draws(&self) -> usize {
        self.draw_ids.len()
    }

    pub fn position(&self, offset: usize) -> Option<usize> {
        self.cells.binary_search(&offset).ok()
    }

    pub fn draws_of(&self, offset: usize) -> Option<&[f64]> {
        self.position(offset).map(|i| self.samples[i].as_slice())
    }

    pub fn summary(&self, i: usize) -> CellSummary {
        CellSummary::from_draws(&self.samples[i])
    }

    /// Union of two cell sets drawn from the same parameter draws.
    pub fn merge(mut self, other: CellPosterior) -> Result<CellPosterior> {
        if self.draw_ids != other.draw_ids {
            return Err(Error::MismatchedDrawCounts { left: self.n_draws(), right: other.n_draws() });
        }
        let mut rows: Vec<(usize, CellSource, Vec<f64>)> = self
            .cells
            .drain(..)
            .zip(self.sources.drain(..))
            .zip(self.samples.drain(..))
            .map(|((c, s), v)| (c, s, v))
            .chain(other.cells.into_iter().zip(other.sources).zip(other.samples).map(|((c, s), v)| (c, s, v)))
            .collect();
        rows.sort_by_key(|r| r.0);
        rows.dedup_by_key(|r| r.0);
        for (c, s, v) in rows {
            self.cells.push(c);
            self.sources.push(s);
            self.samples.push(v);
        }
        Ok(self)
    }
}

fn check_draws(draws: &PosteriorDraws, draw_ids: &[usize]) -> Result<()> {
    if draws.is_empty() || draw_ids.is_empty() {
        return Err(Error::InsufficientDraws("no posterior draws to predict from".into()));
    }
    if let Some(&d) = draw_ids.iter().find(|&&d| d >= draws.len()) {
        return Err(Error::IndexOutOfRange(format!("draw index {d} of {}", draws.len())));
    }
    Ok(())
}

fn transpose(by_draw: Vec<Vec<f64>>, n_cells: usize) -> Vec<Vec<f64>> {
    let mut samples = vec![Vec::with_capacity(by_draw.len()); n_cells];
    for row in by_draw {
        for (i, v) in row.into_iter().enumerate() {
            samples[i].push(v);
        }
    }
    samples
}

/// Cells grouped by country, as local offsets.
fn by_country(layout: &PanelLayout, cells: &[usize]) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
    let block = layout.block_len();
    let mut out: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::new();
    for (i, &j) in cells.iter().enumerate() {
        let c = j / block;
        match out.last_mut() {
            Some((last, local, pos)) if *last == c => {
                local.push(j % block);
                pos.push(i);
            }
            _ => out.push((c, vec![j % block], vec![i])),
        }
    }
    out
}

/// Predictive draws at unobserved `cells`, one per selected parameter draw,
/// conditioning each country block on that country's observed cells.
pub fn predict_cells(
    draws: &PosteriorDraws,
    panel: &PanelData,
    cells: &[usize],
    draw_ids: &[usize],
    seed: u64,
) -> Result<CellPosterior> {
    check_draws(draws, draw_ids)?;
    let mut cells = cells.to_vec();
    cells.sort_unstable();
    cells.dedup();
    if let Some(&j) = cells.iter().find(|&&j| j >= panel.len() || panel.is_observed(j)) {
        return Err(Error::IndexOutOfRange(format!("cell {j} is not an unobserved cell of the panel")));
    }
    let ny = panel.n_years();
    let block = panel.block_len();
    let groups = by_country(&panel.layout(), &cells);
    let observed: Vec<(Vec<usize>, DVector<f64>)> = groups
        .iter()
        .map(|(c, _, _)| {
            let obs = panel.country_observed_local(*c);
            let y = DVector::from_iterator(obs.len(), obs.iter().map(|&l| panel.values()[c * block + l]));
            (obs, y)
        })
        .collect();

    let by_draw: Vec<Vec<f64>> = draw_ids
        .par_iter()
        .map(|&d| -> Result<Vec<f64>> {
            let params = draws.params(d);
            let cov = build_country_covariance(&params, ny)?;
            let mut cache: HashMap<(&[usize], &[usize]), (Conditioner, DMatrix<f64>)> = HashMap::new();
            let mut row = vec![0.0; cells.len()];
            for ((c, miss, pos), (obs, y)) in groups.iter().zip(&observed) {
                let key = (obs.as_slice(), miss.as_slice());
                if !cache.contains_key(&key) {
                    let cond = Conditioner::new(&cov.sigma, obs, miss)?;
                    let l = cholesky_jittered(cond.cond_cov()).ok_or(Error::NotPositiveDefinite)?;
                    cache.insert(key, (cond, l));
                }
                let (cond, l) = &cache[&key];
                let mean = country_mean(&params, panel.region_of(*c), ny);
                let mut rng = stream(seed, &[0x9E7D, d as u64, *c as u64]);
                let sample = cond.cond_mean(&mean, y) + l * standard_normal_vector(&mut rng, miss.len());
                for (p, v) in pos.iter().zip(sample.iter()) {
                    row[*p] = *v;
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    Ok(CellPosterior {
        layout: panel.layout(),
        countries: panel.countries().to_vec(),
        sources: vec![CellSource::Predicted; cells.len()],
        samples: transpose(by_draw, cells.len()),
        cells,
        draw_ids: draw_ids.to_vec(),
    })
}

/// Predictive draws at every unobserved cell of the panel.
pub fn predict_missing(draws: &PosteriorDraws, panel: &PanelData, draw_ids: &[usize], seed: u64) -> Result<CellPosterior> {
    predict_cells(draws, panel, &panel.missing_offsets(), draw_ids, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    /// Full sweeps per parameter draw; the state carries over between draws.
    pub sweeps: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig { sweeps: 10 }
    }
}

/// Random effects and structured error of one country.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub b: [f64; 3],
    pub eps: Vec<f64>,
}

impl GibbsState {
    pub fn new(block_len: usize) -> Self {
        GibbsState { b: [0.0; 3], eps: vec![0.0; block_len] }
    }
}

/// One sweep for one country: every `b_k`, then `eps` site by site in layout order.
///
/// `observed` holds `(local offset, value)` pairs of the country's observed cells.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut GibbsState,
    params: &StructuralParams,
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    observed: &[(usize, f64)],
    rng: &mut R,
) {
    let ny = precision.nrows() / 3;
    for k in PopulationCode::ALL {
        let tau = params.tau[k.index()];
        let z: f64 = rng.sample(StandardNormal);
        if tau <= 0.0 {
            state.b[k.index()] = 0.0;
            continue;
        }
        let (mut n, mut sum) = (0.0, 0.0);
        for &(l, y) in observed.iter().filter(|(l, _)| l / ny == k.index()) {
            n += 1.0;
            sum += y - mean[l] - state.eps[l];
        }
        let var = 1.0 / (1.0 / tau + n);
        state.b[k.index()] = var * sum + var.sqrt() * z;
    }
    for j in 0..state.eps.len() {
        let qjj = precision[(j, j)];
        let mut acc = 0.0;
        for l in 0..state.eps.len() {
            if l != j {
                acc += precision[(j, l)] * state.eps[l];
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        state.eps[j] = -acc / qjj + z / qjj.sqrt();
    }
}

/// Gibbs reconstruction of `Y = mu + b + eps` at `cells`.
///
/// Countries run independently. Within a country, `config.sweeps` sweeps
/// follow each parameter draw in `draw_ids` order, starting from `b = 0`,
/// `eps = 0` and carrying the state across draws.
pub fn gibbs_cells(
    draws: &PosteriorDraws,
    panel: &PanelData,
    cells: &[usize],
    draw_ids: &[usize],
    config: &GibbsConfig,
    seed: u64,
) -> Result<CellPosterior> {
    check_draws(draws, draw_ids)?;
    let mut cells = cells.to_vec();
    cells.sort_unstable();
    cells.dedup();
    if let Some(&j) = cells.iter().find(|&&j| j >= panel.len()) {
        return Err(Error::IndexOutOfRange(format!("cell {j} is outside the panel")));
    }
    let ny = panel.n_years();
    let block = panel.block_len();
    let params: Vec<StructuralParams> = draw_ids.iter().map(|&d| draws.params(d)).collect();
    let precisions: Vec<DMatrix<f64>> =
        params.par_iter().map(|p| build_country_precision(p, ny)).collect::<Result<_>>()?;
    let groups = by_country(&panel.layout(), &cells);

    let per_country: Vec<Vec<Vec<f64>>> = groups
        .par_iter()
        .map(|(c, local, _)| {
            let observed: Vec<(usize, f64)> = panel
                .country_observed_local(*c)
                .into_iter()
                .map(|l| (l, panel.values()[c * block + l]))
                .collect();
            let mut state = GibbsState::new(block);
            let mut out = Vec::with_capacity(draw_ids.len());
            for (i, &d) in draw_ids.iter().enumerate() {
                let mean = country_mean(&params[i], panel.region_of(*c), ny);
                let mut rng = stream(seed, &[0x61BB, d as u64, *c as u64]);
                for _ in 0..config.sweeps.max(1) {
                    gibbs_sweep(&mut state, &params[i], &mean, &precisions[i], &observed, &mut rng);
                }
                out.push(local.iter().map(|&l| mean[l] + state.b[l / ny] + state.eps[l]).collect());
            }
            out
        })
        .collect();

    let mut samples = vec![Vec::new(); cells.len()];
    for ((_, _, pos), rows) in groups.iter().zip(per_country) {
        for (q, &p) in pos.iter().enumerate() {
            samples[p] = rows.iter().map(|r| r[q]).collect();
        }
    }
    Ok(CellPosterior {
        layout: panel.layout(),
        countries: panel.countries().to_vec(),
        sources: vec![CellSource::Reconstructed; cells.len()],
        samples,
        cells,
        draw_ids: draw_ids.to_vec(),
    })
}

/// Gibbs reconstruction at every observed cell of the panel.
pub fn gibbs_reconstruct(
    draws: &PosteriorDraws,
    panel: &PanelData,
    draw_ids: &[usize],
    config: &GibbsConfig,
    seed: u64,
) -> Result<CellPosterior> {
    gibbs_cells(draws, panel, &panel.observed_offsets(), draw_ids, config, seed)
}

/// Draws at every cell: predicted where missing, reconstructed where observed.
pub fn posterior_cells(
    draws: &PosteriorDraws,
    panel: &PanelData,
    draw_ids: &[usize],
    config: &GibbsConfig,
    seed: u64,
) -> Result<CellPosterior> {
    let predicted = predict_missing(draws, panel, draw_ids, seed)?;
    let reconstructed = gibbs_reconstruct(draws, panel, draw_ids, config, seed)?;
    predicted.merge(reconstructed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangeThresholds {
    /// Ratio above which a change counts as an increase.
    pub up: f64,
    /// Ratio below which a change counts as a decrease.
    pub down: f64,
    /// Posterior probability that must be exceeded.
    pub prob: f64,
}

impl Default for ChangeThresholds {
    fn default() -> Self {
        ChangeThresholds { up: 1.5, down: 0.5, prob: 0.95 }
    }
}

impl ChangeThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.up > 0.0 && self.down > 0.0 && (0.0..1.0).contains(&self.prob)) {
            return Err(Error::InvalidConfig(format!("invalid change thresholds {self:?}")));
        }
        Ok(())
    }

    pub fn classify(&self, pr_up: f64, pr_down: f64) -> ChangeClass {
        if pr_up > self.prob {
            ChangeClass::Increase
        } else if pr_down > self.prob {
            ChangeClass::Decrease
        } else {
            ChangeClass::NoChange
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeClass {
    Increase,
    Decrease,
    NoChange,
}

impl ChangeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeClass::Increase => "increase",
            ChangeClass::Decrease => "decrease",
            ChangeClass::NoChange => "no_change",
        }
    }
}

impl fmt::Display for ChangeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChangeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "increase" => Ok(ChangeClass::Increase),
            "decrease" => Ok(ChangeClass::Decrease),
            "no_change" => Ok(ChangeClass::NoChange),
            other => Err(Error::InvalidConfig(format!("unknown change class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeSummary {
    pub country: String,
    pub population: PopulationCode,
    /// `exp(Y_b - Y_a)` per draw.
    pub ratios: Vec<f64>,
    pub ratio_median: f64,
    pub pr_up: f64,
    pub pr_down: f64,
    pub class: ChangeClass,
}

impl ChangeSummary {
    pub fn from_ratios(country: String, population: PopulationCode, ratios: Vec<f64>, thresholds: &ChangeThresholds) -> Self {
        let n = ratios.len() as f64;
        let pr_up = ratios.iter().filter(|&&r| r > thresholds.up).count() as f64 / n;
        let pr_down = ratios.iter().filter(|&&r| r < thresholds.down).count() as f64 / n;
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        ChangeSummary {
            country,
            population,
            ratio_median: quantile_sorted(&sorted, 0.5),
            pr_up,
            pr_down,
            class: thresholds.classify(pr_up, pr_down),
            ratios,
        }
    }
}

/// Ratio `exp(Y_b - Y_a)` between two years for every country-population
/// with draws at both years, paired draw by draw.
pub fn change_contrast(
    cells: &CellPosterior,
    year_a: i32,
    year_b: i32,
    thresholds: &ChangeThresholds,
) -> Result<Vec<ChangeSummary>> {
    thresholds.validate()?;
    let layout = cells.layout;
    let window = layout.window;
    let (ta, tb) = match (window.year_index(year_a), window.year_index(year_b)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::IndexOutOfRange(format!("years {year_a}/{year_b} outside {}-{}", window.first, window.last))),
    };
    let mut out = Vec::new();
    for c in 0..layout.n_countries {
        for k in PopulationCode::ALL {
            let (Some(a), Some(b)) =
                (cells.draws_of(layout.offset(c, k, ta)), cells.draws_of(layout.offset(c, k, tb)))
            else {
                continue;
            };
            if a.len() != b.len() {
                return Err(Error::MismatchedDrawCounts { left: a.len(), right: b.len() });
            }
            let ratios: Vec<f64> = a.iter().zip(b).map(|(ya, yb)| (yb - ya).exp()).collect();
            out.push(ChangeSummary::from_ratios(cells.countries[c].clone(), k, ratios, thresholds));
        }
    }
    Ok(out)
}

pub const ESTIMATE_HEADER: [&str; 11] = [
    "country",
    "population",
    "year",
    "log_mean",
    "log_median",
    "log_q2.5",
    "log_q97.5",
    "nat_mean",
    "nat_median",
    "nat_q2.5",
    "nat_q97.5",
];

/// One row of the estimate report.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub country: String,
    pub population: PopulationCode,
    pub year: i32,
    pub summary: CellSummary,
}

pub fn estimate_rows(cells: &CellPosterior) -> Vec<EstimateRow> {
    (0..cells.len())
        .into_par_iter()
        .map(|i| {
            let (c, k, t) = cells.layout.decompose(cells.cells[i]);
            EstimateRow {
                country: cells.countries[c].clone(),
                population: k,
                year: cells.layout.window.year_at(t),
                summary: cells.summary(i),
            }
        })
        .collect()
}

pub fn write_estimates<W: Write>(rows: &[EstimateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ESTIMATE_HEADER)?;
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![r.country.clone(), r.population.to_string(), r.year.to_string()];
        rec.extend(
            [s.log_mean, s.log_median, s.log_q025, s.log_q975, s.nat_mean, s.nat_median, s.nat_q025, s.nat_q975]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::MalformedRow {
        line,
        message: format!("invalid value in column {}", i + 1),
    })
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[String]) -> Result<()> {
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(Error::MalformedRow { line: 1, message: format!("expected header {}", expected.join(",")) });
    }
    Ok(())
}

pub fn read_estimates<R: Read>(reader: R) -> Result<Vec<EstimateRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &ESTIMATE_HEADER.map(String::from))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let population: PopulationCode = rec[1]
            .parse()
            .map_err(|m: String| Error::MalformedRow { line, message: m })?;
        let f = |i| parse_field::<f64>(&rec, i, line);
        rows.push(EstimateRow {
            country: rec[0].to_string(),
            population,
            year: parse_field(&rec, 2, line)?,
            summary: CellSummary {
                log_mean: f(3)?,
                log_median: f(4)?,
                log_q025: f(5)?,
                log_q975: f(6)?,
                nat_mean: f(7)?,
                nat_median: f(8)?,
                nat_q025: f(9)?,
                nat_q975: f(10)?,
            },
        });
    }
    Ok(rows)
}

pub fn change_header(thresholds: &ChangeThresholds) -> Vec<String> {
    vec![
        "country".into(),
        "population".into(),
        "ratio_median".into(),
        format!("pr_gt_{}", thresholds.up),
        format!("pr_lt_{}", thresholds.down),
        "class".into(),
    ]
}

pub fn write_changes<W: Write>(changes: &[ChangeSummary], thresholds: &ChangeThresholds, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(change_header(thresholds))?;
    for c in changes {
        w.write_record([
            c.country.clone(),
            c.population.to_string(),
            c.ratio_median.to_string(),
            c.pr_up.to_string(),
            c.pr_down.to_string(),
            c.class.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the change report; draws are not stored in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeRow {
    pub country: String,
    pub population: PopulationCode,
    pub ratio_median: f64,
    pub pr_up: f64,
    pub pr_down: f64,
    pub class: ChangeClass,
}

impl From<&ChangeSummary> for ChangeRow {
    fn from(c: &ChangeSummary) -> Self {
        ChangeRow {
            country: c.country.clone(),
            population: c.population,
            ratio_median: c.ratio_median,
            pr_up: c.pr_up,
            pr_down: c.pr_down,
            class: c.class,
        }
    }
}

pub fn read_changes<R: Read>(reader: R, thresholds: &ChangeThresholds) -> Result<Vec<ChangeRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &change_header(thresholds))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let population: PopulationCode = rec[1]
            .parse()
            .map_err(|m: String| Error::MalformedRow { line, message: m })?;
        rows.push(ChangeRow {
            country: rec[0].to_string(),
            population,
            ratio_median: parse_field(&rec, 2, line)?,
            pr_up: parse_field(&rec, 3, line)?,
            pr_down: parse_field(&rec, 4, line)?,
            class: parse_field(&rec, 5, line)?,
        });
    }
    Ok(rows)
}

pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const CHANGES_FILE: &str = "changes.csv";

/// Writes `estimates.csv` and `changes.csv` into `dir`.
pub fn export_estimates(
    cells: &CellPosterior,
    changes: &[ChangeSummary],
    thresholds: &ChangeThresholds,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let est = dir.join(ESTIMATES_FILE);
    let chg = dir.join(CHANGES_FILE);
    write_estimates(&estimate_rows(cells), BufWriter::new(File::create(&est)?))?;
    write_changes(changes, thresholds, BufWriter::new(File::create(&chg)?))?;
    Ok((est, chg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CountryTable, RegionCode, YearWindow};
    use crate::posterior::SamplerMeta;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn bivariate_example() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let (m, c) = conditional_gaussian(&dv(&[0.0, 0.0]), &cov, &[0], &dv(&[2.0])).unwrap();
        assert_relative_eq!(m[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(c[(0, 0)], 0.75, epsilon = 1e-14);
    }

    #[test]
    fn diagonal_covariance_carries_no_information() {
        let cov = DMatrix::from_diagonal(&dv(&[1.0, 2.0, 3.0]));
        let (m, c) = conditional_gaussian(&dv(&[1.0, 2.0, 3.0]), &cov, &[1], &dv(&[10.0])).unwrap();
        assert_eq!(m, dv(&[1.0, 3.0]));
        assert_eq!(c, DMatrix::from_diagonal(&dv(&[1.0, 3.0])));
    }

    #[test]
    fn partition_errors() {
        let cov = DMatrix::identity(3, 3);
        let mean = dv(&[0.0; 3]);
        let err = |obs: &[usize], y: &[f64]| conditional_gaussian(&mean, &cov, obs, &dv(y)).unwrap_err();
        assert!(matches!(err(&[], &[]), Error::InvalidPartition(_)));
        assert!(matches!(err(&[0, 1, 2], &[0.0; 3]), Error::InvalidPartition(_)));
        assert!(matches!(err(&[0, 0], &[0.0; 2]), Error::InvalidPartition(_)));
        assert!(matches!(err(&[5], &[0.0]), Error::InvalidPartition(_)));
        assert!(matches!(err(&[1], &[0.0, 1.0]), Error::InvalidPartition(_)));
        let singular = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            conditional_gaussian(&mean, &singular, &[0, 1], &dv(&[0.0, 0.0])),
            Err(Error::SingularObservedBlock)
        ));
    }

    fn draws_of(params: &[StructuralParams]) -> PosteriorDraws {
        PosteriorDraws {
            names: crate::gmrf::param_names(),
            chain: vec![0; params.len()],
            iteration: (0..params.len()).collect(),
            values: params.iter().map(|p| p.to_vec()).collect(),
            log_density: vec![0.0; params.len()],
            meta: SamplerMeta::default(),
        }
    }

    fn table(n: usize) -> CountryTable {
        CountryTable::new((0..n).map(|i| (format!("C{i}"), RegionCode::from_index(i % 7).unwrap())).collect()).unwrap()
    }

    #[test]
    fn fully_observed_country_has_no_missing_draws() {
        let panel = PanelData::from_observed(&table(2), YearWindow::default(), (0..33).map(|j| (j, -2.0))).unwrap();
        let draws = draws_of(&[StructuralParams::default()]);
        let pred = predict_missing(&draws, &panel, &[0], 1).unwrap();
        assert_eq!(pred.len(), 33);
        assert!(pred.cells.iter().all(|&j| j >= 33));
    }

    #[test]
    fn unconditional_country_matches_regional_mean() {
        let mut p = StructuralParams { tau: [0.0; 3], ..Default::default() };
        p.mu[1] = [-3.0, -2.0, -1.0];
        let panel = PanelData::from_observed(&table(2), YearWindow::default(), [(0, -2.0)]).unwrap();
        let draws = draws_of(&vec![p; 4000]);
        let ids: Vec<usize> = (0..4000).collect();
        let pred = predict_missing(&draws, &panel, &ids, 7).unwrap();
        for (k, m) in [(0, -3.0), (1, -2.0), (2, -1.0)] {
            let j = 33 + k * 11 + 4;
            let d = pred.draws_of(j).unwrap();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            assert!((mean - m).abs() < 4.0 / (d.len() as f64).sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "var {var}");
        }
    }

    #[test]
    fn prediction_is_deterministic_and_order_free() {
        let panel = PanelData::from_observed(&table(3), YearWindow::default(), [(0, -2.0), (40, -1.0)]).unwrap();
        let p = StructuralParams { gamma: [-0.3; 3], rho: [0.1; 3], tau: [0.5; 3], ..Default::default() };
        let draws = draws_of(&[p.clone(), p]);
        let a = predict_missing(&draws, &panel, &[0, 1], 3).unwrap();
        let b = predict_missing(&draws, &panel, &[0, 1], 3).unwrap();
        assert_eq!(a, b);
        let c = predict_missing(&draws, &panel, &[1], 3).unwrap();
        assert_eq!(c.samples[10][0], a.samples[10][1]);
    }

    #[test]
    fn gibbs_b_concentrates_at_residual() {
        let p = StructuralParams { tau: [1e6; 3], ..Default::default() };
        let prec = DMatrix::identity(33, 33);
        let mean = DVector::from_element(33, -3.0);
        let mut state = GibbsState::new(33);
        let mut rng = stream(1, &[]);
        // one FSW observation, eps reset to zero before each sweep
        let mut bs = Vec::new();
        for _ in 0..2000 {
            state.eps.iter_mut().for_each(|e| *e = 0.0);
            gibbs_sweep(&mut state, &p, &mean, &prec, &[(12, -1.0)], &mut rng);
            bs.push(state.b[1]);
        }
        let m = bs.iter().sum::<f64>() / bs.len() as f64;
        let var = bs.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (bs.len() - 1) as f64;
        assert!((m - 2.0).abs() < 0.1, "b mean {m}");
        assert!((var - 1.0 / (1e-6 + 1.0)).abs() < 0.1, "b var {var}");
    }

    #[test]
    fn identity_precision_eps_is_standard_normal() {
        let p = StructuralParams { tau: [0.0; 3], ..Default::default() };
        let prec = DMatrix::identity(33, 33);
        let mean = DVector::zeros(33);
        let mut state = GibbsState::new(33);
        let mut rng = stream(2, &[]);
        let mut v = Vec::new();
        for _ in 0..5000 {
            gibbs_sweep(&mut state, &p, &mean, &prec, &[], &mut rng);
            v.push(state.eps[7]);
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(m.abs() < 0.06 && (var - 1.0).abs() < 0.06, "{m} {var}");
        assert_eq!(state.b, [0.0; 3]);
    }

    fn cells_with(samples: Vec<Vec<f64>>, cells: Vec<usize>) -> CellPosterior {
        let n = samples[0].len();
        CellPosterior {
            layout: PanelLayout::new(1, YearWindow::default()),
            countries: vec!["AAA".into()],
            sources: vec![CellSource::Predicted; cells.len()],
            draw_ids: (0..n).collect(),
            cells,
            samples,
        }
    }

    #[test]
    fn contrast_examples() {
        let t = ChangeThresholds::default();
        let same = cells_with(vec![vec![-2.0, -1.0, -3.0], vec![-2.0, -1.0, -3.0]], vec![0, 10]);
        let c = change_contrast(&same, 2011, 2021, &t).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].ratios.iter().all(|&r| r == 1.0));
        assert_eq!(c[0].class, ChangeClass::NoChange);

        let base = vec![-2.0, -1.0, -3.0];
        let up: Vec<f64> = base.iter().map(|v| v + 2f64.ln()).collect();
        let doubled = cells_with(vec![base, up], vec![0, 10]);
        let c = change_contrast(&doubled, 2011, 2021, &t).unwrap();
        assert_relative_eq!(c[0].ratio_median, 2.0, epsilon = 1e-12);
        assert_eq!(c[0].pr_up, 1.0);
        assert_eq!(c[0].class, ChangeClass::Increase);

        // exactly 94 of 100 draws above the threshold: not enough
        let a = vec![0.0; 100];
        let b: Vec<f64> = (0..100).map(|i| if i < 94 { 1.0 } else { 0.0 }).collect();
        let c = change_contrast(&cells_with(vec![a, b], vec![0, 10]), 2011, 2021, &t).unwrap();
        assert_relative_eq!(c[0].pr_up, 0.94);
        assert_eq!(c[0].class, ChangeClass::NoChange);
    }

    #[test]
    fn contrast_draw_mismatch() {
        let cells = cells_with(vec![vec![0.0, 1.0], vec![0.0]], vec![0, 10]);
        assert!(matches!(
            change_contrast(&cells, 2011, 2021, &ChangeThresholds::default()),
            Err(Error::MismatchedDrawCounts { .. })
        ));
    }

    #[test]
    fn natural_mean_is_mean_of_exponentials() {
        let s = CellSummary::from_draws(&[0.0, 2.0]);
        assert_relative_eq!(s.nat_mean, (1.0 + 2f64.exp()) / 2.0);
        assert!(s.nat_mean > s.log_mean.exp());
        assert!(s.log_q025 <= s.log_median && s.log_median <= s.log_q975);
    }

    #[test]
    fn export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let t = ChangeThresholds::default();
        let empty = CellPosterior { cells: vec![], sources: vec![], samples: vec![], ..cells_with(vec![vec![0.0]], vec![0]) };
        let (est, chg) = export_estimates(&empty, &[], &t, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&est).unwrap().lines().count(), 1);
        assert_eq!(std::fs::read_to_string(&chg).unwrap().trim(), "country,population,ratio_median,pr_gt_1.5,pr_lt_0.5,class");

        let cells = cells_with(vec![vec![-2.1, -1.7, -3.3, -0.4], vec![-1.0, -1.1, -0.2, -2.9]], vec![0, 10]);
        let changes = change_contrast(&cells, 2011, 2021, &t).unwrap();
        export_estimates(&cells, &changes, &t, dir.path()).unwrap();
        let rows = read_estimates(File::open(dir.path().join(ESTIMATES_FILE)).unwrap()).unwrap();
        assert_eq!(rows, estimate_rows(&cells));
        assert_eq!(rows[1].year, 2021);
        let back = read_changes(File::open(dir.path().join(CHANGES_FILE)).unwrap(), &t).unwrap();
        assert_eq!(back, changes.iter().map(ChangeRow::from).collect::<Vec<_>>());
    }
}
