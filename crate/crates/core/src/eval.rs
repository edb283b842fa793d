//! Cross-validation, the regional-median baseline, ablations and prior sensitivity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::RHO_OFFSET;
use crate::impute::predict_cells;
use crate::linalg::{median, quantile_sorted};
use crate::panel::{PanelData, PopulationCode, YearWindow, N_POPULATIONS, N_REGIONS};
use crate::posterior::{correlation_posterior, sample_posterior, FitConfig, ModelVariant, PriorSpec};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FoldStrategy {
    /// Individual observed cells are assigned to folds.
    #[default]
    Cell,
    /// Whole country-population series are assigned to folds.
    Series,
}

impl fmt::Display for FoldStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldStrategy::Cell => "cell",
            FoldStrategy::Series => "series",
        })
    }
}

impl FromStr for FoldStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cell" => Ok(FoldStrategy::Cell),
            "series" | "by-series" | "by_series" => Ok(FoldStrategy::Series),
            other => Err(Error::InvalidConfig(format!("unknown fold strategy `{other}`"))),
        }
    }
}

/// Fold label of every observed cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub strategy: FoldStrategy,
    /// Observed cell offsets in ascending order.
    pub cells: Vec<usize>,
    /// Zero-based fold of `cells[i]`.
    pub fold: Vec<usize>,
}

impl FoldAssignment {
    pub fn held_out(&self, f: usize) -> Vec<usize> {
        self.cells.iter().zip(&self.fold).filter(|(_, &g)| g == f).map(|(&c, _)| c).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold {
            s[f] += 1;
        }
        s
    }
}

/// Random fold assignment stratified by population.
///
/// Within each population the units (cells, or whole series) are shuffled
/// and dealt round-robin, so fold sizes within a population differ by at most
/// one. The starting fold of each population continues where the previous
/// population stopped, which also balances the overall fold sizes.
pub fn make_folds(panel: &PanelData, k: usize, seed: u64, strategy: FoldStrategy) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    let layout = panel.layout();
    let ny = panel.n_years();
    let mut strata: Vec<Vec<Vec<usize>>> = vec![Vec::new(); N_POPULATIONS];
    match strategy {
        FoldStrategy::Cell => {
            for j in panel.observed_offsets() {
                let (_, p, _) = layout.decompose(j);
                strata[p.index()].push(vec![j]);
            }
        }
        FoldStrategy::Series => {
            for c in 0..panel.n_countries() {
                for p in PopulationCode::ALL {
                    let series: Vec<usize> =
                        (0..ny).map(|t| layout.offset(c, p, t)).filter(|&j| panel.is_observed(j)).collect();
                    if !series.is_empty() {
                        strata[p.index()].push(series);
                    }
                }
            }
        }
    }
    for (p, units) in strata.iter().enumerate() {
        if !units.is_empty() && units.len() < k {
            return Err(Error::TooFewObservations(format!(
                "{} has {} {} units for {k} folds",
                PopulationCode::ALL[p],
                units.len(),
                strategy
            )));
        }
    }
    if strata.iter().all(|s| s.is_empty()) {
        return Err(Error::TooFewObservations("panel has no observed cells".into()));
    }

    let mut labels: BTreeMap<usize, usize> = BTreeMap::new();
    let mut start = 0;
    for (p, mut units) in strata.into_iter().enumerate() {
        let mut rng = stream(seed, &[0xF01D, p as u64]);
        units.shuffle(&mut rng);
        for (i, unit) in units.iter().enumerate() {
            let f = (start + i) % k;
            for &j in unit {
                labels.insert(j, f);
            }
        }
        start = (start + units.len()) % k;
    }
    let (cells, fold) = labels.into_iter().unzip();
    Ok(FoldAssignment { k, seed, strategy, cells, fold })
}

/// Year-constant prediction for every cell from the median of its
/// region-population.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePrediction {
    /// Prediction per cell, flat layout.
    pub values: Vec<f64>,
    /// `fallback[region][population]`: no data in that group, the
    /// population-wide median (or, failing that, the overall median) was used.
    pub fallback: [[bool; N_POPULATIONS]; N_REGIONS],
}

/// Regional-median baseline. Only observations inside `window` are used
/// when it is given; the full panel window otherwise.
pub fn baseline_regional_median(panel: &PanelData, window: Option<YearWindow>) -> BaselinePrediction {
    let layout = panel.layout();
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut by_pop: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for j in panel.observed_offsets() {
        let (c, p, t) = layout.decompose(j);
        if let Some(w) = window {
            if !w.contains(layout.window.year_at(t)) {
                continue;
            }
        }
        let v = panel.values()[j];
        groups.entry((panel.region_of(c).index(), p.index())).or_default().push(v);
        by_pop.entry(p.index()).or_default().push(v);
        all.push(v);
    }
    let overall = if all.is_empty() { f64::NAN } else { median(&all) };
    let mut table = [[0.0; N_POPULATIONS]; N_REGIONS];
    let mut fallback = [[false; N_POPULATIONS]; N_REGIONS];
    for r in 0..N_REGIONS {
        for p in 0..N_POPULATIONS {
            table[r][p] = match groups.get(&(r, p)) {
                Some(v) => median(v),
                None => {
                    fallback[r][p] = true;
                    by_pop.get(&p).map(|v| median(v)).unwrap_or(overall)
                }
            };
        }
    }
    let values = (0..panel.len())
        .map(|j| {
            let (c, p, _) = layout.decompose(j);
            table[panel.region_of(c).index()][p.index()]
        })
        .collect();
    BaselinePrediction { values, fallback }
}

/// Point predictions and optional 95% intervals for held-out cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPrediction {
    pub point: Vec<f64>,
    pub interval: Option<Vec<(f64, f64)>>,
}

pub trait CellPredictor: Sync {
    fn tag(&self) -> String;
    /// Predicts `cells`, none of which are observed in `train`.
    fn predict(&self, train: &PanelData, cells: &[usize], fold: usize) -> Result<FoldPrediction>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselinePredictor {
    pub window: Option<YearWindow>,
}

impl CellPredictor for BaselinePredictor {
    fn tag(&self) -> String {
        "baseline".into()
    }

    fn predict(&self, train: &PanelData, cells: &[usize], _fold: usize) -> Result<FoldPrediction> {
        let b = baseline_regional_median(train, self.window);
        Ok(FoldPrediction { point: cells.iter().map(|&j| b.values[j]).collect(), interval: None })
    }
}

/// Fits the model on the training cells and predicts held-out cells by the
/// posterior predictive mean, with equal-tailed 95% intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPredictor {
    pub prior: PriorSpec,
    pub fit: FitConfig,
    /// Use every `thin`-th posterior draw for prediction.
    pub predict_thin: usize,
}

impl ModelPredictor {
    pub fn new(prior: PriorSpec, fit: FitConfig) -> Self {
        ModelPredictor { prior, fit, predict_thin: 1 }
    }
}

impl CellPredictor for ModelPredictor {
    fn tag(&self) -> String {
        self.fit.variant.to_string()
    }

    fn predict(&self, train: &PanelData, cells: &[usize], fold: usize) -> Result<FoldPrediction> {
        let mut fit = self.fit.clone();
        fit.sampler.seed = derive_seed(self.fit.sampler.seed, &[0xC5, fold as u64]);
        let draws = sample_posterior(train, &self.prior, &fit)?;
        let ids = draws.thinned_indices(self.predict_thin);
        let pred = predict_cells(&draws, train, cells, &ids, derive_seed(fit.sampler.seed, &[0x9D]))?;
        let mut point = Vec::with_capacity(cells.len());
        let mut interval = Vec::with_capacity(cells.len());
        for &j in cells {
            let d = pred.draws_of(j).expect("predicted cell");
            let mut sorted = d.to_vec();
            sorted.sort_by(f64::total_cmp);
            point.push(d.iter().sum::<f64>() / d.len() as f64);
            interval.push((quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975)));
        }
        Ok(FoldPrediction { point, interval: Some(interval) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n: usize,
    pub mse: f64,
    pub coverage95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub class: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub tag: String,
    /// Pooled log-scale squared error over completed folds.
    pub cv_mse: f64,
    pub coverage95: Option<f64>,
    pub folds: Vec<FoldResult>,
    pub failures: Vec<FoldFailure>,
}

impl EvalResult {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// K-fold cross-validation: for every fold, the held-out cells are masked,
/// the predictor sees only the remaining cells, and the held-out values are
/// scored on the log scale. Folds run in parallel; each fold is seeded by its
/// own index, so results do not depend on scheduling.
pub fn run_cv<P: CellPredictor + ?Sized>(panel: &PanelData, predictor: &P, folds: &FoldAssignment) -> EvalResult {
    let outcomes: Vec<std::result::Result<(FoldResult, f64, Option<usize>), FoldFailure>> = (0..folds.k)
        .into_par_iter()
        .map(|f| {
            let held = folds.held_out(f);
            let train = panel.with_masked(&held);
            assert!(held.iter().all(|&j| !train.is_observed(j)), "held-out cell leaked into training data");
            let fail = |e: Error| FoldFailure { fold: f, class: e.class().into(), message: e.to_string() };
            let pred = predictor.predict(&train, &held, f).map_err(fail)?;
            let mut sse = 0.0;
            let mut hits = 0;
            for (i, &j) in held.iter().enumerate() {
                let y = panel.values()[j];
                sse += (pred.point[i] - y).powi(2);
                if let Some(iv) = &pred.interval {
                    if iv[i].0 <= y && y <= iv[i].1 {
                        hits += 1;
                    }
                }
            }
            let n = held.len();
            let coverage = pred.interval.as_ref().map(|_| hits as f64 / n.max(1) as f64);
            let res = FoldResult { fold: f, n, mse: sse / n.max(1) as f64, coverage95: coverage };
            Ok((res, sse, pred.interval.as_ref().map(|_| hits)))
        })
        .collect();

    let mut result = EvalResult {
        tag: predictor.tag(),
        cv_mse: f64::NAN,
        coverage95: None,
        folds: Vec::new(),
        failures: Vec::new(),
    };
    let (mut sse, mut n, mut hits, mut with_interval) = (0.0, 0usize, 0usize, true);
    for o in outcomes {
        match o {
            Ok((res, s, h)) => {
                sse += s;
                n += res.n;
                match h {
                    Some(h) => hits += h,
                    None => with_interval = false,
                }
                result.folds.push(res);
            }
            Err(fail) => result.failures.push(fail),
        }
    }
    if n > 0 {
        result.cv_mse = sse / n as f64;
        if with_interval {
            result.coverage95 = Some(hits as f64 / n as f64);
        }
    }
    result
}

pub const EVAL_HEADER: [&str; 6] = ["model", "fold", "n", "mse", "coverage95", "status"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per (model, fold), failed folds included with their error class,
/// then a `pooled` row per model.
pub fn write_eval_report<W: std::io::Write>(results: &[EvalResult], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAL_HEADER)?;
    for r in results {
        let mut rows: Vec<(usize, [String; 6])> = r
            .folds
            .iter()
            .map(|f| {
                (f.fold, [r.tag.clone(), f.fold.to_string(), f.n.to_string(), f.mse.to_string(), opt(f.coverage95), "ok".into()])
            })
            .collect();
        rows.extend(r.failures.iter().map(|f| {
            (f.fold, [r.tag.clone(), f.fold.to_string(), String::new(), String::new(), String::new(), f.class.clone()])
        }));
        rows.sort_by_key(|(f, _)| *f);
        for (_, row) in rows {
            w.write_record(row)?;
        }
        let n: usize = r.folds.iter().map(|f| f.n).sum();
        let status = if r.is_complete() { "ok" } else { "incomplete" };
        w.write_record([r.tag.clone(), "pooled".into(), n.to_string(), r.cv_mse.to_string(), opt(r.coverage95), status.into()])?;
    }
    w.flush()?;
    Ok(())
}

/// Cross-validation of a model with one group of dependence parameters fixed at zero.
pub fn run_ablation(
    panel: &PanelData,
    variant: ModelVariant,
    folds: &FoldAssignment,
    prior: &PriorSpec,
    fit: &FitConfig,
) -> EvalResult {
    let predictor = ModelPredictor::new(*prior, FitConfig { variant, ..fit.clone() });
    run_cv(panel, &predictor, folds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub prior: PriorSpec,
    pub eval: EvalResult,
    /// Posterior means of the three cross-population couplings from a fit to the full panel.
    pub rho_mean: [f64; 3],
    /// Posterior means of the implied same-year cross-population correlations, same fit.
    pub cross_corr_mean: [f64; 3],
}

/// One cross-validation run and one full-panel fit per prior, all with the same seeds.
pub fn prior_sensitivity(
    panel: &PanelData,
    priors: &[PriorSpec],
    folds: &FoldAssignment,
    fit: &FitConfig,
) -> Result<Vec<SensitivityRow>> {
    if priors.is_empty() {
        return Err(Error::InvalidConfig("no priors given".into()));
    }
    priors
        .iter()
        .map(|prior| {
            let eval = run_cv(panel, &ModelPredictor::new(*prior, fit.clone()), folds);
            let draws = sample_posterior(panel, prior, fit)?;
            let means = draws.posterior_mean();
            let corr = correlation_posterior(&draws, &draws.thinned_indices(1), panel.n_years())?;
            let cross: Vec<f64> = corr.iter().filter(|r| r.kind == "cross").map(|r| r.mean).collect();
            Ok(SensitivityRow {
                prior: *prior,
                eval,
                rho_mean: [means[RHO_OFFSET], means[RHO_OFFSET + 1], means[RHO_OFFSET + 2]],
                cross_corr_mean: [cross[0], cross[1], cross[2]],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CountryTable, RegionCode};

    fn table(n: usize, region: RegionCode) -> CountryTable {
        CountryTable::new((0..n).map(|i| (format!("C{i:02}"), region)).collect()).unwrap()
    }

    fn one_population_panel(cells: usize) -> PanelData {
        let t = table(cells, RegionCode::AsiaPacific);
        PanelData::from_observed(&t, YearWindow::default(), (0..cells).map(|c| (c * 33 + 11 + c % 11, -2.0))).unwrap()
    }

    #[test]
    fn fold_size_examples() {
        let f = make_folds(&one_population_panel(10), 5, 1, FoldStrategy::Cell).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let mut s = make_folds(&one_population_panel(7), 2, 1, FoldStrategy::Cell).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![3, 4]);
        assert_eq!(make_folds(&one_population_panel(10), 5, 1, FoldStrategy::Cell).unwrap(), f);
        assert_ne!(make_folds(&one_population_panel(10), 5, 2, FoldStrategy::Cell).unwrap().fold, f.fold);
    }

    #[test]
    fn too_few_observations() {
        assert!(matches!(
            make_folds(&one_population_panel(3), 5, 1, FoldStrategy::Cell),
            Err(Error::TooFewObservations(_))
        ));
        assert!(matches!(make_folds(&one_population_panel(3), 1, 1, FoldStrategy::Cell), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn series_folds_keep_series_together() {
        let t = table(6, RegionCode::AsiaPacific);
        let obs = (0..6).flat_map(|c| [(c * 33, -1.0), (c * 33 + 3, -1.5), (c * 33 + 14, -2.0)]);
        let panel = PanelData::from_observed(&t, YearWindow::default(), obs).unwrap();
        let f = make_folds(&panel, 3, 4, FoldStrategy::Series).unwrap();
        for c in 0..6 {
            let a = f.fold[f.cells.iter().position(|&j| j == c * 33).unwrap()];
            let b = f.fold[f.cells.iter().position(|&j| j == c * 33 + 3).unwrap()];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn baseline_median_and_fallback() {
        let t = CountryTable::new(vec![
            ("A".into(), RegionCode::LatinAmericaCaribbean),
            ("B".into(), RegionCode::LatinAmericaCaribbean),
            ("C".into(), RegionCode::AsiaPacific),
        ])
        .unwrap();
        let obs = [(11, -2.0), (12, -1.0), (33 + 20, -3.0), (66, -5.0)];
        let panel = PanelData::from_observed(&t, YearWindow::default(), obs).unwrap();
        let b = baseline_regional_median(&panel, None);
        for j in 11..22 {
            assert_eq!(b.values[j], -2.0);
            assert_eq!(b.values[33 + j], -2.0);
        }
        // AP has no FSW data: population-wide median
        assert_eq!(b.values[66 + 15], -2.0);
        assert!(b.fallback[RegionCode::AsiaPacific.index()][1]);
        assert!(!b.fallback[RegionCode::LatinAmericaCaribbean.index()][1]);
        assert_eq!(b.values[66 + 5], -5.0);
        let recent = baseline_regional_median(&panel, Some(YearWindow::new(2017, 2021).unwrap()));
        assert_eq!(recent.values[11], -3.0);
    }

    struct Oracle<'a>(&'a PanelData);

    impl CellPredictor for Oracle<'_> {
        fn tag(&self) -> String {
            "oracle".into()
        }
        fn predict(&self, train: &PanelData, cells: &[usize], _: usize) -> Result<FoldPrediction> {
            assert!(cells.iter().all(|&j| !train.is_observed(j)));
            let point: Vec<f64> = cells.iter().map(|&j| self.0.values()[j]).collect();
            Ok(FoldPrediction { interval: Some(point.iter().map(|&v| (v, v)).collect()), point })
        }
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let panel = one_population_panel(12);
        let folds = make_folds(&panel, 4, 3, FoldStrategy::Cell).unwrap();
        let r = run_cv(&panel, &Oracle(&panel), &folds);
        assert_eq!(r.cv_mse, 0.0);
        assert_eq!(r.coverage95, Some(1.0));
        assert_eq!(r.folds.len(), 4);
    }

    struct Failing;

    impl CellPredictor for Failing {
        fn tag(&self) -> String {
            "failing".into()
        }
        fn predict(&self, _: &PanelData, cells: &[usize], fold: usize) -> Result<FoldPrediction> {
            if fold == 1 {
                Err(Error::NotPositiveDefinite)
            } else {
                Ok(FoldPrediction { point: vec![-2.0; cells.len()], interval: None })
            }
        }
    }

    #[test]
    fn failed_folds_are_reported() {
        let panel = one_population_panel(6);
        let folds = make_folds(&panel, 3, 1, FoldStrategy::Cell).unwrap();
        let r = run_cv(&panel, &Failing, &folds);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].fold, 1);
        assert_eq!(r.failures[0].class, "NotPositiveDefinite");
        assert_eq!(r.folds.len(), 2);
        assert_eq!(r.cv_mse, 0.0);
        assert!(!r.is_complete());
    }

    #[test]
    fn pooled_mse_is_weighted_fold_mean() {
        let panel = one_population_panel(11);
        let folds = make_folds(&panel, 3, 8, FoldStrategy::Cell).unwrap();
        let r = run_cv(&panel, &BaselinePredictor { window: None }, &folds);
        let weighted: f64 = r.folds.iter().map(|f| f.mse * f.n as f64).sum::<f64>() / 11.0;
        assert!((r.cv_mse - weighted).abs() < 1e-14);
        assert_eq!(r.coverage95, None);
    }
}
