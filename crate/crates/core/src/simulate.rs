//! Synthetic panels drawn from the model's own generative law.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{build_country_covariance, country_mean, param_names, StructuralParams};
use crate::linalg::{quantile_sorted, standard_normal_vector};
use crate::panel::{CountryTable, PanelData, PopulationCode, RegionCode, YearWindow, N_POPULATIONS};
use crate::posterior::{diagnostics, sample_posterior, DiagnosticsReport, FitConfig, PriorSpec};
use crate::rng::stream;

/// Fractions of countries with 0, 1–4 and ≥5 observed years for one population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountProfile {
    pub none: f64,
    pub sparse: f64,
    pub dense: f64,
}

impl CountProfile {
    pub fn new(none: f64, sparse: f64, dense: f64) -> Self {
        CountProfile { none, sparse, dense }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.none, self.sparse, self.dense]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_countries: usize,
    /// Region of each country; cycles through the seven regions when absent.
    #[serde(default)]
    pub regions: Option<Vec<RegionCode>>,
    pub params: StructuralParams,
    /// Count-category fractions, in population order MSM, FSW, PWID.
    pub missingness: [CountProfile; N_POPULATIONS],
    #[serde(default)]
    pub window: YearWindow,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_countries == 0 {
            return Err(Error::InvalidConfig("scenario needs at least one country".into()));
        }
        if let Some(r) = &self.regions {
            if r.len() != self.n_countries {
                return Err(Error::InvalidConfig(format!(
                    "{} regions given for {} countries",
                    r.len(),
                    self.n_countries
                )));
            }
        }
        for (k, p) in self.missingness.iter().enumerate() {
            let f = p.as_array();
            if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "missingness fractions for {} must be non-negative and sum to 1",
                    PopulationCode::ALL[k]
                )));
            }
        }
        Ok(())
    }

    pub fn country_table(&self) -> CountryTable {
        let entries = (0..self.n_countries)
            .map(|i| {
                let region = match &self.regions {
                    Some(r) => r[i],
                    None => RegionCode::ALL[i % RegionCode::ALL.len()],
                };
                (format!("S{:03}", i + 1), region)
            })
            .collect();
        CountryTable::new(entries).expect("generated codes are unique")
    }
}

/// Splits `n` items into categories proportionally, rounding by largest remainder.
pub fn category_counts(fractions: [f64; 3], n: usize) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Draws a complete panel and masks it according to the scenario's profile.
///
/// Returns the masked panel and the full truth in flat layout.
pub fn simulate_panel(spec: &ScenarioSpec) -> Result<(PanelData, Vec<f64>)> {
    spec.validate()?;
    let table = spec.country_table();
    let ny = spec.window.n_years();
    let cov = build_country_covariance(&spec.params, ny)?;
    let block = N_POPULATIONS * ny;

    let mut truth = Vec::with_capacity(spec.n_countries * block);
    for c in 0..spec.n_countries {
        let mut rng = stream(spec.seed, &[0x5133, c as u64]);
        let z = standard_normal_vector(&mut rng, block);
        let y = country_mean(&spec.params, table.regions[c], ny) + &cov.chol * z;
        truth.extend(y.iter());
    }

    let mut observed = Vec::new();
    for (k, profile) in spec.missingness.iter().enumerate() {
        let mut rng = stream(spec.seed, &[0x3A5C, k as u64]);
        let counts = category_counts(profile.as_array(), spec.n_countries);
        let mut categories: Vec<usize> =
            counts.iter().enumerate().flat_map(|(cat, &n)| std::iter::repeat_n(cat, n)).collect();
        categories.shuffle(&mut rng);
        for (c, &cat) in categories.iter().enumerate() {
            let n_obs = match cat {
                0 => 0,
                1 => rng.random_range(1..=4usize).min(ny),
                _ if ny >= 5 => rng.random_range(5..=ny),
                _ => ny,
            };
            let mut years = index::sample(&mut rng, ny, n_obs).into_vec();
            years.sort_unstable();
            for t in years {
                let j = c * block + k * ny + t;
                observed.push((j, truth[j]));
            }
        }
    }
    observed.sort_by_key(|&(j, _)| j);
    let panel = PanelData::from_observed(&table, spec.window, observed)?;
    Ok((panel, truth))
}

pub const TRUTH_HEADER: [&str; 5] = ["country", "population", "year", "log_prevalence", "observed"];

/// Writes the complete simulated truth, one row per cell in flat order.
pub fn write_truth<W: Write>(panel: &PanelData, truth: &[f64], writer: W) -> Result<()> {
    if truth.len() != panel.len() {
        return Err(Error::InvalidConfig(format!("truth has {} cells, panel has {}", truth.len(), panel.len())));
    }
    let layout = panel.layout();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRUTH_HEADER)?;
    for (j, v) in truth.iter().enumerate() {
        let (c, k, t) = layout.decompose(j);
        w.write_record([
            panel.country_code(c).to_string(),
            k.code().to_string(),
            layout.window.year_at(t).to_string(),
            v.to_string(),
            panel.is_observed(j).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRecovery {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub covered: bool,
    /// Error of the posterior mean in posterior standard deviations.
    pub z: f64,
    pub free: bool,
}

#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub params: Vec<ParamRecovery>,
    pub diagnostics: DiagnosticsReport,
    pub n_observed: usize,
}

impl RecoveryReport {
    /// Fraction of free parameters whose 95% interval covers the truth.
    pub fn coverage(&self) -> f64 {
        let free: Vec<&ParamRecovery> = self.params.iter().filter(|p| p.free).collect();
        free.iter().filter(|p| p.covered).count() as f64 / free.len().max(1) as f64
    }
}

/// Simulates the scenario, fits it, and compares the posterior to the truth.
pub fn recovery_experiment(spec: &ScenarioSpec, prior: &PriorSpec, config: &FitConfig) -> Result<RecoveryReport> {
    let (panel, _) = simulate_panel(spec)?;
    let draws = sample_posterior(&panel, prior, config)?;
    let report = diagnostics(&draws)?;
    let truth = spec.params.to_vec();
    let free = config.free_mask();
    let params = param_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let mut col = draws.column(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            col.sort_by(f64::total_cmp);
            let q025 = quantile_sorted(&col, 0.025);
            let q975 = quantile_sorted(&col, 0.975);
            ParamRecovery {
                name,
                truth: truth[j],
                mean,
                sd,
                q025,
                q975,
                covered: q025 <= truth[j] && truth[j] <= q975,
                z: if sd > 0.0 { (mean - truth[j]) / sd } else { 0.0 },
                free: free[j],
            }
        })
        .collect();
    Ok(RecoveryReport { params, diagnostics: report, n_observed: panel.n_observed() })
}
