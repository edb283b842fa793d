//! Run configuration: a TOML file with sections, overlaid by `--set key=value`
//! pairs and then by named flags.

use std::path::{Path, PathBuf};

use kpgmrf::eval::FoldStrategy;
use kpgmrf::impute::{ChangeThresholds, GibbsConfig};
use kpgmrf::panel::LoadOptions;
use kpgmrf::posterior::{FitConfig, Parameterization, SamplerConfig};
use kpgmrf::{Error, ModelVariant, PriorSpec, Result, YearWindow};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerSection,
    pub predict: PredictConfig,
    pub contrast: ContrastConfig,
    pub cv: CvConfig,
    pub sensitivity: SensitivityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub observations: Option<PathBuf>,
    pub countries: Option<PathBuf>,
    pub first_year: i32,
    pub last_year: i32,
    /// Prevalence column is in percent.
    pub percent: bool,
    pub duplicate_tolerance: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let w = YearWindow::default();
        DataConfig {
            observations: None,
            countries: None,
            first_year: w.first,
            last_year: w.last,
            percent: false,
            duplicate_tolerance: LoadOptions::default().duplicate_tolerance,
        }
    }
}

impl DataConfig {
    pub fn window(&self) -> Result<YearWindow> {
        YearWindow::new(self.first_year, self.last_year)
    }

    pub fn load_options(&self) -> Result<LoadOptions> {
        Ok(LoadOptions { window: self.window()?, percent: self.percent, duplicate_tolerance: self.duplicate_tolerance })
    }

    pub fn observations(&self) -> Result<&Path> {
        self.observations
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("data.observations is not set (use --observations)".into()))
    }

    pub fn countries(&self) -> Result<&Path> {
        self.countries
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("data.countries is not set (use --countries)".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `family:scale`, e.g. `laplace:0.1`.
    pub prior: String,
    pub variant: String,
    pub parameterization: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            prior: PriorSpec::default().to_string(),
            variant: ModelVariant::Full.to_string(),
            parameterization: "scaled".into(),
        }
    }
}

impl ModelConfig {
    pub fn prior(&self) -> Result<PriorSpec> {
        self.prior.parse()
    }

    pub fn variant(&self) -> Result<ModelVariant> {
        self.variant.parse()
    }

    pub fn parameterization(&self) -> Result<Parameterization> {
        self.parameterization.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub thin: usize,
    pub joint: bool,
    pub joint_steps: usize,
    pub init_jitter: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            chains: s.chains,
            warmup: s.warmup,
            draws: s.draws,
            thin: s.thin,
            joint: s.joint,
            joint_steps: s.joint_steps,
            init_jitter: FitConfig::default().init_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Use every n-th posterior draw.
    pub draw_thin: usize,
    pub sweeps: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { draw_thin: 1, sweeps: GibbsConfig::default().sweeps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub from: Option<i32>,
    pub to: Option<i32>,
    pub ratio_up: f64,
    pub ratio_down: f64,
    pub prob: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        let t = ChangeThresholds::default();
        ContrastConfig { from: None, to: None, ratio_up: t.up, ratio_down: t.down, prob: t.prob }
    }
}

impl ContrastConfig {
    pub fn thresholds(&self) -> Result<ChangeThresholds> {
        let t = ChangeThresholds { up: self.ratio_up, down: self.ratio_down, prob: self.prob };
        t.validate()?;
        Ok(t)
    }

    /// Contrast years, defaulting to the ends of `window`.
    pub fn years(&self, window: YearWindow) -> (i32, i32) {
        (self.from.unwrap_or(window.first), self.to.unwrap_or(window.last))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub strategy: String,
    /// `first-last` year range for the baseline medians; full window when unset.
    pub baseline_window: Option<String>,
    pub predict_thin: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { folds: 5, strategy: FoldStrategy::Cell.to_string(), baseline_window: None, predict_thin: 1 }
    }
}

impl CvConfig {
    pub fn strategy(&self) -> Result<FoldStrategy> {
        self.strategy.parse()
    }

    pub fn baseline_window(&self) -> Result<Option<YearWindow>> {
        let Some(s) = &self.baseline_window else { return Ok(None) };
        let bad = || Error::InvalidConfig(format!("cv.baseline_window `{s}` is not of the form 2017-2021"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        YearWindow::new(first, last).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub priors: Vec<String>,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        SensitivityConfig { priors: vec!["laplace:0.1".into(), "laplace:0.5".into(), "normal:0.1".into()] }
    }
}

impl SensitivityConfig {
    pub fn priors(&self) -> Result<Vec<PriorSpec>> {
        self.priors.iter().map(|p| p.parse()).collect()
    }
}

impl Config {
    /// Fit settings with the sampler seeded by `seed`.
    pub fn fit_config(&self, seed: u64) -> Result<FitConfig> {
        let s = &self.sampler;
        let sampler = SamplerConfig {
            chains: s.chains,
            warmup: s.warmup,
            draws: s.draws,
            thin: s.thin,
            seed,
            joint: s.joint,
            joint_steps: s.joint_steps,
        };
        sampler.validate()?;
        Ok(FitConfig {
            sampler,
            variant: self.model.variant()?,
            init_jitter: s.init_jitter,
            parameterization: self.model.parameterization()?,
            ..FitConfig::default()
        })
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn insert(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::InvalidConfig(format!("empty key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Ordered overrides applied on top of the config file.
#[derive(Debug, Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set<V: Into<Value>>(&mut self, key: &str, value: Option<V>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.into()));
        }
    }

    pub fn path(&mut self, key: &str, value: &Option<PathBuf>) {
        self.set(key, value.as_ref().map(|p| p.to_string_lossy().into_owned()));
    }

    pub fn parse_assignment(&mut self, raw: &str) -> Result<()> {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects key=value, got `{raw}`")))?;
        self.0.push((k.trim().to_string(), parse_value(v.trim())));
        Ok(())
    }
}

/// Reads the config file (if any) and applies `overrides` in order.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Config> {
    let mut table = match file {
        Some(path) => {
            let text = crate::manifest::read_input(path)?;
            text.parse::<Table>()
                .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))?
        }
        None => Table::new(),
    };
    for (k, v) in &overrides.0 {
        insert(&mut table, k, v.clone())?;
    }
    Value::Table(table).try_into::<Config>().map_err(|e| Error::InvalidConfig(e.message().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(resolve(None, &Overrides::default()).unwrap(), Config::default());
    }

    #[test]
    fn later_overrides_win() {
        let mut o = Overrides::default();
        o.parse_assignment("sampler.chains=3").unwrap();
        o.parse_assignment("model.prior=laplace:0.5").unwrap();
        o.set("sampler.chains", Some(4i64));
        let c = resolve(None, &o).unwrap();
        assert_eq!(c.sampler.chains, 4);
        assert_eq!(c.model.prior().unwrap(), PriorSpec::laplace(0.5));
    }

    #[test]
    fn file_sections_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 7\n[sampler]\ndraws = 20\n[cv]\nbaseline_window = \"2017-2021\"\n").unwrap();
        let c = resolve(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.sampler.draws, 20);
        assert_eq!(c.cv.baseline_window().unwrap(), Some(YearWindow::new(2017, 2021).unwrap()));

        std::fs::write(&p, "[sampler]\nchain = 2\n").unwrap();
        assert!(matches!(resolve(Some(&p), &Overrides::default()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut o = Overrides::default();
        o.parse_assignment("model.variant=no_space").unwrap();
        assert!(resolve(None, &o).unwrap().model.variant().is_err());
        let mut o = Overrides::default();
        o.parse_assignment("sampler=3").unwrap();
        o.parse_assignment("sampler.chains=3").unwrap();
        assert!(resolve(None, &o).is_err());
    }
}
