//! Panel index space and observation ingestion.
//!
//! The flat layout is country-major: each country owns a contiguous block of
//! `3 * n_years` cells, split into one run of `n_years` cells per population
//! in the fixed order MSM, FSW, PWID, with years ascending inside each run.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_POPULATIONS: usize = 3;
pub const N_REGIONS: usize = 7;

pub const OBSERVATION_HEADER: [&str; 4] = ["country", "population", "year", "prevalence"];
pub const COUNTRY_HEADER: [&str; 2] = ["country", "region"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PopulationCode {
    Msm,
    Fsw,
    Pwid,
}

impl PopulationCode {
    pub const ALL: [PopulationCode; N_POPULATIONS] =
        [PopulationCode::Msm, PopulationCode::Fsw, PopulationCode::Pwid];

    /// Zero-based position in every block layout.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            PopulationCode::Msm => "MSM",
            PopulationCode::Fsw => "FSW",
            PopulationCode::Pwid => "PWID",
        }
    }
}

impl fmt::Display for PopulationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PopulationCode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MSM" => Ok(PopulationCode::Msm),
            "FSW" => Ok(PopulationCode::Fsw),
            "PWID" => Ok(PopulationCode::Pwid),
            other => Err(format!("unknown population `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionCode {
    #[serde(rename = "ESA")]
    EasternSouthernAfrica,
    #[serde(rename = "WCA")]
    WesternCentralAfrica,
    #[serde(rename = "MENA")]
    MiddleEastNorthAfrica,
    #[serde(rename = "AP")]
    AsiaPacific,
    #[serde(rename = "EECA")]
    EasternEuropeCentralAsia,
    #[serde(rename = "WCENA")]
    WesternCentralEuropeNorthAmerica,
    #[serde(rename = "LAC")]
    LatinAmericaCaribbean,
}

impl RegionCode {
    pub const ALL: [RegionCode; N_REGIONS] = [
        RegionCode::EasternSouthernAfrica,
        RegionCode::WesternCentralAfrica,
        RegionCode::MiddleEastNorthAfrica,
        RegionCode::AsiaPacific,
        RegionCode::EasternEuropeCentralAsia,
        RegionCode::WesternCentralEuropeNorthAmerica,
        RegionCode::LatinAmericaCaribbean,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(r: usize) -> Option<Self> {
        Self::ALL.get(r).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionCode::EasternSouthernAfrica => "Eastern and Southern Africa",
            RegionCode::WesternCentralAfrica => "Western and Central Africa",
            RegionCode::MiddleEastNorthAfrica => "Middle East and North Africa",
            RegionCode::AsiaPacific => "Asia and the Pacific",
            RegionCode::EasternEuropeCentralAsia => "Eastern Europe and Central Asia",
            RegionCode::WesternCentralEuropeNorthAmerica => {
                "Western and Central Europe and North America"
            }
            RegionCode::LatinAmericaCaribbean => "Latin America and the Caribbean",
        }
    }

    /// Short code used in parameter names.
    pub fn code(self) -> &'static str {
        match self {
            RegionCode::EasternSouthernAfrica => "ESA",
            RegionCode::WesternCentralAfrica => "WCA",
            RegionCode::MiddleEastNorthAfrica => "MENA",
            RegionCode::AsiaPacific => "AP",
            RegionCode::EasternEuropeCentralAsia => "EECA",
            RegionCode::WesternCentralEuropeNorthAmerica => "WCENA",
            RegionCode::LatinAmericaCaribbean => "LAC",
        }
    }
}

impl fmt::Display for RegionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegionCode {
    type Err = String;

    /// Accepts either the full region name or its short code.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        RegionCode::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s) || r.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown region `{s}`"))
    }
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearWindow {
    pub first: i32,
    pub last: i32,
}

impl Default for YearWindow {
    fn default() -> Self {
        YearWindow { first: 2011, last: 2021 }
    }
}

impl YearWindow {
    pub fn new(first: i32, last: i32) -> Result<Self> {
        if last < first {
            return Err(Error::InvalidConfig(format!(
                "year window {first}..={last} is empty"
            )));
        }
        Ok(YearWindow { first, last })
    }

    pub fn n_years(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.first..=self.last).contains(&year)
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.contains(year).then(|| (year - self.first) as usize)
    }

    pub fn year_at(&self, t: usize) -> i32 {
        self.first + t as i32
    }
}

/// Human-readable coordinate of a cell. `country` is one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub country: usize,
    pub population: PopulationCode,
    pub year: i32,
}

/// Index arithmetic for a panel of `n_countries` countries over `window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelLayout {
    pub n_countries: usize,
    pub window: YearWindow,
}

impl PanelLayout {
    pub fn new(n_countries: usize, window: YearWindow) -> Self {
        PanelLayout { n_countries, window }
    }

    pub fn n_years(&self) -> usize {
        self.window.n_years()
    }

    /// Cells per country block.
    pub fn block_len(&self) -> usize {
        N_POPULATIONS * self.n_years()
    }

    pub fn len(&self) -> usize {
        self.n_countries * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zero-based offset of `(country0, k, t)` with zero-based country and year index.
    pub fn offset(&self, country0: usize, population: PopulationCode, t: usize) -> usize {
        country0 * self.block_len() + population.index() * self.n_years() + t
    }

    /// Offset within a country block.
    pub fn local_offset(&self, population: PopulationCode, t: usize) -> usize {
        population.index() * self.n_years() + t
    }

    /// One-based flat position of a cell.
    pub fn flat_index(&self, cell: CellIndex) -> Result<usize> {
        if cell.country == 0 || cell.country > self.n_countries {
            return Err(Error::IndexOutOfRange(format!(
                "country {} not in 1..={}",
                cell.country, self.n_countries
            )));
        }
        let t = self.window.year_index(cell.year).ok_or_else(|| {
            Error::IndexOutOfRange(format!(
                "year {} not in {}..={}",
                cell.year, self.window.first, self.window.last
            ))
        })?;
        Ok(self.offset(cell.country - 1, cell.population, t) + 1)
    }

    /// Inverse of [`PanelLayout::flat_index`].
    pub fn unflat_index(&self, position: usize) -> Result<CellIndex> {
        if position == 0 || position > self.len() {
            return Err(Error::IndexOutOfRange(format!(
                "flat position {position} not in 1..={}",
                self.len()
            )));
        }
        let (country0, k, t) = self.decompose(position - 1);
        Ok(CellIndex {
            country: country0 + 1,
            population: k,
            year: self.window.year_at(t),
        })
    }

    /// Splits a zero-based offset into (country0, population, year index).
    pub fn decompose(&self, offset: usize) -> (usize, PopulationCode, usize) {
        let ny = self.n_years();
        let country0 = offset / self.block_len();
        let local = offset % self.block_len();
        let k = PopulationCode::from_index(local / ny).expect("population index");
        (country0, k, local % ny)
    }
}

/// One-based flat position of `cell` in the default 2011–2021 layout.
pub fn flat_index(cell: CellIndex, n_countries: usize) -> Result<usize> {
    PanelLayout::new(n_countries, YearWindow::default()).flat_index(cell)
}

pub fn unflat_index(position: usize, n_countries: usize) -> Result<CellIndex> {
    PanelLayout::new(n_countries, YearWindow::default()).unflat_index(position)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub country_code: String,
    pub population: PopulationCode,
    pub year: i32,
    pub prevalence: f64,
}

/// Ordered country universe with region membership.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CountryTable {
    pub codes: Vec<String>,
    pub regions: Vec<RegionCode>,
}

impl CountryTable {
    pub fn new(entries: Vec<(String, RegionCode)>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, (code, _)) in entries.iter().enumerate() {
            if seen.insert(code.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "country `{code}` listed twice in country table"
                )));
            }
        }
        let (codes, regions) = entries.into_iter().unzip();
        Ok(CountryTable { codes, regions })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn position(&self, code: &str) -> Option<usize> {
        self.codes.iter().position(|c| c == code)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_header(rdr.headers()?, &COUNTRY_HEADER)?;
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = line_of(&rec);
            if rec.len() != 2 {
                return Err(Error::MalformedRow {
                    line,
                    message: format!("expected 2 fields, found {}", rec.len()),
                });
            }
            let code = rec[0].to_string();
            if code.is_empty() {
                return Err(Error::MalformedRow { line, message: "empty country code".into() });
            }
            let region = rec[1]
                .parse::<RegionCode>()
                .map_err(|message| Error::MalformedRow { line, message })?;
            entries.push((code, region));
        }
        CountryTable::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(COUNTRY_HEADER)?;
        for (code, region) in self.codes.iter().zip(&self.regions) {
            w.write_record([code.as_str(), region.name()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub window: YearWindow,
    /// Input prevalence is in percent (0–100) rather than a proportion.
    pub percent: bool,
    /// Largest log-scale spread tolerated among duplicate rows for one cell.
    pub duplicate_tolerance: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { window: YearWindow::default(), percent: false, duplicate_tolerance: 1e-12 }
    }
}

/// Log-prevalence panel with an observed mask. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    layout: PanelLayout,
    countries: Vec<String>,
    regions: Vec<RegionCode>,
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl PanelData {
    /// Builds a panel from a country table and a sparse map of observed log values.
    pub fn from_observed(
        table: &CountryTable,
        window: YearWindow,
        observed_values: impl IntoIterator<Item = (usize, f64)>,
    ) -> Result<Self> {
        let layout = PanelLayout::new(table.len(), window);
        let mut values = vec![f64::NAN; layout.len()];
        let mut observed = vec![false; layout.len()];
        for (offset, v) in observed_values {
            if offset >= layout.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "offset {offset} beyond panel of {} cells",
                    layout.len()
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("non-finite value at offset {offset}")));
            }
            values[offset] = v;
            observed[offset] = true;
        }
        Ok(PanelData {
            layout,
            countries: table.codes.clone(),
            regions: table.regions.clone(),
            values,
            observed,
        })
    }

    pub fn layout(&self) -> PanelLayout {
        self.layout
    }

    pub fn window(&self) -> YearWindow {
        self.layout.window
    }

    pub fn n_countries(&self) -> usize {
        self.layout.n_countries
    }

    pub fn n_years(&self) -> usize {
        self.layout.n_years()
    }

    pub fn block_len(&self) -> usize {
        self.layout.block_len()
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn country_code(&self, country0: usize) -> &str {
        &self.countries[country0]
    }

    pub fn region_of(&self, country0: usize) -> RegionCode {
        self.regions[country0]
    }

    pub fn regions(&self) -> &[RegionCode] {
        &self.regions
    }

    pub fn country_table(&self) -> CountryTable {
        CountryTable { codes: self.countries.clone(), regions: self.regions.clone() }
    }

    pub fn is_observed(&self, offset: usize) -> bool {
        self.observed[offset]
    }

    pub fn value(&self, offset: usize) -> Option<f64> {
        self.observed[offset].then(|| self.values[offset])
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    /// Raw value vector; unobserved entries are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Offsets of observed cells in ascending order.
    pub fn observed_offsets(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.observed[j]).collect()
    }

    pub fn missing_offsets(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.observed[j]).collect()
    }

    /// Observed positions local to one country block, ascending.
    pub fn country_observed_local(&self, country0: usize) -> Vec<usize> {
        let base = country0 * self.block_len();
        (0..self.block_len()).filter(|&l| self.observed[base + l]).collect()
    }

    pub fn obs_count(&self, country0: usize, population: PopulationCode) -> usize {
        let start = self.layout.offset(country0, population, 0);
        self.observed[start..start + self.n_years()].iter().filter(|&&o| o).count()
    }

    /// Copy of this panel with the listed offsets marked unobserved.
    pub fn with_masked(&self, offsets: &[usize]) -> PanelData {
        let mut out = self.clone();
        for &j in offsets {
            out.observed[j] = false;
            out.values[j] = f64::NAN;
        }
        out
    }

    /// Copy keeping only the observed cells of the listed countries.
    pub fn restrict_to_countries(&self, keep: &[usize]) -> PanelData {
        let mut out = self.clone();
        for c in 0..self.n_countries() {
            if keep.contains(&c) {
                continue;
            }
            let base = c * self.block_len();
            for j in base..base + self.block_len() {
                out.observed[j] = false;
                out.values[j] = f64::NAN;
            }
        }
        out
    }

    pub fn cell(&self, offset: usize) -> CellIndex {
        let (country0, population, t) = self.layout.decompose(offset);
        CellIndex { country: country0 + 1, population, year: self.window().year_at(t) }
    }

    /// Observation records on the proportion scale, in flat order.
    pub fn records(&self) -> Vec<ObservationRecord> {
        self.observed_offsets()
            .into_iter()
            .map(|j| {
                let cell = self.cell(j);
                ObservationRecord {
                    country_code: self.countries[cell.country - 1].clone(),
                    population: cell.population,
                    year: cell.year,
                    prevalence: self.values[j].exp(),
                }
            })
            .collect()
    }

    /// Writes the observed cells in the observation-file schema.
    pub fn write_observations<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(OBSERVATION_HEADER)?;
        for (line, rec) in self.records().into_iter().enumerate() {
            if !(rec.prevalence > 0.0 && rec.prevalence < 1.0) {
                return Err(Error::PrevalenceOutOfRange {
                    line: line as u64 + 2,
                    value: rec.prevalence,
                });
            }
            w.write_record([
                rec.country_code,
                rec.population.code().to_string(),
                rec.year.to_string(),
                rec.prevalence.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sparsity_profile(&self) -> SparsityProfile {
        let mut counts = [[0usize; 3]; N_POPULATIONS];
        for c in 0..self.n_countries() {
            for k in PopulationCode::ALL {
                let n = self.obs_count(c, k);
                let bin = match n {
                    0 => 0,
                    1..=4 => 1,
                    _ => 2,
                };
                counts[k.index()][bin] += 1;
            }
        }
        SparsityProfile { counts }
    }
}

/// Per population: countries with 0, 1–4 and at least 5 observed years.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SparsityProfile {
    pub counts: [[usize; 3]; N_POPULATIONS],
}

impl SparsityProfile {
    pub fn get(&self, k: PopulationCode) -> [usize; 3] {
        self.counts[k.index()]
    }
}

pub fn sparsity_profile(panel: &PanelData) -> SparsityProfile {
    panel.sparsity_profile()
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::MalformedRow {
            line: 1,
            message: format!("header {:?} does not match {:?}", got, expected),
        });
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

/// Parses observation rows and resolves them against `table`.
pub fn read_panel<R: Read>(reader: R, table: &CountryTable, opts: &LoadOptions) -> Result<PanelData> {
    let layout = PanelLayout::new(table.len(), opts.window);
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(rdr.headers()?, &OBSERVATION_HEADER)?;

    // offset -> (first line, log values seen)
    let mut cells: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != 4 {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let code = &rec[0];
        let country0 = table
            .position(code)
            .ok_or_else(|| Error::UnknownCountry { line, code: code.to_string() })?;
        let population = rec[1]
            .parse::<PopulationCode>()
            .map_err(|message| Error::MalformedRow { line, message })?;
        let year: i32 = rec[2].parse().map_err(|_| Error::MalformedRow {
            line,
            message: format!("invalid year `{}`", &rec[2]),
        })?;
        let t = opts.window.year_index(year).ok_or_else(|| Error::MalformedRow {
            line,
            message: format!(
                "year {year} outside window {}..={}",
                opts.window.first, opts.window.last
            ),
        })?;
        let raw: f64 = rec[3].parse().map_err(|_| Error::MalformedRow {
            line,
            message: format!("invalid prevalence `{}`", &rec[3]),
        })?;
        let prevalence = if opts.percent { raw / 100.0 } else { raw };
        if !(prevalence > 0.0 && prevalence < 1.0) {
            return Err(Error::PrevalenceOutOfRange { line, value: raw });
        }
        cells.entry(layout.offset(country0, population, t)).or_default().push(prevalence.ln());
    }

    let mut resolved = Vec::with_capacity(cells.len());
    for (offset, logs) in cells {
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > opts.duplicate_tolerance {
            let (country0, k, t) = layout.decompose(offset);
            return Err(Error::DuplicateConflict {
                country: table.codes[country0].clone(),
                population: k.code().to_string(),
                year: opts.window.year_at(t),
                first: lo.exp(),
                second: hi.exp(),
            });
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        resolved.push((offset, mean));
    }
    PanelData::from_observed(table, opts.window, resolved)
}

pub fn load_panel(path: &Path, country_table: &Path, opts: &LoadOptions) -> Result<PanelData> {
    let table = CountryTable::load(country_table)?;
    read_panel(std::fs::File::open(path)?, &table, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> CountryTable {
        CountryTable::new(vec![
            ("PAN".into(), RegionCode::LatinAmericaCaribbean),
            ("THA".into(), RegionCode::AsiaPacific),
            ("CAN".into(), RegionCode::WesternCentralEuropeNorthAmerica),
        ])
        .unwrap()
    }

    fn parse(body: &str) -> Result<PanelData> {
        let text = format!("country,population,year,prevalence\n{body}");
        read_panel(text.as_bytes(), &table(), &LoadOptions::default())
    }

    #[test]
    fn flat_index_examples() {
        let cell = |country, population, year| CellIndex { country, population, year };
        assert_eq!(flat_index(cell(1, PopulationCode::Msm, 2011), 2).unwrap(), 1);
        assert_eq!(flat_index(cell(1, PopulationCode::Fsw, 2011), 2).unwrap(), 12);
        assert_eq!(flat_index(cell(2, PopulationCode::Msm, 2011), 2).unwrap(), 34);
        assert_eq!(flat_index(cell(2, PopulationCode::Pwid, 2021), 2).unwrap(), 66);
        assert!(matches!(
            flat_index(cell(3, PopulationCode::Msm, 2011), 2),
            Err(Error::IndexOutOfRange(_))
        ));
        assert!(flat_index(cell(1, PopulationCode::Msm, 2022), 2).is_err());
        assert!(flat_index(cell(0, PopulationCode::Msm, 2011), 2).is_err());
    }

    #[test]
    fn flat_unflat_roundtrip_exhaustive() {
        for n in 1..=4 {
            let layout = PanelLayout::new(n, YearWindow::default());
            for pos in 1..=layout.len() {
                let cell = layout.unflat_index(pos).unwrap();
                assert_eq!(layout.flat_index(cell).unwrap(), pos);
            }
            assert!(layout.unflat_index(layout.len() + 1).is_err());
        }
    }

    #[test]
    fn log_transform_at_flat_index() {
        let p = parse("PAN,MSM,2015,0.20\n").unwrap();
        let j = p.layout().offset(0, PopulationCode::Msm, 4);
        assert!((p.value(j).unwrap() - (-1.6094379124341003)).abs() < 1e-12);
        assert_eq!(p.n_observed(), 1);
    }

    #[test]
    fn boundary_prevalence_rejected() {
        assert!(matches!(parse("PAN,MSM,2015,0.0\n"), Err(Error::PrevalenceOutOfRange { line: 2, .. })));
        assert!(matches!(parse("PAN,MSM,2015,1.0\n"), Err(Error::PrevalenceOutOfRange { .. })));
        assert!(matches!(parse("PAN,MSM,2015,-0.1\n"), Err(Error::PrevalenceOutOfRange { .. })));
    }

    #[test]
    fn duplicate_rows() {
        let p = parse("PAN,MSM,2015,0.20\nPAN,MSM,2015,0.20\n").unwrap();
        assert_eq!(p.n_observed(), 1);
        assert!(matches!(
            parse("PAN,MSM,2015,0.20\nPAN,MSM,2015,0.21\n"),
            Err(Error::DuplicateConflict { year: 2015, .. })
        ));
    }

    #[test]
    fn loose_duplicate_tolerance_averages_on_log_scale() {
        let text = "country,population,year,prevalence\nTHA,FSW,2012,0.1\nTHA,FSW,2012,0.2\n";
        let opts = LoadOptions { duplicate_tolerance: 1.0, ..Default::default() };
        let p = read_panel(text.as_bytes(), &table(), &opts).unwrap();
        let j = p.layout().offset(1, PopulationCode::Fsw, 1);
        assert!((p.value(j).unwrap() - 0.5 * (0.1f64.ln() + 0.2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(parse("XXX,MSM,2015,0.2\n"), Err(Error::UnknownCountry { line: 2, .. })));
        assert!(matches!(parse("PAN,SW,2015,0.2\n"), Err(Error::MalformedRow { line: 2, .. })));
        assert!(matches!(parse("PAN,MSM,2010,0.2\n"), Err(Error::MalformedRow { .. })));
        assert!(matches!(parse("PAN,MSM,20x5,0.2\n"), Err(Error::MalformedRow { .. })));
        assert!(matches!(
            parse("PAN,MSM,2015,0.2\nPAN,MSM,abc,0.2\n"),
            Err(Error::MalformedRow { line: 3, .. })
        ));
        let bad_header = "country,pop,year,prevalence\nPAN,MSM,2015,0.2\n";
        assert!(matches!(
            read_panel(bad_header.as_bytes(), &table(), &LoadOptions::default()),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn percent_scale() {
        let text = "country,population,year,prevalence\nCAN,PWID,2020,12.5\n";
        let opts = LoadOptions { percent: true, ..Default::default() };
        let p = read_panel(text.as_bytes(), &table(), &opts).unwrap();
        let j = p.layout().offset(2, PopulationCode::Pwid, 9);
        assert!((p.value(j).unwrap() - 0.125f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn observed_values_negative() {
        let p = parse("PAN,MSM,2015,0.999\nTHA,PWID,2011,1e-6\n").unwrap();
        for j in p.observed_offsets() {
            assert!(p.value(j).unwrap() < 0.0);
        }
    }

    #[test]
    fn sparsity_profiles() {
        let empty = PanelData::from_observed(&table(), YearWindow::default(), []).unwrap();
        for k in PopulationCode::ALL {
            assert_eq!(empty.sparsity_profile().get(k), [3, 0, 0]);
        }
        let layout = empty.layout();
        let full = PanelData::from_observed(
            &table(),
            YearWindow::default(),
            (0..layout.len()).map(|j| (j, -2.0)),
        )
        .unwrap();
        for k in PopulationCode::ALL {
            assert_eq!(full.sparsity_profile().get(k), [0, 0, 3]);
        }
        let p = parse("PAN,MSM,2011,0.1\nPAN,MSM,2012,0.1\nTHA,MSM,2011,0.1\nTHA,MSM,2012,0.1\nTHA,MSM,2013,0.1\nTHA,MSM,2014,0.1\nTHA,MSM,2015,0.1\n").unwrap();
        assert_eq!(p.sparsity_profile().get(PopulationCode::Msm), [1, 1, 1]);
        assert_eq!(p.sparsity_profile().get(PopulationCode::Fsw), [3, 0, 0]);
    }

    #[test]
    fn export_reingest_roundtrip() {
        let p = parse("PAN,MSM,2015,0.2\nTHA,FSW,2011,0.03\nCAN,PWID,2021,0.0012345\n").unwrap();
        let mut buf = Vec::new();
        p.write_observations(&mut buf).unwrap();
        let q = read_panel(buf.as_slice(), &table(), &LoadOptions::default()).unwrap();
        assert_eq!(p.observed_mask(), q.observed_mask());
        for j in p.observed_offsets() {
            assert!((p.value(j).unwrap() - q.value(j).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn country_table_parses_names_and_codes() {
        let text = "country,region\nPAN,Latin America and the Caribbean\nKEN,ESA\n";
        let t = CountryTable::read(text.as_bytes()).unwrap();
        assert_eq!(t.regions, vec![RegionCode::LatinAmericaCaribbean, RegionCode::EasternSouthernAfrica]);
        let dup = "country,region\nPAN,LAC\nPAN,LAC\n";
        assert!(CountryTable::read(dup.as_bytes()).is_err());
        let bad = "country,region\nPAN,Atlantis\n";
        assert!(matches!(CountryTable::read(bad.as_bytes()), Err(Error::MalformedRow { line: 2, .. })));
    }
}
