use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use kpgmrf::eval::{
    make_folds, prior_sensitivity, run_cv, write_eval_report, BaselinePredictor, EvalResult,
    FoldAssignment, ModelPredictor,
};
use kpgmrf::impute::{
    change_contrast, estimate_rows, posterior_cells, write_changes, write_estimates, CellPosterior, GibbsConfig,
};
use kpgmrf::panel::{read_panel, CountryTable, LoadOptions};
use kpgmrf::posterior::{
    correlation_posterior, diagnostics, sample_posterior, write_correlations, DiagnosticsReport, PosteriorDraws,
};
use kpgmrf::simulate::{simulate_panel, write_truth, ScenarioSpec};
use kpgmrf::{Error, FitConfig, ModelVariant, PanelData, PopulationCode, Result};
use serde_json::json;

use crate::config::Config;
use crate::manifest::{digest_file, open_input, read_input, read_manifest, RunManifest, Staging, MANIFEST_FILE};

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const COUNTRIES_FILE: &str = "countries.csv";
pub const DRAWS_FILE: &str = "draws.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const RHAT_WARN: f64 = 1.01;

/// Everything a subcommand needs besides its own inputs.
pub struct Ctx {
    pub config: Config,
    pub seed: u64,
    /// The seed came from `--seed` or the config file rather than being sampled.
    pub seed_given: bool,
    pub threads: usize,
    pub out: PathBuf,
    pub started: u64,
}

impl Ctx {
    fn manifest(&self, subcommand: &str, seeds: &[(&str, u64)], inputs: BTreeMap<String, String>) -> RunManifest {
        RunManifest {
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            inputs,
            outputs: Vec::new(),
            threads: self.threads,
            started_unix: self.started,
            finished_unix: 0,
            warnings: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }
}

fn key(path: &Path) -> String {
    path.display().to_string()
}

fn load_panel_files(obs: &Path, countries: &Path, opts: &LoadOptions) -> Result<(PanelData, BTreeMap<String, String>)> {
    let mut inputs = BTreeMap::new();
    inputs.insert(key(countries), digest_file(countries)?);
    inputs.insert(key(obs), digest_file(obs)?);
    let table = CountryTable::read(open_input(countries)?)?;
    let panel = read_panel(open_input(obs)?, &table, opts)?;
    Ok((panel, inputs))
}

fn load_data(config: &Config) -> Result<(PanelData, BTreeMap<String, String>)> {
    let d = &config.data;
    load_panel_files(d.observations()?, d.countries()?, &d.load_options()?)
}

fn stage_panel(st: &mut Staging, panel: &PanelData) -> Result<()> {
    st.write(OBSERVATIONS_FILE, |w| panel.write_observations(w))?;
    st.write(COUNTRIES_FILE, |w| panel.country_table().write(w))
}

fn finish(st: Staging, manifest: RunManifest, out: &Path) -> Result<()> {
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    st.commit(manifest)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let (panel, inputs) = load_data(&ctx.config)?;
    let profile = panel.sparsity_profile();
    let mut st = Staging::new(&ctx.out)?;
    stage_panel(&mut st, &panel)?;
    st.write("sparsity.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["population", "countries_none", "countries_1_4", "countries_5_plus"])?;
        for k in PopulationCode::ALL {
            let [a, b, d] = profile.get(k);
            c.write_record([k.code().to_string(), a.to_string(), b.to_string(), d.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let mut m = ctx.manifest("ingest", &[], inputs);
    m.summary = json!({ "countries": panel.n_countries(), "observed_cells": panel.n_observed(), "cells": panel.len() });
    println!("{} countries, {} observed of {} cells", panel.n_countries(), panel.n_observed(), panel.len());
    finish(st, m, &ctx.out)
}

pub fn simulate(ctx: &Ctx, scenario: &Path) -> Result<()> {
    let text = read_input(scenario)?;
    let table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{}: {}", scenario.display(), e.message())))?;
    let has_seed = table.contains_key("seed");
    let mut spec: ScenarioSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{}: {}", scenario.display(), e.message())))?;
    if ctx.seed_given || !has_seed {
        spec.seed = ctx.seed;
    }
    let (panel, truth) = simulate_panel(&spec)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(key(scenario), digest_file(scenario)?);

    let mut st = Staging::new(&ctx.out)?;
    stage_panel(&mut st, &panel)?;
    st.write("truth.csv", |w| write_truth(&panel, &truth, w))?;
    st.write("scenario.toml", |w| {
        let s = toml::to_string(&spec).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(w.write_all(s.as_bytes())?)
    })?;
    let mut m = ctx.manifest("simulate", &[("seed", spec.seed)], inputs);
    m.config.seed = Some(spec.seed);
    m.summary = json!({ "countries": panel.n_countries(), "observed_cells": panel.n_observed() });
    println!("simulated {} countries, {} observed cells", panel.n_countries(), panel.n_observed());
    finish(st, m, &ctx.out)
}

fn write_diagnostics<W: Write>(report: &DiagnosticsReport, w: W) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["param", "rhat", "n_eff", "zero_variance", "flagged"])?;
    for p in &report.params {
        let flagged = !p.zero_variance && !(p.rhat <= RHAT_WARN);
        c.write_record([p.name.clone(), p.rhat.to_string(), p.n_eff.to_string(), p.zero_variance.to_string(), flagged.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

fn diagnostics_summary(report: &DiagnosticsReport) -> serde_json::Value {
    let (med, min, max) = report.n_eff_summary();
    json!({
        "max_rhat": report.max_rhat(),
        "n_eff_median": med,
        "n_eff_min": min,
        "n_eff_max": max,
        "chains": report.n_chains,
        "draws_per_chain": report.draws_per_chain,
    })
}

fn rhat_warning(report: &DiagnosticsReport) -> Option<String> {
    let flagged = report.flagged(RHAT_WARN);
    (!flagged.is_empty()).then(|| format!("R-hat above {RHAT_WARN} for {}", flagged.join(", ")))
}

fn print_diagnostics(report: &DiagnosticsReport) {
    let (med, min, max) = report.n_eff_summary();
    println!("max R-hat {:.4}; n_eff median {:.0}, min {:.0}, max {:.0}", report.max_rhat(), med, min, max);
}

pub fn fit(ctx: &Ctx) -> Result<()> {
    let (panel, inputs) = load_data(&ctx.config)?;
    let prior = ctx.config.model.prior()?;
    let fit = ctx.config.fit_config(ctx.seed)?;
    let draws = sample_posterior(&panel, &prior, &fit)?;
    let report = diagnostics(&draws)?;

    let mut st = Staging::new(&ctx.out)?;
    st.write(DRAWS_FILE, |w| draws.write_csv(w))?;
    st.write(DIAGNOSTICS_FILE, |w| write_diagnostics(&report, w))?;
    stage_panel(&mut st, &panel)?;
    let mut m = ctx.manifest("fit", &[("seed", ctx.seed)], inputs);
    m.summary = json!({
        "prior": prior.to_string(),
        "variant": fit.variant.tag(),
        "draws": draws.len(),
        "diagnostics": diagnostics_summary(&report),
        "sampler": draws.meta,
    });
    m.warnings.extend(rhat_warning(&report));
    print_diagnostics(&report);
    finish(st, m, &ctx.out)
}

pub fn diagnose(ctx: &Ctx, path: &Path) -> Result<()> {
    let file = if path.is_dir() { path.join(DRAWS_FILE) } else { path.to_path_buf() };
    if path.is_dir() && !file.exists() {
        return Err(Error::MissingArtifact(file.display().to_string()));
    }
    let mut inputs = BTreeMap::new();
    inputs.insert(key(&file), digest_file(&file)?);
    let draws = PosteriorDraws::read_csv(open_input(&file)?)?;
    let report = diagnostics(&draws)?;
    let mut st = Staging::new(&ctx.out)?;
    st.write(DIAGNOSTICS_FILE, |w| write_diagnostics(&report, w))?;
    let mut m = ctx.manifest("diagnose", &[], inputs);
    m.summary = diagnostics_summary(&report);
    m.warnings.extend(rhat_warning(&report));
    print_diagnostics(&report);
    finish(st, m, &ctx.out)
}

/// Artifacts of a previous `fit` run.
struct FitDir {
    manifest: RunManifest,
    draws: PosteriorDraws,
    panel: PanelData,
    inputs: BTreeMap<String, String>,
}

fn load_fit(dir: &Path) -> Result<FitDir> {
    for name in [MANIFEST_FILE, DRAWS_FILE, OBSERVATIONS_FILE, COUNTRIES_FILE] {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
    }
    let manifest = read_manifest(dir)?;
    if manifest.subcommand != "fit" {
        return Err(Error::MissingArtifact(format!("{} was written by `{}`, not `fit`", dir.display(), manifest.subcommand)));
    }
    let opts = LoadOptions { window: manifest.config.data.window()?, ..LoadOptions::default() };
    let (panel, mut inputs) = load_panel_files(&dir.join(OBSERVATIONS_FILE), &dir.join(COUNTRIES_FILE), &opts)?;
    let draws_path = dir.join(DRAWS_FILE);
    inputs.insert(key(&draws_path), digest_file(&draws_path)?);
    let mp = dir.join(MANIFEST_FILE);
    inputs.insert(key(&mp), digest_file(&mp)?);
    let draws = PosteriorDraws::read_csv(open_input(&draws_path)?)?;
    Ok(FitDir { manifest, draws, panel, inputs })
}

fn selected_draws(config: &Config, draws: &PosteriorDraws) -> Result<Vec<usize>> {
    if config.predict.draw_thin == 0 {
        return Err(Error::InvalidConfig("predict.draw_thin must be positive".into()));
    }
    Ok(draws.thinned_indices(config.predict.draw_thin))
}

fn cell_draws(ctx: &Ctx, fit: &FitDir) -> Result<CellPosterior> {
    let ids = selected_draws(&ctx.config, &fit.draws)?;
    let gibbs = GibbsConfig { sweeps: ctx.config.predict.sweeps };
    posterior_cells(&fit.draws, &fit.panel, &ids, &gibbs, ctx.seed)
}

fn fit_seeds(ctx: &Ctx, fit: &FitDir) -> Vec<(&'static str, u64)> {
    let mut seeds = vec![("seed", ctx.seed)];
    seeds.extend(fit.manifest.seeds.get("seed").map(|s| ("fit_seed", *s)));
    seeds
}

pub fn predict(ctx: &Ctx, fit_dir: &Path) -> Result<()> {
    let fit = load_fit(fit_dir)?;
    let cells = cell_draws(ctx, &fit)?;
    let mut st = Staging::new(&ctx.out)?;
    st.write(kpgmrf::impute::ESTIMATES_FILE, |w| write_estimates(&estimate_rows(&cells), w))?;
    let mut m = ctx.manifest("predict", &fit_seeds(ctx, &fit), fit.inputs.clone());
    m.summary = json!({ "cells": cells.len(), "draws": cells.n_draws() });
    finish(st, m, &ctx.out)
}

pub fn contrast(ctx: &Ctx, fit_dir: &Path) -> Result<()> {
    let fit = load_fit(fit_dir)?;
    let thresholds = ctx.config.contrast.thresholds()?;
    let (a, b) = ctx.config.contrast.years(fit.panel.window());
    let cells = cell_draws(ctx, &fit)?;
    let changes = change_contrast(&cells, a, b, &thresholds)?;
    let mut st = Staging::new(&ctx.out)?;
    st.write(kpgmrf::impute::CHANGES_FILE, |w| write_changes(&changes, &thresholds, w))?;
    let mut m = ctx.manifest("contrast", &fit_seeds(ctx, &fit), fit.inputs.clone());
    m.summary = json!({ "from": a, "to": b, "series": changes.len() });
    finish(st, m, &ctx.out)
}

pub fn report(ctx: &Ctx, fit_dir: &Path) -> Result<()> {
    let fit = load_fit(fit_dir)?;
    let thresholds = ctx.config.contrast.thresholds()?;
    let (a, b) = ctx.config.contrast.years(fit.panel.window());
    let ids = selected_draws(&ctx.config, &fit.draws)?;
    let corr = correlation_posterior(&fit.draws, &ids, fit.panel.n_years())?;
    let cells = cell_draws(ctx, &fit)?;
    let changes = change_contrast(&cells, a, b, &thresholds)?;

    let mut st = Staging::new(&ctx.out)?;
    st.write(kpgmrf::impute::ESTIMATES_FILE, |w| write_estimates(&estimate_rows(&cells), w))?;
    st.write(kpgmrf::impute::CHANGES_FILE, |w| write_changes(&changes, &thresholds, w))?;
    st.write(CORRELATIONS_FILE, |w| write_correlations(&corr, w))?;
    let mut m = ctx.manifest("report", &fit_seeds(ctx, &fit), fit.inputs.clone());
    let mut classes = BTreeMap::<&str, usize>::new();
    for c in &changes {
        *classes.entry(c.class.as_str()).or_default() += 1;
    }
    m.summary = json!({ "from": a, "to": b, "cells": cells.len(), "change_classes": classes, "correlations": corr });
    for r in &corr {
        println!("{:8} {:4} {:4} {:.4} ({:.4}, {:.4})", r.kind, r.a, r.b, r.mean, r.q025, r.q975);
    }
    finish(st, m, &ctx.out)
}

fn folds_for(ctx: &Ctx, panel: &PanelData) -> Result<FoldAssignment> {
    make_folds(panel, ctx.config.cv.folds, ctx.seed, ctx.config.cv.strategy()?)
}

fn write_folds<W: Write>(panel: &PanelData, folds: &FoldAssignment, w: W) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["country", "population", "year", "fold"])?;
    for (&j, &f) in folds.cells.iter().zip(&folds.fold) {
        let cell = panel.cell(j);
        c.write_record([
            panel.country_code(cell.country - 1).to_string(),
            cell.population.code().to_string(),
            cell.year.to_string(),
            f.to_string(),
        ])?;
    }
    c.flush()?;
    Ok(())
}

fn eval_summary(results: &[EvalResult]) -> serde_json::Value {
    results
        .iter()
        .map(|r| {
            (
                r.tag.clone(),
                json!({ "cv_mse": r.cv_mse, "coverage95": r.coverage95, "failed_folds": r.failures.len() }),
            )
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn eval_warnings(results: &[EvalResult]) -> Vec<String> {
    results
        .iter()
        .flat_map(|r| r.failures.iter().map(move |f| format!("{} fold {} failed: {} ({})", r.tag, f.fold, f.class, f.message)))
        .collect()
}

fn print_eval(results: &[EvalResult]) {
    for r in results {
        match r.coverage95 {
            Some(c) => println!("{:14} cv_mse {:.4}  coverage95 {:.4}", r.tag, r.cv_mse, c),
            None => println!("{:14} cv_mse {:.4}", r.tag, r.cv_mse),
        }
    }
}

fn run_evaluation(ctx: &Ctx, subcommand: &str, file: &str, variants: &[ModelVariant]) -> Result<()> {
    let (panel, inputs) = load_data(&ctx.config)?;
    let prior = ctx.config.model.prior()?;
    let fit = ctx.config.fit_config(ctx.seed)?;
    let folds = folds_for(ctx, &panel)?;
    let baseline = BaselinePredictor { window: ctx.config.cv.baseline_window()? };
    let mut results = vec![run_cv(&panel, &baseline, &folds)];
    if ctx.config.cv.predict_thin == 0 {
        return Err(Error::InvalidConfig("cv.predict_thin must be positive".into()));
    }
    for &variant in variants {
        let predictor = ModelPredictor {
            prior,
            fit: FitConfig { variant, ..fit.clone() },
            predict_thin: ctx.config.cv.predict_thin,
        };
        results.push(run_cv(&panel, &predictor, &folds));
    }

    let mut st = Staging::new(&ctx.out)?;
    st.write(file, |w| write_eval_report(&results, w))?;
    st.write("folds.csv", |w| write_folds(&panel, &folds, w))?;
    let mut m = ctx.manifest(subcommand, &[("seed", ctx.seed)], inputs);
    m.summary = json!({ "fold_sizes": folds.sizes(), "results": eval_summary(&results) });
    m.warnings = eval_warnings(&results);
    print_eval(&results);
    finish(st, m, &ctx.out)
}

pub fn cv(ctx: &Ctx) -> Result<()> {
    let variant = ctx.config.model.variant()?;
    run_evaluation(ctx, "cv", "cv.csv", &[variant])
}

pub fn ablate(ctx: &Ctx) -> Result<()> {
    let mut variants = vec![ModelVariant::Full];
    variants.extend(ModelVariant::ABLATIONS);
    run_evaluation(ctx, "ablate", "ablation.csv", &variants)
}

pub fn sensitivity(ctx: &Ctx) -> Result<()> {
    let (panel, inputs) = load_data(&ctx.config)?;
    let priors = ctx.config.sensitivity.priors()?;
    let fit = ctx.config.fit_config(ctx.seed)?;
    let folds = folds_for(ctx, &panel)?;
    let rows = prior_sensitivity(&panel, &priors, &folds, &fit)?;

    let mut st = Staging::new(&ctx.out)?;
    st.write("sensitivity.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        let mut header = vec!["prior".to_string()];
        for prefix in ["corr", "rho"] {
            header.extend(kpgmrf::gmrf::POPULATION_PAIRS.iter().map(|(a, b)| format!("{prefix}_{a}_{b}")));
        }
        header.extend(["cv_mse", "coverage95", "failed_folds"].map(String::from));
        c.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![r.prior.to_string()];
            rec.extend(r.cross_corr_mean.iter().chain(&r.rho_mean).map(|v| v.to_string()));
            rec.push(r.eval.cv_mse.to_string());
            rec.push(r.eval.coverage95.map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.eval.failures.len().to_string());
            c.write_record(&rec)?;
        }
        c.flush()?;
        Ok(())
    })?;
    let evals: Vec<EvalResult> = rows.iter().map(|r| EvalResult { tag: r.prior.to_string(), ..r.eval.clone() }).collect();
    let mut m = ctx.manifest("sensitivity", &[("seed", ctx.seed)], inputs);
    m.summary = json!({ "results": eval_summary(&evals) });
    m.warnings = eval_warnings(&evals);
    print_eval(&evals);
    finish(st, m, &ctx.out)
}
