//! `kpgmrf`: ingest, simulate, fit, evaluate and report the key-population
//! prevalence model from the command line.

mod commands;
mod config;
mod manifest;

use std::hash::{BuildHasher, Hasher};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kpgmrf::{Error, Result};

use crate::commands::Ctx;
use crate::config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "kpgmrf", version, about = "Cross-population GMRF model of key-population HIV prevalence")]
struct Cli {
    /// Master seed. When omitted a seed is sampled and recorded in the manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override any config key, e.g. `--set sampler.chains=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Observation file (`country,population,year,prevalence`).
    #[arg(long)]
    observations: Option<PathBuf>,
    /// Country table (`country,region`).
    #[arg(long)]
    countries: Option<PathBuf>,
    #[arg(long)]
    first_year: Option<i64>,
    #[arg(long)]
    last_year: Option<i64>,
    /// Prevalence column is in percent.
    #[arg(long)]
    percent: bool,
}

impl DataArgs {
    fn apply(&self, o: &mut Overrides) {
        o.path("data.observations", &self.observations);
        o.path("data.countries", &self.countries);
        o.set("data.first_year", self.first_year);
        o.set("data.last_year", self.last_year);
        o.set("data.percent", self.percent.then_some(true));
    }
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Prior on all 33 parameters, `family:scale` (laplace or normal).
    #[arg(long)]
    prior: Option<String>,
    /// full, no_cross_pop, no_country or no_time.
    #[arg(long)]
    variant: Option<String>,
    /// Sampler coordinates: scaled or natural.
    #[arg(long)]
    parameterization: Option<String>,
}

impl ModelArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("model.prior", self.prior.clone());
        o.set("model.variant", self.variant.clone());
        o.set("model.parameterization", self.parameterization.clone());
    }
}

#[derive(Args, Debug, Default)]
struct SamplerArgs {
    #[arg(long)]
    chains: Option<i64>,
    #[arg(long)]
    warmup: Option<i64>,
    /// Retained draws per chain.
    #[arg(long)]
    draws: Option<i64>,
    #[arg(long)]
    thin: Option<i64>,
    #[arg(long)]
    joint_steps: Option<i64>,
}

impl SamplerArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("sampler.chains", self.chains);
        o.set("sampler.warmup", self.warmup);
        o.set("sampler.draws", self.draws);
        o.set("sampler.thin", self.thin);
        o.set("sampler.joint_steps", self.joint_steps);
    }
}

#[derive(Args, Debug, Default)]
struct PredictArgs {
    /// Use every n-th posterior draw.
    #[arg(long)]
    draw_thin: Option<i64>,
    /// Gibbs sweeps per draw for observed cells.
    #[arg(long)]
    sweeps: Option<i64>,
}

impl PredictArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("predict.draw_thin", self.draw_thin);
        o.set("predict.sweeps", self.sweeps);
    }
}

#[derive(Args, Debug, Default)]
struct ContrastArgs {
    /// First year of the contrast (default: window start).
    #[arg(long)]
    from: Option<i64>,
    /// Second year of the contrast (default: window end).
    #[arg(long)]
    to: Option<i64>,
    #[arg(long)]
    ratio_up: Option<f64>,
    #[arg(long)]
    ratio_down: Option<f64>,
    /// Posterior probability a change must exceed.
    #[arg(long)]
    prob: Option<f64>,
}

impl ContrastArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("contrast.from", self.from);
        o.set("contrast.to", self.to);
        o.set("contrast.ratio_up", self.ratio_up);
        o.set("contrast.ratio_down", self.ratio_down);
        o.set("contrast.prob", self.prob);
    }
}

#[derive(Args, Debug, Default)]
struct CvArgs {
    #[arg(long)]
    folds: Option<i64>,
    /// cell or by-series.
    #[arg(long)]
    strategy: Option<String>,
    /// Year range for the baseline medians, e.g. 2017-2021.
    #[arg(long)]
    baseline_window: Option<String>,
    /// Use every n-th posterior draw for held-out predictions.
    #[arg(long)]
    predict_thin: Option<i64>,
}

impl CvArgs {
    fn apply(&self, o: &mut Overrides) {
        o.set("cv.folds", self.folds);
        o.set("cv.strategy", self.strategy.clone());
        o.set("cv.baseline_window", self.baseline_window.clone());
        o.set("cv.predict_thin", self.predict_thin);
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate an observation file and write the normalized panel.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Draw a synthetic panel from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Sample the posterior; writes draws, diagnostics and the panel used.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// R-hat and effective sample sizes of a draws file or fit directory.
    Diagnose { draws: PathBuf },
    /// Posterior estimates for every cell of a fitted panel.
    Predict {
        fit_dir: PathBuf,
        #[command(flatten)]
        predict: PredictArgs,
    },
    /// Classify change between two years for every series of a fitted panel.
    Contrast {
        fit_dir: PathBuf,
        #[command(flatten)]
        predict: PredictArgs,
        #[command(flatten)]
        contrast: ContrastArgs,
    },
    /// K-fold cross-validation of one model variant against the baseline.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        cv: CvArgs,
    },
    /// Cross-validation of the full model, each ablation and the baseline.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        cv: CvArgs,
    },
    /// Cross-validation and implied correlations under alternative priors.
    Sensitivity {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        cv: CvArgs,
        /// Comma-separated priors, e.g. laplace:0.1,laplace:0.5,normal:0.1.
        #[arg(long, value_delimiter = ',')]
        priors: Vec<String>,
    },
    /// Estimates, change classes and implied correlations from a fit directory.
    Report {
        fit_dir: PathBuf,
        #[command(flatten)]
        predict: PredictArgs,
        #[command(flatten)]
        contrast: ContrastArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Simulate { .. } => "simulate",
            Command::Fit { .. } => "fit",
            Command::Diagnose { .. } => "diagnose",
            Command::Predict { .. } => "predict",
            Command::Contrast { .. } => "contrast",
            Command::Cv { .. } => "cv",
            Command::Ablate { .. } => "ablate",
            Command::Sensitivity { .. } => "sensitivity",
            Command::Report { .. } => "report",
        }
    }

    fn apply(&self, o: &mut Overrides) {
        match self {
            Command::Ingest { data } => data.apply(o),
            Command::Simulate { .. } | Command::Diagnose { .. } => {}
            Command::Fit { data, model, sampler } => {
                data.apply(o);
                model.apply(o);
                sampler.apply(o);
            }
            Command::Predict { predict, .. } => predict.apply(o),
            Command::Contrast { predict, contrast, .. } | Command::Report { predict, contrast, .. } => {
                predict.apply(o);
                contrast.apply(o);
            }
            Command::Cv { data, model, sampler, cv } | Command::Ablate { data, model, sampler, cv } => {
                data.apply(o);
                model.apply(o);
                sampler.apply(o);
                cv.apply(o);
            }
            Command::Sensitivity { data, model, sampler, cv, priors } => {
                data.apply(o);
                model.apply(o);
                sampler.apply(o);
                cv.apply(o);
                if !priors.is_empty() {
                    o.set("sensitivity.priors", Some(priors.iter().map(|p| toml::Value::String(p.clone())).collect::<Vec<_>>()));
                }
            }
        }
    }
}

/// Process exit code for an error class.
fn exit_code(class: &str) -> u8 {
    match class {
        "IoError" => 3,
        "MissingArtifact" => 4,
        "MalformedRow" | "UnknownCountry" | "PrevalenceOutOfRange" | "DuplicateConflict" => 5,
        "InvalidConfig" => 6,
        "NotPositiveDefinite" | "SingularObservedBlock" | "NonPositiveDiagonal" | "NegativeVariance" => 7,
        "AllProposalsInvalid" | "InsufficientDraws" | "MismatchedDrawCounts" | "TooFewObservations" => 8,
        "IndexOutOfRange" | "InvalidPartition" => 9,
        "FoldFailed" => 10,
        _ => 1,
    }
}

fn sampled_seed() -> u64 {
    // RandomState is keyed from OS entropy.
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0));
    h.finish() >> 11
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Overrides::default();
    for raw in &cli.set {
        overrides.parse_assignment(raw)?;
    }
    cli.cmd.apply(&mut overrides);
    overrides.set("seed", cli.seed.map(|s| s as i64));
    overrides.set("threads", cli.threads.map(|t| t as i64));
    let mut config = config::resolve(cli.config.as_deref(), &overrides)?;

    let threads = match config.threads {
        Some(0) => return Err(Error::InvalidConfig("threads must be positive".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let seed_given = config.seed.is_some();
    let seed = config.seed.unwrap_or_else(sampled_seed);
    config.seed = Some(seed);
    config.threads = Some(threads);
    let ctx = Ctx { config, seed, seed_given, threads, out: cli.out.clone(), started: manifest::unix_now() };

    match &cli.cmd {
        Command::Ingest { .. } => commands::ingest(&ctx),
        Command::Simulate { scenario } => commands::simulate(&ctx, scenario),
        Command::Fit { .. } => commands::fit(&ctx),
        Command::Diagnose { draws } => commands::diagnose(&ctx, draws),
        Command::Predict { fit_dir, .. } => commands::predict(&ctx, fit_dir),
        Command::Contrast { fit_dir, .. } => commands::contrast(&ctx, fit_dir),
        Command::Cv { .. } => commands::cv(&ctx),
        Command::Ablate { .. } => commands::ablate(&ctx),
        Command::Sensitivity { .. } => commands::sensitivity(&ctx),
        Command::Report { fit_dir, .. } => commands::report(&ctx, fit_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.cmd.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}] {name}: {message}", e.class());
            ExitCode::from(exit_code(e.class()))
        }
    }
}
