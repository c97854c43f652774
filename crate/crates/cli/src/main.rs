//! `purerisk` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure or replicate failure budget exceeded.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use purerisk::cox::ExhaustionPolicy;
use purerisk::data::Source;
use purerisk::io::{read_registry_file, read_sample_file, write_hazards, write_imputation_audit, write_registry_file, write_sample_file};
use purerisk::model::{FitConfig, FittedModel};
use purerisk::pipeline::{BaselineKind, Method};
use purerisk::propensity::PropensityModelSpec;
use purerisk::jackknife::derive_seed;
use purerisk::sim::{generate_population, replicate_inputs, run_on_population, Participation, SimulationConfig};

#[derive(Parser)]
#[command(name = "purerisk", version, about = "Population-representative pure-risk models from cohorts and surveys")]
struct Cli {
    /// Worker threads for replicate parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo simulation scenario and write bias/variance/coverage tables.
    Simulate(SimulateArgs),
    /// Fit all methods to a cohort CSV, a survey CSV and a registry summary.
    Fit(FitArgs),
    /// Evaluate pure risks with jackknife intervals from a fitted model.
    Risk(RiskArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario 1, 2 or 3.
    #[arg(long)]
    scenario: Option<u8>,
    /// noninformative or informative.
    #[arg(long)]
    participation: Option<Participation>,
    /// Monte Carlo replicates.
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Full simulation config as JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "purerisk-out")]
    out: PathBuf,
    /// Point estimates only.
    #[arg(long)]
    no_jackknife: bool,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Also write the samples of replicate 0 as cohort.csv, survey.csv,
    /// registry.json and fit_config.json.
    #[arg(long)]
    export_samples: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    survey: PathBuf,
    /// Registry summary JSON; required for the PAR baseline.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Fit config as JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "purerisk-out")]
    out: PathBuf,
    #[arg(long)]
    no_jackknife: bool,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Propensity terms, e.g. z1,z2,Dtilde,z2:Dtilde.
    #[arg(long, value_delimiter = ',')]
    propensity: Option<Vec<String>>,
    /// Use the Breslow baseline instead of registry rates.
    #[arg(long)]
    breslow: bool,
    /// End of the PAR baseline, in years.
    #[arg(long)]
    t_max: Option<f64>,
    /// Hold the attributable-risk factor at its last value once the cohort
    /// risk set is exhausted, instead of failing.
    #[arg(long)]
    carry_forward: bool,
}

#[derive(Args)]
struct RiskArgs {
    /// model.json written by `fit`, or its output directory.
    #[arg(long)]
    model: PathBuf,
    /// Covariate profile, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    profile: Vec<f64>,
    /// Times at which to evaluate risk, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    times: Vec<f64>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(String),
    Run(purerisk::Error),
}

impl From<purerisk::Error> for Failure {
    fn from(e: purerisk::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Run(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(purerisk::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => load_json::<SimulationConfig>(path)?,
        None => SimulationConfig::preset(
            args.scenario.unwrap_or(1),
            args.participation.unwrap_or(Participation::Noninformative),
            200,
            0,
        )
        .map_err(config_err)?,
    };
    if args.config.is_some() && (args.scenario.is_some() || args.participation.is_some()) {
        let base = SimulationConfig::preset(
            args.scenario.unwrap_or(1),
            args.participation.unwrap_or(Participation::Noninformative),
            cfg.replicates,
            cfg.seed,
        )
        .map_err(config_err)?;
        cfg.scenario = base.scenario;
        cfg.pipeline.propensity = base.pipeline.propensity;
    }
    if let Some(n) = args.sims {
        cfg.replicates = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_jackknife {
        cfg.jackknife = None;
    }
    if let Some(m) = args.methods {
        cfg.pipeline.methods = m;
    }
    cfg.validate().map_err(config_err)?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;

    let pop = generate_population(&cfg.scenario, derive_seed(cfg.seed, 0))?;
    write_json(&args.out.join("truth.json"), &pop.truth)?;
    if args.export_samples {
        let (cohort, survey, pipeline) = replicate_inputs(&pop, &cfg, 0)?;
        write_sample_file(args.out.join("cohort.csv"), &cohort)?;
        write_sample_file(args.out.join("survey.csv"), &survey)?;
        write_registry_file(args.out.join("registry.json"), &pop.registry)?;
        let fit = FitConfig {
            seed: pipeline.imputation_seed,
            pipeline,
            jackknife: None,
        };
        write_json(&args.out.join("fit_config.json"), &fit)?;
    }

    let out = run_on_population(&pop, &cfg)?;
    for (r, e) in &out.failed {
        log::warn!("replicate {r} failed: {e}");
    }
    out.metrics.write_csv(File::create(args.out.join("metrics.csv"))?)?;
    fs::write(args.out.join("metrics.txt"), out.metrics.to_text())?;

    let names = cfg.parameter_names();
    let mut w = csv::Writer::from_path(args.out.join("replicates.csv"))?;
    w.write_record(["replicate", "method", "parameter", "estimate", "variance"])?;
    for rec in &out.records {
        for (k, est) in rec.estimates.iter().enumerate() {
            let var = rec.variances.as_ref().map_or_else(String::new, |v| v[k].to_string());
            w.write_record([rec.replicate.to_string(), rec.method.to_string(), names[k].clone(), est.to_string(), var])?;
        }
    }
    w.flush()?;
    print!("{}", out.metrics.to_text());
    Ok(())
}

fn fit(args: FitArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => load_json::<FitConfig>(path)?,
        None => FitConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.no_jackknife {
        cfg.jackknife = None;
    }
    if let Some(m) = args.methods {
        cfg.pipeline.methods = m;
    }
    if let Some(terms) = &args.propensity {
        cfg.pipeline.propensity = PropensityModelSpec::parse(&terms.iter().map(String::as_str).collect::<Vec<_>>()).map_err(config_err)?;
    }
    if args.breslow {
        cfg.pipeline.baseline = BaselineKind::Breslow;
    }
    if let Some(t) = args.t_max {
        cfg.pipeline.t_max = t;
    }
    if args.carry_forward {
        cfg.pipeline.exhaustion = ExhaustionPolicy::CarryForward;
    }
    cfg.validate().map_err(config_err)?;
    let needs_registry = cfg.pipeline.baseline == BaselineKind::Par || cfg.pipeline.poststratify.is_some();
    if needs_registry && args.registry.is_none() {
        return Err(config_err("the PAR baseline and poststratification need --registry"));
    }

    let cohort = read_sample_file(&args.cohort, Source::Cohort)?;
    let survey = read_sample_file(&args.survey, Source::Survey)?;
    for w in cohort.warnings.iter().chain(&survey.warnings) {
        log::warn!("{w}");
    }
    let registry = args.registry.as_deref().map(read_registry_file).transpose()?;

    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    let model = cfg.run(&cohort.sample, &survey.sample, registry.as_ref())?;
    write_outputs(&args.out, &model)
}

fn write_outputs(dir: &Path, model: &FittedModel) -> CliResult {
    // compact: replicate hazards make this large
    let mut w = BufWriter::new(File::create(dir.join("model.json"))?);
    serde_json::to_writer(&mut w, model).map_err(purerisk::Error::from)?;
    w.flush()?;
    let methods = &model.output.methods;
    let curves: Vec<(&str, _)> = methods.iter().map(|m| (m.method.name(), &m.hazard)).collect();
    write_hazards(BufWriter::new(File::create(dir.join("hazards.csv"))?), curves)?;

    let mut w = csv::Writer::from_path(dir.join("coefficients.csv"))?;
    w.write_record(["method", "parameter", "estimate", "se"])?;
    for (k, m) in methods.iter().enumerate() {
        for (j, b) in m.fit.beta.iter().enumerate() {
            let se = model.beta_se.get(k).map_or_else(String::new, |s| s[j].to_string());
            w.write_record([m.method.to_string(), format!("beta{}", j + 1), b.to_string(), se])?;
        }
    }
    w.flush()?;

    if !model.output.imputation_audit.is_empty() {
        write_imputation_audit(File::create(dir.join("imputation_audit.csv"))?, &model.output.imputation_audit)?;
    }
    if !model.replicates.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("replicates.csv"))?;
        w.write_record(["replicate", "coefficient", "method", "parameter", "estimate"])?;
        for r in &model.replicates {
            for c in &r.curves {
                for (j, b) in c.beta.iter().enumerate() {
                    w.write_record([
                        r.label.clone(),
                        r.coefficient.to_string(),
                        c.method.to_string(),
                        format!("beta{}", j + 1),
                        b.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn risk(args: RiskArgs) -> CliResult {
    let path = if args.model.is_dir() { args.model.join("model.json") } else { args.model.clone() };
    let text = fs::read_to_string(&path)?;
    let model: FittedModel = serde_json::from_str(&text).map_err(purerisk::Error::from)?;
    let rows = model.risk_table(&args.profile, &args.times)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["method", "t", "risk", "se", "lower", "upper"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        w.write_record([r.method.to_string(), r.t.to_string(), r.risk.to_string(), opt(r.se), opt(r.lower), opt(r.upper)])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Risk(a) => risk(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 3 } else { 4 })
        }
    }
}
