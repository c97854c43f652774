//! Synthetic finite populations, PPS samples and Monte Carlo evaluation of
//! the estimators.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::{design_breslow, fit_design, CoxDesign, CoxOptions, ExhaustionPolicy};
use crate::data::{
    EventTime, GroupCases, PiecewiseRate, RateInterval, RegistrySummary, Source, SurvivalRecord, WeightedSample,
};
use crate::error::{Error, Result};
use crate::jackknife::{derive_seed, run_jackknife, Estimands, ReplicateScheme};
use crate::pipeline::{run_pipeline, BaselineKind, Method, PipelineConfig};
use crate::propensity::PropensityModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapParams {
    pub b1: f64,
    pub b2: f64,
    pub b12: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    Noninformative,
    Informative,
}

impl std::str::FromStr for Participation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noninformative" => Ok(Participation::Noninformative),
            "informative" => Ok(Participation::Informative),
            _ => Err(Error::invalid(format!("unknown participation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub population_size: usize,
    /// Standard deviations of the independent normal covariates.
    pub covariate_sd: Vec<f64>,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub horizon: f64,
    /// Entry times are uniform on `[0, entry_max]`.
    pub entry_max: f64,
    pub other_cause_rate: f64,
    pub gap: GapParams,
    pub cohort_size: f64,
    pub survey_size: f64,
    /// Cohort size measure `exp(g1 z1 + g2 z2 + gd D + g2d z2 D)`.
    pub cohort_gamma: [f64; 4],
    /// Survey size measure `exp(s1 z1 + s2 z2)`.
    pub survey_gamma: [f64; 2],
    pub risk_times: Vec<f64>,
    pub risk_profile: Vec<f64>,
}

impl ScenarioConfig {
    pub fn preset(scenario: u8, participation: Participation) -> Result<Self> {
        let gap = match scenario {
            1 => GapParams {
                b1: 0.01,
                b2: 0.01,
                b12: 0.01,
                mu: 2.0,
                sigma: 0.01,
            },
            2 => GapParams {
                b1: 0.1,
                b2: 0.1,
                b12: 0.1,
                mu: 10.0,
                sigma: 0.2,
            },
            3 => GapParams {
                b1: 0.0,
                b2: 0.0,
                b12: 0.0,
                mu: 10.0,
                sigma: 0.2,
            },
            _ => return Err(Error::invalid(format!("unknown scenario {scenario}; expected 1, 2 or 3"))),
        };
        let (gd, g2d) = match participation {
            Participation::Noninformative => (0.0, 0.0),
            Participation::Informative => (-0.75, -0.2),
        };
        Ok(Self {
            population_size: 300_000,
            covariate_sd: vec![4.0, 2.0, 2.0],
            beta0: (-(0.85f64.ln()) / 15.0).ln(),
            beta: vec![0.2, 0.2, 0.3],
            horizon: 15.0,
            entry_max: 1.0,
            other_cause_rate: -(0.9f64.ln()) / 15.0,
            gap,
            cohort_size: 3000.0,
            survey_size: 6000.0,
            cohort_gamma: [-0.15, 0.1, gd, g2d],
            survey_gamma: [0.1, 0.1],
            risk_times: vec![1.0, 7.0, 15.0],
            risk_profile: vec![0.0; 3],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.covariate_sd.len();
        if p < 2 || self.beta.len() != p || self.risk_profile.len() != p {
            return Err(Error::invalid("need at least two covariates and matching beta and profile lengths"));
        }
        if self.population_size == 0 || !(self.cohort_size > 0.0) || !(self.survey_size > 0.0) {
            return Err(Error::invalid("population and sample sizes must be positive"));
        }
        if self.cohort_size > self.population_size as f64 || self.survey_size > self.population_size as f64 {
            return Err(Error::invalid("expected sample size exceeds the population"));
        }
        if !(self.horizon > self.entry_max && self.entry_max >= 0.0) {
            return Err(Error::invalid("horizon must exceed the entry window"));
        }
        if !(self.other_cause_rate > 0.0) || !(self.gap.sigma >= 0.0) {
            return Err(Error::invalid("rates and sds must be positive"));
        }
        if self.covariate_sd.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("covariate sds must be nonnegative"));
        }
        if self.risk_times.iter().any(|t| !(*t >= 0.0 && *t <= self.horizon)) {
            return Err(Error::invalid("risk times must lie in [0, horizon]"));
        }
        Ok(())
    }
}

/// One simulated individual.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub z: Vec<f64>,
    pub entry: f64,
    pub incidence: EventTime,
    pub mortality: EventTime,
}

impl Individual {
    fn record(&self, id: usize, with_incidence: bool) -> SurvivalRecord {
        SurvivalRecord {
            id: id.to_string(),
            z: self.z.clone(),
            incidence: with_incidence.then_some(self.incidence),
            mortality: self.mortality,
            imputed: None,
            entry_offset: self.entry,
            stratum: None,
            psu: None,
            group: "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTruth {
    pub beta: Vec<f64>,
    pub risks: Vec<f64>,
    pub incidence_rate: f64,
    pub mortality_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub individuals: Vec<Individual>,
    pub registry: RegistrySummary,
    pub truth: PopulationTruth,
}

/// Draws the individuals of a finite population.
pub fn draw_individuals(config: &ScenarioConfig, seed: u64) -> Result<Vec<Individual>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = Exp::new(config.other_cause_rate).map_err(|e| Error::invalid(e.to_string()))?;
    let g = config.gap;
    let mut individuals = Vec::with_capacity(config.population_size);
    for _ in 0..config.population_size {
        let z: Vec<f64> = config
            .covariate_sd
            .iter()
            .map(|sd| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp: f64 = config.beta0 + z.iter().zip(&config.beta).map(|(a, b)| a * b).sum::<f64>();
        let t = rng.sample::<f64, _>(rand_distr::Exp1) / lp.exp();
        let entry = config.entry_max * rng.random::<f64>();
        let c0 = config.horizon - entry;
        let c = other.sample(&mut rng);
        let eps = g.mu + g.sigma * rng.sample::<f64, _>(StandardNormal);
        let gap = (g.b1 * z[0] + g.b2 * z[1] + g.b12 * z[0] * z[1] + eps).max(0.0);
        let t_tilde = t + gap;
        let stop = c.min(c0);
        individuals.push(Individual {
            z,
            entry,
            incidence: EventTime::new(t <= stop, t.min(stop)),
            mortality: EventTime::new(t_tilde <= stop, t_tilde.min(stop)),
        });
    }
    Ok(individuals)
}

/// Draws the finite population, builds its registry summary (annual
/// incidence rates and the case count at the horizon) and computes the
/// population-level estimands.
pub fn generate_population(config: &ScenarioConfig, seed: u64) -> Result<Population> {
    let individuals = draw_individuals(config, seed)?;
    let registry = population_registry(&individuals, config.horizon)?;
    let m = individuals.len() as f64;
    let incidence_rate = individuals.iter().filter(|i| i.incidence.event).count() as f64 / m;
    let mortality_rate = individuals.iter().filter(|i| i.mortality.event).count() as f64 / m;

    let p = config.beta.len();
    let design = CoxDesign::new(
        p,
        individuals.iter().flat_map(|i| i.z.iter().copied()).collect(),
        individuals.iter().map(|i| i.incidence.time).collect(),
        individuals.iter().map(|i| i.incidence.event).collect(),
        vec![1.0; individuals.len()],
    )?;
    let fit = fit_design(&design, None, &CoxOptions::default())?;
    let hazard = design_breslow(&design, &fit.beta)?;
    let risks = config
        .risk_times
        .iter()
        .map(|&t| crate::cox::pure_risk(&hazard, &fit.beta, &config.risk_profile, t))
        .collect::<Result<_>>()?;
    Ok(Population {
        individuals,
        registry,
        truth: PopulationTruth {
            beta: fit.beta,
            risks,
            incidence_rate,
            mortality_rate,
        },
    })
}

/// Annual incidence rates (events per person-year at risk) over
/// `[0, horizon]` and the total case count.
pub fn population_registry(pop: &[Individual], horizon: f64) -> Result<RegistrySummary> {
    let n_int = horizon.ceil() as usize;
    let mut events = vec![0.0; n_int];
    let mut exposure = vec![0.0; n_int];
    for ind in pop {
        let x = ind.incidence.time;
        for (k, e) in exposure.iter_mut().enumerate() {
            let lo = k as f64;
            if x <= lo {
                break;
            }
            *e += x.min(lo + 1.0).min(horizon) - lo;
        }
        if ind.incidence.event {
            let k = (x.floor() as usize).min(n_int - 1);
            events[k] += 1.0;
        }
    }
    let intervals = (0..n_int)
        .map(|k| RateInterval {
            start: k as f64,
            end: (k as f64 + 1.0).min(horizon),
            rate: if exposure[k] > 0.0 { events[k] / exposure[k] } else { 0.0 },
        })
        .collect();
    let cases = pop.iter().filter(|i| i.incidence.event).count() as f64;
    let m = pop.len() as u64;
    let registry = RegistrySummary {
        population_size: m,
        group_sizes: [("all".to_string(), m)].into_iter().collect(),
        group_cases: vec![GroupCases {
            group: "all".into(),
            horizon,
            cases,
        }],
        composite_incidence_rate: PiecewiseRate::new(intervals)?,
        composite_mortality_rates: None,
    };
    registry.validate()?;
    Ok(registry)
}

/// Inclusion probabilities proportional to `measure` summing to `expected_n`.
/// Units whose probability would exceed one are taken with certainty and the
/// remainder is redistributed over the other units until no probability
/// exceeds one.
pub fn inclusion_probabilities(measure: &[f64], expected_n: f64) -> Result<Vec<f64>> {
    if measure.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(Error::invalid("size measures must be positive"));
    }
    if !(expected_n > 0.0 && expected_n <= measure.len() as f64) {
        return Err(Error::invalid("expected sample size must lie in (0, population size]"));
    }
    let mut certain = vec![false; measure.len()];
    let mut n_certain = 0usize;
    loop {
        let rest: f64 = measure.iter().zip(&certain).filter(|(_, c)| !**c).map(|(m, _)| m).sum();
        let scale = (expected_n - n_certain as f64) / rest;
        let mut changed = false;
        for (m, c) in measure.iter().zip(certain.iter_mut()) {
            if !*c && m * scale >= 1.0 {
                *c = true;
                n_certain += 1;
                changed = true;
            }
        }
        if !changed {
            if n_certain > 0 {
                log::warn!("{n_certain} units included with certainty");
            }
            return Ok(measure
                .iter()
                .zip(&certain)
                .map(|(m, c)| if *c { 1.0 } else { m * scale })
                .collect());
        }
    }
}

/// Poisson PPS sample: unit `i` is included independently with probability
/// `pi_i` from [`inclusion_probabilities`]. Returns the included indices and
/// their inclusion probabilities.
pub fn pps_sample(measure: &[f64], expected_n: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<f64>)> {
    let pi = inclusion_probabilities(measure, expected_n)?;
    let mut idx = Vec::new();
    let mut probs = Vec::new();
    for (i, p) in pi.into_iter().enumerate() {
        if rng.random::<f64>() < p {
            idx.push(i);
            probs.push(p);
        }
    }
    Ok((idx, probs))
}

/// Cohort (unit base weights, design hidden) and survey (weights `1/pi`).
pub fn draw_samples(
    pop: &Population,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<(WeightedSample, WeightedSample)> {
    let [g1, g2, gd, g2d] = config.cohort_gamma;
    let [s1, s2] = config.survey_gamma;
    let cohort_measure: Vec<f64> = pop
        .individuals
        .iter()
        .map(|i| {
            let d = f64::from(u8::from(i.incidence.event));
            (g1 * i.z[0] + g2 * i.z[1] + gd * d + g2d * i.z[1] * d).exp()
        })
        .collect();
    let survey_measure: Vec<f64> = pop.individuals.iter().map(|i| (s1 * i.z[0] + s2 * i.z[1]).exp()).collect();
    let mut rng_c = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut rng_s = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let (ci, _) = pps_sample(&cohort_measure, config.cohort_size, &mut rng_c)?;
    let (si, sp) = pps_sample(&survey_measure, config.survey_size, &mut rng_s)?;
    let cohort = WeightedSample::unweighted(
        ci.iter().map(|&i| pop.individuals[i].record(i, true)).collect(),
        Source::Cohort,
    )?;
    let survey = WeightedSample::new(
        si.iter().map(|&i| pop.individuals[i].record(i, false)).collect(),
        sp.iter().map(|p| 1.0 / p).collect(),
        Source::Survey,
    )?;
    Ok((cohort, survey))
}

/// Propensity terms used in the analysis: `z1 + z2`, plus `Dtilde` and
/// `z2:Dtilde` under informative participation.
pub fn default_propensity(participation: Participation) -> PropensityModelSpec {
    let terms: &[&str] = match participation {
        Participation::Noninformative => &["z1", "z2"],
        Participation::Informative => &["z1", "z2", "Dtilde", "z2:Dtilde"],
    };
    PropensityModelSpec::parse(terms).expect("static terms parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
    pub replicates: usize,
    /// Jackknife scheme; point estimates only when absent.
    pub jackknife: Option<ReplicateScheme>,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn preset(scenario: u8, participation: Participation, replicates: usize, seed: u64) -> Result<Self> {
        let pipeline = PipelineConfig {
            propensity: default_propensity(participation),
            baseline: BaselineKind::Par,
            exhaustion: ExhaustionPolicy::CarryForward,
            ..PipelineConfig::default()
        };
        Ok(Self {
            scenario: ScenarioConfig::preset(scenario, participation)?,
            pipeline,
            replicates,
            jackknife: Some(ReplicateScheme::default()),
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.pipeline.validate()?;
        if self.replicates == 0 {
            return Err(Error::invalid("at least one simulation replicate is required"));
        }
        Ok(())
    }

    /// Names of the estimated quantities: coefficients, then risks.
    pub fn parameter_names(&self) -> Vec<String> {
        (1..=self.scenario.beta.len())
            .map(|k| format!("beta{k}"))
            .chain(self.scenario.risk_times.iter().map(|t| format!("risk_t{t}")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub estimates: Vec<f64>,
    /// Jackknife variances, when computed.
    pub variances: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub truth: PopulationTruth,
    pub records: Vec<ReplicateRecord>,
    pub failed: Vec<(usize, String)>,
    pub metrics: MetricsTable,
}

/// Samples and pipeline settings of simulation replicate `r`.
pub fn replicate_inputs(
    pop: &Population,
    config: &SimulationConfig,
    r: usize,
) -> Result<(WeightedSample, WeightedSample, PipelineConfig)> {
    let seed = derive_seed(config.seed, 1000 + r as u64);
    let (cohort, survey) = draw_samples(pop, &config.scenario, seed)?;
    let mut pipeline = config.pipeline.clone();
    pipeline.imputation_seed = derive_seed(seed, 2);
    Ok((cohort, survey, pipeline))
}

fn run_replicate(
    pop: &Population,
    config: &SimulationConfig,
    r: usize,
) -> Result<Vec<ReplicateRecord>> {
    let seed = derive_seed(config.seed, 1000 + r as u64);
    let (cohort, survey, pipeline) = replicate_inputs(pop, config, r)?;
    let estimands = Estimands {
        profile: config.scenario.risk_profile.clone(),
        times: config.scenario.risk_times.clone(),
    };
    match &config.jackknife {
        Some(scheme) => {
            let jk = run_jackknife(
                &cohort,
                &survey,
                Some(&pop.registry),
                &pipeline,
                scheme,
                &estimands,
                derive_seed(seed, 3),
            )?;
            Ok(jk
                .methods
                .into_iter()
                .map(|m| ReplicateRecord {
                    replicate: r,
                    method: m.method,
                    estimates: m.estimate,
                    variances: Some(m.variance),
                })
                .collect())
        }
        None => {
            let out = run_pipeline(&cohort, &survey, Some(&pop.registry), &pipeline)?;
            out.methods
                .iter()
                .map(|m| {
                    Ok(ReplicateRecord {
                        replicate: r,
                        method: m.method,
                        estimates: m.estimates(&estimands.profile, &estimands.times)?,
                        variances: None,
                    })
                })
                .collect()
        }
    }
}

/// Runs all simulation replicates against one finite population. Each
/// replicate redraws both samples from seeds derived from its index.
pub fn run_scenario(config: &SimulationConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let pop = generate_population(&config.scenario, derive_seed(config.seed, 0))?;
    run_on_population(&pop, config)
}

pub fn run_on_population(pop: &Population, config: &SimulationConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let results: Vec<Result<Vec<ReplicateRecord>>> =
        (0..config.replicates).into_par_iter().map(|r| run_replicate(pop, config, r)).collect();
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(mut v) => records.append(&mut v),
            Err(e) => {
                log::warn!("simulation replicate {r} failed: {e}");
                failed.push((r, e.to_string()));
            }
        }
    }
    if failed.len() as f64 > crate::jackknife::MAX_FAILURE_SHARE * config.replicates as f64 {
        return Err(Error::ReplicateFailures {
            failed: failed.len(),
            total: config.replicates,
        });
    }
    let truth_values: Vec<f64> = pop.truth.beta.iter().chain(&pop.truth.risks).copied().collect();
    let metrics = aggregate_metrics(&records, &truth_values, &config.parameter_names());
    Ok(SimulationOutput {
        truth: pop.truth.clone(),
        records,
        failed,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub relative_bias_pct: f64,
    pub variance: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

/// Relative bias `100 mean(est - truth) / truth`, variance with divisor `n`
/// (so `mse = variance + bias^2`), and Wald 95% coverage when variances are
/// available.
pub fn aggregate_metrics(records: &[ReplicateRecord], truth: &[f64], names: &[String]) -> MetricsTable {
    let mut methods: Vec<Method> = records.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut rows = Vec::new();
    for m in methods {
        let recs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == m).collect();
        let n = recs.len() as f64;
        for (k, &theta) in truth.iter().enumerate() {
            let est: Vec<f64> = recs.iter().map(|r| r.estimates[k]).collect();
            let mean = est.iter().sum::<f64>() / n;
            let variance = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            let mse = est.iter().map(|e| (e - theta).powi(2)).sum::<f64>() / n;
            let coverage = if recs.iter().all(|r| r.variances.is_some()) {
                let hits = recs
                    .iter()
                    .filter(|r| {
                        let se = r.variances.as_ref().expect("checked")[k].sqrt();
                        (r.estimates[k] - theta).abs() <= 1.959963984540054 * se
                    })
                    .count();
                Some(hits as f64 / n)
            } else {
                None
            };
            rows.push(MetricRow {
                method: m,
                parameter: names.get(k).cloned().unwrap_or_else(|| format!("theta{}", k + 1)),
                truth: theta,
                mean,
                relative_bias_pct: 100.0 * (mean - theta) / theta,
                variance,
                mse,
                coverage,
                n: recs.len(),
            });
        }
    }
    MetricsTable { rows }
}

impl MetricsTable {
    pub fn get(&self, method: Method, parameter: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.parameter == parameter)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["method", "parameter", "truth", "mean", "relative_bias_pct", "variance", "mse", "coverage", "n"])?;
        for r in &self.rows {
            wtr.write_record([
                r.method.name().to_string(),
                r.parameter.clone(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.relative_bias_pct.to_string(),
                r.variance.to_string(),
                r.mse.to_string(),
                r.coverage.map_or_else(String::new, |c| c.to_string()),
                r.n.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Aligned text: one row per method, blocks of bias, variance and MSE
    /// (both scaled by 1e4) and coverage across parameters.
    pub fn to_text(&self) -> String {
        let mut params: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !params.contains(&r.parameter.as_str()) {
                params.push(&r.parameter);
            }
        }
        let mut methods: Vec<Method> = self.rows.iter().map(|r| r.method).collect();
        methods.dedup();
        let mut out = String::new();
        let blocks = ["RelBias(%)", "Var(x1e-4)", "MSE(x1e-4)", "CP"];
        let _ = write!(out, "{:<8}", "method");
        for b in blocks {
            for p in &params {
                let _ = write!(out, " {:>18}", format!("{b}:{p}"));
            }
        }
        out.push('\n');
        for m in methods {
            let _ = write!(out, "{:<8}", m.name());
            for (bi, _) in blocks.iter().enumerate() {
                for p in &params {
                    let cell = match self.get(m, p) {
                        Some(r) => match bi {
                            0 => format!("{:.1}", r.relative_bias_pct),
                            1 => format!("{:.2}", r.variance * 1e4),
                            2 => format!("{:.2}", r.mse * 1e4),
                            _ => r.coverage.map_or_else(|| "-".into(), |c| format!("{c:.2}")),
                        },
                        None => "-".into(),
                    };
                    let _ = write!(out, " {cell:>18}");
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_measure_gives_equal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (idx, probs) = pps_sample(&vec![2.5; 1000], 100.0, &mut rng).unwrap();
        assert!(!idx.is_empty());
        assert!(probs.iter().all(|p| (*p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn capped_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = vec![1.0; 100];
        m[0] = 1e6;
        let pi = inclusion_probabilities(&m, 10.0).unwrap();
        assert_eq!(pi[0], 1.0);
        assert_relative_eq!(pi.iter().sum::<f64>(), 10.0, epsilon = 1e-12);
        assert_relative_eq!(pi[1], 9.0 / 99.0, epsilon = 1e-15);
        let (idx, probs) = pps_sample(&m, 10.0, &mut rng).unwrap();
        assert_eq!(idx[0], 0);
        assert_eq!(probs[0], 1.0);
    }

    #[test]
    fn metrics_identity_and_arithmetic() {
        let names = vec!["a".to_string()];
        let same: Vec<ReplicateRecord> = (0..3)
            .map(|r| ReplicateRecord {
                replicate: r,
                method: Method::Ipw,
                estimates: vec![2.0],
                variances: Some(vec![0.0]),
            })
            .collect();
        let t = aggregate_metrics(&same, &[2.0], &names);
        let row = &t.rows[0];
        assert_eq!((row.relative_bias_pct, row.variance, row.mse, row.coverage), (0.0, 0.0, 0.0, Some(1.0)));

        let est = [1.0, 2.0, 4.0];
        let recs: Vec<ReplicateRecord> = est
            .iter()
            .enumerate()
            .map(|(r, e)| ReplicateRecord {
                replicate: r,
                method: Method::Naive,
                estimates: vec![*e],
                variances: Some(vec![1.0]),
            })
            .collect();
        let t = aggregate_metrics(&recs, &[2.0], &names);
        let row = &t.rows[0];
        let mean = 7.0 / 3.0;
        assert_relative_eq!(row.relative_bias_pct, 100.0 * (mean - 2.0) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(row.mse, 5.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(row.mse, row.variance + (mean - 2.0).powi(2), epsilon = 1e-12);
        // |4 - 2| > 1.96
        assert_relative_eq!(row.coverage.unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn small_population_is_deterministic() {
        let mut cfg = ScenarioConfig::preset(1, Participation::Noninformative).unwrap();
        cfg.population_size = 5000;
        cfg.cohort_size = 500.0;
        cfg.survey_size = 500.0;
        let a = generate_population(&cfg, 9).unwrap();
        let b = generate_population(&cfg, 9).unwrap();
        assert_eq!(a.individuals, b.individuals);
        assert_eq!(a.truth, b.truth);
        for ind in &a.individuals {
            assert!(ind.incidence.time <= cfg.horizon - ind.entry + 1e-12);
            if ind.mortality.event {
                assert!(ind.incidence.event && ind.incidence.time <= ind.mortality.time);
            }
        }
    }
}
