//! Delete-a-group jackknife over cohort random groups and survey PSUs (or
//! survey random groups). Every replicate reruns the whole pipeline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BaselineHazard, RegistrySummary, WeightedSample};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, Method, PipelineConfig, PipelineOutput};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyDesign {
    /// Delete one PSU within its stratum, using the records' stratum and PSU.
    Psu,
    RandomGroups(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateScheme {
    pub cohort_groups: usize,
    pub survey: SurveyDesign,
}

impl Default for ReplicateScheme {
    fn default() -> Self {
        Self {
            cohort_groups: 50,
            survey: SurveyDesign::RandomGroups(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub label: String,
    pub cohort_weights: Vec<f64>,
    pub survey_weights: Vec<f64>,
    /// Variance coefficient: `(G-1)/G` or `(n_h-1)/n_h`.
    pub coefficient: f64,
}

/// Deterministic seed for stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

fn random_groups(n: usize, groups: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        out[i] = pos % groups;
    }
    out
}

/// Cohort replicates first (one per random group), then survey replicates.
pub fn replicate_weights(
    scheme: &ReplicateScheme,
    cohort: &WeightedSample,
    survey: &WeightedSample,
    seed: u64,
) -> Result<Vec<Replicate>> {
    let g_c = scheme.cohort_groups;
    if g_c < 2 {
        return Err(Error::InvalidScheme("at least two cohort groups are required".into()));
    }
    if g_c > cohort.len() {
        return Err(Error::InvalidScheme(format!("{g_c} cohort groups for {} records", cohort.len())));
    }
    let mut out = Vec::new();
    let cohort_group = random_groups(cohort.len(), g_c, derive_seed(seed, 0));
    let mult = g_c as f64 / (g_c as f64 - 1.0);
    for g in 0..g_c {
        let cohort_weights = cohort
            .weights()
            .iter()
            .zip(&cohort_group)
            .map(|(w, &k)| if k == g { 0.0 } else { w * mult })
            .collect();
        out.push(Replicate {
            label: format!("cohort:{g}"),
            cohort_weights,
            survey_weights: survey.weights().to_vec(),
            coefficient: (g_c as f64 - 1.0) / g_c as f64,
        });
    }

    // (stratum, unit) per survey record
    let units: Vec<(String, String)> = match &scheme.survey {
        SurveyDesign::RandomGroups(g_s) => {
            if *g_s < 2 || *g_s > survey.len() {
                return Err(Error::InvalidScheme(format!("{g_s} survey groups for {} records", survey.len())));
            }
            random_groups(survey.len(), *g_s, derive_seed(seed, 1))
                .into_iter()
                .map(|k| (String::new(), k.to_string()))
                .collect()
        }
        SurveyDesign::Psu => survey
            .records()
            .iter()
            .map(|r| {
                let psu = r
                    .psu
                    .clone()
                    .ok_or_else(|| Error::InvalidScheme(format!("survey record {} has no PSU", r.id)))?;
                Ok((r.stratum.clone().unwrap_or_default(), psu))
            })
            .collect::<Result<_>>()?,
    };
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (h, j) in &units {
        let list = strata.entry(h.as_str()).or_default();
        if !list.contains(&j.as_str()) {
            list.push(j.as_str());
        }
    }
    for (h, psus) in &strata {
        let n_h = psus.len();
        if n_h < 2 {
            return Err(Error::InvalidScheme(format!("stratum '{h}' has a single PSU")));
        }
        let mult = n_h as f64 / (n_h as f64 - 1.0);
        let mut sorted = psus.clone();
        sorted.sort_by(|a, b| natural_cmp(a, b));
        for j in sorted {
            let survey_weights = survey
                .weights()
                .iter()
                .zip(&units)
                .map(|(w, (hh, jj))| {
                    if hh != h {
                        *w
                    } else if jj == j {
                        0.0
                    } else {
                        w * mult
                    }
                })
                .collect();
            out.push(Replicate {
                label: if h.is_empty() { format!("survey:{j}") } else { format!("survey:{h}:{j}") },
                cohort_weights: cohort.weights().to_vec(),
                survey_weights,
                coefficient: (n_h as f64 - 1.0) / n_h as f64,
            });
        }
    }
    Ok(out)
}

fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// `sum_r c_r (theta_r - theta)^2` componentwise.
pub fn jackknife_variance(replicates: &[Vec<f64>], coefficients: &[f64], full: &[f64]) -> Result<Vec<f64>> {
    if replicates.len() != coefficients.len() {
        return Err(Error::invalid("one coefficient per replicate required"));
    }
    let mut v = vec![0.0; full.len()];
    for (est, c) in replicates.iter().zip(coefficients) {
        if est.len() != full.len() {
            return Err(Error::invalid("replicate estimate has the wrong length"));
        }
        for k in 0..full.len() {
            v[k] += c * (est[k] - full[k]).powi(2);
        }
    }
    Ok(v)
}

/// Pure-risk evaluation points appended to the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimands {
    pub profile: Vec<f64>,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodVariance {
    pub method: Method,
    pub estimate: Vec<f64>,
    pub variance: Vec<f64>,
}

impl MethodVariance {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// Wald interval `estimate +- z * se`.
    pub fn wald(&self, k: usize, z: f64) -> (f64, f64) {
        let se = self.variance[k].sqrt();
        (self.estimate[k] - z * se, self.estimate[k] + z * se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub label: String,
    pub method: Method,
    pub values: Vec<f64>,
}

/// Coefficients and baseline of one method, enough to evaluate pure risks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCurve {
    pub method: Method,
    pub beta: Vec<f64>,
    pub hazard: BaselineHazard,
}

impl FittedCurve {
    pub fn pure_risk(&self, z: &[f64], t: f64) -> Result<f64> {
        crate::cox::pure_risk(&self.hazard, &self.beta, z, t)
    }
}

/// The fits of one successful replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub label: String,
    pub coefficient: f64,
    pub curves: Vec<FittedCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JackknifeResult {
    pub full: PipelineOutput,
    pub methods: Vec<MethodVariance>,
    pub replicates: Vec<ReplicateEstimate>,
    pub fits: Vec<ReplicateFit>,
    pub failed: Vec<String>,
    pub total: usize,
}

type Extracted = (Vec<(Method, Vec<f64>)>, Vec<FittedCurve>);

fn estimates(out: &PipelineOutput, estimands: &Estimands) -> Result<Vec<(Method, Vec<f64>)>> {
    out.methods
        .iter()
        .map(|r| Ok((r.method, r.estimates(&estimands.profile, &estimands.times)?)))
        .collect()
}

fn extract(out: PipelineOutput, estimands: &Estimands) -> Result<Extracted> {
    let est = estimates(&out, estimands)?;
    let curves = out
        .methods
        .into_iter()
        .map(|r| FittedCurve {
            method: r.method,
            beta: r.fit.beta,
            hazard: r.hazard,
        })
        .collect();
    Ok((est, curves))
}

/// Full-sample pipeline plus jackknife variances of the coefficients and the
/// pure risks. Replicate `r` imputes with a seed derived from `r`, so results
/// do not depend on scheduling.
pub fn run_jackknife(
    cohort: &WeightedSample,
    survey: &WeightedSample,
    registry: Option<&RegistrySummary>,
    config: &PipelineConfig,
    scheme: &ReplicateScheme,
    estimands: &Estimands,
    seed: u64,
) -> Result<JackknifeResult> {
    let full = run_pipeline(cohort, survey, registry, config)?;
    let full_est = estimates(&full, estimands)?;
    let reps = replicate_weights(scheme, cohort, survey, seed)?;
    let total = reps.len();

    let results: Vec<Result<Extracted>> = reps
        .par_iter()
        .enumerate()
        .map(|(r, rep)| {
            let c = cohort.subset_positive(&rep.cohort_weights)?;
            let s = survey.subset_positive(&rep.survey_weights)?;
            let mut cfg = config.clone();
            cfg.imputation_seed = derive_seed(config.imputation_seed, r as u64 + 1);
            let out = run_pipeline(&c, &s, registry, &cfg)?;
            extract(out, estimands)
        })
        .collect();

    let mut failed = Vec::new();
    let mut ok_estimates = Vec::new();
    let mut coefficients = Vec::new();
    let mut replicates = Vec::new();
    let mut fits = Vec::new();
    for (rep, res) in reps.iter().zip(results) {
        match res {
            Ok((est, curves)) => {
                for (m, values) in &est {
                    replicates.push(ReplicateEstimate {
                        label: rep.label.clone(),
                        method: *m,
                        values: values.clone(),
                    });
                }
                ok_estimates.push(est);
                coefficients.push(rep.coefficient);
                fits.push(ReplicateFit {
                    label: rep.label.clone(),
                    coefficient: rep.coefficient,
                    curves,
                });
            }
            Err(e) => {
                log::warn!("jackknife replicate {} failed: {e}", rep.label);
                failed.push(rep.label.clone());
            }
        }
    }
    if failed.len() as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(Error::ReplicateFailures {
            failed: failed.len(),
            total,
        });
    }
    if !failed.is_empty() {
        log::warn!("{} of {total} jackknife replicates excluded", failed.len());
    }

    let mut methods = Vec::new();
    for (k, (m, estimate)) in full_est.into_iter().enumerate() {
        let reps_m: Vec<Vec<f64>> = ok_estimates.iter().map(|e| e[k].1.clone()).collect();
        let variance = jackknife_variance(&reps_m, &coefficients, &estimate)?;
        methods.push(MethodVariance {
            method: m,
            estimate,
            variance,
        });
    }
    Ok(JackknifeResult {
        full,
        methods,
        replicates,
        fits,
        failed,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EventTime, Source, SurvivalRecord};
    use approx::assert_relative_eq;

    fn rec(i: usize, stratum: Option<&str>, psu: Option<&str>) -> SurvivalRecord {
        SurvivalRecord {
            id: i.to_string(),
            z: vec![0.0],
            incidence: None,
            mortality: EventTime::new(false, 1.0),
            imputed: None,
            entry_offset: 0.0,
            stratum: stratum.map(Into::into),
            psu: psu.map(Into::into),
            group: "all".into(),
        }
    }

    fn sample(n: usize, source: Source) -> WeightedSample {
        WeightedSample::new((0..n).map(|i| rec(i, None, None)).collect(), vec![2.0; n], source).unwrap()
    }

    #[test]
    fn two_cohort_groups_halve_and_double() {
        let cohort = sample(10, Source::Cohort);
        let survey = sample(4, Source::Survey);
        let scheme = ReplicateScheme {
            cohort_groups: 2,
            survey: SurveyDesign::RandomGroups(2),
        };
        let reps = replicate_weights(&scheme, &cohort, &survey, 3).unwrap();
        assert_eq!(reps.len(), 4);
        for rep in &reps[..2] {
            assert_eq!(rep.cohort_weights.iter().filter(|w| **w == 0.0).count(), 5);
            assert!(rep.cohort_weights.iter().all(|w| *w == 0.0 || *w == 4.0));
            assert_relative_eq!(rep.cohort_weights.iter().sum::<f64>(), 20.0);
        }
    }

    #[test]
    fn psu_replicates_within_strata() {
        let recs = vec![
            rec(0, Some("a"), Some("1")),
            rec(1, Some("a"), Some("2")),
            rec(2, Some("a"), Some("3")),
            rec(3, Some("b"), Some("1")),
            rec(4, Some("b"), Some("2")),
        ];
        let survey = WeightedSample::new(recs, vec![3.0, 3.0, 3.0, 1.0, 1.0], Source::Survey).unwrap();
        let cohort = sample(4, Source::Cohort);
        let scheme = ReplicateScheme {
            cohort_groups: 2,
            survey: SurveyDesign::Psu,
        };
        let reps = replicate_weights(&scheme, &cohort, &survey, 0).unwrap();
        let survey_reps = &reps[2..];
        assert_eq!(survey_reps.len(), 5);
        assert_eq!(survey_reps[0].survey_weights, vec![0.0, 4.5, 4.5, 1.0, 1.0]);
        assert_relative_eq!(survey_reps[0].coefficient, 2.0 / 3.0);
        assert_eq!(survey_reps[4].survey_weights, vec![3.0, 3.0, 3.0, 2.0, 0.0]);
        for rep in survey_reps {
            assert_relative_eq!(rep.survey_weights.iter().sum::<f64>(), 11.0);
        }
    }

    #[test]
    fn single_psu_stratum_is_invalid() {
        let recs = vec![rec(0, Some("a"), Some("1")), rec(1, Some("a"), Some("1"))];
        let survey = WeightedSample::new(recs, vec![1.0, 1.0], Source::Survey).unwrap();
        let scheme = ReplicateScheme {
            cohort_groups: 2,
            survey: SurveyDesign::Psu,
        };
        let err = replicate_weights(&scheme, &sample(4, Source::Cohort), &survey, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidScheme(_)));
    }

    #[test]
    fn variance_arithmetic() {
        let full = [1.0, 0.0];
        let reps = vec![vec![1.0, 0.0]; 3];
        assert_eq!(jackknife_variance(&reps, &[2.0 / 3.0; 3], &full).unwrap(), vec![0.0, 0.0]);
        let reps = vec![vec![1.3, 1.0], vec![0.8, -1.0], vec![0.9, 0.5]];
        let v = jackknife_variance(&reps, &[2.0 / 3.0; 3], &full).unwrap();
        assert_relative_eq!(v[0], 2.0 / 3.0 * (0.09 + 0.04 + 0.01), epsilon = 1e-15);
        assert_relative_eq!(v[1], 2.0 / 3.0 * 2.25, epsilon = 1e-15);
    }

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }
}
