//! End-to-end estimation: naive, IPW, CIPW and CIPW-I fits of the incidence
//! model from a cohort, a reference survey and registry rates.
//!
//! Steps for the calibrated methods:
//! 1. propensity pseudoweights for the cohort;
//! 2. combination of the pseudoweighted cohort with the survey;
//! 3. a Cox fit on the combined sample (mortality, or imputed incidence) and
//!    its influence functions;
//! 4. calibration of the cohort pseudoweights to the combined-sample totals,
//!    once for the coefficients and once for the baseline hazard;
//! 5. optional poststratification, then the incidence fit and baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrate::{
    build_auxiliaries, build_combined, calibrate_weights, poststratify, AuxiliaryKind, CalibrationDiagnostics,
    CombinationScalars, Distance, EmptyCellPolicy, NegativeWeightPolicy, PoststratFactors,
};
use crate::cox::{
    design_breslow, design_influence, fit_design, par_baseline, pure_risk, CoxDesign, CoxFit, CoxOptions,
    ExhaustionPolicy,
};
use crate::data::{BaselineHazard, Outcome, RegistrySummary, WeightedSample};
use crate::error::{Error, Result};
use crate::imputation::{fit_gap_model, impute_incidence, observed_as_imputed, GapModel, ImputationAudit, DEFAULT_EPS_MIN};
use crate::propensity::{ipw_pseudoweights, LogisticOptions, PropensityFit, PropensityModelSpec, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "cipw")]
    Cipw,
    #[serde(rename = "cipw-i")]
    CipwI,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Naive, Method::Ipw, Method::Cipw, Method::CipwI];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Ipw => "ipw",
            Method::Cipw => "cipw",
            Method::CipwI => "cipw-i",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Registry rates deflated by the estimated attributable risk.
    #[default]
    Par,
    Breslow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoststratConfig {
    pub horizon: f64,
    #[serde(default)]
    pub empty_cell: EmptyCellPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub methods: Vec<Method>,
    pub propensity: PropensityModelSpec,
    /// Gap-model terms; all covariates when absent.
    pub gap_terms: Option<Vec<Term>>,
    pub cox: CoxOptions,
    pub logistic: LogisticOptions,
    pub baseline: BaselineKind,
    pub exhaustion: ExhaustionPolicy,
    pub t_max: f64,
    pub eps_min: f64,
    pub imputation_seed: u64,
    pub negative_weights: NegativeWeightPolicy,
    pub poststratify: Option<PoststratConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            propensity: PropensityModelSpec { terms: vec![] },
            gap_terms: None,
            cox: CoxOptions::default(),
            logistic: LogisticOptions::default(),
            baseline: BaselineKind::Par,
            exhaustion: ExhaustionPolicy::Error,
            t_max: 15.0,
            eps_min: DEFAULT_EPS_MIN,
            imputation_seed: 0,
            negative_weights: NegativeWeightPolicy::Permit,
            poststratify: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::invalid("t_max must be positive"));
        }
        if !(self.eps_min > 0.0) {
            return Err(Error::invalid("eps_min must be positive"));
        }
        if let Some(ps) = &self.poststratify {
            if !(ps.horizon > 0.0) {
                return Err(Error::invalid("poststratification horizon must be positive"));
            }
        }
        Ok(())
    }

    fn needs(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub fit: CoxFit,
    pub hazard: BaselineHazard,
    /// Weights used for the coefficient fit.
    #[serde(skip)]
    pub beta_weights: Vec<f64>,
    /// Weights used for the baseline hazard.
    #[serde(skip)]
    pub lambda_weights: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub calibration: Vec<CalibrationDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub poststratification: Vec<PoststratFactors>,
}

impl MethodResult {
    pub fn beta(&self) -> &[f64] {
        &self.fit.beta
    }

    pub fn pure_risk(&self, z: &[f64], t: f64) -> Result<f64> {
        pure_risk(&self.hazard, &self.fit.beta, z, t)
    }

    /// Coefficients followed by pure risks at `times` for profile `z`.
    pub fn estimates(&self, z: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.fit.beta.clone();
        for &t in times {
            out.push(self.pure_risk(z, t)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub methods: Vec<MethodResult>,
    pub propensity: Option<PropensityFit>,
    pub combination: Option<CombinationScalars>,
    pub gap_model: Option<GapModel>,
    #[serde(skip)]
    pub imputation_audit: Vec<ImputationAudit>,
}

impl PipelineOutput {
    pub fn method(&self, m: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Runs the requested methods. `cohort` carries base weights (all one for a
/// volunteer cohort), `survey` its design weights.
pub fn run_pipeline(
    cohort: &WeightedSample,
    survey: &WeightedSample,
    registry: Option<&RegistrySummary>,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    config.validate()?;
    if cohort.is_empty() {
        return Err(Error::invalid("empty cohort"));
    }
    let needs_survey = config.methods.iter().any(|m| *m != Method::Naive);
    if needs_survey && (survey.is_empty() || survey.dim() != cohort.dim()) {
        return Err(Error::invalid("survey is empty or has a different covariate dimension"));
    }
    if config.baseline == BaselineKind::Par && registry.is_none() {
        return Err(Error::invalid("PAR baseline requested but no registry summary supplied"));
    }
    if config.poststratify.is_some() && registry.is_none() {
        return Err(Error::invalid("poststratification requested but no registry summary supplied"));
    }
    // survey incidence is never used
    let survey = strip_incidence(survey);

    let mut out = PipelineOutput {
        methods: Vec::new(),
        propensity: None,
        combination: None,
        gap_model: None,
        imputation_audit: Vec::new(),
    };

    let design = CoxDesign::from_sample(cohort, Outcome::Incidence)?;
    if config.needs(Method::Naive) {
        let result = fit_method(Method::Naive, &design, cohort, cohort, registry, config)?;
        out.methods.push(result);
    }
    if !needs_survey {
        return Ok(out);
    }

    let (ipw, prop) = ipw_pseudoweights(cohort, &survey, &config.propensity, &config.logistic)?;
    out.propensity = Some(prop);
    if config.needs(Method::Ipw) {
        out.methods.push(fit_method(Method::Ipw, &design, &ipw, &ipw, registry, config)?);
    }
    if config.needs(Method::Cipw) {
        let (combined, scalars) = build_combined(&ipw, &survey)?;
        out.combination = Some(scalars);
        let result = calibrated_method(
            Method::Cipw,
            &design,
            &ipw,
            &combined,
            AuxiliaryKind::CipwBeta,
            AuxiliaryKind::CipwLambda,
            registry,
            config,
        )?;
        out.methods.push(result);
    }
    if config.needs(Method::CipwI) {
        let terms = config
            .gap_terms
            .clone()
            .unwrap_or_else(|| Term::all_covariates(cohort.dim()));
        let gap = fit_gap_model(&ipw, &terms)?;
        let (survey_imp, audit) = impute_incidence(&survey, &gap, config.imputation_seed, config.eps_min)?;
        let cohort_imp = observed_as_imputed(&ipw)?;
        let (combined, scalars) = build_combined(&cohort_imp, &survey_imp)?;
        out.combination.get_or_insert(scalars);
        let result = calibrated_method(
            Method::CipwI,
            &design,
            &cohort_imp,
            &combined,
            AuxiliaryKind::CipwiBeta,
            AuxiliaryKind::CipwiLambda,
            registry,
            config,
        )?;
        out.methods.push(result);
        out.gap_model = Some(gap);
        out.imputation_audit = audit;
    }
    out.methods.sort_by_key(|r| r.method);
    Ok(out)
}

fn strip_incidence(survey: &WeightedSample) -> WeightedSample {
    if survey.records().iter().all(|r| r.incidence.is_none()) {
        return survey.clone();
    }
    let records = survey
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.incidence = None;
            r
        })
        .collect();
    let mut out = survey.clone();
    out.replace_records(records);
    out
}

fn baseline(
    design: &CoxDesign,
    sample: &WeightedSample,
    fit: &CoxFit,
    registry: Option<&RegistrySummary>,
    config: &PipelineConfig,
) -> Result<BaselineHazard> {
    match config.baseline {
        BaselineKind::Breslow => design_breslow(&design.reweighted(sample.weights().to_vec())?, &fit.beta),
        BaselineKind::Par => {
            let reg = registry.ok_or_else(|| Error::invalid("PAR baseline needs a registry summary"))?;
            par_baseline(sample, fit, reg, config.t_max, config.exhaustion)
        }
    }
}

/// `design` holds the cohort incidence data; only its weights change.
fn fit_method(
    method: Method,
    design: &CoxDesign,
    beta_sample: &WeightedSample,
    lambda_sample: &WeightedSample,
    registry: Option<&RegistrySummary>,
    config: &PipelineConfig,
) -> Result<MethodResult> {
    let fit = fit_design(&design.reweighted(beta_sample.weights().to_vec())?, None, &config.cox)?;
    let hazard = baseline(design, lambda_sample, &fit, registry, config)?;
    Ok(MethodResult {
        method,
        fit,
        hazard,
        beta_weights: beta_sample.weights().to_vec(),
        lambda_weights: lambda_sample.weights().to_vec(),
        calibration: Vec::new(),
        poststratification: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn calibrated_method(
    method: Method,
    design: &CoxDesign,
    cohort: &WeightedSample,
    combined: &WeightedSample,
    beta_kind: AuxiliaryKind,
    lambda_kind: AuxiliaryKind,
    registry: Option<&RegistrySummary>,
    config: &PipelineConfig,
) -> Result<MethodResult> {
    let outcome = beta_kind.outcome();
    let combined_design = CoxDesign::from_sample(combined, outcome)?;
    let outcome_fit = fit_design(&combined_design, None, &config.cox)?;
    let influence = design_influence(&combined_design, &outcome_fit.beta)?;
    let base = cohort.weights();

    let mut diagnostics = Vec::new();
    let mut calibrated = Vec::new();
    for kind in [beta_kind, lambda_kind] {
        let aux = build_auxiliaries(combined, kind, &outcome_fit, Some(&influence))?;
        let v = aux.cohort_rows(combined);
        let result = calibrate_weights(base, &v, &aux.target, Distance::ChiSquared, config.negative_weights)?;
        diagnostics.push(CalibrationDiagnostics::new(kind, base, &result));
        calibrated.push(cohort.with_calibrated_weights(result.calibrated_weights)?);
    }
    let mut lambda_sample = calibrated.pop().expect("two weight sets");
    let mut beta_sample = calibrated.pop().expect("two weight sets");

    let mut post = Vec::new();
    if let (Some(ps), Some(reg)) = (&config.poststratify, registry) {
        let (b, fb) = poststratify(&beta_sample, reg, ps.horizon, ps.empty_cell)?;
        let (l, fl) = poststratify(&lambda_sample, reg, ps.horizon, ps.empty_cell)?;
        beta_sample = b;
        lambda_sample = l;
        post = vec![fb, fl];
    }
    let mut result = fit_method(method, design, &beta_sample, &lambda_sample, registry, config)?;
    result.calibration = diagnostics;
    result.poststratification = post;
    Ok(result)
}
