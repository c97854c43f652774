//! Fitted-model artifacts: what `fit` produces and `risk` consumes.

use serde::{Deserialize, Serialize};

use crate::data::{RegistrySummary, WeightedSample};
use crate::error::{Error, Result};
use crate::jackknife::{derive_seed, jackknife_variance, run_jackknife, Estimands, ReplicateFit, ReplicateScheme};
use crate::pipeline::{run_pipeline, Method, PipelineConfig, PipelineOutput};

pub const WALD_Z: f64 = 1.959963984540054;

/// Settings for fitting real data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub pipeline: PipelineConfig,
    /// Jackknife scheme; no standard errors when absent.
    pub jackknife: Option<ReplicateScheme>,
    /// Master seed. Overrides `pipeline.imputation_seed`; replicate
    /// grouping uses a seed derived from it.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            jackknife: Some(ReplicateScheme::default()),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if let Some(s) = &self.jackknife {
            if s.cohort_groups < 2 {
                return Err(Error::InvalidScheme("need at least 2 cohort groups".into()));
            }
        }
        Ok(())
    }

    /// The pipeline settings actually run.
    pub fn resolved_pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            imputation_seed: self.seed,
            ..self.pipeline.clone()
        }
    }

    pub fn run(
        &self,
        cohort: &WeightedSample,
        survey: &WeightedSample,
        registry: Option<&RegistrySummary>,
    ) -> Result<FittedModel> {
        self.validate()?;
        let pipeline = self.resolved_pipeline();
        let Some(scheme) = &self.jackknife else {
            let output = run_pipeline(cohort, survey, registry, &pipeline)?;
            return Ok(FittedModel::new(output, vec![], vec![], 0));
        };
        let estimands = Estimands {
            profile: vec![0.0; cohort.dim()],
            times: vec![],
        };
        let jk = run_jackknife(cohort, survey, registry, &pipeline, scheme, &estimands, derive_seed(self.seed, 1))?;
        Ok(FittedModel::new(jk.full, jk.fits, jk.failed, jk.total))
    }
}

/// Full-sample fits plus the replicate fits that give standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub covariates: usize,
    pub output: PipelineOutput,
    /// Jackknife standard errors of the coefficients, per method, in
    /// `output.methods` order. Empty without replicates.
    pub beta_se: Vec<Vec<f64>>,
    pub replicates: Vec<ReplicateFit>,
    pub failed_replicates: Vec<String>,
    pub total_replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub method: Method,
    pub t: f64,
    pub risk: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl FittedModel {
    fn new(output: PipelineOutput, replicates: Vec<ReplicateFit>, failed: Vec<String>, total: usize) -> Self {
        let covariates = output.methods.first().map_or(0, |m| m.fit.beta.len());
        let mut model = Self {
            covariates,
            output,
            beta_se: vec![],
            replicates,
            failed_replicates: failed,
            total_replicates: total,
        };
        if !model.replicates.is_empty() {
            model.beta_se = model
                .output
                .methods
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let reps: Vec<Vec<f64>> = model.replicates.iter().map(|r| r.curves[k].beta.clone()).collect();
                    let v = model.variance(&reps, &m.fit.beta)?;
                    Ok(v.iter().map(|x| x.sqrt()).collect())
                })
                .collect::<Result<_>>()
                .unwrap_or_default();
        }
        model
    }

    fn variance(&self, reps: &[Vec<f64>], full: &[f64]) -> Result<Vec<f64>> {
        let coef: Vec<f64> = self.replicates.iter().map(|r| r.coefficient).collect();
        jackknife_variance(reps, &coef, full)
    }

    /// Pure risks for profile `z` at each time, per method, with jackknife
    /// standard errors and Wald 95% intervals clipped to [0, 1] when
    /// replicates are available.
    pub fn risk_table(&self, z: &[f64], times: &[f64]) -> Result<Vec<RiskRow>> {
        if z.len() != self.covariates {
            return Err(Error::invalid(format!(
                "profile has {} values, model has {} covariates",
                z.len(),
                self.covariates
            )));
        }
        let mut rows = Vec::new();
        for (k, m) in self.output.methods.iter().enumerate() {
            let full: Vec<f64> = times.iter().map(|&t| m.pure_risk(z, t)).collect::<Result<_>>()?;
            let var = if self.replicates.is_empty() {
                None
            } else {
                let reps: Vec<Vec<f64>> = self
                    .replicates
                    .iter()
                    .map(|r| times.iter().map(|&t| r.curves[k].pure_risk(z, t)).collect())
                    .collect::<Result<_>>()?;
                Some(self.variance(&reps, &full)?)
            };
            for (j, (&t, &risk)) in times.iter().zip(&full).enumerate() {
                let se = var.as_ref().map(|v| v[j].sqrt());
                rows.push(RiskRow {
                    method: m.method,
                    t,
                    risk,
                    se,
                    lower: se.map(|s| (risk - WALD_Z * s).max(0.0)),
                    upper: se.map(|s| (risk + WALD_Z * s).min(1.0)),
                });
            }
        }
        Ok(rows)
    }
}
