//! Gap-time model between incidence and disease-specific death, and single
//! stochastic imputation of incidence for survey disease deaths.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EventTime, Outcome, WeightedSample};
use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::propensity::{design_matrix, Term};

pub const DEFAULT_EPS_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapModel {
    pub terms: Vec<Term>,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub residual_sd: f64,
    pub fit_weights_source: String,
}

impl GapModel {
    pub fn predict(&self, record: &crate::data::SurvivalRecord) -> Result<f64> {
        let mut pred = self.coefficients[0];
        for (t, c) in self.terms.iter().zip(&self.coefficients[1..]) {
            pred += c * t.value(record)?;
        }
        Ok(pred)
    }
}

/// Weighted least squares of `X~ - X` on `terms` over cohort disease deaths.
/// The residual sd is `sqrt(sum w r^2 / sum w * n / (n - k))`.
pub fn fit_gap_model(cohort: &WeightedSample, terms: &[Term]) -> Result<GapModel> {
    let mut idx = Vec::new();
    let mut gaps = Vec::new();
    for (i, r) in cohort.records().iter().enumerate() {
        if !r.mortality.event {
            continue;
        }
        let inc = r.outcome(Outcome::Incidence)?;
        let gap = r.mortality.time - inc.time;
        if gap < -1e-9 {
            return Err(Error::invalid(format!("record {}: incidence after disease-specific death", r.id)));
        }
        idx.push(i);
        gaps.push(gap.max(0.0));
    }
    let k = terms.len() + 1;
    if idx.len() < k + 1 {
        return Err(Error::InsufficientMortalityCases {
            found: idx.len(),
            required: k + 1,
        });
    }
    let x = design_matrix(terms, idx.iter().map(|&i| &cohort.records()[i]))?;
    let w: Vec<f64> = idx.iter().map(|&i| cohort.weights()[i]).collect();
    let y = DVector::from_vec(gaps);
    let mut xtwx = DMatrix::zeros(k, k);
    let mut xtwy = DVector::zeros(k);
    for (i, wi) in w.iter().enumerate() {
        for a in 0..k {
            xtwy[a] += wi * x[(i, a)] * y[i];
            for b in 0..k {
                xtwx[(a, b)] += wi * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let coef = spd_solve(&xtwx, &xtwy, "gap model normal equations")
        .map_err(|_| Error::NonIdentifiable("gap model design is rank deficient".into()))?;
    let resid = &y - &x * &coef;
    let sw: f64 = w.iter().sum();
    let n = w.len() as f64;
    let mse = w.iter().zip(resid.iter()).map(|(wi, r)| wi * r * r).sum::<f64>() / sw;
    let residual_sd = (mse * n / (n - k as f64)).sqrt();
    Ok(GapModel {
        terms: terms.to_vec(),
        coefficients: coef.iter().copied().collect(),
        residual_sd,
        fit_weights_source: "ipw_pseudoweights".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationAudit {
    pub id: String,
    pub x_tilde: f64,
    pub gap: f64,
    pub x_star: f64,
}

/// Fills the imputed outcome of every survey record. Disease deaths get
/// `D* = 1`, `X* = max(0, X~ - max(eps_min, pred + e))` with
/// `e ~ N(0, residual_sd)`; others are censored at `X~`.
pub fn impute_incidence(
    survey: &WeightedSample,
    model: &GapModel,
    seed: u64,
    eps_min: f64,
) -> Result<(WeightedSample, Vec<ImputationAudit>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, model.residual_sd)
        .map_err(|e| Error::invalid(format!("gap residual sd: {e}")))?;
    let mut records = survey.records().to_vec();
    let mut audit = Vec::new();
    for r in &mut records {
        let m = r.mortality;
        if m.event {
            let gap = (model.predict(r)? + noise.sample(&mut rng)).max(eps_min);
            let x_star = (m.time - gap).max(0.0);
            r.imputed = Some(EventTime::new(true, x_star));
            audit.push(ImputationAudit {
                id: r.id.clone(),
                x_tilde: m.time,
                gap,
                x_star,
            });
        } else {
            r.imputed = Some(EventTime::new(false, m.time));
        }
    }
    let mut out = survey.clone();
    out.replace_records(records);
    Ok((out, audit))
}

/// Cohort records use their observed incidence as the imputed outcome.
pub fn observed_as_imputed(cohort: &WeightedSample) -> Result<WeightedSample> {
    let records = cohort
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.imputed = Some(r.outcome(Outcome::Incidence)?);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = cohort.clone();
    out.replace_records(records);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Source, SurvivalRecord};
    use approx::assert_relative_eq;

    fn death(z: f64, x: f64, x_tilde: f64) -> SurvivalRecord {
        SurvivalRecord {
            id: format!("{z}"),
            z: vec![z],
            incidence: Some(EventTime::new(true, x)),
            mortality: EventTime::new(true, x_tilde),
            imputed: None,
            entry_offset: 0.0,
            stratum: None,
            psu: None,
            group: "all".into(),
        }
    }

    #[test]
    fn constant_gap_is_exact() {
        let recs: Vec<_> = (0..5).map(|i| death(i as f64, 1.0 + i as f64, 3.0 + i as f64)).collect();
        let c = WeightedSample::new(recs, vec![1.0, 2.0, 3.0, 1.0, 5.0], Source::Cohort).unwrap();
        let m = fit_gap_model(&c, &Term::all_covariates(1)).unwrap();
        assert_relative_eq!(m.coefficients[0], 2.0, epsilon = 1e-12);
        assert!(m.coefficients[1].abs() < 1e-12);
        assert!(m.residual_sd < 1e-12);
    }

    #[test]
    fn six_point_weighted_least_squares() {
        let z = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let gap = [1.0, 3.0, 2.0, 5.0, 4.0, 6.0];
        let w = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let recs: Vec<_> = (0..6).map(|i| death(z[i], 1.0, 1.0 + gap[i])).collect();
        let c = WeightedSample::new(recs, w.to_vec(), Source::Cohort).unwrap();
        let m = fit_gap_model(&c, &Term::all_covariates(1)).unwrap();
        // normal equations by hand
        let sw: f64 = w.iter().sum();
        let sx: f64 = (0..6).map(|i| w[i] * z[i]).sum();
        let sy: f64 = (0..6).map(|i| w[i] * gap[i]).sum();
        let sxx: f64 = (0..6).map(|i| w[i] * z[i] * z[i]).sum();
        let sxy: f64 = (0..6).map(|i| w[i] * z[i] * gap[i]).sum();
        let slope = (sw * sxy - sx * sy) / (sw * sxx - sx * sx);
        let icpt = (sy - slope * sx) / sw;
        assert_relative_eq!(m.coefficients[0], icpt, epsilon = 1e-12);
        assert_relative_eq!(m.coefficients[1], slope, epsilon = 1e-12);
        let ss: f64 = (0..6).map(|i| w[i] * (gap[i] - icpt - slope * z[i]).powi(2)).sum();
        assert_relative_eq!(m.residual_sd, (ss / sw * 6.0 / 4.0).sqrt(), epsilon = 1e-12);

        let doubled = c.with_weights(w.iter().map(|v| v * 2.0).collect()).unwrap();
        let m2 = fit_gap_model(&doubled, &Term::all_covariates(1)).unwrap();
        for (a, b) in m.coefficients.iter().zip(&m2.coefficients) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_few_deaths() {
        let recs: Vec<_> = (0..2).map(|i| death(i as f64, 1.0, 2.0)).collect();
        let c = WeightedSample::unweighted(recs, Source::Cohort).unwrap();
        let err = fit_gap_model(&c, &Term::all_covariates(1)).unwrap_err();
        assert!(matches!(err, Error::InsufficientMortalityCases { found: 2, required: 3 }));
    }

    fn survey_rec(id: &str, event: bool, x_tilde: f64) -> SurvivalRecord {
        SurvivalRecord {
            id: id.into(),
            z: vec![0.5],
            incidence: None,
            mortality: EventTime::new(event, x_tilde),
            imputed: None,
            entry_offset: 0.0,
            stratum: None,
            psu: None,
            group: "all".into(),
        }
    }

    #[test]
    fn deterministic_shift_floor_and_censoring() {
        let model = GapModel {
            terms: vec![],
            coefficients: vec![2.0],
            residual_sd: 0.0,
            fit_weights_source: "test".into(),
        };
        let s = WeightedSample::unweighted(
            vec![survey_rec("a", true, 10.0), survey_rec("b", true, 1.0), survey_rec("c", false, 7.0)],
            Source::Survey,
        )
        .unwrap();
        let (out, audit) = impute_incidence(&s, &model, 1, DEFAULT_EPS_MIN).unwrap();
        let imp: Vec<_> = out.records().iter().map(|r| r.imputed.unwrap()).collect();
        assert_eq!(imp[0], EventTime::new(true, 8.0));
        assert_eq!(imp[1], EventTime::new(true, 0.0));
        assert_eq!(imp[2], EventTime::new(false, 7.0));
        assert_eq!(audit.len(), 2);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let model = GapModel {
            terms: Term::all_covariates(1),
            coefficients: vec![3.0, 0.5],
            residual_sd: 1.5,
            fit_weights_source: "test".into(),
        };
        let recs: Vec<_> = (0..50).map(|i| survey_rec(&i.to_string(), i % 3 == 0, 5.0 + i as f64 * 0.1)).collect();
        let s = WeightedSample::unweighted(recs, Source::Survey).unwrap();
        let (a, _) = impute_incidence(&s, &model, 42, DEFAULT_EPS_MIN).unwrap();
        let (b, _) = impute_incidence(&s, &model, 42, DEFAULT_EPS_MIN).unwrap();
        assert_eq!(a, b);
        for r in a.records() {
            let x = r.imputed.unwrap();
            assert!(x.time >= 0.0 && x.time <= r.mortality.time);
        }
    }
}
