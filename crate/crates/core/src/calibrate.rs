//! Combining the pseudoweighted cohort with the weighted survey, influence
//! function auxiliaries, calibration of the cohort weights to the combined
//! sample, and poststratification to registry case counts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cox::{CoxFit, InfluenceMatrix};
use crate::data::{Outcome, RegistrySummary, Source, WeightedSample};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, spd_solve};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinationScalars {
    pub a_c: f64,
    pub a_s: f64,
    pub cv_c: f64,
    pub cv_s: f64,
}

/// Coefficient of variation with population (`1/n`) variance.
pub fn coefficient_of_variation(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Scalars `a_d = W / (2 W_d) {1 - k_d / (k_c + k_s)}` with
/// `k_d = (CV_d^2 + 1) / n_d` and `W = W_c + W_s`.
pub fn combination_scalars(cohort_weights: &[f64], survey_weights: &[f64]) -> Result<CombinationScalars> {
    if cohort_weights.is_empty() || survey_weights.is_empty() {
        return Err(Error::invalid("combination needs nonempty cohort and survey"));
    }
    if cohort_weights.iter().chain(survey_weights).any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid("combination weights must be positive"));
    }
    let w_c: f64 = cohort_weights.iter().sum();
    let w_s: f64 = survey_weights.iter().sum();
    let total = w_c + w_s;
    let cv_c = coefficient_of_variation(cohort_weights);
    let cv_s = coefficient_of_variation(survey_weights);
    let k_c = (cv_c * cv_c + 1.0) / cohort_weights.len() as f64;
    let k_s = (cv_s * cv_s + 1.0) / survey_weights.len() as f64;
    let k = k_c + k_s;
    Ok(CombinationScalars {
        a_c: total / (2.0 * w_c) * (k_s / k),
        a_s: total / (2.0 * w_s) * (k_c / k),
        cv_c,
        cv_s,
    })
}

/// Concatenates cohort (first) and survey with weights `a_c w_c`, `a_s w_s`.
pub fn build_combined(cohort: &WeightedSample, survey: &WeightedSample) -> Result<(WeightedSample, CombinationScalars)> {
    if cohort.dim() != survey.dim() {
        return Err(Error::invalid("cohort and survey have different covariate dimensions"));
    }
    let scalars = combination_scalars(cohort.weights(), survey.weights())?;
    let records: Vec<_> = cohort.records().iter().chain(survey.records()).cloned().collect();
    let weights: Vec<f64> = cohort
        .weights()
        .iter()
        .map(|w| w * scalars.a_c)
        .chain(survey.weights().iter().map(|w| w * scalars.a_s))
        .collect();
    let origins: Vec<Source> = std::iter::repeat_n(Source::Cohort, cohort.len())
        .chain(std::iter::repeat_n(Source::Survey, survey.len()))
        .collect();
    Ok((WeightedSample::combined(records, weights, origins)?, scalars))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxiliaryKind {
    CipwBeta,
    CipwLambda,
    CipwiBeta,
    CipwiLambda,
}

impl AuxiliaryKind {
    pub fn outcome(self) -> Outcome {
        match self {
            AuxiliaryKind::CipwBeta | AuxiliaryKind::CipwLambda => Outcome::Mortality,
            AuxiliaryKind::CipwiBeta | AuxiliaryKind::CipwiLambda => Outcome::Imputed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliarySet {
    /// One row per combined-sample record; first column is all ones.
    pub v: DMatrix<f64>,
    pub target: DVector<f64>,
    pub kind: AuxiliaryKind,
}

impl AuxiliarySet {
    /// Rows belonging to cohort records, in order.
    pub fn cohort_rows(&self, combined: &WeightedSample) -> DMatrix<f64> {
        let idx: Vec<usize> = combined
            .origins()
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == Source::Cohort)
            .map(|(i, _)| i)
            .collect();
        self.v.select_rows(&idx)
    }
}

/// `{1, D, Delta}` for the beta-targeted kinds and `{1, D, X exp(beta'z)}`
/// for the hazard-targeted kinds, where `(D, X)` is mortality for CIPW and the
/// imputed incidence for CIPW-I.
pub fn build_auxiliaries(
    combined: &WeightedSample,
    kind: AuxiliaryKind,
    outcome_fit: &CoxFit,
    influence: Option<&InfluenceMatrix>,
) -> Result<AuxiliarySet> {
    let n = combined.len();
    let p = outcome_fit.dim();
    let outcome = kind.outcome();
    let beta_kind = matches!(kind, AuxiliaryKind::CipwBeta | AuxiliaryKind::CipwiBeta);
    let q = if beta_kind { 2 + p } else { 3 };
    if beta_kind {
        let inf = influence.ok_or_else(|| Error::invalid("influence functions required for beta auxiliaries"))?;
        if inf.values.nrows() != n || inf.values.ncols() != p {
            return Err(Error::invalid("influence matrix does not match combined sample"));
        }
    }
    let mut v = DMatrix::zeros(n, q);
    for (i, r) in combined.records().iter().enumerate() {
        let obs = r.outcome(outcome)?;
        v[(i, 0)] = 1.0;
        v[(i, 1)] = f64::from(u8::from(obs.event));
        if beta_kind {
            let inf = influence.expect("checked above");
            for j in 0..p {
                v[(i, 2 + j)] = inf.values[(i, j)];
            }
        } else {
            let lp: f64 = r.z.iter().zip(&outcome_fit.beta).map(|(a, b)| a * b).sum();
            v[(i, 2)] = obs.time * lp.exp();
        }
    }
    let w = DVector::from_column_slice(combined.weights());
    let target = v.transpose() * w;
    Ok(AuxiliarySet { v, target, kind })
}

/// Calibration function `F` of a distance measure.
pub trait CalibrationFunction {
    fn factor(&self, u: f64) -> f64;
    fn derivative(&self, u: f64) -> f64;
}

/// Chi-squared distance: `F(u) = 1 + u`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChiSquared;

impl CalibrationFunction for ChiSquared {
    fn factor(&self, u: f64) -> f64 {
        1.0 + u
    }

    fn derivative(&self, _u: f64) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    ChiSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeWeightPolicy {
    /// Keep negative calibrated weights; warn.
    #[default]
    Permit,
    /// Truncate at `1e-6 * mean(base)` and recalibrate once.
    Truncate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub eta: Vec<f64>,
    pub factors: Vec<f64>,
    pub calibrated_weights: Vec<f64>,
    /// `sum w~ v - target`.
    pub achieved_constraints: Vec<f64>,
    pub negative_weights: usize,
}

/// Scales columns to unit weighted RMS so the Gram solve is well conditioned;
/// returns the scale per column.
fn column_scales(base: &[f64], v: &DMatrix<f64>) -> Vec<f64> {
    let total: f64 = base.iter().sum();
    (0..v.ncols())
        .map(|j| {
            let ms: f64 = base.iter().enumerate().map(|(i, w)| w * v[(i, j)].powi(2)).sum::<f64>() / total;
            if ms > 0.0 && ms.is_finite() {
                1.0 / ms.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// Columns that are (numerically) linear combinations of earlier ones under
/// the base weighting.
fn collinear_columns(base: &[f64], v: &DMatrix<f64>) -> Vec<usize> {
    let n = v.nrows();
    let sw: Vec<f64> = base.iter().map(|w| w.abs().sqrt()).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..v.ncols() {
        let mut col = DVector::from_fn(n, |i, _| sw[i] * v[(i, j)]);
        let norm0 = col.norm();
        for b in &basis {
            let proj = b.dot(&col);
            col -= b * proj;
        }
        let norm = col.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            bad.push(j);
        } else {
            basis.push(col / norm);
        }
    }
    bad
}

fn gram(base: &[f64], v: &DMatrix<f64>, scales: &[f64]) -> DMatrix<f64> {
    let q = v.ncols();
    let mut g = DMatrix::zeros(q, q);
    for (i, w) in base.iter().enumerate() {
        for a in 0..q {
            let va = v[(i, a)] * scales[a];
            for b in a..q {
                g[(a, b)] += w * va * v[(i, b)] * scales[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

fn totals(w: &[f64], v: &DMatrix<f64>) -> DVector<f64> {
    v.transpose() * DVector::from_column_slice(w)
}

fn finish(base: &[f64], v: &DMatrix<f64>, target: &DVector<f64>, eta: DVector<f64>, f: &dyn CalibrationFunction) -> CalibrationResult {
    let u = v * &eta;
    let factors: Vec<f64> = u.iter().map(|&x| f.factor(x)).collect();
    let calibrated: Vec<f64> = base.iter().zip(&factors).map(|(w, g)| w * g).collect();
    let achieved = totals(&calibrated, v) - target;
    let negative = calibrated.iter().filter(|w| **w < 0.0).count();
    CalibrationResult {
        eta: eta.iter().copied().collect(),
        factors,
        calibrated_weights: calibrated,
        achieved_constraints: achieved.iter().copied().collect(),
        negative_weights: negative,
    }
}

/// Closed-form chi-squared calibration:
/// `eta = (sum w v v')^-1 (target - sum w v)`, `w~ = (1 + v'eta) w`.
pub fn calibrate_weights(
    base_weights: &[f64],
    v: &DMatrix<f64>,
    target: &DVector<f64>,
    distance: Distance,
    policy: NegativeWeightPolicy,
) -> Result<CalibrationResult> {
    let Distance::ChiSquared = distance;
    let result = calibrate_chi_squared(base_weights, v, target)?;
    if result.negative_weights == 0 {
        return Ok(result);
    }
    match policy {
        NegativeWeightPolicy::Permit => {
            log::warn!("{} calibrated weights are negative", result.negative_weights);
            Ok(result)
        }
        NegativeWeightPolicy::Truncate => {
            let mean = base_weights.iter().sum::<f64>() / base_weights.len() as f64;
            let floor = 1e-6 * mean;
            let truncated: Vec<f64> = result.calibrated_weights.iter().map(|w| w.max(floor)).collect();
            let second = calibrate_chi_squared(&truncated, v, target)?;
            let factors = second
                .calibrated_weights
                .iter()
                .zip(base_weights)
                .map(|(c, b)| c / b)
                .collect();
            if second.negative_weights > 0 {
                log::warn!("{} calibrated weights remain negative after truncation", second.negative_weights);
            }
            Ok(CalibrationResult { factors, ..second })
        }
    }
}

fn calibrate_chi_squared(base: &[f64], v: &DMatrix<f64>, target: &DVector<f64>) -> Result<CalibrationResult> {
    check_shapes(base, v, target)?;
    let bad = collinear_columns(base, v);
    if !bad.is_empty() {
        return Err(Error::CollinearAuxiliaries { columns: bad });
    }
    let scales = column_scales(base, v);
    let g = gram(base, v, &scales);
    let gap = target - totals(base, v);
    let scaled_gap = DVector::from_fn(gap.len(), |j, _| gap[j] * scales[j]);
    let eta_scaled = spd_solve(&g, &scaled_gap, "calibration Gram matrix").map_err(|_| Error::CollinearAuxiliaries {
        columns: collinear_columns(base, v),
    })?;
    let eta = DVector::from_fn(eta_scaled.len(), |j, _| eta_scaled[j] * scales[j]);
    Ok(finish(base, v, target, eta, &ChiSquared))
}

fn check_shapes(base: &[f64], v: &DMatrix<f64>, target: &DVector<f64>) -> Result<()> {
    if v.nrows() != base.len() || v.ncols() != target.len() {
        return Err(Error::invalid("calibration matrix, weights and target have inconsistent shapes"));
    }
    if v.ncols() == 0 {
        return Err(Error::invalid("calibration needs at least one auxiliary"));
    }
    Ok(())
}

/// Newton solve of `sum w F(v'eta) v = target` for a general calibration
/// function.
pub fn calibrate_iterative(
    base: &[f64],
    v: &DMatrix<f64>,
    target: &DVector<f64>,
    f: &dyn CalibrationFunction,
    tol: f64,
    max_iter: usize,
) -> Result<CalibrationResult> {
    check_shapes(base, v, target)?;
    let scales = column_scales(base, v);
    let vs = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * scales[j]);
    let ts = DVector::from_fn(target.len(), |j, _| target[j] * scales[j]);
    let norm = ts.amax().max(1.0);
    let mut eta = DVector::zeros(v.ncols());
    for _ in 0..=max_iter {
        let u = &vs * &eta;
        let w: Vec<f64> = base.iter().zip(u.iter()).map(|(b, &x)| b * f.factor(x)).collect();
        let q = totals(&w, &vs) - &ts;
        if max_abs(&q) <= tol * norm {
            let eta = DVector::from_fn(eta.len(), |j, _| eta[j] * scales[j]);
            return Ok(finish(base, v, target, eta, f));
        }
        let d: Vec<f64> = base.iter().zip(u.iter()).map(|(b, &x)| b * f.derivative(x)).collect();
        let jac = gram(&d, &vs, &vec![1.0; vs.ncols()]);
        let step = spd_solve(&jac, &q, "calibration Jacobian").map_err(|_| Error::CollinearAuxiliaries {
            columns: collinear_columns(base, v),
        })?;
        eta -= step;
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        max_score: f64::NAN,
        estimate: eta.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub cv: f64,
    pub total: f64,
}

impl WeightSummary {
    pub fn of(w: &[f64]) -> Self {
        Self {
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            cv: coefficient_of_variation(w),
            total: w.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub kind: AuxiliaryKind,
    pub eta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub before: WeightSummary,
    pub after: WeightSummary,
    pub negative_weights: usize,
}

impl CalibrationDiagnostics {
    pub fn new(kind: AuxiliaryKind, base: &[f64], result: &CalibrationResult) -> Self {
        Self {
            kind,
            eta: result.eta.clone(),
            residuals: result.achieved_constraints.clone(),
            before: WeightSummary::of(base),
            after: WeightSummary::of(&result.calibrated_weights),
            negative_weights: result.negative_weights,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCellPolicy {
    #[default]
    Error,
    /// Merge the offending group with the next group (in sorted order, or the
    /// previous one for the last group) and adjust the merged cell.
    CollapseWithNeighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoststratFactors {
    /// Cells after any collapsing, each listing its registry groups.
    pub cells: Vec<Vec<String>>,
    pub case_factor: Vec<f64>,
    pub noncase_factor: Vec<f64>,
}

/// Ratio-adjusts cohort weights so that, within each registry group, the
/// weighted number of incident cases by `horizon` equals `M_{1,g}(horizon)`
/// and the weighted group total equals `M_g`.
pub fn poststratify(
    cohort: &WeightedSample,
    registry: &RegistrySummary,
    horizon: f64,
    policy: EmptyCellPolicy,
) -> Result<(WeightedSample, PoststratFactors)> {
    let groups: Vec<&String> = registry.group_sizes.keys().collect();
    if groups.is_empty() {
        return Err(Error::invalid("registry has no group sizes for poststratification"));
    }
    let index: BTreeMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
    let g_n = groups.len();
    let mut case_w = vec![0.0; g_n];
    let mut noncase_w = vec![0.0; g_n];
    let mut is_case = Vec::with_capacity(cohort.len());
    let mut member = Vec::with_capacity(cohort.len());
    for (r, &w) in cohort.records().iter().zip(cohort.weights()) {
        let g = *index
            .get(r.group.as_str())
            .ok_or_else(|| Error::invalid(format!("cohort group '{}' missing from registry", r.group)))?;
        let inc = r.outcome(Outcome::Incidence)?;
        let case = inc.event && inc.time <= horizon;
        if case {
            case_w[g] += w;
        } else {
            noncase_w[g] += w;
        }
        is_case.push(case);
        member.push(g);
    }
    let mut target_cases = vec![0.0; g_n];
    let mut target_size = vec![0.0; g_n];
    for (i, g) in groups.iter().enumerate() {
        target_cases[i] = registry
            .cases(g, horizon)
            .ok_or_else(|| Error::invalid(format!("registry lacks case count for group {g} at horizon {horizon}")))?;
        target_size[i] = registry.group_sizes[*g] as f64;
    }

    // cell id per group; starts as identity and merges on empty cells
    let mut cell: Vec<usize> = (0..g_n).collect();
    loop {
        let n_cells = cell.iter().max().map_or(0, |m| m + 1);
        let mut cw = vec![0.0; n_cells];
        let mut nw = vec![0.0; n_cells];
        let mut tc = vec![0.0; n_cells];
        let mut ts = vec![0.0; n_cells];
        for g in 0..g_n {
            cw[cell[g]] += case_w[g];
            nw[cell[g]] += noncase_w[g];
            tc[cell[g]] += target_cases[g];
            ts[cell[g]] += target_size[g];
        }
        let empty = (0..n_cells).find(|&c| {
            (tc[c] > 0.0 && !(cw[c] > 0.0)) || (ts[c] - tc[c] > 0.0 && !(nw[c] > 0.0))
        });
        match (empty, policy) {
            (None, _) => {
                let case_factor: Vec<f64> = (0..n_cells).map(|c| if cw[c] > 0.0 { tc[c] / cw[c] } else { 1.0 }).collect();
                let noncase_factor: Vec<f64> =
                    (0..n_cells).map(|c| if nw[c] > 0.0 { (ts[c] - tc[c]) / nw[c] } else { 1.0 }).collect();
                let weights: Vec<f64> = cohort
                    .weights()
                    .iter()
                    .zip(member.iter().zip(&is_case))
                    .map(|(w, (&g, &case))| w * if case { case_factor[cell[g]] } else { noncase_factor[cell[g]] })
                    .collect();
                let cells = (0..n_cells)
                    .map(|c| (0..g_n).filter(|&g| cell[g] == c).map(|g| groups[g].clone()).collect())
                    .collect();
                let out = cohort.with_calibrated_weights(weights)?;
                return Ok((
                    out,
                    PoststratFactors {
                        cells,
                        case_factor,
                        noncase_factor,
                    },
                ));
            }
            (Some(c), EmptyCellPolicy::Error) => {
                let name = (0..g_n).filter(|&g| cell[g] == c).map(|g| groups[g].as_str()).collect::<Vec<_>>().join("+");
                return Err(Error::EmptyPoststratum { group: name });
            }
            (Some(c), EmptyCellPolicy::CollapseWithNeighbor) => {
                if n_cells == 1 {
                    return Err(Error::EmptyPoststratum { group: "all".into() });
                }
                let into = if c + 1 < n_cells { c + 1 } else { c - 1 };
                let (lo, hi) = (c.min(into), c.max(into));
                for x in cell.iter_mut() {
                    if *x == hi {
                        *x = lo;
                    } else if *x > hi {
                        *x -= 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EventTime, PiecewiseRate, SurvivalRecord};
    use crate::data::GroupCases;
    use approx::assert_relative_eq;

    #[test]
    fn equal_weights_equal_sizes_give_halves() {
        let s = combination_scalars(&[3.0; 10], &[3.0; 10]).unwrap();
        assert_relative_eq!(s.a_c, 0.5, epsilon = 1e-15);
        assert_relative_eq!(s.a_s, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_cv_unequal_sizes() {
        // n_c = 10, n_s = 20, equal totals W_c = W_s = 100
        let s = combination_scalars(&[10.0; 10], &[5.0; 20]).unwrap();
        let w = 200.0;
        assert_relative_eq!(s.a_c, w / 200.0 * (1.0 / 3.0), epsilon = 1e-15);
        assert_relative_eq!(s.a_s, w / 200.0 * (2.0 / 3.0), epsilon = 1e-15);
        assert_relative_eq!(s.a_c * 100.0 + s.a_s * 100.0, w / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_identity_when_constraints_hold() {
        let v = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, 2.0, 1.0, -1.0, 1.0, 0.0]);
        let base = [1.0, 2.0, 3.0, 4.0];
        let target = totals(&base, &v);
        let r = calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Permit).unwrap();
        assert!(r.eta.iter().all(|e| e.abs() < 1e-14));
        for (a, b) in r.calibrated_weights.iter().zip(base) {
            assert_relative_eq!(*a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn totals_only_is_uniform_ratio() {
        let v = DMatrix::from_element(5, 1, 1.0);
        let base = [1.0, 2.0, 3.0, 4.0, 5.0];
        let target = DVector::from_element(1, 15.0 * 1.7);
        let r = calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Permit).unwrap();
        for f in r.factors {
            assert_relative_eq!(f, 1.7, epsilon = 1e-14);
        }
    }

    #[test]
    fn collinear_auxiliaries_are_reported() {
        let v = DMatrix::from_row_slice(4, 3, &[1.0, 0.5, 1.5, 1.0, 2.0, 3.0, 1.0, -1.0, 0.0, 1.0, 0.0, 1.0]);
        let base = [1.0; 4];
        let target = DVector::from_element(3, 1.0);
        let err = calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Permit).unwrap_err();
        match err {
            Error::CollinearAuxiliaries { columns } => assert_eq!(columns, vec![2]),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn truncation_policy_removes_negative_weights() {
        let v = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let base = [1.0; 4];
        // pushes the low-v weights negative
        let target = DVector::from_column_slice(&[4.0, 12.0]);
        let permit = calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Permit).unwrap();
        assert!(permit.negative_weights > 0);
        let trunc = calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Truncate).unwrap();
        assert_ne!(trunc.calibrated_weights, permit.calibrated_weights);
        for (f, c) in trunc.factors.iter().zip(&trunc.calibrated_weights) {
            assert_relative_eq!(*f, *c, epsilon = 1e-15);
        }
        for r in &trunc.achieved_constraints {
            assert!(r.abs() < 1e-10);
        }
    }

    #[test]
    fn iterative_solver_reproduces_closed_form() {
        let v = DMatrix::from_row_slice(
            6,
            3,
            &[1.0, 0.2, 3.0, 1.0, 1.1, -2.0, 1.0, 0.0, 0.5, 1.0, 2.5, 1.0, 1.0, 0.7, 0.0, 1.0, 1.9, -1.0],
        );
        let base = [2.0, 1.0, 3.0, 1.5, 2.5, 1.0];
        let target = DVector::from_column_slice(&[12.0, 10.0, 2.0]);
        let a = calibrate_weights(&base, &v, &target, Distance::ChiSquared, NegativeWeightPolicy::Permit).unwrap();
        let b = calibrate_iterative(&base, &v, &target, &ChiSquared, 1e-14, 20).unwrap();
        for (x, y) in a.calibrated_weights.iter().zip(&b.calibrated_weights) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    fn rec(group: &str, case: bool) -> SurvivalRecord {
        SurvivalRecord {
            id: "r".into(),
            z: vec![0.0],
            incidence: Some(EventTime::new(case, if case { 3.0 } else { 15.0 })),
            mortality: EventTime::new(false, 15.0),
            imputed: None,
            entry_offset: 0.0,
            stratum: None,
            psu: None,
            group: group.into(),
        }
    }

    fn registry(sizes: &[(&str, u64, f64)]) -> RegistrySummary {
        RegistrySummary {
            population_size: sizes.iter().map(|s| s.1).sum(),
            group_sizes: sizes.iter().map(|s| (s.0.to_string(), s.1)).collect(),
            group_cases: sizes
                .iter()
                .map(|s| GroupCases {
                    group: s.0.into(),
                    horizon: 15.0,
                    cases: s.2,
                })
                .collect(),
            composite_incidence_rate: PiecewiseRate::constant(0.01, 15.0).unwrap(),
            composite_mortality_rates: None,
        }
    }

    #[test]
    fn poststratification_two_groups() {
        let recs = vec![rec("a", true), rec("a", false), rec("a", false), rec("b", true), rec("b", false)];
        let w = vec![10.0, 20.0, 30.0, 5.0, 50.0];
        let cohort = WeightedSample::new(recs, w, Source::Cohort).unwrap();
        let reg = registry(&[("a", 100, 20.0), ("b", 80, 8.0)]);
        let (out, f) = poststratify(&cohort, &reg, 15.0, EmptyCellPolicy::Error).unwrap();
        assert_relative_eq!(f.case_factor[0], 20.0 / 10.0);
        assert_relative_eq!(f.noncase_factor[0], 80.0 / 50.0);
        assert_relative_eq!(f.case_factor[1], 8.0 / 5.0);
        assert_relative_eq!(f.noncase_factor[1], 72.0 / 50.0);
        let w = out.weights();
        assert_relative_eq!(w[0], 20.0);
        assert_relative_eq!(w[1] + w[2], 80.0);
        assert_relative_eq!(w[3] / (w[3] + w[4]), 8.0 / 80.0, epsilon = 1e-15);
    }

    #[test]
    fn poststratification_identity_and_empty_cells() {
        let recs = vec![rec("a", true), rec("a", false), rec("b", false)];
        let cohort = WeightedSample::new(recs, vec![2.0, 8.0, 5.0], Source::Cohort).unwrap();
        let reg = registry(&[("a", 10, 2.0), ("b", 5, 1.0)]);
        let err = poststratify(&cohort, &reg, 15.0, EmptyCellPolicy::Error).unwrap_err();
        assert!(matches!(err, Error::EmptyPoststratum { .. }));
        let (out, f) = poststratify(&cohort, &reg, 15.0, EmptyCellPolicy::CollapseWithNeighbor).unwrap();
        assert_eq!(f.cells, vec![vec!["a".to_string(), "b".to_string()]]);
        assert_relative_eq!(out.weights()[0], 3.0);

        let reg_ok = registry(&[("a", 10, 2.0), ("b", 5, 0.0)]);
        let (same, f) = poststratify(&cohort, &reg_ok, 15.0, EmptyCellPolicy::Error).unwrap();
        assert!(f.case_factor.iter().chain(&f.noncase_factor).all(|x| (*x - 1.0).abs() < 1e-15));
        assert_eq!(same.weights(), cohort.weights());
    }
}
