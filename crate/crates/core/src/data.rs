//! Shared domain types: subjects, weighted samples, registry summaries and
//! cumulative hazard curves.
//!
//! Times are years on study. An observed outcome is a pair (event indicator,
//! observed time). The counting process `N(t) = 1{X <= t, event}` and the
//! at-risk process `Y(t) = 1{X >= t}` are derived views, see
//! [`risk_process_views`]. A subject is counted in the risk set at its own
//! event time.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which time-to-event outcome of a record is analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Incidence,
    Mortality,
    /// Incidence with imputed values for survey disease deaths.
    Imputed,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Incidence => "incidence",
            Outcome::Mortality => "mortality",
            Outcome::Imputed => "imputed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTime {
    pub event: bool,
    pub time: f64,
}

impl EventTime {
    pub fn new(event: bool, time: f64) -> Self {
        Self { event, time }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub id: String,
    pub z: Vec<f64>,
    /// Disease incidence `(D, X)`; absent for survey records.
    pub incidence: Option<EventTime>,
    /// Disease-specific mortality `(D~, X~)`.
    pub mortality: EventTime,
    /// Imputation-step outcome `(D*, X*)`, filled in during CIPW-I.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imputed: Option<EventTime>,
    pub entry_offset: f64,
    pub stratum: Option<String>,
    pub psu: Option<String>,
    pub group: String,
}

impl SurvivalRecord {
    pub fn outcome(&self, outcome: Outcome) -> Result<EventTime> {
        let value = match outcome {
            Outcome::Incidence => self.incidence,
            Outcome::Mortality => Some(self.mortality),
            Outcome::Imputed => self.imputed,
        };
        value.ok_or_else(|| Error::OutcomeUnavailable {
            id: self.id.clone(),
            outcome: outcome.name(),
        })
    }

    /// Checks the record invariants against the administrative horizon `c0`
    /// (years from study start).
    pub fn validate(&self, c0: f64) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("record {}: {msg}", self.id)));
        if self.z.iter().any(|v| !v.is_finite()) {
            return bad("non-finite covariate");
        }
        if !(self.entry_offset >= 0.0) {
            return bad("negative entry offset");
        }
        let horizon = c0 - self.entry_offset;
        let tol = 1e-9 * c0.max(1.0);
        let m = self.mortality;
        if !(m.time >= 0.0) || m.time > horizon + tol {
            return bad("mortality time outside [0, C0 - entry_offset]");
        }
        if let Some(inc) = self.incidence {
            if !(inc.time >= 0.0) || inc.time > horizon + tol {
                return bad("incidence time outside [0, C0 - entry_offset]");
            }
            if m.event && !inc.event {
                return bad("disease death without recorded incidence");
            }
            if m.event && inc.event && inc.time > m.time + tol {
                return bad("incidence after disease-specific death");
            }
        }
        Ok(())
    }
}

/// `(N(t), Y(t))` for one record and outcome.
pub fn risk_process_views(record: &SurvivalRecord, t: f64, outcome: Outcome) -> Result<(u8, u8)> {
    let obs = record.outcome(outcome)?;
    let n = u8::from(obs.event && obs.time <= t);
    let y = u8::from(obs.time >= t);
    Ok((n, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Cohort,
    Survey,
    Combined,
}

/// Records with a parallel weight vector. Records are shared between
/// samples that differ only in their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    records: Arc<Vec<SurvivalRecord>>,
    weights: Vec<f64>,
    source: Source,
    origins: Vec<Source>,
}

impl WeightedSample {
    /// Builds a cohort or survey sample; weights must be strictly positive.
    pub fn new(records: Vec<SurvivalRecord>, weights: Vec<f64>, source: Source) -> Result<Self> {
        check_lengths(&records, &weights)?;
        let origins = vec![source; records.len()];
        Self::positive(Arc::new(records), weights, source, origins)
    }

    fn positive(records: Arc<Vec<SurvivalRecord>>, weights: Vec<f64>, source: Source, origins: Vec<Source>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid(format!(
                "weight {} of record {} is not strictly positive",
                weights[i], records[i].id
            )));
        }
        Ok(Self {
            records,
            weights,
            source,
            origins,
        })
    }

    /// Unit-weight sample.
    pub fn unweighted(records: Vec<SurvivalRecord>, source: Source) -> Result<Self> {
        let weights = vec![1.0; records.len()];
        Self::new(records, weights, source)
    }

    /// Replaces the weights with calibrated ones. Calibration under the
    /// chi-squared distance can produce zero or negative weights, so only
    /// finiteness is required here.
    pub fn with_calibrated_weights(&self, weights: Vec<f64>) -> Result<Self> {
        check_lengths(&self.records, &weights)?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite calibrated weight"));
        }
        Ok(Self {
            records: Arc::clone(&self.records),
            weights,
            source: self.source,
            origins: self.origins.clone(),
        })
    }

    /// Same records, new strictly positive weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        check_lengths(&self.records, &weights)?;
        Self::positive(Arc::clone(&self.records), weights, self.source, self.origins.clone())
    }

    pub(crate) fn combined(
        records: Vec<SurvivalRecord>,
        weights: Vec<f64>,
        origins: Vec<Source>,
    ) -> Result<Self> {
        let mut out = Self::new(records, weights, Source::Combined)?;
        out.origins = origins;
        Ok(out)
    }

    /// Keeps the records whose weight in `weights` is positive, reweighted.
    pub fn subset_positive(&self, weights: &[f64]) -> Result<Self> {
        check_lengths(&self.records, weights)?;
        let mut records = Vec::new();
        let mut kept = Vec::new();
        let mut origins = Vec::new();
        for ((r, &w), &o) in self.records.iter().zip(weights).zip(&self.origins) {
            if w > 0.0 {
                records.push(r.clone());
                kept.push(w);
                origins.push(o);
            }
        }
        Self::positive(Arc::new(records), kept, self.source, origins)
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn origins(&self) -> &[Source] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of covariates; zero for an empty sample.
    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.z.len())
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub(crate) fn replace_records(&mut self, records: Vec<SurvivalRecord>) {
        assert_eq!(records.len(), self.records.len());
        self.records = Arc::new(records);
    }
}

fn check_lengths(records: &[SurvivalRecord], weights: &[f64]) -> Result<()> {
    if records.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} records but {} weights",
            records.len(),
            weights.len()
        )));
    }
    if let Some(p) = records.first().map(|r| r.z.len()) {
        if records.iter().any(|r| r.z.len() != p) {
            return Err(Error::invalid("records have differing covariate dimensions"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInterval {
    pub start: f64,
    pub end: f64,
    /// Events per person-year.
    pub rate: f64,
}

/// Piecewise-constant rate over `[0, C0]`, right-open intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RateInterval>", into = "Vec<RateInterval>")]
pub struct PiecewiseRate {
    intervals: Vec<RateInterval>,
}

impl PiecewiseRate {
    pub fn new(intervals: Vec<RateInterval>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::invalid("piecewise rate has no intervals"));
        }
        if intervals[0].start != 0.0 {
            return Err(Error::invalid("piecewise rate must start at 0"));
        }
        for (k, iv) in intervals.iter().enumerate() {
            if !(iv.end > iv.start) {
                return Err(Error::invalid(format!("rate interval {k} is empty")));
            }
            if !(iv.rate >= 0.0 && iv.rate.is_finite()) {
                return Err(Error::invalid(format!("rate interval {k} has invalid rate")));
            }
            if k > 0 && intervals[k - 1].end != iv.start {
                return Err(Error::invalid(format!("rate interval {k} leaves a gap")));
            }
        }
        Ok(Self { intervals })
    }

    /// Constant rate on `[0, end)`.
    pub fn constant(rate: f64, end: f64) -> Result<Self> {
        Self::new(vec![RateInterval {
            start: 0.0,
            end,
            rate,
        }])
    }

    pub fn intervals(&self) -> &[RateInterval] {
        &self.intervals
    }

    pub fn end(&self) -> f64 {
        self.intervals.last().map_or(0.0, |iv| iv.end)
    }

    /// Rate at `t`; the final interval is closed on the right.
    pub fn rate_at(&self, t: f64) -> Option<f64> {
        let last = self.intervals.last()?;
        if t == last.end {
            return Some(last.rate);
        }
        self.intervals
            .iter()
            .find(|iv| t >= iv.start && t < iv.end)
            .map(|iv| iv.rate)
    }

    /// `int_0^t rate`.
    pub fn cumulative(&self, t: f64) -> f64 {
        self.intervals
            .iter()
            .map(|iv| {
                let hi = t.min(iv.end);
                if hi > iv.start {
                    (hi - iv.start) * iv.rate
                } else {
                    0.0
                }
            })
            .sum()
    }
}

impl TryFrom<Vec<RateInterval>> for PiecewiseRate {
    type Error = Error;

    fn try_from(v: Vec<RateInterval>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PiecewiseRate> for Vec<RateInterval> {
    fn from(p: PiecewiseRate) -> Self {
        p.intervals
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCases {
    pub group: String,
    pub horizon: f64,
    pub cases: f64,
}

/// Population registry summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySummary {
    #[serde(rename = "M")]
    pub population_size: u64,
    #[serde(default)]
    pub group_sizes: BTreeMap<String, u64>,
    #[serde(default)]
    pub group_cases: Vec<GroupCases>,
    pub composite_incidence_rate: PiecewiseRate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite_mortality_rates: Option<PiecewiseRate>,
}

impl RegistrySummary {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::invalid("registry population size must be positive"));
        }
        if !self.group_sizes.is_empty() {
            let total: u64 = self.group_sizes.values().sum();
            if total != self.population_size {
                return Err(Error::invalid(format!(
                    "group sizes sum to {total}, population size is {}",
                    self.population_size
                )));
            }
        }
        for gc in &self.group_cases {
            if !(gc.cases >= 0.0) {
                return Err(Error::invalid(format!("negative case count for group {}", gc.group)));
            }
            let size = self.group_sizes.get(&gc.group).ok_or_else(|| {
                Error::invalid(format!("case count for unknown group {}", gc.group))
            })?;
            if gc.cases > *size as f64 {
                return Err(Error::invalid(format!(
                    "group {} has more cases than members",
                    gc.group
                )));
            }
        }
        if let Some(m) = &self.composite_mortality_rates {
            if m.end() != self.composite_incidence_rate.end() {
                return Err(Error::invalid("incidence and mortality rates cover different spans"));
            }
        }
        Ok(())
    }

    pub fn cases(&self, group: &str, horizon: f64) -> Option<f64> {
        self.group_cases
            .iter()
            .find(|gc| gc.group == group && gc.horizon == horizon)
            .map(|gc| gc.cases)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let reg: Self = serde_json::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Right-continuous step function.
    Step,
    /// Linear between knots.
    Linear,
}

/// Cumulative baseline hazard `Lambda_0(t)` with `Lambda_0(0) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    times: Vec<f64>,
    cumulative: Vec<f64>,
    interpolation: Interpolation,
}

impl BaselineHazard {
    pub fn new(times: Vec<f64>, cumulative: Vec<f64>, interpolation: Interpolation) -> Result<Self> {
        if times.len() != cumulative.len() {
            return Err(Error::invalid("hazard times and values differ in length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("hazard times must be strictly ascending"));
        }
        if times.first().is_some_and(|&t| t < 0.0) {
            return Err(Error::invalid("hazard times must be nonnegative"));
        }
        if cumulative.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || cumulative.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::invalid("cumulative hazard must be nonnegative and nondecreasing"));
        }
        if interpolation == Interpolation::Linear
            && times.first().is_some_and(|&t| t == 0.0)
            && cumulative[0] != 0.0
        {
            return Err(Error::invalid("cumulative hazard must vanish at 0"));
        }
        Ok(Self {
            times,
            cumulative,
            interpolation,
        })
    }

    pub fn zero() -> Self {
        Self {
            times: Vec::new(),
            cumulative: Vec::new(),
            interpolation: Interpolation::Step,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// `Lambda_0(t)`. Beyond the last knot the curve is held constant.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 || self.times.is_empty() {
            return 0.0;
        }
        // number of knots <= t
        let k = self.times.partition_point(|&x| x <= t);
        match self.interpolation {
            Interpolation::Step => {
                if k == 0 {
                    0.0
                } else {
                    self.cumulative[k - 1]
                }
            }
            Interpolation::Linear => {
                if k == self.times.len() {
                    return self.cumulative[k - 1];
                }
                let (t0, v0) = if k == 0 {
                    (0.0, 0.0)
                } else {
                    (self.times[k - 1], self.cumulative[k - 1])
                };
                let (t1, v1) = (self.times[k], self.cumulative[k]);
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(inc: Option<(bool, f64)>, mort: (bool, f64)) -> SurvivalRecord {
        SurvivalRecord {
            id: "r".into(),
            z: vec![0.0],
            incidence: inc.map(|(d, x)| EventTime::new(d, x)),
            mortality: EventTime::new(mort.0, mort.1),
            imputed: None,
            entry_offset: 0.0,
            stratum: None,
            psu: None,
            group: "all".into(),
        }
    }

    #[test]
    fn views_event_before_t() {
        let r = rec(Some((true, 3.0)), (false, 9.0));
        assert_eq!(risk_process_views(&r, 5.0, Outcome::Incidence).unwrap(), (1, 0));
    }

    #[test]
    fn views_boundary_counts_event_and_at_risk() {
        let r = rec(Some((true, 3.0)), (false, 9.0));
        assert_eq!(risk_process_views(&r, 3.0, Outcome::Incidence).unwrap(), (1, 1));
    }

    #[test]
    fn views_censored() {
        let r = rec(Some((false, 7.2)), (false, 7.2));
        assert_eq!(risk_process_views(&r, 10.0, Outcome::Incidence).unwrap(), (0, 0));
    }

    #[test]
    fn views_missing_incidence_is_an_error() {
        let r = rec(None, (true, 4.0));
        let err = risk_process_views(&r, 1.0, Outcome::Incidence).unwrap_err();
        assert!(matches!(err, Error::OutcomeUnavailable { .. }));
        assert!(risk_process_views(&r, 1.0, Outcome::Imputed).is_err());
        assert_eq!(risk_process_views(&r, 5.0, Outcome::Mortality).unwrap(), (1, 0));
    }

    #[test]
    fn views_are_monotone_in_t() {
        let r = rec(Some((true, 2.5)), (true, 6.0));
        let mut last = (0, 1);
        for k in 0..100 {
            let t = k as f64 * 0.1;
            let v = risk_process_views(&r, t, Outcome::Mortality).unwrap();
            assert!(v.0 >= last.0 && v.1 <= last.1);
            last = v;
        }
    }

    #[test]
    fn record_invariants() {
        assert!(rec(Some((true, 3.0)), (true, 5.0)).validate(15.0).is_ok());
        assert!(rec(Some((true, 6.0)), (true, 5.0)).validate(15.0).is_err());
        assert!(rec(Some((false, 5.0)), (true, 5.0)).validate(15.0).is_err());
        assert!(rec(Some((false, 16.0)), (false, 14.0)).validate(15.0).is_err());
        let mut late = rec(Some((false, 14.5)), (false, 14.5));
        late.entry_offset = 0.8;
        assert!(late.validate(15.0).is_err());
    }

    #[test]
    fn sample_rejects_nonpositive_weights() {
        let r = vec![rec(None, (false, 1.0)), rec(None, (false, 2.0))];
        assert!(WeightedSample::new(r.clone(), vec![1.0, 0.0], Source::Survey).is_err());
        assert!(WeightedSample::new(r.clone(), vec![1.0], Source::Survey).is_err());
        let s = WeightedSample::new(r, vec![1.0, 2.0], Source::Survey).unwrap();
        assert!(s.with_calibrated_weights(vec![-0.5, 2.0]).is_ok());
        let sub = s.subset_positive(&[0.0, 3.0]).unwrap();
        assert_eq!(sub.len(), 1);
        assert_eq!(sub.weights(), &[3.0]);
    }

    #[test]
    fn step_hazard_evaluation() {
        let h = BaselineHazard::new(vec![1.0, 2.0], vec![0.1, 0.3], Interpolation::Step).unwrap();
        assert_eq!(h.eval(0.0), 0.0);
        assert_eq!(h.eval(0.99), 0.0);
        assert_eq!(h.eval(1.0), 0.1);
        assert_eq!(h.eval(1.5), 0.1);
        assert_eq!(h.eval(2.0), 0.3);
        assert_eq!(h.eval(9.0), 0.3);
        assert!(BaselineHazard::new(vec![1.0, 2.0], vec![0.3, 0.1], Interpolation::Step).is_err());
    }

    #[test]
    fn linear_hazard_evaluation() {
        let h = BaselineHazard::new(vec![0.0, 2.0, 4.0], vec![0.0, 0.2, 0.6], Interpolation::Linear)
            .unwrap();
        assert!((h.eval(1.0) - 0.1).abs() < 1e-15);
        assert!((h.eval(3.0) - 0.4).abs() < 1e-15);
        assert_eq!(h.eval(4.0), 0.6);
        assert_eq!(h.eval(5.0), 0.6);
    }

    #[test]
    fn piecewise_rate_partition_and_integral() {
        let r = PiecewiseRate::new(vec![
            RateInterval { start: 0.0, end: 1.0, rate: 0.01 },
            RateInterval { start: 1.0, end: 3.0, rate: 0.02 },
        ])
        .unwrap();
        assert_eq!(r.rate_at(0.5), Some(0.01));
        assert_eq!(r.rate_at(1.0), Some(0.02));
        assert_eq!(r.rate_at(3.0), Some(0.02));
        assert_eq!(r.rate_at(3.5), None);
        assert!((r.cumulative(2.0) - 0.03).abs() < 1e-15);
        assert!(PiecewiseRate::new(vec![
            RateInterval { start: 0.0, end: 1.0, rate: 0.01 },
            RateInterval { start: 1.5, end: 3.0, rate: 0.02 },
        ])
        .is_err());
    }

    #[test]
    fn registry_json_round_trip_and_validation() {
        let json = r#"{
            "M": 100,
            "group_sizes": {"a": 60, "b": 40},
            "group_cases": [{"group": "a", "horizon": 15.0, "cases": 12.0}],
            "composite_incidence_rate": [{"start": 0.0, "end": 15.0, "rate": 0.01}]
        }"#;
        let reg = RegistrySummary::from_json(json).unwrap();
        assert_eq!(reg.cases("a", 15.0), Some(12.0));
        let text = serde_json::to_string(&reg).unwrap();
        assert_eq!(RegistrySummary::from_json(&text).unwrap(), reg);

        let bad = json.replace("\"b\": 40", "\"b\": 41");
        assert!(RegistrySummary::from_json(&bad).is_err());
    }
}
