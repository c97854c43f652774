//! Cohort participation propensities and inverse-odds pseudoweights.
//!
//! The cohort (label 1, fit weight = cohort base weight) is stacked on the
//! survey (label 0, fit weight = survey weight) and a weighted logistic model
//! is fitted. The fitted odds estimate the cohort participation rate, so the
//! pseudoweight of cohort record `i` is `b_i (1 - p_i) / p_i`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{SurvivalRecord, WeightedSample};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, spd_solve};

const PROB_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    /// Covariate `z_k`, zero-based.
    Z(usize),
    /// Disease-specific mortality indicator.
    Dtilde,
}

/// Product of one or more factors, written `z2:Dtilde`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    factors: Vec<Factor>,
}

impl Term {
    pub fn covariate(k: usize) -> Self {
        Self {
            factors: vec![Factor::Z(k)],
        }
    }

    pub fn dtilde() -> Self {
        Self {
            factors: vec![Factor::Dtilde],
        }
    }

    pub fn interaction(a: Factor, b: Factor) -> Self {
        Self { factors: vec![a, b] }
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn value(&self, record: &SurvivalRecord) -> Result<f64> {
        let mut v = 1.0;
        for f in &self.factors {
            v *= match *f {
                Factor::Z(k) => *record.z.get(k).ok_or_else(|| {
                    Error::invalid(format!("term {self} refers to z{} but record {} has {} covariates", k + 1, record.id, record.z.len()))
                })?,
                Factor::Dtilde => f64::from(u8::from(record.mortality.event)),
            };
        }
        Ok(v)
    }

    /// All covariates `z1..zp` as main effects.
    pub fn all_covariates(p: usize) -> Vec<Term> {
        (0..p).map(Term::covariate).collect()
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, factor) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            match factor {
                Factor::Z(k) => write!(f, "z{}", k + 1)?,
                Factor::Dtilde => f.write_str("Dtilde")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut factors = Vec::new();
        for part in s.split(':') {
            let part = part.trim();
            let factor = if part == "Dtilde" {
                Factor::Dtilde
            } else if let Some(k) = part.strip_prefix('z').and_then(|k| k.parse::<usize>().ok()) {
                if k == 0 {
                    return Err(Error::invalid("covariates are numbered from z1"));
                }
                Factor::Z(k - 1)
            } else {
                return Err(Error::invalid(format!("unknown model term '{part}'")));
            };
            factors.push(factor);
        }
        Ok(Self { factors })
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Propensity model terms; an intercept is always included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PropensityModelSpec {
    pub terms: Vec<Term>,
}

impl PropensityModelSpec {
    pub fn parse(terms: &[&str]) -> Result<Self> {
        Ok(Self {
            terms: terms.iter().map(|t| t.parse()).collect::<Result<_>>()?,
        })
    }

    /// Design row `[1, terms...]`.
    pub fn row(&self, record: &SurvivalRecord) -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(self.terms.len() + 1);
        row.push(1.0);
        for t in &self.terms {
            row.push(t.value(record)?);
        }
        Ok(row)
    }
}

pub(crate) fn design_matrix<'a>(
    terms: &[Term],
    records: impl Iterator<Item = &'a SurvivalRecord>,
) -> Result<DMatrix<f64>> {
    let spec = PropensityModelSpec {
        terms: terms.to_vec(),
    };
    let rows: Vec<Vec<f64>> = records.map(|r| spec.row(r)).collect::<Result<_>>()?;
    let q = terms.len() + 1;
    Ok(DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 20,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn loglik(design: &DMatrix<f64>, labels: &[bool], weights: &[f64], coef: &DVector<f64>) -> f64 {
    let eta = design * coef;
    labels
        .iter()
        .zip(weights)
        .zip(eta.iter())
        .map(|((&y, &w), &e)| w * (if y { e } else { 0.0 } - softplus(e)))
        .sum()
}

/// Weighted logistic regression by Newton-Raphson (IRLS) with step-halving.
/// The score is normalised by the total weight before comparison with `tol`.
pub fn fit_weighted_logistic(
    design: &DMatrix<f64>,
    labels: &[bool],
    weights: &[f64],
    opts: &LogisticOptions,
) -> Result<DVector<f64>> {
    let (n, q) = design.shape();
    if labels.len() != n || weights.len() != n {
        return Err(Error::invalid("logistic design, labels and weights differ in length"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::invalid("logistic weights must be positive"));
    }
    if !labels.iter().any(|&y| y) || labels.iter().all(|&y| y) {
        return Err(Error::invalid("logistic labels must contain both classes"));
    }
    let total: f64 = weights.iter().sum();
    let mut coef = DVector::zeros(q);
    let mut ll = loglik(design, labels, weights, &coef);
    for _ in 0..=opts.max_iter {
        let eta = design * &coef;
        let mut score = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let w = weights[i];
            let resid = f64::from(u8::from(labels[i])) - p;
            let row = design.row(i);
            for a in 0..q {
                score[a] += w * resid * row[a];
                for b in a..q {
                    info[(a, b)] += w * p * (1.0 - p) * row[a] * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let step = match spd_solve(&info, &score, "logistic information") {
            Ok(s) => s,
            Err(e) => {
                return Err(if separated(&eta, labels) { Error::SeparationDetected } else { e });
            }
        };
        let step_bound = opts.tol.sqrt() * (1.0 + max_abs(&coef));
        if max_abs(&(&score / total)) <= opts.tol && max_abs(&step) <= step_bound {
            if separated(&eta, labels) {
                return Err(Error::SeparationDetected);
            }
            return Ok(coef + step);
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = &coef + &step * scale;
            let trial_ll = loglik(design, labels, weights, &trial);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                coef = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let eta = design * &coef;
    if separated(&eta, labels) {
        return Err(Error::SeparationDetected);
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        max_score: f64::NAN,
        estimate: coef.iter().copied().collect(),
    })
}

/// Complete or quasi-complete separation: the linear predictor orders the
/// classes and has drifted to large magnitude.
fn separated(eta: &DVector<f64>, labels: &[bool]) -> bool {
    let big = eta.iter().any(|e| e.abs() > 15.0);
    let ordered = eta
        .iter()
        .zip(labels)
        .all(|(&e, &y)| if y { e >= -1e-8 } else { e <= 1e-8 });
    big && ordered
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    /// Intercept first, then one coefficient per term.
    pub coefficients: Vec<f64>,
    /// Cohort records whose fitted probability was clamped.
    pub clamped: usize,
}

/// Returns the cohort with pseudoweights `b_i (1 - p_i) / p_i` replacing the
/// base weights `b_i`.
pub fn ipw_pseudoweights(
    cohort: &WeightedSample,
    survey: &WeightedSample,
    spec: &PropensityModelSpec,
    opts: &LogisticOptions,
) -> Result<(WeightedSample, PropensityFit)> {
    let records = cohort.records().iter().chain(survey.records());
    let design = design_matrix(&spec.terms, records)?;
    let labels: Vec<bool> = (0..cohort.len() + survey.len()).map(|i| i < cohort.len()).collect();
    let fit_weights: Vec<f64> = cohort.weights().iter().chain(survey.weights()).copied().collect();
    let coef = fit_weighted_logistic(&design, &labels, &fit_weights, opts)?;

    let mut clamped = 0;
    let mut pseudo = Vec::with_capacity(cohort.len());
    for i in 0..cohort.len() {
        let eta = design.row(i).dot(&coef.transpose());
        let mut p = sigmoid(eta);
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
            p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            clamped += 1;
        }
        pseudo.push(cohort.weights()[i] * (1.0 - p) / p);
    }
    if clamped > 0 {
        log::warn!("{clamped} cohort propensities clamped to [{PROB_CLAMP:e}, 1 - {PROB_CLAMP:e}]");
    }
    let out = cohort.with_weights(pseudo)?;
    Ok((
        out,
        PropensityFit {
            coefficients: coef.iter().copied().collect(),
            clamped,
        },
    ))
}
