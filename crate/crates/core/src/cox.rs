//! Weighted Cox partial likelihood.
//!
//! The score is the weight-normalised estimating function
//! `U(beta) = W^-1 sum_i w_i int {z_i - S1(t)/S0(t)} dN_i(t)` with
//! `W = sum_i w_i` and `S_u(t) = sum_j w_j Y_j(t) exp(beta'z_j) z_j^u`;
//! the information is `-dU/dbeta`. Tied event times use the Breslow
//! convention, and a subject whose time equals `t` is in the risk set at `t`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{BaselineHazard, Interpolation, Outcome, RegistrySummary, WeightedSample};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, spd_inverse, spd_solve};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 25,
            max_halvings: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    /// Normalised score at `beta`.
    pub score_at_solution: Vec<f64>,
    /// Normalised information at `beta`, row-major `p x p`.
    pub information: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Normalised log partial likelihood at `beta`.
    pub log_likelihood: f64,
    pub total_weight: f64,
}

impl CoxFit {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn information_matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_row_slice(p, p, &self.information)
    }
}

/// `Delta_i = d beta_hat / d w_i`, one row per record in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub values: DMatrix<f64>,
}

impl InfluenceMatrix {
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// `sum_i w_i Delta_i`.
    pub fn weighted_sum(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.ncols()];
        for (i, w) in weights.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += w * self.values[(i, j)];
            }
        }
        out
    }
}

/// Flattened survival data ordered for risk-set sweeps.
#[derive(Debug, Clone)]
pub struct CoxDesign {
    p: usize,
    z: Vec<f64>,
    time: Vec<f64>,
    event: Vec<bool>,
    weight: Vec<f64>,
    /// Record indices sorted by ascending time.
    order: Vec<usize>,
    /// Tied-time groups as ranges into `order`, ascending.
    groups: Vec<(usize, usize)>,
}

impl CoxDesign {
    pub fn from_sample(sample: &WeightedSample, outcome: Outcome) -> Result<Self> {
        let p = sample.dim();
        let mut z = Vec::with_capacity(sample.len() * p);
        let mut time = Vec::with_capacity(sample.len());
        let mut event = Vec::with_capacity(sample.len());
        for r in sample.records() {
            let obs = r.outcome(outcome)?;
            z.extend_from_slice(&r.z);
            time.push(obs.time);
            event.push(obs.event);
        }
        Self::new(p, z, time, event, sample.weights().to_vec())
    }

    pub fn new(p: usize, z: Vec<f64>, time: Vec<f64>, event: Vec<bool>, weight: Vec<f64>) -> Result<Self> {
        let n = time.len();
        if z.len() != n * p || event.len() != n || weight.len() != n {
            return Err(Error::invalid("inconsistent Cox design dimensions"));
        }
        if time.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite event time"));
        }
        let mut keyed: Vec<(f64, usize)> = time.iter().copied().zip(0..n).collect();
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = keyed.iter().map(|k| k.1).collect();
        let mut groups = Vec::new();
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            while end < n && keyed[end].0 == keyed[start].0 {
                end += 1;
            }
            groups.push((start, end));
            start = end;
        }
        Ok(Self {
            p,
            z,
            time,
            event,
            weight,
            order,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Same subjects with a new weight vector; the sort order is reused.
    pub fn reweighted(&self, weight: Vec<f64>) -> Result<Self> {
        if weight.len() != self.len() {
            return Err(Error::invalid("weight vector length mismatch"));
        }
        Ok(Self {
            weight,
            ..self.clone()
        })
    }

    fn zrow(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    fn linear_predictors(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.zrow(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn total_event_weight(&self) -> f64 {
        self.event
            .iter()
            .zip(&self.weight)
            .filter(|(e, _)| **e)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Per tie-group risk-set quantities at an event time.
struct EventSet {
    group: usize,
    time: f64,
    /// `sum w dN` at this time.
    dn: f64,
    /// `S0` scaled by `exp(-shift)`.
    s0: f64,
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
    shift: f64,
    events: Vec<EventSet>,
    /// `S1/S0` per event, `p` values each.
    means: Vec<f64>,
}

fn evaluate(design: &CoxDesign, beta: &[f64], with_info: bool) -> Result<Evaluation> {
    let p = design.p;
    let eta = design.linear_predictors(beta);
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut dz = vec![0.0; p];
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut events = Vec::new();
    let mut means = Vec::new();

    for (g, &(lo, hi)) in design.groups.iter().enumerate().rev() {
        let mut dn = 0.0;
        let mut deta = 0.0;
        dz.iter_mut().for_each(|v| *v = 0.0);
        for &i in &design.order[lo..hi] {
            let w = design.weight[i];
            let e = w * (eta[i] - shift).exp();
            let zi = design.zrow(i);
            s0 += e;
            for a in 0..p {
                s1[a] += e * zi[a];
                if with_info {
                    for b in a..p {
                        s2[a * p + b] += e * zi[a] * zi[b];
                    }
                }
            }
            if design.event[i] {
                dn += w;
                deta += w * eta[i];
                for a in 0..p {
                    dz[a] += w * zi[a];
                }
            }
        }
        if dn == 0.0 {
            continue;
        }
        let time = design.time[design.order[lo]];
        if !(s0 > 0.0) {
            return Err(Error::EmptyRiskSet { time });
        }
        let base = means.len();
        means.extend(s1.iter().map(|v| v / s0));
        let mean = &means[base..];
        loglik += deta - dn * (s0.ln() + shift);
        for a in 0..p {
            score[a] += dz[a] - dn * mean[a];
            if with_info {
                for b in a..p {
                    info[(a, b)] += dn * (s2[a * p + b] / s0 - mean[a] * mean[b]);
                }
            }
        }
        events.push(EventSet { group: g, time, dn, s0 });
    }
    if with_info {
        for a in 0..p {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
    }
    // ascending time order
    events.reverse();
    let k = events.len();
    let mut ordered = vec![0.0; means.len()];
    for e in 0..k {
        ordered[(k - 1 - e) * p..(k - e) * p].copy_from_slice(&means[e * p..(e + 1) * p]);
    }
    Ok(Evaluation {
        loglik,
        score,
        info,
        shift,
        events,
        means: ordered,
    })
}

fn check_design(design: &CoxDesign, beta_len: usize) -> Result<f64> {
    if beta_len != design.p {
        return Err(Error::invalid(format!(
            "coefficient vector has length {beta_len}, design has {} covariates",
            design.p
        )));
    }
    if !(design.total_event_weight() > 0.0) {
        return Err(Error::DegenerateOutcome);
    }
    let total: f64 = design.weight.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("total weight must be positive"));
    }
    Ok(total)
}

/// Normalised score and information at `beta`.
pub fn score_and_information(
    sample: &WeightedSample,
    outcome: Outcome,
    beta: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let design = CoxDesign::from_sample(sample, outcome)?;
    design_score_and_information(&design, beta)
}

pub fn design_score_and_information(design: &CoxDesign, beta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let total = check_design(design, beta.len())?;
    let ev = evaluate(design, beta, true)?;
    Ok((ev.score / total, ev.info / total))
}

/// Normalised log partial likelihood.
pub fn log_partial_likelihood(design: &CoxDesign, beta: &[f64]) -> Result<f64> {
    let total = check_design(design, beta.len())?;
    Ok(evaluate(design, beta, false)?.loglik / total)
}

pub fn fit_weighted_cox(
    sample: &WeightedSample,
    outcome: Outcome,
    init: Option<&[f64]>,
    opts: &CoxOptions,
) -> Result<CoxFit> {
    let design = CoxDesign::from_sample(sample, outcome)?;
    fit_design(&design, init, opts)
}

fn max_abs_slice(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Newton-Raphson from `init` (zero by default) with step-halving on the
/// log partial likelihood.
pub fn fit_design(design: &CoxDesign, init: Option<&[f64]>, opts: &CoxOptions) -> Result<CoxFit> {
    let p = design.p;
    let mut beta = match init {
        Some(b) => b.to_vec(),
        None => vec![0.0; p],
    };
    let total = check_design(design, beta.len())?;
    let mut ev = evaluate(design, &beta, true)?;
    let mut iterations = 0;
    loop {
        let score = &ev.score / total;
        let step = spd_solve(&ev.info, &ev.score, "Cox information matrix")?;
        // A vanishing score alone is not enough: under a monotone likelihood the
        // score decays while the Newton step stays O(1).
        if max_abs(&score) <= opts.tol && max_abs(&step) <= opts.tol.sqrt() * (1.0 + max_abs_slice(&beta)) {
            return Ok(CoxFit {
                beta,
                score_at_solution: score.iter().copied().collect(),
                information: (ev.info / total).transpose().iter().copied().collect(),
                iterations,
                converged: true,
                log_likelihood: ev.loglik / total,
                total_weight: total,
            });
        }
        if iterations == opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                max_score: max_abs(&score),
                estimate: beta,
            });
        }
        let mut scale = 1.0;
        let mut halvings = 0;
        let next = loop {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let cand = evaluate(design, &trial, true);
            let accept = match &cand {
                Ok(c) => {
                    let slack = 1e-12 * (1.0 + ev.loglik.abs());
                    c.loglik.is_finite() && c.loglik >= ev.loglik - slack
                }
                Err(_) => false,
            };
            if accept || halvings == opts.max_halvings {
                break cand.map(|c| (trial, c));
            }
            scale *= 0.5;
            halvings += 1;
        }?;
        beta = next.0;
        ev = next.1;
        iterations += 1;
    }
}

/// `Delta_i = d beta_hat / d w_i` for every record.
pub fn influence_functions(sample: &WeightedSample, fit: &CoxFit, outcome: Outcome) -> Result<InfluenceMatrix> {
    let design = CoxDesign::from_sample(sample, outcome)?;
    design_influence(&design, &fit.beta)
}

pub fn design_influence(design: &CoxDesign, beta: &[f64]) -> Result<InfluenceMatrix> {
    let p = design.p;
    check_design(design, beta.len())?;
    let ev = evaluate(design, beta, true)?;
    let info_inv = spd_inverse(&ev.info, "Cox information matrix")
        .map_err(|_| Error::NonIdentifiable("singular information in influence functions".into()))?;
    let eta = design.linear_predictors(beta);
    let mut values = DMatrix::zeros(design.len(), p);
    let mut cum_a = 0.0;
    let mut cum_b = vec![0.0; p];
    let mut next_event = 0;
    let mut resid = DVector::zeros(p);
    for (g, &(lo, hi)) in design.groups.iter().enumerate() {
        let mut current_mean: Option<&[f64]> = None;
        if next_event < ev.events.len() && ev.events[next_event].group == g {
            let es = &ev.events[next_event];
            let mean = &ev.means[next_event * p..(next_event + 1) * p];
            let step = es.dn / es.s0;
            cum_a += step;
            for a in 0..p {
                cum_b[a] += step * mean[a];
            }
            current_mean = Some(mean);
            next_event += 1;
        }
        for &i in &design.order[lo..hi] {
            let zi = design.zrow(i);
            let e = (eta[i] - ev.shift).exp();
            for a in 0..p {
                let mut r = -e * (zi[a] * cum_a - cum_b[a]);
                if design.event[i] {
                    if let Some(mean) = current_mean {
                        r += zi[a] - mean[a];
                    }
                }
                resid[a] = r;
            }
            for a in 0..p {
                values[(i, a)] = (0..p).map(|b| info_inv[(a, b)] * resid[b]).sum();
            }
        }
    }
    Ok(InfluenceMatrix { values })
}

/// Breslow cumulative baseline hazard; jumps at event times.
pub fn breslow_baseline(sample: &WeightedSample, fit: &CoxFit, outcome: Outcome) -> Result<BaselineHazard> {
    let design = CoxDesign::from_sample(sample, outcome)?;
    design_breslow(&design, &fit.beta)
}

pub fn design_breslow(design: &CoxDesign, beta: &[f64]) -> Result<BaselineHazard> {
    check_design(design, beta.len())?;
    let ev = evaluate(design, beta, false)?;
    let scale = ev.shift.exp();
    let mut times = Vec::with_capacity(ev.events.len());
    let mut cumulative = Vec::with_capacity(ev.events.len());
    let mut acc = 0.0;
    for es in &ev.events {
        acc += es.dn / (es.s0 * scale);
        times.push(es.time);
        cumulative.push(acc);
    }
    BaselineHazard::new(times, cumulative, Interpolation::Step)
}

/// Behaviour of [`par_baseline`] when the cohort risk set empties before
/// `t_max` while the registry rate is still positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    #[default]
    Error,
    /// Hold the last attributable-risk factor fixed.
    CarryForward,
}

/// Registry-anchored cumulative baseline hazard
/// `Lambda_0(t) = int_0^t {S0(s) / S0(s, beta)} lambda_reg(s) ds`, where the
/// ratio is computed from the cohort incidence risk sets with the sample
/// weights. Both factors are step functions, so the integral is exact and the
/// result is piecewise linear.
pub fn par_baseline(
    cohort: &WeightedSample,
    fit: &CoxFit,
    registry: &RegistrySummary,
    t_max: f64,
    policy: ExhaustionPolicy,
) -> Result<BaselineHazard> {
    let rate = &registry.composite_incidence_rate;
    if rate.end() < t_max {
        return Err(Error::invalid(format!(
            "registry rates cover [0, {}], need [0, {t_max}]",
            rate.end()
        )));
    }
    if fit.beta.len() != cohort.dim() {
        return Err(Error::invalid("coefficient dimension does not match cohort covariates"));
    }

    let mut obs: Vec<(f64, f64, f64)> = Vec::with_capacity(cohort.len());
    for (r, &w) in cohort.records().iter().zip(cohort.weights()) {
        let x = r.outcome(Outcome::Incidence)?.time;
        let lp: f64 = r.z.iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
        obs.push((x, w, lp));
    }
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let shift = obs.iter().map(|o| o.2).fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };

    // distinct times with suffix sums of w and w*exp(lp)
    let mut distinct: Vec<f64> = Vec::new();
    let mut ratio: Vec<Option<f64>> = Vec::new();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut k = obs.len();
    while k > 0 {
        let t = obs[k - 1].0;
        while k > 0 && obs[k - 1].0 == t {
            let (_, w, lp) = obs[k - 1];
            num += w;
            den += w * (lp - shift).exp();
            k -= 1;
        }
        distinct.push(t);
        ratio.push(if den > 0.0 { Some(num / den * (-shift).exp()) } else { None });
    }
    distinct.reverse();
    ratio.reverse();

    let mut breaks: Vec<f64> = distinct.iter().copied().filter(|&t| t > 0.0 && t < t_max).collect();
    breaks.extend(
        rate.intervals()
            .iter()
            .map(|iv| iv.end)
            .filter(|&t| t > 0.0 && t < t_max),
    );
    breaks.push(t_max);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut times = vec![0.0];
    let mut cumulative = vec![0.0];
    let mut acc = 0.0;
    let mut last_ratio: Option<f64> = None;
    let mut a = 0.0;
    for &b in &breaks {
        if b <= a {
            continue;
        }
        let lam = rate.rate_at(0.5 * (a + b)).unwrap_or(0.0);
        let idx = distinct.partition_point(|&u| u < b);
        let r = ratio.get(idx).copied().flatten();
        let factor = match (r, lam > 0.0) {
            (Some(v), _) => {
                last_ratio = Some(v);
                v
            }
            (None, false) => 0.0,
            (None, true) => match (policy, last_ratio) {
                (ExhaustionPolicy::CarryForward, Some(v)) => v,
                _ => return Err(Error::RiskSetExhausted { time: a, t_max }),
            },
        };
        acc += factor * lam * (b - a);
        times.push(b);
        cumulative.push(acc);
        a = b;
    }
    BaselineHazard::new(times, cumulative, Interpolation::Linear)
}

/// `1 - exp{-Lambda_0(t) exp(beta'z)}`.
pub fn pure_risk(hazard: &BaselineHazard, beta: &[f64], z: &[f64], t: f64) -> Result<f64> {
    if beta.len() != z.len() {
        return Err(Error::invalid(format!(
            "profile has {} covariates, model has {}",
            z.len(),
            beta.len()
        )));
    }
    if !(t >= 0.0) {
        return Err(Error::invalid("risk time must be nonnegative"));
    }
    let lp: f64 = beta.iter().zip(z).map(|(b, v)| b * v).sum();
    let r = -(-hazard.eval(t) * lp.exp()).exp_m1();
    Ok(r.clamp(0.0, 1.0))
}
