//! Cox proportional hazards on aggregate user features.
//!
//! Coefficients maximize Efron's tie-corrected partial likelihood by Newton's
//! method. The baseline hazard is the Cox–Oakes estimate
//! `d_i / Σ_{j ∈ R(t_i)} exp(βᵀx_j)` at each distinct event time, spread as a
//! constant rate over the interval ending at that event time, so that the
//! cumulative baseline hazard at every event time matches the estimate.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::PredictionRecord;
use crate::features::{build_aggregates, Standardizer};

/// Times closer than this are treated as tied.
pub const TIME_RESOLUTION: f64 = 1e-9;

fn round_time(t: f64) -> f64 {
    (t / TIME_RESOLUTION).round() * TIME_RESOLUTION
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn check_inputs(x: &[Vec<f64>], times: &[f64], events: &[bool]) -> Result<usize> {
    if x.len() != times.len() || x.len() != events.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows, {} times, {} event flags",
            x.len(),
            times.len(),
            events.len()
        )));
    }
    let p = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != p) {
        return Err(Error::InvalidInput("feature rows differ in length".into()));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidInput(format!("survival time {t} must be positive")));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    if !events.contains(&true) {
        return Err(Error::InvalidInput("no events: every observation is censored".into()));
    }
    Ok(p)
}

/// Indices sorted by rounded time descending, grouped into runs of equal time.
fn descending_groups(times: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&i, &j| round_time(times[j]).total_cmp(&round_time(times[i])));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let t = round_time(times[order[start]]);
        let mut end = start + 1;
        while end < order.len() && round_time(times[order[end]]) == t {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    (order, groups)
}

/// Efron partial log-likelihood with its gradient and Hessian in `beta`.
pub fn efron_partial_log_likelihood(
    beta: &[f64],
    x: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
) -> Result<PartialLikelihood> {
    let p = check_inputs(x, times, events)?;
    if beta.len() != p {
        return Err(Error::InvalidInput(format!(
            "{} coefficients for {p} features",
            beta.len()
        )));
    }
    let beta = DVector::from_column_slice(beta);
    let rows: Vec<DVector<f64>> = x.iter().map(|r| DVector::from_column_slice(r)).collect();
    let eta: Vec<f64> = rows.iter().map(|r| beta.dot(r)).collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let risk: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let (order, groups) = descending_groups(times);
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    for &(start, end) in &groups {
        let mut d0 = 0.0;
        let mut d1 = DVector::zeros(p);
        let mut d2 = DMatrix::zeros(p, p);
        let mut deaths = 0usize;
        for &i in &order[start..end] {
            let r = risk[i];
            s0 += r;
            s1.axpy(r, &rows[i], 1.0);
            s2.ger(r, &rows[i], &rows[i], 1.0);
            if events[i] {
                d0 += r;
                d1.axpy(r, &rows[i], 1.0);
                d2.ger(r, &rows[i], &rows[i], 1.0);
                deaths += 1;
                value += eta[i];
                gradient += &rows[i];
            }
        }
        for l in 0..deaths {
            let phi = l as f64 / deaths as f64;
            let a0 = s0 - phi * d0;
            let a1 = &s1 - &d1 * phi;
            let a2 = &s2 - &d2 * phi;
            value -= a0.ln() + shift;
            gradient.axpy(-1.0 / a0, &a1, 1.0);
            hessian -= a2 / a0 - (&a1 * a1.transpose()) / (a0 * a0);
        }
    }
    Ok(PartialLikelihood {
        value,
        gradient,
        hessian,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the gradient's max-norm.
    pub gradient_tolerance: f64,
    pub ridge: f64,
    /// Information matrices with a larger condition number get `ridge` added
    /// to their diagonal.
    pub condition_limit: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        CoxConfig {
            max_iterations: 100,
            gradient_tolerance: 1e-7,
            ridge: 1e-6,
            condition_limit: 1e12,
        }
    }
}

/// Baseline hazard as increments `d_i / Σ_R exp(βᵀx)` at distinct event times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    /// Strictly increasing event times.
    pub times: Vec<f64>,
    /// Hazard increment at each event time, all positive.
    pub increments: Vec<f64>,
}

/// Survival quantities for one individual with relative risk `exp(βᵀx)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxExpectation {
    pub value: f64,
    /// `S(t_s)` on the baseline grid underflowed to zero.
    pub underflow: bool,
}

impl BaselineHazard {
    pub fn estimate(eta: &[f64], times: &[f64], events: &[bool]) -> Result<Self> {
        if !events.contains(&true) {
            return Err(Error::InvalidInput("no events to estimate a baseline from".into()));
        }
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (order, groups) = descending_groups(times);
        let mut risk_sum = 0.0;
        let mut out_t = Vec::new();
        let mut out_h = Vec::new();
        for &(start, end) in &groups {
            let mut deaths = 0;
            for &i in &order[start..end] {
                risk_sum += (eta[i] - shift).exp();
                deaths += usize::from(events[i]);
            }
            if deaths > 0 {
                out_t.push(round_time(times[order[start]]));
                // Undo the shift: Σ exp(η) = e^shift · risk_sum.
                out_h.push(deaths as f64 / risk_sum * (-shift).exp());
            }
        }
        out_t.reverse();
        out_h.reverse();
        Ok(BaselineHazard {
            times: out_t,
            increments: out_h,
        })
    }

    /// `H₀(t)`, piecewise linear between event times and continued past the
    /// last one at the final rate.
    pub fn cumulative(&self, t: f64) -> f64 {
        let mut h = 0.0;
        let mut prev = 0.0;
        for (&ti, &dh) in self.times.iter().zip(&self.increments) {
            if t >= ti {
                h += dh;
                prev = ti;
            } else {
                return h + dh * (t - prev).max(0.0) / (ti - prev);
            }
        }
        h + self.last_rate() * (t - prev).max(0.0)
    }

    /// Cumulative baseline hazard at each event time.
    pub fn cumulative_at_events(&self) -> Vec<f64> {
        self.increments
            .iter()
            .scan(0.0, |acc, &dh| {
                *acc += dh;
                Some(*acc)
            })
            .collect()
    }

    pub fn survival(&self, t: f64, relative_risk: f64) -> f64 {
        (-relative_risk * self.cumulative(t)).exp()
    }

    /// Hazard rate on each interval `[t_{i-1}, t_i)`, with `t_0 = 0`.
    fn rates(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let mut prev = 0.0;
        self.times.iter().zip(&self.increments).map(move |(&t, &dh)| {
            let seg = (prev, t, dh / (t - prev));
            prev = t;
            seg
        })
    }

    fn last_rate(&self) -> f64 {
        self.rates().last().map_or(0.0, |(_, _, r)| r)
    }

    /// `∫_{t_s}^∞ S(t)/S(t_s) dt` for relative risk `rr`, exactly per piece.
    fn tail_integral(&self, rr: f64, t_s: f64) -> f64 {
        // Log of S(t)/S(t_s) at the start of the current piece.
        let mut log_s = 0.0;
        let mut total = 0.0;
        let piece = |log_s: f64, rate: f64, len: f64| -> f64 {
            let k = rate * rr;
            if k == 0.0 {
                log_s.exp() * len
            } else {
                log_s.exp() * -(-k * len).exp_m1() / k
            }
        };
        for (a, b, rate) in self.rates() {
            if b <= t_s {
                continue;
            }
            let from = a.max(t_s);
            total += piece(log_s, rate, b - from);
            log_s -= rate * rr * (b - from);
        }
        total + log_s.exp() / (self.last_rate() * rr)
    }

    /// Expected survival time, or with `t_s > 0` the expectation conditioned
    /// on survival past `t_s`: `t_s + ∫_{t_s}^∞ S / S(t_s)`.
    pub fn expectation(&self, relative_risk: f64, t_s: f64) -> Result<CoxExpectation> {
        if self.times.is_empty() {
            return Err(Error::InvalidInput("empty baseline hazard".into()));
        }
        if !(relative_risk > 0.0) || !relative_risk.is_finite() {
            return Err(Error::Numerical(format!(
                "relative risk {relative_risk} is not a positive finite number"
            )));
        }
        if !(t_s >= 0.0) || !t_s.is_finite() {
            return Err(Error::InvalidInput(format!("absence time {t_s} must be >= 0")));
        }
        let underflow = self.survival(t_s, relative_risk) == 0.0;
        if underflow {
            log::warn!("baseline survival at {t_s} underflows; returning t_s plus the tail");
        }
        Ok(CoxExpectation {
            value: t_s + self.tail_integral(relative_risk, t_s),
            underflow,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    pub baseline: BaselineHazard,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    pub log_likelihood: f64,
    /// Whether the ridge stabilizer was applied in any iteration.
    pub ridge_used: bool,
}

impl CoxFit {
    /// Standard errors from the inverse observed information at `beta`.
    pub fn standard_errors(&self, x: &[Vec<f64>], times: &[f64], events: &[bool]) -> Result<Vec<f64>> {
        let pl = efron_partial_log_likelihood(&self.beta, x, times, events)?;
        let info = -pl.hessian;
        let inv = info
            .try_inverse()
            .ok_or_else(|| Error::Numerical("information matrix is singular".into()))?;
        Ok(inv.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Newton–Raphson with step halving on the Efron partial likelihood, then the
/// Cox–Oakes baseline at the estimate. Features are used as given.
pub fn fit(x: &[Vec<f64>], times: &[f64], events: &[bool], config: &CoxConfig) -> Result<CoxFit> {
    let p = check_inputs(x, times, events)?;
    let event_count = events.iter().filter(|&&e| e).count();
    if event_count < 2 {
        return Err(Error::InvalidInput(format!(
            "at least two events are needed, got {event_count}"
        )));
    }
    let mut beta = vec![0.0; p];
    let mut pl = efron_partial_log_likelihood(&beta, x, times, events)?;
    let mut ridge_used = false;
    let mut iterations = 0;
    loop {
        let gmax = pl.gradient.amax();
        if gmax < config.gradient_tolerance {
            break;
        }
        if iterations >= config.max_iterations {
            return Err(Error::Numerical(format!(
                "Cox fit did not converge in {iterations} iterations; gradient max-norm {gmax:e}"
            )));
        }
        iterations += 1;
        let mut info = -pl.hessian.clone();
        if condition_number(&info) > config.condition_limit {
            ridge_used = true;
            for i in 0..p {
                info[(i, i)] += config.ridge;
            }
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&pl.gradient),
            None => {
                ridge_used = true;
                let mut lambda = config.ridge.max(1e-12);
                loop {
                    let mut damped = info.clone();
                    for i in 0..p {
                        damped[(i, i)] += lambda;
                    }
                    if let Some(ch) = damped.cholesky() {
                        break ch.solve(&pl.gradient);
                    }
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        return Err(Error::Numerical("information matrix cannot be stabilized".into()));
                    }
                }
            }
        };
        let mut scale = 1.0;
        let next = loop {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let cand_pl = efron_partial_log_likelihood(&cand, x, times, events)?;
            if cand_pl.value.is_finite() && cand_pl.value >= pl.value {
                break Some((cand, cand_pl));
            }
            scale *= 0.5;
            if scale < 1e-10 {
                break None;
            }
        };
        match next {
            Some((b, l)) => {
                beta = b;
                pl = l;
            }
            None => {
                let gmax = pl.gradient.amax();
                return Err(Error::Numerical(format!(
                    "Cox fit stalled after {iterations} iterations; gradient max-norm {gmax:e}"
                )));
            }
        }
    }
    let eta: Vec<f64> = x
        .iter()
        .map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect();
    Ok(CoxFit {
        baseline: BaselineHazard::estimate(&eta, times, events)?,
        gradient_max_norm: pl.gradient.amax(),
        log_likelihood: pl.value,
        beta,
        iterations,
        ridge_used,
    })
}

/// A Cox model on standardized aggregate features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub fit: CoxFit,
}

/// Survival targets: the final gap, observed for returning users and censored
/// at the horizon otherwise.
pub fn survival_targets(dataset: &Dataset) -> (Vec<f64>, Vec<bool>) {
    dataset
        .users
        .iter()
        .map(|u| (u.final_gap, !u.is_censored))
        .unzip()
}

impl CoxModel {
    pub fn fit_dataset(dataset: &Dataset, config: &CoxConfig) -> Result<Self> {
        let agg = build_aggregates(dataset);
        let standardizer = Standardizer::fit(&agg.rows);
        let x = standardizer.apply(&agg.rows);
        let (times, events) = survival_targets(dataset);
        let fit = fit(&x, &times, &events, config)?;
        log::info!(
            "Cox fit: {} iterations, log partial likelihood {:.4}",
            fit.iterations,
            fit.log_likelihood
        );
        Ok(CoxModel {
            feature_names: agg.names,
            standardizer,
            fit,
        })
    }

    pub fn relative_risk(&self, raw_features: &[f64]) -> f64 {
        let z = self.standardizer.apply_row(raw_features);
        z.iter().zip(&self.fit.beta).map(|(a, b)| a * b).sum::<f64>().exp()
    }

    /// Expected gap after each user's last session; with `condition_on_absence`,
    /// conditioned on no return before the prediction window starts.
    pub fn predict(&self, dataset: &Dataset, condition_on_absence: bool) -> Result<Vec<PredictionRecord>> {
        let agg = build_aggregates(dataset);
        if agg.names != self.feature_names {
            return Err(Error::Mismatch(format!(
                "model features {:?} differ from dataset features {:?}",
                self.feature_names, agg.names
            )));
        }
        let window = dataset.window;
        dataset
            .users
            .par_iter()
            .zip(agg.rows.par_iter())
            .map(|(user, row)| {
                let t_s = if condition_on_absence {
                    user.absence_time(&window)
                } else {
                    0.0
                };
                let e = self.fit.baseline.expectation(self.relative_risk(row), t_s)?;
                Ok(PredictionRecord::new(
                    user,
                    &window,
                    e.value,
                    crate::features::active_day_count(user),
                ))
            })
            .collect()
    }

    pub fn save_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn load_json<R: Read>(input: R) -> Result<Self> {
        Ok(serde_json::from_reader(input)?)
    }
}
