//! Quadratic intraday trend in the mean and variance of the transformed
//! generalized residuals.
//!
//! Clock times are mapped to `s in [0, 1]` over the trading day, and
//! `tau_mean(s) = a s^2 + b s + c`, `tau_sd(s)^2 = d s^2 + e s + f`.

use crate::error::{HsdmError, Result};
use crate::optim::NelderMead;
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Variance values at or below this are rejected during fitting and used as
/// the floor when evaluating online estimates.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub day_start_ms: i64,
    pub day_end_ms: i64,
}

/// Coefficients of the same quadratics in raw clock milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockCoefficients {
    pub mean: [f64; 3],
    pub var: [f64; 3],
}

impl TrendParams {
    /// tau_mean = 0, tau_sd = 1.
    pub fn identity(day_start_ms: i64, day_end_ms: i64) -> Self {
        Self::from_eta([0.0, 0.0, 0.0, 0.0, 0.0, 1.0], day_start_ms, day_end_ms)
    }

    pub fn from_eta(eta: [f64; 6], day_start_ms: i64, day_end_ms: i64) -> Self {
        let [a, b, c, d, e, f] = eta;
        Self { a, b, c, d, e, f, day_start_ms, day_end_ms }
    }

    pub fn eta(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }

    fn with_eta(&self, eta: [f64; 6]) -> Self {
        Self::from_eta(eta, self.day_start_ms, self.day_end_ms)
    }

    /// Normalized day coordinate of a clock time.
    pub fn s(&self, time_ms: i64) -> f64 {
        normalized_time(time_ms, self.day_start_ms, self.day_end_ms)
    }

    pub fn mean_s(&self, s: f64) -> f64 {
        (self.a * s + self.b) * s + self.c
    }

    /// Fitted variance quadratic, unfloored.
    pub fn var_s(&self, s: f64) -> f64 {
        (self.d * s + self.e) * s + self.f
    }

    pub fn sd_s(&self, s: f64) -> f64 {
        self.var_s(s).max(VAR_FLOOR).sqrt()
    }

    pub fn mean_at(&self, time_ms: i64) -> f64 {
        self.mean_s(self.s(time_ms))
    }

    pub fn sd_at(&self, time_ms: i64) -> f64 {
        self.sd_s(self.s(time_ms))
    }

    /// Minimum of the variance quadratic over [lo, hi].
    pub fn min_var_on(&self, lo: f64, hi: f64) -> f64 {
        min_quadratic(self.d, self.e, self.f, lo, hi)
    }

    pub fn min_var_over_span(&self) -> f64 {
        self.min_var_on(0.0, 1.0)
    }

    pub fn clock_coefficients(&self) -> ClockCoefficients {
        let t0 = self.day_start_ms as f64;
        let w = (self.day_end_ms - self.day_start_ms) as f64;
        let conv = |a: f64, b: f64, c: f64| {
            [
                a / (w * w),
                b / w - 2.0 * a * t0 / (w * w),
                a * t0 * t0 / (w * w) - b * t0 / w + c,
            ]
        };
        ClockCoefficients {
            mean: conv(self.a, self.b, self.c),
            var: conv(self.d, self.e, self.f),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta().iter().any(|v| !v.is_finite()) {
            return Err(HsdmError::invalid("trend coefficients must be finite"));
        }
        if self.day_end_ms <= self.day_start_ms {
            return Err(HsdmError::invalid("trend day span is empty"));
        }
        Ok(())
    }
}

pub fn normalized_time(time_ms: i64, start: i64, end: i64) -> f64 {
    (time_ms - start) as f64 / (end - start) as f64
}

fn min_quadratic(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> f64 {
    let q = |s: f64| (a * s + b) * s + c;
    let mut m = q(lo).min(q(hi));
    if a > 0.0 {
        let v = -b / (2.0 * a);
        if v > lo && v < hi {
            m = m.min(q(v));
        }
    }
    m
}

/// p̂ = (p^T - tau_mean) / tau_sd, evaluated at the previous event times.
pub fn detrend(p_t: &[f64], times_ms: &[i64], params: &TrendParams) -> Result<Vec<f64>> {
    let s: Vec<f64> = times_ms.iter().map(|&t| params.s(t)).collect();
    detrend_s(p_t, &s, params)
}

pub fn detrend_s(p_t: &[f64], s: &[f64], params: &TrendParams) -> Result<Vec<f64>> {
    if p_t.len() != s.len() {
        return Err(HsdmError::invalid("values and times differ in length"));
    }
    p_t.iter()
        .zip(s)
        .map(|(&p, &si)| {
            let v = params.var_s(si);
            if v <= 0.0 {
                Err(HsdmError::invalid(format!("nonpositive trend variance {v} at s = {si}")))
            } else {
                Ok((p - params.mean_s(si)) / v.sqrt())
            }
        })
        .collect()
}

pub fn retrend_s(p_hat: &[f64], s: &[f64], params: &TrendParams) -> Result<Vec<f64>> {
    if p_hat.len() != s.len() {
        return Err(HsdmError::invalid("values and times differ in length"));
    }
    p_hat
        .iter()
        .zip(s)
        .map(|(&p, &si)| {
            let v = params.var_s(si);
            if v <= 0.0 {
                Err(HsdmError::invalid(format!("nonpositive trend variance {v} at s = {si}")))
            } else {
                Ok(p * v.sqrt() + params.mean_s(si))
            }
        })
        .collect()
}

/// Observations for the trend likelihood: values, normalized times and the
/// ARFIMA predictive moments (absent means mu = 0, sigma = 1).
#[derive(Debug, Clone, Copy)]
pub struct TrendData<'a> {
    pub p: &'a [f64],
    pub s: &'a [f64],
    pub mu: Option<&'a [f64]>,
    pub sigma: Option<&'a [f64]>,
}

impl<'a> TrendData<'a> {
    pub fn quasi(p: &'a [f64], s: &'a [f64]) -> Self {
        Self { p, s, mu: None, sigma: None }
    }

    fn range(&self) -> (f64, f64) {
        let lo = self.s.iter().copied().fold(0.0, f64::min);
        let hi = self.s.iter().copied().fold(1.0, f64::max);
        (lo, hi)
    }

    fn moments(&self, i: usize) -> (f64, f64) {
        (
            self.mu.map_or(0.0, |m| m[i]),
            self.sigma.map_or(1.0, |s| s[i]),
        )
    }
}

/// Joint log-likelihood of the trend and the ARFIMA moments; with mu = 0 and
/// sigma = 1 this is the quasi-log-likelihood. Returns -inf when the
/// variance quadratic is not positive over the span.
pub fn joint_loglik(eta: &[f64; 6], data: &TrendData<'_>) -> f64 {
    let (lo, hi) = data.range();
    if min_quadratic(eta[3], eta[4], eta[5], lo, hi) <= VAR_FLOOR {
        return f64::NEG_INFINITY;
    }
    let mut ll = 0.0;
    for i in 0..data.p.len() {
        let s = data.s[i];
        let m = (eta[0] * s + eta[1]) * s + eta[2];
        let v = (eta[3] * s + eta[4]) * s + eta[5];
        let (mu, sigma) = data.moments(i);
        let tau = v.sqrt();
        let r = data.p[i] - m - tau * mu;
        ll -= tau.ln() + sigma.ln() + r * r / (2.0 * v * sigma * sigma);
    }
    ll
}

pub fn quasi_loglik(eta: &[f64; 6], p: &[f64], s: &[f64]) -> f64 {
    joint_loglik(eta, &TrendData::quasi(p, s))
}

/// Analytic gradient and Hessian of `joint_loglik` in eta.
fn grad_hess(eta: &[f64; 6], data: &TrendData<'_>) -> (Vector6<f64>, Matrix6<f64>) {
    let mut g = Vector6::zeros();
    let mut h = Matrix6::zeros();
    for i in 0..data.p.len() {
        let s = data.s[i];
        let z = [s * s, s, 1.0];
        let m = (eta[0] * s + eta[1]) * s + eta[2];
        let v = (eta[3] * s + eta[4]) * s + eta[5];
        let (mu, sigma) = data.moments(i);
        let s2 = sigma * sigma;
        let tau = v.sqrt();
        let r = data.p[i] - m - tau * mu;
        let l_m = r / (v * s2);
        let l_v = -0.5 / v + r * mu / (2.0 * tau * v * s2) + r * r / (2.0 * v * v * s2);
        let l_mm = -1.0 / (v * s2);
        let l_mv = -mu / (2.0 * tau * v * s2) - r / (v * v * s2);
        let l_vv = 0.5 / (v * v)
            - mu * mu / (4.0 * s2 * v * v)
            - 5.0 * r * mu / (4.0 * s2 * v * v * tau)
            - r * r / (s2 * v * v * v);
        for k in 0..3 {
            g[k] += l_m * z[k];
            g[k + 3] += l_v * z[k];
            for l in 0..3 {
                let zz = z[k] * z[l];
                h[(k, l)] += l_mm * zz;
                h[(k, l + 3)] += l_mv * zz;
                h[(k + 3, l)] += l_mv * zz;
                h[(k + 3, l + 3)] += l_vv * zz;
            }
        }
    }
    (g, h)
}

/// Penalty term lambda * |eta - eta0|^2 subtracted from the likelihood.
#[derive(Debug, Clone, Copy)]
pub struct Prior {
    pub eta0: [f64; 6],
    pub lambda: f64,
}

fn penalized(eta: &[f64; 6], data: &TrendData<'_>, prior: Option<&Prior>) -> f64 {
    let ll = joint_loglik(eta, data);
    match prior {
        Some(pr) => {
            ll - pr.lambda
                * eta.iter().zip(&pr.eta0).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        }
        None => ll,
    }
}

/// Damped Newton ascent on the (optionally penalized) trend likelihood over
/// the free coordinates. Steps that do not increase the objective, or that
/// break variance positivity, are shrunk by a Levenberg term.
fn newton_ascent(
    start: [f64; 6],
    data: &TrendData<'_>,
    prior: Option<&Prior>,
    free: [bool; 6],
    max_iter: usize,
    trace: Option<&mut Vec<f64>>,
) -> ([f64; 6], f64) {
    let mut eta = start;
    let mut value = penalized(&eta, data, prior);
    let mut local_trace = Vec::new();
    if !value.is_finite() {
        return (eta, value);
    }
    for _ in 0..max_iter {
        let (mut g, mut h) = grad_hess(&eta, data);
        if let Some(pr) = prior {
            for k in 0..6 {
                g[k] -= 2.0 * pr.lambda * (eta[k] - pr.eta0[k]);
                h[(k, k)] -= 2.0 * pr.lambda;
            }
        }
        for k in 0..6 {
            if !free[k] {
                g[k] = 0.0;
                for l in 0..6 {
                    h[(k, l)] = 0.0;
                    h[(l, k)] = 0.0;
                }
                h[(k, k)] = -1.0;
            }
        }
        let neg_h = -h;
        let scale = (0..6).map(|k| neg_h[(k, k)].abs()).fold(1e-12, f64::max);
        let mut damping = 0.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = neg_h;
            for k in 0..6 {
                a[(k, k)] += damping;
            }
            let step = a.cholesky().map(|c| c.solve(&g));
            if let Some(step) = step {
                let mut cand = eta;
                for k in 0..6 {
                    cand[k] += step[k];
                }
                let cv = penalized(&cand, data, prior);
                if cv.is_finite() && cv >= value {
                    let gain = cv - value;
                    eta = cand;
                    value = cv;
                    accepted = true;
                    local_trace.push(value);
                    if gain <= 1e-12 * value.abs().max(1.0) {
                        return finish(eta, value, trace, local_trace);
                    }
                    break;
                }
            }
            damping = if damping == 0.0 { 1e-6 * scale } else { damping * 10.0 };
        }
        if !accepted {
            break;
        }
    }
    finish(eta, value, trace, local_trace)
}

fn finish(
    eta: [f64; 6],
    value: f64,
    trace: Option<&mut Vec<f64>>,
    local: Vec<f64>,
) -> ([f64; 6], f64) {
    if let Some(t) = trace {
        t.extend(local);
    }
    (eta, value)
}

/// Result of a batch trend fit.
#[derive(Debug, Clone)]
pub struct TrendFit {
    pub params: TrendParams,
    pub loglik: f64,
    /// Best objective after each optimizer iteration; nondecreasing.
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Starting values: OLS of p on the quadratic, then OLS of squared residuals.
fn initial_eta(p: &[f64], s: &[f64], free: [bool; 6]) -> [f64; 6] {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut eta = [0.0, 0.0, mean, 0.0, 0.0, var.max(1e-4)];
    if free[0] && free[1] && free[2] {
        if let Some(beta) = ols_quadratic(p, s) {
            let resid: Vec<f64> = p
                .iter()
                .zip(s)
                .map(|(&x, &si)| (x - ((beta[0] * si + beta[1]) * si + beta[2])).powi(2))
                .collect();
            eta[..3].copy_from_slice(&beta);
            let v = resid.iter().sum::<f64>() / n;
            eta[5] = v.max(1e-4);
            if free[3] && free[4] && free[5] {
                if let Some(gamma) = ols_quadratic(&resid, s) {
                    if min_quadratic(gamma[0], gamma[1], gamma[2], 0.0, 1.0) > 1e-3 {
                        eta[3..].copy_from_slice(&gamma);
                    }
                }
            }
        }
    }
    eta
}

fn ols_quadratic(y: &[f64], s: &[f64]) -> Option<[f64; 3]> {
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    for (&yi, &si) in y.iter().zip(s) {
        let z = Vector3::new(si * si, si, 1.0);
        xtx += z * z.transpose();
        xty += z * yi;
    }
    let b = xtx.cholesky()?.solve(&xty);
    Some([b[0], b[1], b[2]])
}

/// Maximize the quasi-log-likelihood over all six coefficients.
pub fn quasi_ml_fit(p_t: &[f64], times_ms: &[i64], day_start_ms: i64, day_end_ms: i64) -> Result<TrendFit> {
    let s: Vec<f64> = times_ms
        .iter()
        .map(|&t| normalized_time(t, day_start_ms, day_end_ms))
        .collect();
    fit_masked(&TrendData::quasi(p_t, &s), [true; 6], None, day_start_ms, day_end_ms)
}

/// Maximize the quasi-log-likelihood over the coefficients flagged free; the
/// others stay at zero except f, which starts from the sample variance.
pub fn quasi_ml_fit_masked(
    p_t: &[f64],
    s: &[f64],
    free: [bool; 6],
    day_start_ms: i64,
    day_end_ms: i64,
) -> Result<TrendFit> {
    fit_masked(&TrendData::quasi(p_t, s), free, None, day_start_ms, day_end_ms)
}

/// Maximize the joint log-likelihood with ARFIMA moments held fixed.
pub fn joint_ml_fit(data: &TrendData<'_>, start: Option<[f64; 6]>, day_start_ms: i64, day_end_ms: i64) -> Result<TrendFit> {
    fit_masked(data, [true; 6], start, day_start_ms, day_end_ms)
}

fn fit_masked(
    data: &TrendData<'_>,
    free: [bool; 6],
    start: Option<[f64; 6]>,
    day_start_ms: i64,
    day_end_ms: i64,
) -> Result<TrendFit> {
    let n = data.p.len();
    if n < 7 {
        return Err(HsdmError::precondition(format!("trend fit needs at least 7 values, got {n}")));
    }
    if data.p.len() != data.s.len() {
        return Err(HsdmError::invalid("values and times differ in length"));
    }
    if data.p.iter().chain(data.s).any(|v| !v.is_finite()) {
        return Err(HsdmError::invalid("trend inputs must be finite"));
    }
    let x0 = start.unwrap_or_else(|| initial_eta(data.p, data.s, free));
    let idx: Vec<usize> = (0..6).filter(|&k| free[k]).collect();
    let embed = |x: &[f64]| {
        let mut eta = x0;
        for (j, &k) in idx.iter().enumerate() {
            eta[k] = x[j];
        }
        eta
    };
    let sd = x0[5].abs().sqrt().max(1e-3);
    let step: Vec<f64> = idx
        .iter()
        .map(|&k| if k < 3 { 0.3 * sd } else { 0.3 * x0[5].abs().max(1e-3) })
        .collect();
    let y0: Vec<f64> = idx.iter().map(|&k| x0[k]).collect();
    let nm = NelderMead {
        max_evals: 6000,
        f_tol: 1e-9,
        x_tol: 1e-9,
        restarts: 2,
    };
    let min = nm.minimize(|x| -joint_loglik(&embed(x), data), &y0, &step);
    if !min.value.is_finite() {
        return Err(HsdmError::NonConvergence(
            "trend likelihood is not finite at any simplex point".into(),
        ));
    }
    let mut trace: Vec<f64> = min.trace.iter().map(|v| -v).collect();
    let (eta, loglik) = newton_ascent(embed(&min.x), data, None, free, 100, Some(&mut trace));
    let converged = min.converged || trace.len() > min.trace.len();
    if !converged {
        log::warn!("trend simplex hit its evaluation budget; Newton polish made no progress");
    }
    Ok(TrendFit {
        params: TrendParams::from_eta(eta, day_start_ms, day_end_ms),
        loglik,
        trace,
        converged,
    })
}

/// Fit of the detrended series used inside the joint refit.
#[derive(Debug, Clone)]
pub struct PredictorFit<M> {
    pub model: M,
    /// One-step predictive mean and sd for every position of the input.
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Parameter vector compared across rounds for convergence.
    pub params: Vec<f64>,
}

pub trait SeriesPredictor {
    type Model: Clone;
    fn fit_predict(&mut self, detrended: &[f64]) -> Result<PredictorFit<Self::Model>>;
}

#[derive(Debug, Clone)]
pub struct JointRefit<M> {
    pub trend: TrendParams,
    pub model: M,
    /// Per round: (max |delta eta|, max |delta predictor params|, joint loglik).
    pub rounds: Vec<(f64, f64, f64)>,
    pub converged: bool,
    /// Round whose estimates are returned (0 = quasi-likelihood start).
    pub best_round: usize,
}

/// Alternate trend and predictor fits until both parameter vectors change by
/// less than `tol` (max-abs) or `max_rounds` is reached. Without convergence
/// the round with the highest joint likelihood is returned.
pub fn joint_refit<P: SeriesPredictor>(
    p_t: &[f64],
    s: &[f64],
    predictor: &mut P,
    day_start_ms: i64,
    day_end_ms: i64,
    tol: f64,
    max_rounds: usize,
) -> Result<JointRefit<P::Model>> {
    let first = fit_masked(&TrendData::quasi(p_t, s), [true; 6], None, day_start_ms, day_end_ms)?;
    let mut trend = first.params;
    let mut fit = predictor.fit_predict(&detrend_s(p_t, s, &trend)?)?;
    let mut rounds = Vec::new();
    let mut best = (f64::NEG_INFINITY, trend, fit.model.clone(), 0usize);
    let mut converged = false;
    for round in 1..=max_rounds {
        let data = TrendData { p: p_t, s, mu: Some(&fit.mu), sigma: Some(&fit.sigma) };
        let new_trend = joint_ml_fit(&data, Some(trend.eta()), day_start_ms, day_end_ms)?;
        let ll = new_trend.loglik;
        if ll > best.0 {
            best = (ll, trend, fit.model.clone(), round - 1);
        }
        let new_fit = predictor.fit_predict(&detrend_s(p_t, s, &new_trend.params)?)?;
        let d_eta = max_abs_diff(&trend.eta(), &new_trend.params.eta());
        let d_par = max_abs_diff(&fit.params, &new_fit.params);
        rounds.push((d_eta, d_par, ll));
        trend = new_trend.params;
        fit = new_fit;
        if d_eta < tol && d_par < tol {
            converged = true;
            break;
        }
    }
    if converged {
        let n = rounds.len();
        return Ok(JointRefit { trend, model: fit.model, rounds, converged, best_round: n });
    }
    log::warn!("joint trend/ARFIMA refit did not converge in {max_rounds} rounds; returning best round");
    Ok(JointRefit { trend: best.1, model: best.2, rounds, converged, best_round: best.3 })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// How the trend evolves while predicting a test day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendUpdate {
    Lse,
    Pm,
    Frozen,
}

impl std::str::FromStr for TrendUpdate {
    type Err = HsdmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lse" => Ok(Self::Lse),
            "pm" => Ok(Self::Pm),
            "frozen" => Ok(Self::Frozen),
            other => Err(HsdmError::invalid(format!("unknown trend update {other}"))),
        }
    }
}

/// Running sums for the penalized least squares update. All sums are over
/// the events seen so far, in normalized time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Accumulators {
    /// sum s^k, k = 0..6
    s_pow: [f64; 7],
    /// sum p s^k, k = 0..4
    p_s: [f64; 5],
    /// sum p^2 s^k, k = 0..2
    p2_s: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrendState {
    pub prior: TrendParams,
    pub lambda: f64,
    pub current: TrendParams,
    pub count: usize,
    acc: Accumulators,
}

impl OnlineTrendState {
    pub fn new(prior: TrendParams, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(HsdmError::invalid("penalty must be nonnegative"));
        }
        Ok(Self { prior, lambda, current: prior, count: 0, acc: Accumulators::default() })
    }

    /// Add the pair (s_prev, p) and re-solve both penalized regressions.
    pub fn lse_update(&mut self, s_prev: f64, p: f64) -> TrendParams {
        let mut pow = [1.0; 7];
        for k in 1..7 {
            pow[k] = pow[k - 1] * s_prev;
        }
        for k in 0..7 {
            self.acc.s_pow[k] += pow[k];
        }
        for k in 0..5 {
            self.acc.p_s[k] += p * pow[k];
        }
        for k in 0..3 {
            self.acc.p2_s[k] += p * p * pow[k];
        }
        self.count += 1;
        self.current = self.solve();
        self.current
    }

    fn solve(&self) -> TrendParams {
        let sp = &self.acc.s_pow;
        let lam = self.lambda;
        // Design rows z = (s^2, s, 1); X'X entries are sums of s^(4-k-l).
        let mut xtx = Matrix3::zeros();
        for k in 0..3 {
            for l in 0..3 {
                xtx[(k, l)] = sp[4 - k - l];
            }
        }
        let reg = xtx + Matrix3::identity() * lam;
        let e0 = self.prior.eta();
        let xtp = Vector3::new(self.acc.p_s[2], self.acc.p_s[1], self.acc.p_s[0]);
        let rhs = xtp + Vector3::new(e0[0], e0[1], e0[2]) * lam;
        let Some(beta) = solve3(&reg, &rhs) else {
            return self.prior;
        };
        let (a, b, c) = (beta[0], beta[1], beta[2]);
        // Sum over events of s^k (p - m(s))^2 with m = a s^2 + b s + c.
        let m_coef = [c, b, a];
        let resid_moment = |k: usize| {
            let mut v = self.acc.p2_s[k];
            for (j, mc) in m_coef.iter().enumerate() {
                v -= 2.0 * mc * self.acc.p_s[k + j];
            }
            for (i, mi) in m_coef.iter().enumerate() {
                for (j, mj) in m_coef.iter().enumerate() {
                    v += mi * mj * sp[k + i + j];
                }
            }
            v
        };
        let xty = Vector3::new(resid_moment(2), resid_moment(1), resid_moment(0));
        let rhs_v = xty + Vector3::new(e0[3], e0[4], e0[5]) * lam;
        let Some(gamma) = solve3(&reg, &rhs_v) else {
            return self.prior;
        };
        self.prior.with_eta([a, b, c, gamma[0], gamma[1], gamma[2]])
    }
}

fn solve3(m: &Matrix3<f64>, rhs: &Vector3<f64>) -> Option<Vector3<f64>> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || m.determinant().abs() <= 1e-12 * scale.powi(3) {
        return None;
    }
    m.lu().solve(rhs)
}

/// Posterior-mode update: the joint log-likelihood of all events seen so far
/// (with each event's ARFIMA moments as predicted when it arrived) minus the
/// LSE penalties, maximized by damped Newton from the previous mode.
#[derive(Debug, Clone)]
pub struct PmState {
    pub prior: TrendParams,
    pub lambda: f64,
    pub current: TrendParams,
    s: Vec<f64>,
    p: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl PmState {
    pub fn new(prior: TrendParams, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(HsdmError::invalid("penalty must be nonnegative"));
        }
        Ok(Self {
            prior,
            lambda,
            current: prior,
            s: Vec::new(),
            p: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
        })
    }

    pub fn count(&self) -> usize {
        self.p.len()
    }

    pub fn pm_update(&mut self, s_prev: f64, p: f64, mu: f64, sigma: f64) -> TrendParams {
        self.s.push(s_prev);
        self.p.push(p);
        self.mu.push(mu);
        self.sigma.push(sigma);
        let data = TrendData { p: &self.p, s: &self.s, mu: Some(&self.mu), sigma: Some(&self.sigma) };
        let prior = Prior { eta0: self.prior.eta(), lambda: self.lambda };
        let mut start = self.current.eta();
        if !joint_loglik(&start, &data).is_finite() {
            start = prior.eta0;
        }
        let (eta, value) = newton_ascent(start, &data, Some(&prior), [true; 6], 50, None);
        if value.is_finite() {
            self.current = self.prior.with_eta(eta);
        }
        self.current
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn span() -> (i64, i64) {
        (34_200_000, 57_600_000)
    }

    fn simulate(eta: [f64; 6], n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng_from(seed);
        let t = TrendParams::from_eta(eta, 0, 1);
        let s: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let p = s
            .iter()
            .map(|&si| {
                let z: f64 = StandardNormal.sample(&mut rng);
                t.mean_s(si) + t.var_s(si).sqrt() * z
            })
            .collect();
        (p, s)
    }

    #[test]
    fn identity_and_shift_detrend() {
        let (lo, hi) = span();
        let p = [0.3, -1.2, 2.0];
        let times = [lo, lo + 1000, hi];
        let id = TrendParams::identity(lo, hi);
        assert_eq!(detrend(&p, &times, &id).unwrap(), p.to_vec());
        let shift = TrendParams::from_eta([0.0, 0.0, 1.0, 0.0, 0.0, 1.0], lo, hi);
        let out = detrend(&p, &times, &shift).unwrap();
        for (o, x) in out.iter().zip(&p) {
            assert!((o - (x - 1.0)).abs() < 1e-15);
        }
        let bad = TrendParams::from_eta([0.0, 0.0, 0.0, 0.0, 0.0, -1.0], lo, hi);
        assert!(detrend(&p, &times, &bad).is_err());
    }

    #[test]
    fn clock_coefficients_agree() {
        let (lo, hi) = span();
        let t = TrendParams::from_eta([-1.2, 1.2, -0.2, -1.6, 1.6, 0.6], lo, hi);
        let cc = t.clock_coefficients();
        for &ms in &[lo, lo + 5_000_000, hi] {
            let x = ms as f64;
            let m = (cc.mean[0] * x + cc.mean[1]) * x + cc.mean[2];
            assert!((m - t.mean_at(ms)).abs() < 1e-6);
        }
    }

    #[test]
    fn small_input_rejected() {
        assert!(matches!(
            quasi_ml_fit(&[0.1, 0.2, 0.3], &[1, 2, 3], 0, 10),
            Err(HsdmError::Precondition(_))
        ));
    }

    #[test]
    fn constant_parameterization_matches_closed_form() {
        let (p, s) = simulate([0.0, 0.0, 0.4, 0.0, 0.0, 2.0], 500, 1);
        let fit = quasi_ml_fit_masked(&p, &s, [false, false, true, false, false, true], 0, 1).unwrap();
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((fit.params.c - mean).abs() < 1e-7, "{} vs {mean}", fit.params.c);
        assert!((fit.params.f - var).abs() < 1e-7);
        assert_eq!(fit.params.a, 0.0);
        assert_eq!(fit.params.d, 0.0);
    }

    #[test]
    fn trace_is_monotone_and_recovers_trend() {
        let eta = [-1.2, 1.2, -0.2, -1.6, 1.6, 0.6];
        let (p, s) = simulate(eta, 5000, 2);
        let fit = quasi_ml_fit_masked(&p, &s, [true; 6], 0, 1).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!((fit.params.mean_s(0.5) - TrendParams::from_eta(eta, 0, 1).mean_s(0.5)).abs() < 0.1);
        assert!(fit.params.min_var_over_span() > VAR_FLOOR);
    }

    #[test]
    fn no_trend_gives_flat_fit() {
        let mut hits = 0;
        let reps = 200;
        for rep in 0..reps {
            let (p, s) = simulate([0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 400, 100 + rep);
            let fit = quasi_ml_fit_masked(&p, &s, [true; 6], 0, 1).unwrap();
            // Midday mean within 3 standard errors of zero.
            if fit.params.mean_s(0.5).abs() < 3.0 * (2.25f64 / 400.0).sqrt() {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * reps as f64, "{hits}");
    }

    #[test]
    fn lse_with_huge_penalty_returns_prior() {
        let prior = TrendParams::from_eta([0.1, -0.2, 0.3, 0.05, 0.1, 0.9], 0, 1);
        let mut st = OnlineTrendState::new(prior, 1e12).unwrap();
        for i in 0..50 {
            st.lse_update(i as f64 / 50.0, (i as f64).sin());
        }
        for (x, y) in st.current.eta().iter().zip(prior.eta()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn lse_exact_interpolation_without_penalty() {
        let prior = TrendParams::identity(0, 1);
        let mut st = OnlineTrendState::new(prior, 0.0).unwrap();
        let q = |s: f64| 2.0 * s * s - 0.5 * s + 0.25;
        st.lse_update(0.1, q(0.1));
        st.lse_update(0.2, q(0.2));
        let out = st.lse_update(0.7, q(0.7));
        assert!((out.a - 2.0).abs() < 1e-9 && (out.b + 0.5).abs() < 1e-9 && (out.c - 0.25).abs() < 1e-9);
    }

    #[test]
    fn singular_lse_falls_back_to_prior() {
        let prior = TrendParams::from_eta([0.1, 0.2, 0.3, 0.0, 0.0, 1.0], 0, 1);
        let mut st = OnlineTrendState::new(prior, 0.0).unwrap();
        assert_eq!(st.lse_update(0.4, 1.0), prior);
    }

    proptest! {
        #[test]
        fn lse_matches_batch_ols(
            pts in proptest::collection::vec((0.0f64..1.0, -3.0f64..3.0), 6..60)
        ) {
            let prior = TrendParams::identity(0, 1);
            let mut st = OnlineTrendState::new(prior, 0.0).unwrap();
            let mut out = prior;
            for &(s, p) in &pts {
                out = st.lse_update(s, p);
            }
            // Oracle: SVD least squares on the explicit design matrices.
            let n = pts.len();
            let x = nalgebra::DMatrix::from_fn(n, 3, |i, j| pts[i].0.powi(2 - j as i32));
            let cond = x.clone().svd(false, false).singular_values;
            prop_assume!(cond[2] > 1e-3 * cond[0]);
            let y = nalgebra::DVector::from_iterator(n, pts.iter().map(|q| q.1));
            let beta = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
            let r2 = nalgebra::DVector::from_iterator(
                n,
                pts.iter().map(|&(s, p)| (p - (beta[0] * s * s + beta[1] * s + beta[2])).powi(2)),
            );
            let gamma = x.svd(true, true).solve(&r2, 1e-14).unwrap();
            let eta = out.eta();
            for k in 0..3 {
                prop_assert!((eta[k] - beta[k]).abs() < 1e-9 * (1.0 + beta[k].abs()));
                prop_assert!((eta[k + 3] - gamma[k]).abs() < 1e-9 * (1.0 + gamma[k].abs()));
            }
        }

        #[test]
        fn detrend_retrend_identity(
            vals in proptest::collection::vec((0.0f64..1.0, -5.0f64..5.0), 1..40),
            eta in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..0.5, 0.0f64..0.5, 0.1f64..2.0)
        ) {
            let t = TrendParams::from_eta([eta.0, eta.1, eta.2, eta.3, eta.4, eta.5], 0, 1);
            let s: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let p: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let back = retrend_s(&detrend_s(&p, &s, &t).unwrap(), &s, &t).unwrap();
            for (x, y) in back.iter().zip(&p) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, s) = simulate([0.2, -0.1, 0.1, 0.3, -0.2, 1.1], 50, 3);
        let mu: Vec<f64> = (0..50).map(|i| 0.1 * (i as f64).cos()).collect();
        let sigma: Vec<f64> = (0..50).map(|i| 0.8 + 0.01 * i as f64).collect();
        let data = TrendData { p: &p, s: &s, mu: Some(&mu), sigma: Some(&sigma) };
        let eta = [0.1, -0.05, 0.2, 0.25, -0.1, 1.0];
        let (g, h) = grad_hess(&eta, &data);
        let fd = crate::optim::hessian(|x| joint_loglik(&[x[0], x[1], x[2], x[3], x[4], x[5]], &data), &eta, 1e-4);
        for k in 0..6 {
            let mut up = eta;
            let mut dn = eta;
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let num = (joint_loglik(&up, &data) - joint_loglik(&dn, &data)) / 2e-6;
            assert!((num - g[k]).abs() < 1e-5 * (1.0 + g[k].abs()), "grad {k}");
            for l in 0..6 {
                assert!((fd[k][l] - h[(k, l)]).abs() < 1e-3 * (1.0 + h[(k, l)].abs()), "hess {k},{l}");
            }
        }
    }

    #[test]
    fn pm_with_huge_penalty_and_single_event() {
        let prior = TrendParams::from_eta([0.1, -0.2, 0.3, 0.05, 0.1, 0.9], 0, 1);
        let mut st = PmState::new(prior, 1e12).unwrap();
        for i in 0..20 {
            st.pm_update(i as f64 / 20.0, 2.0 * (i as f64).sin(), 0.0, 1.0);
        }
        for (x, y) in st.current.eta().iter().zip(prior.eta()) {
            assert!((x - y).abs() < 1e-6);
        }
        let mut one = PmState::new(prior, 10.0).unwrap();
        let out = one.pm_update(0.3, 0.5, 0.0, 1.0);
        for (x, y) in out.eta().iter().zip(prior.eta()) {
            assert!((x - y).abs() < 0.1);
        }
    }

    struct Trivial;
    impl SeriesPredictor for Trivial {
        type Model = ();
        fn fit_predict(&mut self, x: &[f64]) -> Result<PredictorFit<()>> {
            Ok(PredictorFit { model: (), mu: vec![0.0; x.len()], sigma: vec![1.0; x.len()], params: vec![] })
        }
    }

    #[test]
    fn trivial_predictor_fixed_point_is_quasi_fit() {
        let (p, s) = simulate([-1.2, 1.2, -0.2, -1.6, 1.6, 0.6], 800, 4);
        let quasi = quasi_ml_fit_masked(&p, &s, [true; 6], 0, 1).unwrap();
        let joint = joint_refit(&p, &s, &mut Trivial, 0, 1, 1e-4, 20).unwrap();
        assert!(joint.converged);
        for (x, y) in joint.trend.eta().iter().zip(quasi.params.eta()) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
