//! ARFIMA(p, d, q) models with optional regressors: fractional differencing,
//! conditional-sum-of-squares fitting, BIC order selection and one-step
//! forecasting.
//!
//! The model is `phi(B) (1 - B)^d (x_i - r_i' beta) = theta(B) e_i` with
//! `phi(B) = 1 - sum phi_j B^j` and `theta(B) = 1 + sum theta_j B^j`. Under the
//! single-lag form `(1 - theta B)` the printed coefficient is the negative of
//! the stored one. Pre-sample values are zero throughout.

use crate::error::{HsdmError, Result};
use crate::optim::{hessian, NelderMead};
use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

pub const DEFAULT_TRUNCATION: usize = 1000;
/// Above this many multiply-adds the convolution switches to the FFT.
const DIRECT_LIMIT: usize = 200_000;

/// Coefficients pi_0..pi_L of (1 - B)^d.
pub fn frac_diff_coeffs(d: f64, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l + 1);
    out.push(1.0);
    for k in 1..=l {
        let prev = out[k - 1];
        out.push(prev * (k as f64 - 1.0 - d) / k as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FracDiffOp {
    pub d: f64,
    pub truncation: usize,
    pub coeffs: Vec<f64>,
}

impl FracDiffOp {
    pub fn new(d: f64, truncation: usize) -> Self {
        Self { d, truncation, coeffs: frac_diff_coeffs(d, truncation) }
    }

    /// y_i = sum_{k <= min(i, L)} pi_k x_{i-k}.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        truncated_convolution(&self.coeffs, x)
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn truncated_convolution(coeffs: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let l = coeffs.len().min(n);
    if n == 0 {
        return Vec::new();
    }
    if n * l <= DIRECT_LIMIT {
        return (0..n)
            .map(|i| {
                let m = i.min(l - 1);
                (0..=m).map(|k| coeffs[k] * x[i - k]).sum()
            })
            .collect();
    }
    let size = (n + l).next_power_of_two();
    let spec = spectrum(&coeffs[..l], size);
    let xs = spectrum(x, size);
    inverse_product(&spec, &xs, n)
}

fn spectrum(v: &[f64], size: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(size).process(&mut buf));
    buf
}

fn inverse_product(a: &[Complex<f64>], b: &[Complex<f64>], n: usize) -> Vec<f64> {
    let size = a.len();
    let mut buf: Vec<Complex<f64>> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(size).process(&mut buf));
    let scale = 1.0 / size as f64;
    buf[..n].iter().map(|c| c.re * scale).collect()
}

/// Map partial autocorrelations in (-1, 1) to the coefficients of a
/// stationary polynomial 1 - sum phi_j B^j (Durbin-Levinson).
pub fn pacf_to_ar(r: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(r.len());
    for (k, &rk) in r.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - rk * prev[k - 1 - j];
        }
        phi.push(rk);
    }
    phi
}

/// Inverse of `pacf_to_ar` (step-down recursion); None if not stationary.
pub fn ar_to_pacf(phi: &[f64]) -> Option<Vec<f64>> {
    let mut cur = phi.to_vec();
    let mut r = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let rk = cur[k];
        if rk.abs() >= 1.0 {
            return None;
        }
        r[k] = rk;
        let denom = 1.0 - rk * rk;
        let prev: Vec<f64> = (0..k).map(|j| (cur[j] + rk * cur[k - 1 - j]) / denom).collect();
        cur = prev;
    }
    Some(r)
}

/// True when 1 - sum phi_j z^j has all roots outside the unit circle.
pub fn is_stationary(phi: &[f64]) -> bool {
    ar_to_pacf(phi).is_some()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub d: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub intercept: Option<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArfimaModel {
    pub p: usize,
    pub q: usize,
    pub d: f64,
    /// phi_1..phi_p of 1 - sum phi_j B^j.
    pub ar: Vec<f64>,
    /// theta_1..theta_q of 1 + sum theta_j B^j.
    pub ma: Vec<f64>,
    /// Always "one_plus_theta": the MA polynomial is 1 + sum theta_j B^j.
    pub ma_convention: String,
    pub sigma2: f64,
    pub intercept: Option<f64>,
    /// Coefficients on the external regressors, in column order.
    pub beta: Vec<f64>,
    pub truncation: usize,
    pub n_obs: usize,
    pub loglik: f64,
    pub bic: f64,
    pub se: Option<StandardErrors>,
    pub converged: bool,
}

/// Regressor columns aligned with the series; `intercept` adds a constant.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regressors<'a> {
    pub columns: &'a [Vec<f64>],
    pub intercept: bool,
}

impl Regressors<'_> {
    pub fn none() -> Self {
        Self { columns: &[], intercept: false }
    }

    fn count(&self) -> usize {
        self.columns.len() + usize::from(self.intercept)
    }

    /// Full design columns, intercept first.
    fn design(&self, n: usize) -> Vec<Vec<f64>> {
        let mut cols = Vec::new();
        if self.intercept {
            cols.push(vec![1.0; n]);
        }
        cols.extend(self.columns.iter().cloned());
        cols
    }
}

#[derive(Debug, Clone)]
pub struct ArfimaConfig {
    pub truncation: usize,
    pub optimizer: NelderMead,
    pub standard_errors: bool,
}

impl Default for ArfimaConfig {
    fn default() -> Self {
        Self {
            truncation: DEFAULT_TRUNCATION,
            optimizer: NelderMead { max_evals: 4000, f_tol: 1e-7, x_tol: 1e-6, restarts: 1 },
            standard_errors: true,
        }
    }
}

/// Series and regressor spectra that do not change across likelihood
/// evaluations.
struct FitContext {
    n: usize,
    l: usize,
    fft_size: usize,
    /// Spectra of the series followed by each design column (FFT path).
    spectra: Option<Vec<Vec<Complex<f64>>>>,
    /// Raw series followed by design columns (direct path).
    raw: Vec<Vec<f64>>,
}

impl FitContext {
    fn new(x: &[f64], design: &[Vec<f64>], truncation: usize) -> Self {
        let n = x.len();
        let l = truncation.min(n);
        let mut raw = vec![x.to_vec()];
        raw.extend(design.iter().cloned());
        let fft_size = (n + l + 1).next_power_of_two();
        let spectra = (n * (l + 1) > DIRECT_LIMIT)
            .then(|| raw.iter().map(|v| spectrum(v, fft_size)).collect());
        Self { n, l, fft_size, spectra, raw }
    }

    /// Fractionally differenced series and design columns.
    fn frac_diff(&self, d: f64) -> Vec<Vec<f64>> {
        let coeffs = frac_diff_coeffs(d, self.l);
        match &self.spectra {
            Some(specs) => {
                let cs = spectrum(&coeffs, self.fft_size);
                specs.iter().map(|s| inverse_product(&cs, s, self.n)).collect()
            }
            None => self.raw.iter().map(|v| truncated_convolution(&coeffs, v)).collect(),
        }
    }
}

/// AR then inverse-MA filtering of a fractionally differenced sequence.
fn arma_filter(w: &[f64], ar: &[f64], ma: &[f64]) -> Vec<f64> {
    let n = w.len();
    let mut e = vec![0.0; n];
    for i in 0..n {
        let mut u = w[i];
        for (j, phi) in ar.iter().enumerate() {
            if i > j {
                u -= phi * w[i - j - 1];
            }
        }
        for (j, th) in ma.iter().enumerate() {
            if i > j {
                u -= th * e[i - j - 1];
            }
        }
        e[i] = u;
    }
    e
}

struct Concentrated {
    loglik: f64,
    sigma2: f64,
    coef: Vec<f64>,
    /// (F'F)^-1 for the filtered design.
    ftf_inv: Option<DMatrix<f64>>,
}

/// Gaussian CSS log-likelihood with sigma^2 and regression coefficients
/// concentrated out.
fn concentrated(ctx: &FitContext, d: f64, ar: &[f64], ma: &[f64]) -> Option<Concentrated> {
    let filtered: Vec<Vec<f64>> = ctx
        .frac_diff(d)
        .iter()
        .map(|w| arma_filter(w, ar, ma))
        .collect();
    let n = ctx.n;
    let k = filtered.len() - 1;
    let (resid, coef, ftf_inv) = if k == 0 {
        (filtered[0].clone(), Vec::new(), None)
    } else {
        let f = DMatrix::from_fn(n, k, |i, j| filtered[j + 1][i]);
        let y = DVector::from_column_slice(&filtered[0]);
        let ftf = f.transpose() * &f;
        let chol = ftf.clone().cholesky()?;
        let b = chol.solve(&(f.transpose() * &y));
        let r = y - &f * &b;
        (r.as_slice().to_vec(), b.as_slice().to_vec(), Some(chol.inverse()))
    };
    let sigma2 = resid.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return None;
    }
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    Some(Concentrated { loglik, sigma2, coef, ftf_inv })
}

fn unpack(z: &[f64], p: usize, q: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let d = 0.5 * z[0].tanh();
    let ar_pacf: Vec<f64> = z[1..1 + p].iter().map(|v| v.tanh()).collect();
    let ma_pacf: Vec<f64> = z[1 + p..1 + p + q].iter().map(|v| v.tanh()).collect();
    let ar = pacf_to_ar(&ar_pacf);
    let ma: Vec<f64> = pacf_to_ar(&ma_pacf).iter().map(|v| -v).collect();
    (d, ar, ma)
}

/// Fit an ARFIMA(p, d, q) by maximizing the concentrated CSS likelihood over
/// d in (-0.5, 0.5) and stationary/invertible AR and MA polynomials.
pub fn fit(
    x: &[f64],
    p: usize,
    q: usize,
    regressors: Regressors<'_>,
    config: &ArfimaConfig,
) -> Result<ArfimaModel> {
    let n = x.len();
    let k = regressors.count();
    if p > 10 || q > 10 {
        return Err(HsdmError::invalid(format!("orders ({p}, {q}) are out of range")));
    }
    if n <= 10 * (p + q + 2 + k) {
        return Err(HsdmError::precondition(format!(
            "series of length {n} is too short for orders ({p}, {q}) with {k} regressors"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(HsdmError::invalid("series must be finite"));
    }
    if regressors.columns.iter().any(|c| c.len() != n || c.iter().any(|v| !v.is_finite())) {
        return Err(HsdmError::invalid("regressor columns must be finite and match the series"));
    }
    let design = regressors.design(n);
    let ctx = FitContext::new(x, &design, config.truncation);
    let objective = |z: &[f64]| {
        let (d, ar, ma) = unpack(z, p, q);
        concentrated(&ctx, d, &ar, &ma).map_or(f64::INFINITY, |c| -c.loglik)
    };
    let z0 = vec![0.0; 1 + p + q];
    let step = vec![0.3; 1 + p + q];
    let min = config.optimizer.minimize(objective, &z0, &step);
    if !min.value.is_finite() {
        return Err(HsdmError::NonConvergence(format!(
            "ARFIMA({p}, d, {q}) likelihood was not finite"
        )));
    }
    if !min.converged {
        log::warn!("ARFIMA({p}, d, {q}) optimizer stopped at its evaluation budget");
    }
    let (d, ar, ma) = unpack(&min.x, p, q);
    let best = concentrated(&ctx, d, &ar, &ma)
        .ok_or_else(|| HsdmError::Numerical("likelihood failed at the optimum".into()))?;
    let n_params = 1 + p + q + 1 + k;
    let bic = n_params as f64 * (n as f64).ln() - 2.0 * best.loglik;
    let (intercept, beta) = split_coef(&best.coef, regressors.intercept);
    let se = if config.standard_errors {
        standard_errors(&ctx, d, &ar, &ma, &best, regressors.intercept)
    } else {
        None
    };
    Ok(ArfimaModel {
        p,
        q,
        d,
        ar,
        ma,
        ma_convention: "one_plus_theta".into(),
        sigma2: best.sigma2,
        intercept,
        beta,
        truncation: config.truncation,
        n_obs: n,
        loglik: best.loglik,
        bic,
        se,
        converged: min.converged,
    })
}

fn split_coef(coef: &[f64], intercept: bool) -> (Option<f64>, Vec<f64>) {
    if intercept {
        (Some(coef[0]), coef[1..].to_vec())
    } else {
        (None, coef.to_vec())
    }
}

/// Standard errors from the finite-difference Hessian of the concentrated
/// log-likelihood in natural coordinates; regression coefficients use
/// sigma^2 (F'F)^-1.
fn standard_errors(
    ctx: &FitContext,
    d: f64,
    ar: &[f64],
    ma: &[f64],
    best: &Concentrated,
    intercept: bool,
) -> Option<StandardErrors> {
    let p = ar.len();
    let mut theta = vec![d];
    theta.extend_from_slice(ar);
    theta.extend_from_slice(ma);
    let f = |v: &[f64]| {
        concentrated(ctx, v[0], &v[1..1 + p], &v[1 + p..])
            .map_or(f64::NAN, |c| -c.loglik)
    };
    let h = hessian(f, &theta, 1e-4);
    let m = theta.len();
    let hm = DMatrix::from_fn(m, m, |i, j| h[i][j]);
    let cov = hm.try_inverse()?;
    let diag: Vec<f64> = (0..m).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    if diag.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let reg_se: Vec<f64> = best
        .ftf_inv
        .as_ref()
        .map(|inv| (0..inv.nrows()).map(|i| (best.sigma2 * inv[(i, i)]).sqrt()).collect())
        .unwrap_or_default();
    let (intercept_se, beta_se) = split_coef(&reg_se, intercept && !reg_se.is_empty());
    Some(StandardErrors {
        d: diag[0],
        ar: diag[1..1 + p].to_vec(),
        ma: diag[1 + p..].to_vec(),
        intercept: intercept_se,
        beta: beta_se,
    })
}

/// Fit every (p, q) cell of the grid and keep the smallest BIC. Cells are
/// visited by increasing p + q, so ties go to the smaller model. Failed cells
/// are skipped with a warning.
pub fn select_order(
    x: &[f64],
    p_max: usize,
    q_max: usize,
    regressors: Regressors<'_>,
    config: &ArfimaConfig,
) -> Result<ArfimaModel> {
    let mut cells: Vec<(usize, usize)> = (0..=p_max)
        .flat_map(|p| (0..=q_max).map(move |q| (p, q)))
        .collect();
    cells.sort_by_key(|&(p, q)| (p + q, p));
    let mut best: Option<ArfimaModel> = None;
    let mut last_err = None;
    let quick = ArfimaConfig { standard_errors: false, ..config.clone() };
    for (p, q) in cells {
        match fit(x, p, q, regressors, &quick) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.bic < b.bic) {
                    best = Some(m);
                }
            }
            Err(e) => {
                log::warn!("skipping ARFIMA({p}, d, {q}): {e}");
                last_err = Some(e);
            }
        }
    }
    let chosen = best.ok_or_else(|| {
        last_err.unwrap_or_else(|| HsdmError::precondition("empty order grid"))
    })?;
    if config.standard_errors {
        fit(x, chosen.p, chosen.q, regressors, config)
    } else {
        Ok(chosen)
    }
}

impl ArfimaModel {
    /// A model with given parameters (used by the simulator and in tests).
    pub fn with_params(d: f64, ar: Vec<f64>, ma: Vec<f64>, sigma2: f64) -> Self {
        Self {
            p: ar.len(),
            q: ma.len(),
            d,
            ar,
            ma,
            ma_convention: "one_plus_theta".into(),
            sigma2,
            intercept: None,
            beta: Vec::new(),
            truncation: DEFAULT_TRUNCATION,
            n_obs: 0,
            loglik: f64::NAN,
            bic: f64::NAN,
            se: None,
            converged: true,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// MA coefficients under the single-lag sign convention (1 - theta B).
    pub fn ma_minus_convention(&self) -> Vec<f64> {
        self.ma.iter().map(|v| -v).collect()
    }

    pub fn n_regressors(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ma_convention != "one_plus_theta" {
            return Err(HsdmError::invalid(format!("unknown MA convention {}", self.ma_convention)));
        }
        if self.ar.len() != self.p || self.ma.len() != self.q {
            return Err(HsdmError::invalid("orders do not match coefficient counts"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) || !self.d.is_finite() {
            return Err(HsdmError::invalid("sigma2 must be positive and d finite"));
        }
        let ma_neg: Vec<f64> = self.ma.iter().map(|v| -v).collect();
        if !is_stationary(&self.ar) || !is_stationary(&ma_neg) {
            return Err(HsdmError::invalid("AR or MA polynomial has a root inside the unit circle"));
        }
        if self.truncation == 0 {
            return Err(HsdmError::invalid("truncation must be positive"));
        }
        Ok(())
    }

    fn regression_mean(&self, regs: &[f64]) -> f64 {
        self.intercept.unwrap_or(0.0)
            + self.beta.iter().zip(regs).map(|(b, r)| b * r).sum::<f64>()
    }

    pub fn filter(&self) -> ArfimaFilter<'_> {
        ArfimaFilter {
            model: self,
            coeffs: frac_diff_coeffs(self.d, self.truncation),
            xt: Vec::new(),
            w: Vec::new(),
            e: Vec::new(),
        }
    }

    /// One-step predictive mean and sd after `history`; `regressors[i]` holds
    /// the regressor values for position i and `regressors_now` those for the
    /// value being predicted.
    pub fn forecast_one_step(
        &self,
        history: &[f64],
        regressors: Option<&[Vec<f64>]>,
        regressors_now: &[f64],
    ) -> (f64, f64) {
        let mut f = self.filter();
        for (i, &x) in history.iter().enumerate() {
            let r = regressors.map_or(&[][..], |rs| rs[i].as_slice());
            f.push(x, r);
        }
        f.predict(regressors_now)
    }

    /// Predictive moments for every position of `x` given its own past.
    pub fn in_sample_moments(&self, x: &[f64], regressors: Option<&[Vec<f64>]>) -> (Vec<f64>, Vec<f64>) {
        let mut f = self.filter();
        let mut mu = Vec::with_capacity(x.len());
        let mut sd = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            let r = regressors.map_or(&[][..], |rs| rs[i].as_slice());
            let (m, s) = f.predict(r);
            mu.push(m);
            sd.push(s);
            f.push(v, r);
        }
        (mu, sd)
    }
}

/// Incremental forecaster holding the filtered history of one series.
#[derive(Debug, Clone)]
pub struct ArfimaFilter<'m> {
    model: &'m ArfimaModel,
    coeffs: Vec<f64>,
    /// Regression-adjusted values.
    xt: Vec<f64>,
    /// Fractionally differenced values.
    w: Vec<f64>,
    /// Innovations.
    e: Vec<f64>,
}

impl ArfimaFilter<'_> {
    pub fn len(&self) -> usize {
        self.xt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xt.is_empty()
    }

    /// Conditional mean and sd of the next value. With no history this is
    /// the law of the first value under zero pre-sample, N(r' beta, sigma^2).
    pub fn predict(&self, regressors_now: &[f64]) -> (f64, f64) {
        let m = self.model;
        let n = self.xt.len();
        let l = self.coeffs.len() - 1;
        let mut pred = 0.0;
        for k in 1..=n.min(l) {
            pred -= self.coeffs[k] * self.xt[n - k];
        }
        for (j, phi) in m.ar.iter().enumerate() {
            if n > j {
                pred += phi * self.w[n - j - 1];
            }
        }
        for (j, th) in m.ma.iter().enumerate() {
            if n > j {
                pred += th * self.e[n - j - 1];
            }
        }
        (pred + m.regression_mean(regressors_now), m.sigma())
    }

    pub fn push(&mut self, x: f64, regressors: &[f64]) {
        let m = self.model;
        let xt = x - m.regression_mean(regressors);
        self.xt.push(xt);
        let n = self.xt.len();
        let l = self.coeffs.len() - 1;
        let mut w = 0.0;
        for k in 0..n.min(l + 1) {
            w += self.coeffs[k] * self.xt[n - 1 - k];
        }
        let i = n - 1;
        let mut u = w;
        for (j, phi) in m.ar.iter().enumerate() {
            if i > j {
                u -= phi * self.w[i - j - 1];
            }
        }
        for (j, th) in m.ma.iter().enumerate() {
            if i > j {
                u -= th * self.e[i - j - 1];
            }
        }
        self.w.push(w);
        self.e.push(u);
    }

    /// Innovation of the most recent value.
    pub fn last_innovation(&self) -> Option<f64> {
        self.e.last().copied()
    }
}

/// Simulate the model with zero pre-sample and the given innovations.
pub fn simulate_with_innovations(model: &ArfimaModel, innovations: &[f64]) -> Vec<f64> {
    let n = innovations.len();
    let coeffs = frac_diff_coeffs(model.d, model.truncation);
    let l = coeffs.len() - 1;
    let mut w = vec![0.0; n];
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut u = innovations[i];
        for (j, th) in model.ma.iter().enumerate() {
            if i > j {
                u += th * innovations[i - j - 1];
            }
        }
        let mut wi = u;
        for (j, phi) in model.ar.iter().enumerate() {
            if i > j {
                wi += phi * w[i - j - 1];
            }
        }
        w[i] = wi;
        let mut xi = wi;
        for k in 1..=i.min(l) {
            xi -= coeffs[k] * x[i - k];
        }
        x[i] = xi;
    }
    x
}
