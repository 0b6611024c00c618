//! ACD(1,1) and FIACD benchmarks on spline-adjusted durations, with either an
//! exponential or a log-scale kernel residual law.

use crate::arfima::{frac_diff_coeffs, truncated_convolution, DEFAULT_TRUNCATION};
use crate::error::{HsdmError, Result};
use crate::kde::{guard, UnivariateKde};
use crate::optim::{hessian, NelderMead};
use crate::prediction::{PredictionRecord, PredictionRun};
use crate::smoothing::SmoothedDay;
use crate::spline::IntradaySpline;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Smallest training sample accepted by the QML fit.
pub const MIN_QML_OBS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcdVariant {
    Acd,
    Fiacd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchmarkKind {
    #[serde(rename = "eACD")]
    EAcd,
    #[serde(rename = "sACD")]
    SAcd,
    #[serde(rename = "eFIACD")]
    EFiacd,
    #[serde(rename = "sFIACD")]
    SFiacd,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 4] = [Self::EAcd, Self::SAcd, Self::EFiacd, Self::SFiacd];

    pub fn variant(self) -> AcdVariant {
        match self {
            Self::EAcd | Self::SAcd => AcdVariant::Acd,
            Self::EFiacd | Self::SFiacd => AcdVariant::Fiacd,
        }
    }

    pub fn semiparametric(self) -> bool {
        matches!(self, Self::SAcd | Self::SFiacd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EAcd => "eACD",
            Self::SAcd => "sACD",
            Self::EFiacd => "eFIACD",
            Self::SFiacd => "sFIACD",
        }
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkKind {
    type Err = HsdmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HsdmError::invalid(format!("unknown benchmark model {s:?}")))
    }
}

/// Recursion parameters. `d` is present for FIACD only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcdParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d: Option<f64>,
}

impl AcdParams {
    pub fn acd(omega: f64, alpha: f64, beta: f64) -> Self {
        Self { omega, alpha, beta, d: None }
    }

    pub fn fiacd(omega: f64, alpha: f64, beta: f64, d: f64) -> Self {
        Self { omega, alpha, beta, d: Some(d) }
    }

    pub fn variant(&self) -> AcdVariant {
        if self.d.is_some() {
            AcdVariant::Fiacd
        } else {
            AcdVariant::Acd
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.omega) && ok(self.alpha) && ok(self.beta)) {
            return Err(HsdmError::invalid("omega, alpha and beta must be positive"));
        }
        if self.alpha + self.beta >= 1.0 {
            return Err(HsdmError::invalid(format!(
                "alpha + beta = {} must be below 1",
                self.alpha + self.beta
            )));
        }
        if let Some(d) = self.d {
            if !(d > 0.0 && d < 1.0) {
                return Err(HsdmError::invalid(format!("d = {d} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// omega / (1 - alpha - beta).
    pub fn stationary_mean(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }
}

/// Psi_1 = psi1, Psi_i = omega + alpha x_{i-1} + beta Psi_{i-1}.
pub fn acd_recursion(params: &AcdParams, x: &[f64], psi1: f64) -> Result<Vec<f64>> {
    params.validate()?;
    Ok(acd_unchecked(params, x, psi1))
}

fn acd_unchecked(params: &AcdParams, x: &[f64], psi1: f64) -> Vec<f64> {
    let mut psi = Vec::with_capacity(x.len());
    let mut prev = psi1;
    for (i, _) in x.iter().enumerate() {
        if i > 0 {
            prev = params.omega + params.alpha * x[i - 1] + params.beta * prev;
        }
        psi.push(prev);
    }
    psi
}

/// Coefficients lambda_0..lambda_L of 1 - beta B - (1 - (alpha + beta) B)(1 - B)^d.
pub fn fiacd_lambda(alpha: f64, beta: f64, d: f64, truncation: usize) -> Vec<f64> {
    let pi = frac_diff_coeffs(d, truncation);
    let mut lambda = vec![0.0; truncation + 1];
    for k in 1..=truncation {
        lambda[k] = -pi[k] + (alpha + beta) * pi[k - 1];
    }
    lambda[1] -= beta;
    lambda
}

/// FIACD conditional means. Psi_1 = psi1; later terms follow
/// Psi_i = omega + beta Psi_{i-1} + sum_{k=1}^{L} lambda_k x_{i-k},
/// with observations before the sample set to psi1.
pub fn fiacd_recursion(params: &AcdParams, x: &[f64], psi1: f64, truncation: usize) -> Result<Vec<f64>> {
    params.validate()?;
    let d = params
        .d
        .ok_or_else(|| HsdmError::invalid("FIACD recursion needs d"))?;
    let psi = fiacd_unchecked(params.omega, params.alpha, params.beta, d, x, psi1, truncation);
    if let Some(i) = psi.iter().position(|v| !(*v > 0.0)) {
        return Err(HsdmError::Numerical(format!("conditional mean is nonpositive at event {i}")));
    }
    Ok(psi)
}

fn fiacd_unchecked(omega: f64, alpha: f64, beta: f64, d: f64, x: &[f64], psi1: f64, truncation: usize) -> Vec<f64> {
    let lambda = fiacd_lambda(alpha, beta, d, truncation);
    let mass: f64 = lambda.iter().sum();
    let centered: Vec<f64> = x.iter().map(|v| v - psi1).collect();
    // lambda_0 = 0, so conv[i] = sum_{k>=1} lambda_k (x_{i-k} - c) with zero pre-sample deviations.
    let conv = truncated_convolution(&lambda, &centered);
    let mut psi = Vec::with_capacity(x.len());
    let mut prev = psi1;
    for i in 0..x.len() {
        if i > 0 {
            prev = omega + beta * prev + mass * psi1 + conv[i];
        }
        psi.push(prev);
    }
    psi
}

/// Exponential quasi log-likelihood sum[-ln Psi - x / Psi]; -inf if any Psi <= 0.
pub fn quasi_loglik(x: &[f64], psi: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&xi, &p) in x.iter().zip(psi) {
        if !(p > 0.0) || !p.is_finite() {
            return f64::NEG_INFINITY;
        }
        total -= p.ln() + xi / p;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmlFit {
    pub params: AcdParams,
    pub psi1: f64,
    pub loglik: f64,
    /// Standard errors of (omega, alpha, beta[, d]) from the observed information.
    pub se: Option<Vec<f64>>,
    pub converged: bool,
}

fn unpack(theta: &[f64], variant: AcdVariant) -> AcdParams {
    let omega = theta[0].exp();
    let (ea, eb) = (theta[1].exp(), theta[2].exp());
    let z = 1.0 + ea + eb;
    let (alpha, beta) = (ea / z, eb / z);
    match variant {
        AcdVariant::Acd => AcdParams::acd(omega, alpha, beta),
        AcdVariant::Fiacd => AcdParams::fiacd(omega, alpha, beta, 1.0 / (1.0 + (-theta[3]).exp())),
    }
}

fn pack(p: &AcdParams) -> Vec<f64> {
    let rest = 1.0 - p.alpha - p.beta;
    let mut theta = vec![p.omega.ln(), (p.alpha / rest).ln(), (p.beta / rest).ln()];
    if let Some(d) = p.d {
        theta.push((d / (1.0 - d)).ln());
    }
    theta
}

fn conditional_means(params: &AcdParams, x: &[f64], psi1: f64, truncation: usize) -> Vec<f64> {
    match params.d {
        None => acd_unchecked(params, x, psi1),
        Some(d) => fiacd_unchecked(params.omega, params.alpha, params.beta, d, x, psi1, truncation),
    }
}

/// Quasi-maximum likelihood fit of the recursion on ratios `x`.
/// Psi_1 and the pre-sample values are the sample mean of `x`.
pub fn qml_fit(x: &[f64], variant: AcdVariant, truncation: usize) -> Result<QmlFit> {
    if x.len() < MIN_QML_OBS {
        return Err(HsdmError::precondition(format!(
            "QML fit needs at least {MIN_QML_OBS} observations, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(HsdmError::invalid("ratios must be positive and finite"));
    }
    let psi1 = x.iter().sum::<f64>() / x.len() as f64;
    let objective = |theta: &[f64]| {
        let p = unpack(theta, variant);
        -quasi_loglik(x, &conditional_means(&p, x, psi1, truncation))
    };
    let starts: Vec<AcdParams> = match variant {
        AcdVariant::Acd => [(0.1, 0.8), (0.05, 0.9), (0.2, 0.5)]
            .iter()
            .map(|&(a, b)| AcdParams::acd(psi1 * (1.0 - a - b), a, b))
            .collect(),
        AcdVariant::Fiacd => [(0.1, 0.3, 0.2), (0.1, 0.6, 0.4), (0.2, 0.1, 0.1)]
            .iter()
            .map(|&(a, b, d)| AcdParams::fiacd(0.05 * psi1, a, b, d))
            .collect(),
    };
    let nm = NelderMead { max_evals: 4000, f_tol: 1e-9, x_tol: 1e-7, restarts: 1 };
    let mut best: Option<crate::optim::Minimum> = None;
    for start in &starts {
        let theta0 = pack(start);
        let step = vec![0.5; theta0.len()];
        let m = nm.minimize(objective, &theta0, &step);
        if best.as_ref().map_or(true, |b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one start");
    if !best.value.is_finite() {
        return Err(HsdmError::NonConvergence("no start gave positive conditional means".into()));
    }
    let params = unpack(&best.x, variant);
    let natural = |v: &[f64]| {
        let p = AcdParams { omega: v[0], alpha: v[1], beta: v[2], d: v.get(3).copied() };
        if p.validate().is_err() {
            return f64::NAN;
        }
        -quasi_loglik(x, &conditional_means(&p, x, psi1, truncation))
    };
    let mut point = vec![params.omega, params.alpha, params.beta];
    point.extend(params.d);
    let se = standard_errors(natural, &point);
    Ok(QmlFit {
        params,
        psi1,
        loglik: -best.value,
        se,
        converged: best.converged,
    })
}

fn standard_errors<F: FnMut(&[f64]) -> f64>(f: F, point: &[f64]) -> Option<Vec<f64>> {
    let h = hessian(f, point, 1e-4);
    let k = point.len();
    let m = nalgebra::DMatrix::from_fn(k, k, |i, j| h[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let inv = m.try_inverse()?;
    (0..k)
        .map(|i| {
            let v = inv[(i, i)];
            (v > 0.0).then(|| v.sqrt())
        })
        .collect()
}

/// Law of the multiplicative error epsilon = x / Psi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualLaw {
    /// Standard exponential.
    Exponential,
    /// Kernel estimate of ln(epsilon), shifted so that E[epsilon] = 1.
    LogKde(UnivariateKde),
}

impl ResidualLaw {
    pub fn cdf(&self, eps: f64) -> f64 {
        match self {
            Self::Exponential => -(-eps).exp_m1(),
            Self::LogKde(k) => k.cdf(eps.ln()),
        }
    }

    /// Log-density of ln(epsilon).
    pub fn ln_density_log(&self, ln_eps: f64) -> f64 {
        match self {
            Self::Exponential => ln_eps - ln_eps.exp(),
            Self::LogKde(k) => k.ln_pdf(ln_eps),
        }
    }

    /// Density of epsilon itself.
    pub fn density(&self, eps: f64) -> f64 {
        if eps <= 0.0 {
            return 0.0;
        }
        (self.ln_density_log(eps.ln()) - eps.ln()).exp()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Exponential => Ok(()),
            Self::LogKde(k) => k.validate(),
        }
    }
}

/// Kernel estimate on ln(x / Psi), rescaled to unit mean on the epsilon scale.
pub fn residual_kde(x: &[f64], psi: &[f64]) -> Result<ResidualLaw> {
    if x.len() != psi.len() {
        return Err(HsdmError::invalid("ratios and conditional means must align"));
    }
    let logs: Vec<f64> = x.iter().zip(psi).map(|(a, b)| (a / b).ln()).collect();
    let kde = UnivariateKde::silverman(&logs)?;
    let shift = -kde.mean_exp().ln();
    Ok(ResidualLaw::LogKde(kde.shifted(shift)))
}

/// A fitted benchmark: spline, recursion and residual law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcdModel {
    pub kind: BenchmarkKind,
    pub params: AcdParams,
    pub psi1: f64,
    pub truncation: usize,
    pub spline: IntradaySpline,
    pub residual: ResidualLaw,
    pub loglik: f64,
    pub se: Option<Vec<f64>>,
    pub n_obs: usize,
    pub smoothing_seed: u64,
    pub train_label: String,
}

impl AcdModel {
    /// Fit to a training day of smoothed durations.
    pub fn fit(train: &SmoothedDay, kind: BenchmarkKind) -> Result<Self> {
        Self::fit_with(train, kind, DEFAULT_TRUNCATION)
    }

    pub fn fit_with(train: &SmoothedDay, kind: BenchmarkKind, truncation: usize) -> Result<Self> {
        let z = train.durations();
        let spline = IntradaySpline::fit(&train.prev_times_ms, &z, train.day_start_ms, train.day_end_ms)?;
        let x = spline.ratios(&train.prev_times_ms, &z);
        let q = qml_fit(&x, kind.variant(), truncation)?;
        let residual = if kind.semiparametric() {
            let psi = conditional_means(&q.params, &x, q.psi1, truncation);
            residual_kde(&x, &psi)?
        } else {
            ResidualLaw::Exponential
        };
        Ok(Self {
            kind,
            params: q.params,
            psi1: q.psi1,
            truncation,
            spline,
            residual,
            loglik: q.loglik,
            se: q.se,
            n_obs: x.len(),
            smoothing_seed: train.smoothing.seed,
            train_label: train.date_label.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.variant() != self.kind.variant() {
            return Err(HsdmError::invalid("parameters do not match the benchmark kind"));
        }
        if self.kind.semiparametric() == matches!(self.residual, ResidualLaw::Exponential) {
            return Err(HsdmError::invalid("residual law does not match the benchmark kind"));
        }
        if !(self.psi1 > 0.0 && self.psi1.is_finite()) {
            return Err(HsdmError::invalid("psi1 must be positive"));
        }
        self.residual.validate()
    }

    /// Conditional means on a series of ratios, restarting at psi1.
    pub fn conditional_means(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.params.variant() {
            AcdVariant::Acd => acd_recursion(&self.params, x, self.psi1),
            AcdVariant::Fiacd => fiacd_recursion(&self.params, x, self.psi1, self.truncation),
        }
    }

    /// Predictive residuals and log-densities of a test day. Densities are on
    /// the log-duration scale so they compare directly with the HSDM.
    pub fn predict_day(&self, test: &SmoothedDay) -> Result<PredictionRun> {
        if test.is_empty() {
            return Err(HsdmError::precondition("test day has no durations"));
        }
        let spline_at: Vec<f64> = test.prev_times_ms.iter().map(|&t| self.spline.at(t)).collect();
        let x: Vec<f64> = test
            .log_durations
            .iter()
            .zip(&spline_at)
            .map(|(t, s)| t.exp() / s)
            .collect();
        let psi = self.conditional_means(&x)?;
        let records = (0..x.len())
            .map(|i| {
                let ln_eps = test.log_durations[i] - spline_at[i].ln() - psi[i].ln();
                let raw = self.residual.cdf(ln_eps.exp());
                let residual = guard(raw);
                PredictionRecord {
                    index: i,
                    time_prev_ms: test.prev_times_ms[i],
                    log_duration: test.log_durations[i],
                    residual,
                    log_density: self.residual.ln_density_log(ln_eps),
                    mu: None,
                    sigma: None,
                    tau_mean: None,
                    tau_sd: None,
                    psi: Some(psi[i]),
                    clipped: residual != raw,
                }
            })
            .collect();
        Ok(PredictionRun::new(self.kind.name(), &test.date_label, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{open_unit, rng_from};

    fn simulate_acd(p: &AcdParams, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        let mut psi = p.stationary_mean();
        let mut x = Vec::with_capacity(n + 500);
        for _ in 0..n + 500 {
            let e = -open_unit(&mut rng).ln();
            let xi = psi * e;
            x.push(xi);
            psi = p.omega + p.alpha * xi + p.beta * psi;
        }
        x.split_off(500)
    }

    #[test]
    fn acd_arithmetic() {
        let p = AcdParams::acd(0.1, 0.1, 0.8);
        let psi = acd_recursion(&p, &[2.0, 1.0], 1.0).unwrap();
        assert!((psi[1] - 1.1).abs() < 1e-15);
        assert!((p.stationary_mean() - 1.0).abs() < 1e-12);
        assert!(acd_recursion(&AcdParams::acd(0.1, 0.3, 0.7), &[1.0], 1.0).is_err());
    }

    #[test]
    fn fiacd_with_vanishing_d_is_acd() {
        let p = AcdParams::acd(0.1, 0.15, 0.7);
        let x = simulate_acd(&p, 3000, 4);
        let a = acd_recursion(&p, &x, 1.0).unwrap();
        let f = fiacd_recursion(&AcdParams::fiacd(0.1, 0.15, 0.7, 1e-12), &x, 1.0, 1000).unwrap();
        for (u, v) in a.iter().zip(&f) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn fiacd_matches_direct_sum() {
        let p = AcdParams::fiacd(0.05, 0.1, 0.4, 0.3);
        let x = simulate_acd(&AcdParams::acd(0.1, 0.1, 0.8), 400, 9);
        let c = 1.3;
        let l = 50;
        let got = fiacd_recursion(&p, &x, c, l).unwrap();
        let lambda = fiacd_lambda(0.1, 0.4, 0.3, l);
        let mut prev = c;
        for i in 1..x.len() {
            let mut s = 0.0;
            for k in 1..=l {
                s += lambda[k] * if i >= k { x[i - k] } else { c };
            }
            prev = 0.05 + 0.4 * prev + s;
            assert!((got[i] - prev).abs() < 1e-10 * prev.abs().max(1.0), "{i}");
        }
    }

    #[test]
    fn fiacd_constant_input_reaches_fixed_point() {
        let p = AcdParams::fiacd(0.05, 0.1, 0.4, 0.3);
        let c = 1.0;
        let x = vec![c; 5000];
        let psi = fiacd_recursion(&p, &x, c, 1000).unwrap();
        let mass: f64 = fiacd_lambda(0.1, 0.4, 0.3, 1000).iter().sum();
        let fixed = (0.05 + mass * c) / (1.0 - 0.4);
        assert!((psi[4999] - fixed).abs() < 1e-10);
    }

    #[test]
    fn qml_recovers_parameters() {
        let truth = AcdParams::acd(0.1, 0.1, 0.8);
        let mut hits = 0;
        for seed in 0..4 {
            let x = simulate_acd(&truth, 20_000, 100 + seed);
            let fit = qml_fit(&x, AcdVariant::Acd, 1000).unwrap();
            let se = fit.se.clone().unwrap();
            let est = [fit.params.omega, fit.params.alpha, fit.params.beta];
            let tru = [0.1, 0.1, 0.8];
            if (0..3).all(|k| (est[k] - tru[k]).abs() < 3.0 * se[k]) {
                hits += 1;
            }
        }
        assert!(hits >= 3);
    }

    #[test]
    fn qml_on_iid_data_has_small_alpha() {
        let mut rng = rng_from(3);
        let x: Vec<f64> = (0..5000).map(|_| -open_unit(&mut rng).ln()).collect();
        let fit = qml_fit(&x, AcdVariant::Acd, 1000).unwrap();
        assert!(fit.params.alpha < 0.03, "{:?}", fit.params);
        assert!(qml_fit(&x[..50], AcdVariant::Acd, 1000).is_err());
    }

    #[test]
    fn log_kde_beats_raw_kde_for_exponential_residuals() {
        let mut rng = rng_from(11);
        let eps: Vec<f64> = (0..2000).map(|_| -open_unit(&mut rng).ln()).collect();
        let law = residual_kde(&eps, &vec![1.0; eps.len()]).unwrap();
        let raw = UnivariateKde::silverman(&eps).unwrap();
        let (a, b, n) = (1e-4, 12.0, 20_000);
        let h = (b - a) / n as f64;
        let mut err_log = 0.0;
        let mut err_raw = 0.0;
        let mut mass = 0.0;
        let mut mean = 0.0;
        for i in 0..n {
            let e = a + (i as f64 + 0.5) * h;
            let truth = (-e).exp();
            err_log += (law.density(e) - truth).abs() * h;
            err_raw += (raw.pdf(e) - truth).abs() * h;
            mass += law.density(e) * h;
            mean += e * law.density(e) * h;
        }
        assert!(err_log < err_raw, "{err_log} {err_raw}");
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        assert!((mean - 1.0).abs() < 5e-3, "{mean}");
        assert_eq!(law.density(-1.0), 0.0);
    }

    #[test]
    fn exponential_median_gives_half() {
        let law = ResidualLaw::Exponential;
        assert!((law.cdf(std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
        // Density on the log scale is the derivative of the CDF in ln(eps).
        for le in [-3.0, -0.5, 0.0, 1.2] {
            let h = 1e-5;
            let num = (law.cdf((le + h as f64).exp()) - law.cdf((le - h as f64).exp())) / (2.0 * h);
            assert!((law.ln_density_log(le).exp() - num).abs() < 1e-8);
        }
    }
}
