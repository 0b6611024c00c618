//! The composed model: conditional kernel density, intraday trend and
//! ARFIMA (optionally with |BPI| regressors), fitted on one day and used to
//! predict the next.

use crate::arfima::{self, ArfimaConfig, ArfimaModel, Regressors, DEFAULT_TRUNCATION};
use crate::error::{HsdmError, Result};
use crate::kde::{guard, CondDensityModel, ConditionalLaw};
use crate::normal;
use crate::prediction::{PredictionRecord, PredictionRun};
use crate::rng::{open_unit, rng_from};
use crate::smoothing::SmoothedDay;
use crate::trend::{
    self, normalized_time, JointRefit, OnlineTrendState, PmState, PredictorFit, SeriesPredictor, TrendParams,
    TrendUpdate,
};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

/// Fewest training durations accepted by [`HsdmModel::fit`].
pub const MIN_TRAIN_EVENTS: usize = 500;
/// Penalty weight of the online trend update.
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Largest probability treated as strictly below one by [`hazard`].
const HAZARD_TAIL: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsdmOptions {
    pub use_trend: bool,
    pub use_arfima: bool,
    pub p_max: usize,
    pub q_max: usize,
    /// Number of |BPI| lags used as ARFIMA regressors (0, 1 or 2).
    pub bpi_lags: usize,
    pub truncation: usize,
    /// Alternate trend and ARFIMA fits on the joint likelihood instead of
    /// stopping after the quasi-likelihood trend.
    pub joint_refit: bool,
}

impl Default for HsdmOptions {
    fn default() -> Self {
        Self {
            use_trend: true,
            use_arfima: true,
            p_max: 3,
            q_max: 3,
            bpi_lags: 0,
            truncation: DEFAULT_TRUNCATION,
            joint_refit: false,
        }
    }
}

impl HsdmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.bpi_lags > 2 {
            return Err(HsdmError::invalid("at most two |BPI| lags are supported"));
        }
        if self.bpi_lags > 0 && !self.use_arfima {
            return Err(HsdmError::invalid("|BPI| regressors need the ARFIMA stage"));
        }
        if self.p_max > 10 || self.q_max > 10 {
            return Err(HsdmError::invalid("order bounds must not exceed 10"));
        }
        if self.truncation == 0 {
            return Err(HsdmError::invalid("truncation must be positive"));
        }
        Ok(())
    }
}

/// Everything the predictive law of one event depends on besides the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveContext {
    pub t_prev: f64,
    pub tau_mean: f64,
    pub tau_sd: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl PredictiveContext {
    /// No trend and a standard normal latent law.
    pub fn trivial(t_prev: f64) -> Self {
        Self { t_prev, tau_mean: 0.0, tau_sd: 1.0, mu: 0.0, sigma: 1.0 }
    }
}

/// A law of the log-duration T with CDF and log-density.
pub trait LogDurationLaw {
    fn cdf(&self, t: f64) -> f64;
    fn sf(&self, t: f64) -> f64 {
        1.0 - self.cdf(t)
    }
    fn ln_density(&self, t: f64) -> f64;
}

/// Hazard of the duration x = exp(T) at x > 0: density over survival on the
/// duration scale.
pub fn hazard<L: LogDurationLaw + ?Sized>(law: &L, x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(HsdmError::invalid(format!("duration {x} must be positive")));
    }
    let t = x.ln();
    if law.cdf(t) >= HAZARD_TAIL {
        return Err(HsdmError::Numerical(format!(
            "survival at duration {x} is below the tail guard"
        )));
    }
    Ok((law.ln_density(t) - t - law.sf(t).ln()).exp())
}

/// Predictive law of one event: the conditional kernel law composed with the
/// trend and the ARFIMA moments.
pub struct PredictiveLaw<'a> {
    pub base: ConditionalLaw<'a>,
    pub ctx: PredictiveContext,
}

impl PredictiveLaw<'_> {
    /// (p^T, standardized innovation, clipped).
    fn scores(&self, t: f64) -> (f64, f64, bool) {
        let (pt, clipped) = self.base.normal_score(t);
        let p_hat = (pt - self.ctx.tau_mean) / self.ctx.tau_sd;
        (pt, (p_hat - self.ctx.mu) / self.ctx.sigma, clipped)
    }

    /// Final generalized residual at t and whether the guard was hit.
    pub fn cdf_checked(&self, t: f64) -> (f64, bool) {
        let (_, e, clipped) = self.scores(t);
        (normal::cdf(e), clipped)
    }

    fn ln_density_from(&self, t: f64, pt: f64, e: f64) -> f64 {
        self.base.ln_density(t) + normal::ln_pdf(e) - self.ctx.sigma.ln() - self.ctx.tau_sd.ln() - normal::ln_pdf(pt)
    }
}

impl LogDurationLaw for PredictiveLaw<'_> {
    fn cdf(&self, t: f64) -> f64 {
        self.cdf_checked(t).0
    }

    fn sf(&self, t: f64) -> f64 {
        normal::sf(self.scores(t).1)
    }

    fn ln_density(&self, t: f64) -> f64 {
        let (pt, e, _) = self.scores(t);
        self.ln_density_from(t, pt, e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsdmModel {
    pub options: HsdmOptions,
    pub cond_density: CondDensityModel,
    /// Trend fitted on the training day, in normalized day time.
    pub trend: TrendParams,
    pub arfima: Option<ArfimaModel>,
    pub smoothing_seed: u64,
    pub train_label: String,
    pub n_train: usize,
    /// Last training log-duration; conditions the first test event.
    pub last_log_duration: f64,
    /// Last training |BPI|; second lag of the first test event.
    pub last_abs_bpi: f64,
    /// Rounds of the joint refit, if one was run.
    pub refit_rounds: Option<Vec<(f64, f64, f64)>>,
}

/// Regressor rows for every duration of a day: row i holds |BPI| at the
/// start of duration i and, for two lags, at the trade before that.
pub fn bpi_rows(abs_bpi_points: &[f64], lags: usize, carry: f64) -> Vec<Vec<f64>> {
    let n = abs_bpi_points.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(lags);
            if lags >= 1 {
                row.push(abs_bpi_points[i]);
            }
            if lags >= 2 {
                row.push(if i == 0 { carry } else { abs_bpi_points[i - 1] });
            }
            row
        })
        .collect()
}

fn columns(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

struct ArfimaPredictor<'a> {
    options: &'a HsdmOptions,
    columns: &'a [Vec<f64>],
    rows: &'a [Vec<f64>],
    config: ArfimaConfig,
}

impl ArfimaPredictor<'_> {
    fn fit(&self, x: &[f64]) -> Result<ArfimaModel> {
        let regs = Regressors { columns: self.columns, intercept: !self.columns.is_empty() };
        arfima::select_order(x, self.options.p_max, self.options.q_max, regs, &self.config)
    }
}

impl SeriesPredictor for ArfimaPredictor<'_> {
    type Model = ArfimaModel;

    fn fit_predict(&mut self, detrended: &[f64]) -> Result<PredictorFit<ArfimaModel>> {
        let model = self.fit(detrended)?;
        let rows = (!self.columns.is_empty()).then_some(self.rows);
        let (mu, sigma) = model.in_sample_moments(detrended, rows);
        let mut params = vec![model.p as f64, model.q as f64, model.d, model.sigma2];
        params.extend(&model.ar);
        params.extend(&model.ma);
        params.extend(&model.beta);
        Ok(PredictorFit { model, mu, sigma, params })
    }
}

impl HsdmModel {
    /// Fit on a smoothed training day. The first duration has no predecessor
    /// and only conditions the second.
    pub fn fit(train: &SmoothedDay, options: &HsdmOptions) -> Result<Self> {
        options.validate()?;
        let n = train.len();
        if n < MIN_TRAIN_EVENTS {
            return Err(HsdmError::precondition(format!(
                "training day has {n} durations; at least {MIN_TRAIN_EVENTS} are required"
            )));
        }
        let t = &train.log_durations;
        let cond_density = CondDensityModel::from_log_durations(t)?;
        // Transformed generalized residuals p^T_i for i = 1..n-1.
        let mut p_t = Vec::with_capacity(n - 1);
        let mut clipped = 0usize;
        for i in 1..n {
            let (score, c) = cond_density.law(t[i - 1]).normal_score(t[i]);
            clipped += usize::from(c);
            p_t.push(score);
        }
        if clipped > 0 {
            log::warn!("{clipped} training residuals hit the probability guard");
        }
        let s: Vec<f64> = train.prev_times_ms[1..]
            .iter()
            .map(|&tm| normalized_time(tm, train.day_start_ms, train.day_end_ms))
            .collect();
        let all_rows = bpi_rows(&train.abs_bpi_points, options.bpi_lags, 0.0);
        let rows = &all_rows[1..];
        let cols = columns(rows, options.bpi_lags);
        let mut predictor = ArfimaPredictor {
            options,
            columns: &cols,
            rows,
            config: ArfimaConfig { truncation: options.truncation, ..ArfimaConfig::default() },
        };
        let (start, end) = (train.day_start_ms, train.day_end_ms);
        let mut refit_rounds = None;
        let (trend, arfima) = match (options.use_trend, options.use_arfima) {
            (true, true) if options.joint_refit => {
                let JointRefit { trend, model, rounds, .. } =
                    trend::joint_refit(&p_t, &s, &mut predictor, start, end, 1e-3, 10)?;
                refit_rounds = Some(rounds);
                (trend, Some(model))
            }
            (true, use_arfima) => {
                let fit = trend::quasi_ml_fit_masked(&p_t, &s, [true; 6], start, end)?;
                let model = if use_arfima {
                    Some(predictor.fit(&trend::detrend_s(&p_t, &s, &fit.params)?)?)
                } else {
                    None
                };
                (fit.params, model)
            }
            (false, true) => (TrendParams::identity(start, end), Some(predictor.fit(&p_t)?)),
            (false, false) => (TrendParams::identity(start, end), None),
        };
        Ok(Self {
            options: options.clone(),
            cond_density,
            trend,
            arfima,
            smoothing_seed: train.smoothing.seed,
            train_label: train.date_label.clone(),
            n_train: n,
            last_log_duration: t[n - 1],
            last_abs_bpi: *train.abs_bpi_points.last().expect("nonempty"),
            refit_rounds,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.options.validate()?;
        self.cond_density.validate()?;
        if self.options.use_trend {
            self.trend.validate()?;
        }
        match (&self.arfima, self.options.use_arfima) {
            (Some(m), true) => {
                m.validate()?;
                let expected = self.options.bpi_lags;
                if m.beta.len() != expected {
                    return Err(HsdmError::invalid(format!(
                        "ARFIMA has {} regressors but {expected} |BPI| lags are configured",
                        m.beta.len()
                    )));
                }
            }
            (None, false) => {}
            _ => return Err(HsdmError::invalid("ARFIMA component does not match the options")),
        }
        if !self.last_log_duration.is_finite() || !self.last_abs_bpi.is_finite() {
            return Err(HsdmError::invalid("carried training values must be finite"));
        }
        Ok(())
    }

    /// Predictive law of the next log-duration in the given context.
    pub fn predictive_law(&self, ctx: PredictiveContext) -> PredictiveLaw<'_> {
        PredictiveLaw { base: self.cond_density.law(ctx.t_prev), ctx }
    }

    /// Predictive CDF at t.
    pub fn predictive_cdf(&self, t: f64, ctx: PredictiveContext) -> f64 {
        self.predictive_law(ctx).cdf(t)
    }

    /// Predictive density at t on the log-duration scale.
    pub fn predictive_density(&self, t: f64, ctx: PredictiveContext) -> f64 {
        self.predictive_law(ctx).ln_density(t).exp()
    }

    /// Hazard of the duration x under the predictive law.
    pub fn hazard(&self, x: f64, ctx: PredictiveContext) -> Result<f64> {
        hazard(&self.predictive_law(ctx), x)
    }

    fn trend_for_day(&self, start: i64, end: i64) -> TrendParams {
        if self.options.use_trend {
            TrendParams::from_eta(self.trend.eta(), start, end)
        } else {
            TrendParams::identity(start, end)
        }
    }

    /// Sequential prediction of a test day. The trend is carried over from
    /// training and updated after each event; the ARFIMA history starts empty.
    pub fn predict_day(&self, test: &SmoothedDay, update: TrendUpdate, lambda: f64) -> Result<PredictionRun> {
        self.predict_day_profiled(test, update, lambda).map(|(run, _)| run)
    }

    /// [`Self::predict_day`] that also reports the time spent in trend updates.
    pub fn predict_day_profiled(
        &self,
        test: &SmoothedDay,
        update: TrendUpdate,
        lambda: f64,
    ) -> Result<(PredictionRun, Duration)> {
        if test.is_empty() {
            return Err(HsdmError::precondition("test day has no durations"));
        }
        let prior = self.trend_for_day(test.day_start_ms, test.day_end_ms);
        let update = if self.options.use_trend { update } else { TrendUpdate::Frozen };
        let mut lse = OnlineTrendState::new(prior, lambda)?;
        let mut pm = PmState::new(prior, lambda)?;
        let mut current = prior;
        let rows = bpi_rows(&test.abs_bpi_points, self.options.bpi_lags, self.last_abs_bpi);
        let mut filter = self.arfima.as_ref().map(|m| m.filter());
        let mut records = Vec::with_capacity(test.len());
        let mut t_prev = self.last_log_duration;
        let mut update_time = Duration::ZERO;
        for i in 0..test.len() {
            let t = test.log_durations[i];
            let s = current.s(test.prev_times_ms[i]);
            let (mu, sigma) = filter.as_ref().map_or((0.0, 1.0), |f| f.predict(&rows[i]));
            let ctx = PredictiveContext { t_prev, tau_mean: current.mean_s(s), tau_sd: current.sd_s(s), mu, sigma };
            let law = self.predictive_law(ctx);
            let (pt, e, clipped) = law.scores(t);
            let log_density = law.ln_density_from(t, pt, e);
            let raw = normal::cdf(e);
            let residual = guard(raw);
            if !log_density.is_finite() {
                return Err(HsdmError::Numerical(format!("log-density is not finite at event {i}")));
            }
            records.push(PredictionRecord {
                index: i,
                time_prev_ms: test.prev_times_ms[i],
                log_duration: t,
                residual,
                log_density,
                mu: Some(mu),
                sigma: Some(sigma),
                tau_mean: Some(ctx.tau_mean),
                tau_sd: Some(ctx.tau_sd),
                psi: None,
                clipped: clipped || residual != raw,
            });
            if let Some(f) = filter.as_mut() {
                f.push((pt - ctx.tau_mean) / ctx.tau_sd, &rows[i]);
            }
            let clock = Instant::now();
            current = match update {
                TrendUpdate::Lse => lse.lse_update(s, pt),
                TrendUpdate::Pm => pm.pm_update(s, pt, mu, sigma),
                TrendUpdate::Frozen => current,
            };
            update_time += clock.elapsed();
            t_prev = t;
        }
        Ok((PredictionRun::new("HSDM", &test.date_label, records), update_time))
    }

    /// Draw a day of continuous log-durations from the fitted model with the
    /// trend held at its training values. Clock times accumulate from the
    /// day start; |BPI| regressors are taken as zero.
    pub fn sample_day(&self, n: usize, day_start_ms: i64, day_end_ms: i64, seed: u64) -> Result<SmoothedDay> {
        let trend = self.trend_for_day(day_start_ms, day_end_ms);
        let zero = vec![0.0; self.options.bpi_lags];
        let mut filter = self.arfima.as_ref().map(|m| m.filter());
        let mut rng = rng_from(seed);
        let mut t_prev = self.last_log_duration;
        let mut clock = day_start_ms as f64;
        let mut prev_times_ms = Vec::with_capacity(n);
        let mut log_durations = Vec::with_capacity(n);
        for _ in 0..n {
            let start = clock.floor() as i64;
            let s = trend.s(start);
            let (mu, sigma) = filter.as_ref().map_or((0.0, 1.0), |f| f.predict(&zero));
            let z = normal::quantile(open_unit(&mut rng));
            let p = mu + sigma * z;
            if let Some(f) = filter.as_mut() {
                f.push(p, &zero);
            }
            let pt = trend.mean_s(s) + trend.sd_s(s) * p;
            let t = self.cond_density.inverse_cdf(guard(normal::cdf(pt)), t_prev)?;
            prev_times_ms.push(start);
            log_durations.push(t);
            clock += t.exp();
            t_prev = t;
        }
        let durations: Vec<f64> = log_durations.iter().map(|t| t.exp()).collect();
        Ok(SmoothedDay {
            date_label: format!("sample-{seed}"),
            day_start_ms,
            day_end_ms: day_end_ms.max(clock.ceil() as i64),
            prev_times_ms,
            log_durations,
            abs_bpi_points: vec![0.0; n + 1],
            smoothing: crate::smoothing::SmoothedSeries {
                x: durations.iter().map(|z| z.ceil().max(1.0) as u64).collect(),
                u: durations.iter().map(|z| z.ceil().max(1.0) - z).collect(),
                y: durations.iter().map(|z| z.ln_1p()).collect(),
                seed,
            },
        })
    }
}
