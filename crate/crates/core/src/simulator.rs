//! Scenario-driven generator of event days with known ground truth.
//!
//! Each duration is produced in three steps: a latent p_i from an ARFIMA
//! process (with optional |BPI| regression), p^T_i = tau_mean + tau_sd p_i
//! from a quadratic intraday trend, and T_i = H^{-1}(Phi(p^T_i) | T_{i-1})
//! for a conditional law H of the log-duration. Durations are rounded up to
//! whole milliseconds.

use crate::arfima::{ArfimaModel, DEFAULT_TRUNCATION};
use crate::data::{DaySeries, Session, SESSION_CLOSE_MS, SESSION_OPEN_MS};
use crate::error::{HsdmError, Result};
use crate::model::{bpi_rows, LogDurationLaw};
use crate::normal;
use crate::rng::{derive_seed, open_unit, rng_from};
use crate::trend::TrendParams;
use serde::{Deserialize, Serialize};
use std::io::Write;

fn default_open() -> i64 {
    SESSION_OPEN_MS
}

fn default_close() -> i64 {
    SESSION_CLOSE_MS
}

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

fn default_initial() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArfimaTruth {
    pub d: f64,
    #[serde(default)]
    pub ar: Vec<f64>,
    /// Coefficients of 1 + sum theta_j B^j.
    #[serde(default)]
    pub ma: Vec<f64>,
    pub sigma2: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendTruth {
    /// (a, b, c, d, e, f) in normalized day time.
    pub eta: [f64; 6],
    /// Added to eta once per day index, to make trends drift across days.
    #[serde(default)]
    pub day_shift: [f64; 6],
}

/// Conditional law H of T_i given T_{i-1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LawSpec {
    /// T_i = p^T_i.
    Identity,
    /// Two normal components on the log scale (lognormal on durations).
    /// Weight of the first component is logistic(w0 + w1 (T_{i-1} - center));
    /// component k has mean loc[k] + slope[k] (T_{i-1} - center) and sd sd[k].
    Mixture {
        w0: f64,
        w1: f64,
        center: f64,
        loc: [f64; 2],
        slope: [f64; 2],
        sd: [f64; 2],
    },
}

/// |BPI| regression on the latent series; BPI itself follows an AR(1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpiSpec {
    pub phi: f64,
    pub sd: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub days: usize,
    pub events_per_day: usize,
    #[serde(default = "default_open")]
    pub day_start_ms: i64,
    #[serde(default = "default_close")]
    pub day_end_ms: i64,
    /// T_0 that conditions the first duration of every day.
    #[serde(default = "default_initial")]
    pub initial_log_duration: f64,
    pub arfima: ArfimaTruth,
    pub trend: TrendTruth,
    pub law: LawSpec,
    #[serde(default)]
    pub bpi: Option<BpiSpec>,
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| HsdmError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HsdmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.days == 0 || self.events_per_day == 0 {
            return Err(HsdmError::Config("days and events_per_day must be positive".into()));
        }
        if self.day_end_ms <= self.day_start_ms || self.day_start_ms < 0 {
            return Err(HsdmError::Config("day span must be increasing and nonnegative".into()));
        }
        if !self.initial_log_duration.is_finite() {
            return Err(HsdmError::Config("initial_log_duration must be finite".into()));
        }
        self.arfima_model().validate().map_err(|e| HsdmError::Config(e.to_string()))?;
        if !(self.arfima.d > -0.5 && self.arfima.d < 0.5) {
            return Err(HsdmError::Config("d must lie in (-0.5, 0.5)".into()));
        }
        for k in 0..self.days {
            let t = self.trend_for_day(k);
            if t.eta().iter().any(|v| !v.is_finite()) || t.min_var_on(0.0, 1.0) <= 0.0 {
                return Err(HsdmError::Config(format!(
                    "trend variance must be positive over the day (day {k})"
                )));
            }
        }
        if let LawSpec::Mixture { w0, w1, center, loc, slope, sd } = &self.law {
            let finite = [*w0, *w1, *center].iter().chain(loc).chain(slope).all(|v| v.is_finite());
            if !finite || sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(HsdmError::Config("mixture parameters must be finite with positive sd".into()));
            }
        }
        if let Some(b) = &self.bpi {
            if !(b.phi.abs() < 1.0) || !(b.sd > 0.0) || ![b.b0, b.b1, b.b2].iter().all(|v| v.is_finite()) {
                return Err(HsdmError::Config("BPI needs |phi| < 1, sd > 0 and finite coefficients".into()));
            }
        }
        Ok(())
    }

    /// The latent ARFIMA, with the |BPI| regression when configured.
    pub fn arfima_model(&self) -> ArfimaModel {
        let a = &self.arfima;
        let mut m = ArfimaModel::with_params(a.d, a.ar.clone(), a.ma.clone(), a.sigma2);
        m.truncation = a.truncation;
        if let Some(b) = &self.bpi {
            m.intercept = Some(b.b0);
            m.beta = vec![b.b1, b.b2];
        }
        m
    }

    pub fn trend_for_day(&self, day: usize) -> TrendParams {
        let mut eta = self.trend.eta;
        for (e, s) in eta.iter_mut().zip(&self.trend.day_shift) {
            *e += day as f64 * s;
        }
        TrendParams::from_eta(eta, self.day_start_ms, self.day_end_ms)
    }

    pub fn day_label(day: usize) -> String {
        format!("day-{:03}", day + 1)
    }

    pub fn day_seed(&self, day: usize) -> u64 {
        derive_seed(self.seed, day as u64)
    }

    /// Conditional law of T_i given T_{i-1}.
    pub fn law_given(&self, t_prev: f64) -> TrueLaw {
        match &self.law {
            LawSpec::Identity => TrueLaw { weight: 1.0, loc: [0.0, 0.0], sd: [1.0, 1.0] },
            LawSpec::Mixture { w0, w1, center, loc, slope, sd } => {
                let x = t_prev - center;
                TrueLaw {
                    weight: 1.0 / (1.0 + (-(w0 + w1 * x)).exp()),
                    loc: [loc[0] + slope[0] * x, loc[1] + slope[1] * x],
                    sd: *sd,
                }
            }
        }
    }
}

/// Two-component normal mixture on the log-duration scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueLaw {
    pub weight: f64,
    pub loc: [f64; 2],
    pub sd: [f64; 2],
}

impl TrueLaw {
    fn parts(&self) -> [(f64, f64, f64); 2] {
        [
            (self.weight, self.loc[0], self.sd[0]),
            (1.0 - self.weight, self.loc[1], self.sd[1]),
        ]
    }

    /// Normal score Phi^{-1}(F(t)) through the smaller tail.
    pub fn normal_score(&self, t: f64) -> f64 {
        let c = self.cdf(t);
        if c <= 0.5 {
            normal::quantile(c)
        } else {
            -normal::quantile(self.sf(t))
        }
    }

    /// Inverse CDF; probabilities above one half are matched in the upper tail.
    pub fn quantile(&self, p: f64) -> f64 {
        let upper = p > 0.5;
        let target = if upper { 1.0 - p } else { p };
        let g = |t: f64| if upper { target - self.sf(t) } else { self.cdf(t) - target };
        let mut lo = self.loc[0].min(self.loc[1]) - 40.0 * self.sd[0].max(self.sd[1]);
        let mut hi = self.loc[0].max(self.loc[1]) + 40.0 * self.sd[0].max(self.sd[1]);
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let v = g(t);
            if v == 0.0 {
                return t;
            }
            if v < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            // g is increasing with slope equal to the density in both branches.
            let step = v / self.ln_density(t).exp();
            if step.abs() < 1e-15 * t.abs().max(1.0) {
                return t;
            }
            let newton = t - step;
            t = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-14 * t.abs().max(1.0) {
                break;
            }
        }
        t
    }
}

impl LogDurationLaw for TrueLaw {
    fn cdf(&self, t: f64) -> f64 {
        self.parts().iter().map(|(w, m, s)| w * normal::cdf((t - m) / s)).sum()
    }

    fn sf(&self, t: f64) -> f64 {
        self.parts().iter().map(|(w, m, s)| w * normal::sf((t - m) / s)).sum()
    }

    fn ln_density(&self, t: f64) -> f64 {
        self.parts()
            .iter()
            .map(|(w, m, s)| w * normal::pdf((t - m) / s) / s)
            .sum::<f64>()
            .ln()
    }
}

/// Latent traces of one simulated day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayTruth {
    pub date_label: String,
    pub trend: TrendParams,
    pub initial_log_duration: f64,
    /// |BPI| before the anchor; second lag of the first duration.
    pub carry_abs_bpi: f64,
    pub time_prev_ms: Vec<i64>,
    /// Continuous log-durations before rounding.
    pub log_durations: Vec<f64>,
    pub p: Vec<f64>,
    pub p_t: Vec<f64>,
    pub innovations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDay {
    pub day: DaySeries,
    pub truth: DayTruth,
}

/// Simulate every day of the scenario. Days are independent and seeded from
/// the root seed and their index.
pub fn simulate(spec: &ScenarioSpec) -> Result<Vec<SimulatedDay>> {
    spec.validate()?;
    (0..spec.days).map(|k| simulate_day(spec, k)).collect()
}

pub fn simulate_day(spec: &ScenarioSpec, day: usize) -> Result<SimulatedDay> {
    let n = spec.events_per_day;
    let mut rng = rng_from(spec.day_seed(day));
    let model = spec.arfima_model();
    let trend = spec.trend_for_day(day);
    // BPI points: one before the anchor, the anchor, then one per trade.
    let bpi: Vec<f64> = match &spec.bpi {
        Some(b) => {
            let mut v = Vec::with_capacity(n + 2);
            let mut x = b.sd / (1.0 - b.phi * b.phi).sqrt() * normal::quantile(open_unit(&mut rng));
            for _ in 0..n + 2 {
                v.push(x);
                x = b.phi * x + b.sd * normal::quantile(open_unit(&mut rng));
            }
            v
        }
        None => vec![0.0; n + 2],
    };
    let abs_points: Vec<f64> = bpi[1..].iter().map(|b| b.abs()).collect();
    let lags = if spec.bpi.is_some() { 2 } else { 0 };
    let rows = bpi_rows(&abs_points, lags, bpi[0].abs());
    let mut filter = model.filter();
    let sigma = model.sigma();
    let mut clock = spec.day_start_ms;
    let mut t_prev = spec.initial_log_duration;
    let mut truth = DayTruth {
        date_label: ScenarioSpec::day_label(day),
        trend,
        initial_log_duration: t_prev,
        carry_abs_bpi: bpi[0].abs(),
        time_prev_ms: Vec::with_capacity(n),
        log_durations: Vec::with_capacity(n),
        p: Vec::with_capacity(n),
        p_t: Vec::with_capacity(n),
        innovations: Vec::with_capacity(n),
    };
    let mut events = Vec::with_capacity(n + 1);
    events.push((clock, bpi[1]));
    for i in 0..n {
        let (mu, _) = filter.predict(&rows[i]);
        let e = sigma * normal::quantile(open_unit(&mut rng));
        let p = mu + e;
        filter.push(p, &rows[i]);
        let s = trend.s(clock);
        let p_t = trend.mean_s(s) + trend.sd_s(s) * p;
        let law = spec.law_given(t_prev);
        let u = normal::cdf(p_t);
        let t = if matches!(spec.law, LawSpec::Identity) {
            p_t
        } else if u > 0.5 {
            law.quantile(1.0 - normal::sf(p_t))
        } else {
            law.quantile(u)
        };
        truth.time_prev_ms.push(clock);
        truth.log_durations.push(t);
        truth.p.push(p);
        truth.p_t.push(p_t);
        truth.innovations.push(e);
        let x = t.exp().ceil().max(1.0);
        if !(x < 1e12) {
            return Err(HsdmError::Numerical(format!("duration overflow at event {i} of day {day}")));
        }
        clock += x as i64;
        events.push((clock, bpi[i + 2]));
        t_prev = t;
    }
    if clock >= crate::data::MS_PER_DAY {
        return Err(HsdmError::Config(format!(
            "day {day} runs past midnight; reduce events_per_day or durations"
        )));
    }
    if clock > spec.day_end_ms {
        log::warn!("day {day} ends at {clock} ms, after the configured day end");
    }
    let session = Session { open_ms: spec.day_start_ms, close_ms: spec.day_end_ms };
    let series = DaySeries::from_events(&truth.date_label, &events, session)?;
    Ok(SimulatedDay { day: series, truth })
}

/// Exact probability integral transforms under the true law, recomputed from
/// the continuous log-durations: Phi of the standardized ARFIMA innovation of
/// the detrended normal score.
pub fn oracle_residuals(spec: &ScenarioSpec, series: &DaySeries, truth: &DayTruth) -> Result<Vec<f64>> {
    let n = truth.log_durations.len();
    if series.len() != n {
        return Err(HsdmError::invalid("truth and series lengths differ"));
    }
    let model = spec.arfima_model();
    let abs_points = series.bpi_with_anchor().iter().map(|b| b.abs()).collect::<Vec<_>>();
    let lags = if spec.bpi.is_some() { 2 } else { 0 };
    let rows = bpi_rows(&abs_points, lags, truth.carry_abs_bpi);
    let mut filter = model.filter();
    let mut t_prev = truth.initial_log_duration;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = truth.log_durations[i];
        let p_t = match spec.law {
            LawSpec::Identity => t,
            _ => spec.law_given(t_prev).normal_score(t),
        };
        let s = truth.trend.s(truth.time_prev_ms[i]);
        let p = (p_t - truth.trend.mean_s(s)) / truth.trend.sd_s(s);
        let (mu, sd) = filter.predict(&rows[i]);
        filter.push(p, &rows[i]);
        out.push(normal::cdf((p - mu) / sd));
        t_prev = t;
    }
    Ok(out)
}

/// Write the latent traces of several days as CSV.
pub fn write_truth_csv<W: Write>(truths: &[DayTruth], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["date", "index", "time_prev_ms", "log_duration", "p", "p_t", "innovation"])?;
    for tr in truths {
        for i in 0..tr.log_durations.len() {
            w.write_record([
                tr.date_label.clone(),
                i.to_string(),
                tr.time_prev_ms[i].to_string(),
                tr.log_durations[i].to_string(),
                tr.p[i].to_string(),
                tr.p_t[i].to_string(),
                tr.innovations[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A bimodal, self-exciting scenario with long memory and a U-shaped
/// intraday activity pattern.
pub fn bimodal_scenario(seed: u64, days: usize, events_per_day: usize) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        days,
        events_per_day,
        day_start_ms: SESSION_OPEN_MS,
        day_end_ms: SESSION_CLOSE_MS,
        initial_log_duration: 6.0,
        arfima: ArfimaTruth { d: 0.1, ar: vec![], ma: vec![-0.2], sigma2: 0.9, truncation: DEFAULT_TRUNCATION },
        trend: TrendTruth { eta: [-1.6, 1.6, -0.3, 0.4, -0.4, 0.8], day_shift: [0.0; 6] },
        law: LawSpec::Mixture {
            w0: -1.0,
            w1: -0.6,
            center: 6.0,
            loc: [4.0, 7.5],
            slope: [0.15, 0.15],
            sd: [0.9, 0.8],
        },
        bpi: None,
    }
}
