//! Smoothing of integer millisecond durations and the probability integral
//! transform for distributions with atoms.
//!
//! A duration `x` recorded to the millisecond is replaced by `x - u` with `u`
//! uniform on (0, 1), and modelled on the scale `y = ln(1 + x - u)`, which is
//! positive for every `x >= 1`. For an integer-valued variable with known
//! conditional CDF `F`, the randomized PIT `F(x) - (1 - v) J(x)` (with `J` the
//! jump at `x`) equals the continuous PIT of `x - (1 - v)` under the linear
//! interpolation of `F` between integers; the smoothing draw is therefore
//! paired with the PIT draw as `u = 1 - v`.

use crate::data::DaySeries;
use crate::error::{HsdmError, Result};
use crate::rng::{open_unit, rng_from};
use serde::{Deserialize, Serialize};

/// Smoothing draws are kept this far from 0 and 1 so that the original
/// integers are recoverable after the log/exp round trip.
const UNIFORM_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedSeries {
    pub x: Vec<u64>,
    pub u: Vec<f64>,
    /// y_i = ln(1 + x_i - u_i)
    pub y: Vec<f64>,
    pub seed: u64,
}

impl SmoothedSeries {
    /// Log-durations on the modelling scale, t_i = ln(x_i - u_i).
    pub fn log_durations(&self) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.u)
            .map(|(&x, &u)| (x as f64 - u).ln())
            .collect()
    }

    /// Smoothed durations x_i - u_i.
    pub fn durations(&self) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.u)
            .map(|(&x, &u)| x as f64 - u)
            .collect()
    }

    /// Round each smoothed value back up to its integer duration.
    pub fn recover_integers(&self) -> Vec<u64> {
        self.y.iter().map(|&y| recover_integer(y)).collect()
    }
}

pub fn recover_integer(y: f64) -> u64 {
    y.exp_m1().ceil() as u64
}

/// Smooth integer durations with seeded uniform draws.
pub fn smooth_durations(x: &[u64], seed: u64) -> Result<SmoothedSeries> {
    if let Some(pos) = x.iter().position(|&v| v < 1) {
        return Err(HsdmError::precondition(format!(
            "duration at position {pos} is below 1 ms"
        )));
    }
    let mut rng = rng_from(seed);
    let u: Vec<f64> = x
        .iter()
        .map(|_| open_unit(&mut rng).clamp(UNIFORM_MARGIN, 1.0 - UNIFORM_MARGIN))
        .collect();
    Ok(smooth_with(x, &u, seed))
}

/// Smooth with caller-supplied draws (each in (0, 1)).
pub fn smooth_with(x: &[u64], u: &[f64], seed: u64) -> SmoothedSeries {
    let y = x
        .iter()
        .zip(u)
        .map(|(&xi, &ui)| (xi as f64 - ui).ln_1p())
        .collect();
    SmoothedSeries {
        x: x.to_vec(),
        u: u.to_vec(),
        y,
        seed,
    }
}

/// A day prepared for modelling: smoothed log-durations with the clock time
/// at which each duration started and the |BPI| observed at every trade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedDay {
    pub date_label: String,
    pub day_start_ms: i64,
    pub day_end_ms: i64,
    /// Start time of each duration (the previous trade's clock time).
    pub prev_times_ms: Vec<i64>,
    /// t_i = ln(x_i - u_i).
    pub log_durations: Vec<f64>,
    /// |BPI| at the anchor followed by every record, one longer than the durations.
    pub abs_bpi_points: Vec<f64>,
    pub smoothing: SmoothedSeries,
}

impl SmoothedDay {
    pub fn len(&self) -> usize {
        self.log_durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_durations.is_empty()
    }

    /// Smoothed durations x_i - u_i.
    pub fn durations(&self) -> Vec<f64> {
        self.smoothing.durations()
    }
}

/// Smooth the durations of a day with the given seed.
pub fn smooth_day(day: &DaySeries, seed: u64) -> Result<SmoothedDay> {
    let smoothing = smooth_durations(&day.durations(), seed)?;
    Ok(SmoothedDay {
        date_label: day.date_label.clone(),
        day_start_ms: day.day_start_ms,
        day_end_ms: day.day_end_ms,
        prev_times_ms: day.prev_times_ms(),
        log_durations: smoothing.log_durations(),
        abs_bpi_points: day.bpi_with_anchor().iter().map(|b| b.abs()).collect(),
        smoothing,
    })
}

/// Randomized PIT of a value whose CDF has a jump of `jump_at_x` at the
/// observation: `cdf - (1 - v) * jump`.
pub fn general_pit(cdf_at_x: f64, jump_at_x: f64, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&jump_at_x) || !(0.0..=1.0).contains(&cdf_at_x) {
        return Err(HsdmError::invalid("cdf and jump must lie in [0, 1]"));
    }
    if jump_at_x > cdf_at_x {
        return Err(HsdmError::invalid(format!(
            "jump {jump_at_x} exceeds cdf value {cdf_at_x}"
        )));
    }
    if !(0.0..=1.0).contains(&v) {
        return Err(HsdmError::invalid("auxiliary draw must lie in [0, 1]"));
    }
    Ok(cdf_at_x - (1.0 - v) * jump_at_x)
}

/// A CDF supported on the integers `offset..offset + values.len()`; below the
/// support it is 0 and from the last support point on it is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegerCdf {
    pub offset: i64,
    /// F(offset), F(offset + 1), ...; nondecreasing, last entry 1.
    pub values: Vec<f64>,
}

impl IntegerCdf {
    pub fn from_pmf(offset: i64, pmf: &[f64]) -> Result<Self> {
        let total: f64 = pmf.iter().sum();
        if pmf.is_empty() || pmf.iter().any(|p| *p < 0.0 || !p.is_finite()) || total <= 0.0 {
            return Err(HsdmError::invalid("pmf must be nonnegative with positive mass"));
        }
        let mut acc = 0.0;
        let mut values: Vec<f64> = pmf
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        *values.last_mut().expect("nonempty") = 1.0;
        Ok(Self { offset, values })
    }

    /// F(k) at an integer.
    pub fn at(&self, k: i64) -> f64 {
        if k < self.offset {
            0.0
        } else {
            let idx = (k - self.offset) as usize;
            self.values.get(idx).copied().unwrap_or(1.0)
        }
    }

    /// Left limit F'(k) = F(k - 1) on the integers.
    pub fn left_limit(&self, k: i64) -> f64 {
        self.at(k - 1)
    }

    /// Jump J(k) = F(k) - F'(k) = P(X = k).
    pub fn jump(&self, k: i64) -> f64 {
        self.at(k) - self.left_limit(k)
    }

    /// Generalized quantile inf{x : F(x) >= p} for p in (0, 1).
    pub fn quantile(&self, p: f64) -> i64 {
        let idx = self.values.partition_point(|&f| f < p);
        self.offset + idx.min(self.values.len() - 1) as i64
    }
}

/// Linear interpolation of an integer CDF between consecutive integers; this
/// is the CDF of X - V for V uniform on (0, 1) independent of X.
pub fn interpolated_cdf(cdf: &IntegerCdf, z: f64) -> f64 {
    let fl = z.floor();
    let k = fl as i64;
    let frac = z - fl;
    if frac == 0.0 {
        return cdf.at(k);
    }
    cdf.at(k) + frac * cdf.jump(k + 1)
}

/// Log point mass at `x` and log density of the smoothed variable at `z`, the
/// latter from a central difference of the interpolated CDF inside (x-1, x).
pub fn smoothed_loglik_equals_discrete(cdf: &IntegerCdf, x: i64, z: f64) -> Result<(f64, f64)> {
    let lo = (x - 1) as f64;
    let hi = x as f64;
    if !(z > lo && z < hi) {
        return Err(HsdmError::invalid(format!("z = {z} is not inside ({lo}, {hi})")));
    }
    Ok((cdf.jump(x).ln(), interpolated_density(cdf, z).ln()))
}

/// Derivative of the interpolated CDF at a non-integer `z`: the slope of the
/// linear piece containing it.
pub fn interpolated_density(cdf: &IntegerCdf, z: f64) -> f64 {
    cdf.jump(z.floor() as i64 + 1)
}

/// Per-step quantities of the randomized PIT over an integer-valued sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePitState {
    pub jumps: Vec<f64>,
    pub left_limits: Vec<f64>,
    pub cdf_values: Vec<f64>,
    pub aux: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl DiscretePitState {
    /// `cdfs[i]` is the conditional CDF of the i-th observation given the past.
    pub fn compute(cdfs: &[IntegerCdf], xs: &[i64], v: &[f64]) -> Result<Self> {
        if cdfs.len() != xs.len() || xs.len() != v.len() {
            return Err(HsdmError::invalid("cdfs, observations and draws differ in length"));
        }
        let mut st = DiscretePitState {
            jumps: Vec::with_capacity(xs.len()),
            left_limits: Vec::with_capacity(xs.len()),
            cdf_values: Vec::with_capacity(xs.len()),
            aux: v.to_vec(),
            residuals: Vec::with_capacity(xs.len()),
        };
        for ((f, &x), &vi) in cdfs.iter().zip(xs).zip(v) {
            let (fx, jx) = (f.at(x), f.jump(x));
            st.jumps.push(jx);
            st.left_limits.push(f.left_limit(x));
            st.cdf_values.push(fx);
            st.residuals.push(general_pit(fx, jx, vi)?);
        }
        Ok(st)
    }
}

/// Continuous PIT of the smoothed values `x - u` under the interpolated CDFs.
pub fn continuous_pit_of_smoothed(cdfs: &[IntegerCdf], xs: &[i64], u: &[f64]) -> Vec<f64> {
    cdfs.iter()
        .zip(xs)
        .zip(u)
        .map(|((f, &x), &ui)| interpolated_cdf(f, x as f64 - ui))
        .collect()
}
