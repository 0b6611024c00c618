//! Natural cubic splines with knots at each full clock hour, fitted by
//! lightly penalized least squares. Used to remove the intraday pattern from
//! durations for the ACD benchmarks.

use crate::error::{HsdmError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const MS_PER_HOUR: i64 = 3_600_000;
/// Fitted values below this are floored.
pub const SPLINE_FLOOR: f64 = 1e-6;
/// Roughness penalty relative to the scale of the design.
const RELATIVE_PENALTY: f64 = 1e-6;

/// Natural cubic spline through (knots, values); linear beyond the ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    pub second: Vec<f64>,
}

impl NaturalSpline {
    pub fn interpolate(knots: &[f64], values: &[f64]) -> Result<Self> {
        let k = knots.len();
        if k < 2 || values.len() != k {
            return Err(HsdmError::invalid("need at least two knots with matching values"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(HsdmError::invalid("knots must be strictly increasing"));
        }
        Ok(Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second: second_derivatives(knots, values),
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        let n = k.len();
        if x <= k[0] {
            return self.values[0] + self.slope_at(0) * (x - k[0]);
        }
        if x >= k[n - 1] {
            return self.values[n - 1] + self.slope_at(n - 1) * (x - k[n - 1]);
        }
        let i = k.partition_point(|&v| v <= x) - 1;
        let h = k[i + 1] - k[i];
        let a = (k[i + 1] - x) / h;
        let b = (x - k[i]) / h;
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h / 6.0
    }

    /// First derivative at knot i.
    fn slope_at(&self, i: usize) -> f64 {
        let k = &self.knots;
        let (j, at_left) = if i + 1 < k.len() { (i, true) } else { (i - 1, false) };
        let h = k[j + 1] - k[j];
        let base = (self.values[j + 1] - self.values[j]) / h;
        if at_left {
            base - h * (2.0 * self.second[j] + self.second[j + 1]) / 6.0
        } else {
            base + h * (self.second[j] + 2.0 * self.second[j + 1]) / 6.0
        }
    }
}

/// Tridiagonal solve for the second derivatives with natural end conditions.
fn second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![0.0; inner];
    let mut upper = vec![0.0; inner];
    let mut lower = vec![0.0; inner];
    let mut rhs = vec![0.0; inner];
    for j in 0..inner {
        let i = j + 1;
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        lower[j] = h0 / 6.0;
        diag[j] = (h0 + h1) / 3.0;
        upper[j] = h1 / 6.0;
        rhs[j] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
    }
    for j in 1..inner {
        let w = lower[j] / diag[j - 1];
        diag[j] -= w * upper[j - 1];
        rhs[j] -= w * rhs[j - 1];
    }
    let mut sol = vec![0.0; inner];
    sol[inner - 1] = rhs[inner - 1] / diag[inner - 1];
    for j in (0..inner - 1).rev() {
        sol[j] = (rhs[j] - upper[j] * sol[j + 1]) / diag[j];
    }
    m[1..n - 1].copy_from_slice(&sol);
    m
}

/// Knots at the day start, every full hour strictly inside, and the day end.
pub fn hourly_knots(day_start_ms: i64, day_end_ms: i64) -> Vec<i64> {
    let mut knots = vec![day_start_ms];
    let mut h = (day_start_ms / MS_PER_HOUR + 1) * MS_PER_HOUR;
    while h < day_end_ms {
        knots.push(h);
        h += MS_PER_HOUR;
    }
    knots.push(day_end_ms);
    knots
}

/// Intraday duration pattern in clock milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntradaySpline {
    pub knots_ms: Vec<i64>,
    pub spline: NaturalSpline,
}

impl IntradaySpline {
    /// Fit durations against the clock time at which each duration started.
    pub fn fit(times_ms: &[i64], durations: &[f64], day_start_ms: i64, day_end_ms: i64) -> Result<Self> {
        if times_ms.len() != durations.len() || times_ms.is_empty() {
            return Err(HsdmError::invalid("times and durations must be nonempty and aligned"));
        }
        let knots_ms = hourly_knots(day_start_ms, day_end_ms);
        if knots_ms.len() < 3 {
            return Err(HsdmError::precondition(
                "day must span at least two knot intervals for the spline",
            ));
        }
        let knots: Vec<f64> = knots_ms.iter().map(|&k| to_hours(k, day_start_ms)).collect();
        let k = knots.len();
        // Values-at-knots basis: column j is the spline through the j-th unit vector.
        let basis: Vec<NaturalSpline> = (0..k)
            .map(|j| {
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                NaturalSpline::interpolate(&knots, &e).expect("valid knots")
            })
            .collect();
        let n = times_ms.len();
        let design = DMatrix::from_fn(n, k, |i, j| basis[j].eval(to_hours(times_ms[i], day_start_ms)));
        let omega = roughness(&knots, &basis);
        let xtx = design.transpose() * &design;
        let kappa = RELATIVE_PENALTY * xtx.trace() / omega.trace().max(1e-300);
        let lhs = xtx + omega * kappa;
        let rhs = design.transpose() * DVector::from_column_slice(durations);
        let v = lhs
            .cholesky()
            .ok_or_else(|| HsdmError::Numerical("spline normal equations are singular".into()))?
            .solve(&rhs);
        let spline = NaturalSpline::interpolate(&knots, v.as_slice())?;
        let out = Self { knots_ms, spline };
        let _ = out.check_floor(day_start_ms, day_end_ms);
        Ok(out)
    }

    fn start_ms(&self) -> i64 {
        self.knots_ms[0]
    }

    /// Unfloored spline value at a clock time.
    pub fn raw_at(&self, time_ms: i64) -> f64 {
        self.spline.eval(to_hours(time_ms, self.start_ms()))
    }

    /// Spline value floored at SPLINE_FLOOR.
    pub fn at(&self, time_ms: i64) -> f64 {
        self.raw_at(time_ms).max(SPLINE_FLOOR)
    }

    fn check_floor(&self, lo: i64, hi: i64) -> bool {
        let steps = 200;
        let low = (0..=steps)
            .map(|i| self.raw_at(lo + (hi - lo) * i / steps))
            .fold(f64::INFINITY, f64::min);
        if low < SPLINE_FLOOR {
            log::warn!("intraday spline dips to {low:.3e}; values are floored at {SPLINE_FLOOR:e}");
            return true;
        }
        false
    }

    /// Durations divided by the spline at their start times.
    pub fn ratios(&self, times_ms: &[i64], durations: &[f64]) -> Vec<f64> {
        times_ms
            .iter()
            .zip(durations)
            .map(|(&t, &z)| z / self.at(t))
            .collect()
    }
}

fn to_hours(ms: i64, start: i64) -> f64 {
    (ms - start) as f64 / MS_PER_HOUR as f64
}

/// Matrix of integrated squared second derivatives between basis splines.
fn roughness(knots: &[f64], basis: &[NaturalSpline]) -> DMatrix<f64> {
    let k = basis.len();
    DMatrix::from_fn(k, k, |a, b| {
        let (ma, mb) = (&basis[a].second, &basis[b].second);
        (0..knots.len() - 1)
            .map(|i| {
                let h = knots[i + 1] - knots[i];
                // Second derivatives are linear on each interval.
                h / 6.0 * (2.0 * ma[i] * mb[i] + ma[i] * mb[i + 1] + ma[i + 1] * mb[i] + 2.0 * ma[i + 1] * mb[i + 1])
            })
            .sum()
    })
}

/// Spline fit followed by ratios for the same series.
pub fn spline_detrend(
    times_ms: &[i64],
    durations: &[f64],
    day_start_ms: i64,
    day_end_ms: i64,
) -> Result<(Vec<f64>, IntradaySpline)> {
    let spline = IntradaySpline::fit(times_ms, durations, day_start_ms, day_end_ms)?;
    Ok((spline.ratios(times_ms, durations), spline))
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPEN: i64 = 34_200_000;
    const CLOSE: i64 = 57_600_000;

    fn times(n: usize) -> Vec<i64> {
        (0..n).map(|i| OPEN + (CLOSE - OPEN) * i as i64 / n as i64).collect()
    }

    #[test]
    fn knots_are_hourly() {
        let k = hourly_knots(OPEN, CLOSE);
        assert_eq!(k.first(), Some(&OPEN));
        assert_eq!(k[1], 36_000_000);
        assert_eq!(k.last(), Some(&CLOSE));
        assert_eq!(k.len(), 8);
    }

    #[test]
    fn interpolation_hits_knots_and_lines() {
        let knots = [0.0, 1.0, 2.5, 4.0];
        let s = NaturalSpline::interpolate(&knots, &[1.0, 3.0, 6.0, 9.0]).unwrap();
        assert!((s.eval(2.5) - 6.0).abs() < 1e-12);
        // A straight line is reproduced exactly, including extrapolation.
        let lin = NaturalSpline::interpolate(&knots, &knots.map(|x| 2.0 * x + 1.0)).unwrap();
        for &x in &[-1.0, 0.3, 3.3, 5.0] {
            assert!((lin.eval(x) - (2.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_durations_give_unit_ratios() {
        let t = times(2000);
        let z = vec![350.0; t.len()];
        let (r, _) = spline_detrend(&t, &z, OPEN, CLOSE).unwrap();
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn ratios_are_scale_equivariant() {
        let t = times(1500);
        let z: Vec<f64> = (0..t.len()).map(|i| 100.0 + 50.0 * ((i as f64) * 0.01).sin().abs() + (i % 7) as f64).collect();
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let (r1, _) = spline_detrend(&t, &z, OPEN, CLOSE).unwrap();
        let (r2, _) = spline_detrend(&t, &z2, OPEN, CLOSE).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn short_span_rejected() {
        let err = IntradaySpline::fit(&[OPEN, OPEN + 10], &[1.0, 2.0], OPEN, OPEN + 1_000_000);
        assert!(matches!(err, Err(HsdmError::Precondition(_))));
    }

    #[test]
    fn floor_applies() {
        let t = times(500);
        let z: Vec<f64> = t.iter().map(|&x| 1000.0 - (x - OPEN) as f64 / 20_000.0).collect();
        let (_, s) = spline_detrend(&t, &z, OPEN, CLOSE).unwrap();
        assert!(s.at(CLOSE + 100_000_000) >= SPLINE_FLOOR);
    }
}
