//! Kernel estimates of the conditional law of the current log-duration given
//! the previous one, and a univariate kernel estimate used for residuals.
//!
//! Estimation happens on the smoothed scale `y = ln(1 + x - u)`, where the
//! support is the positive half-line. With log-duration `t = ln(x - u)` we have
//! `y = softplus(t)`, so evaluation on the `t` scale picks up the Jacobian
//! `dy/dt = e^t / (1 + e^t)`. The Gaussian kernel leaks a little mass below
//! `y = 0`; the conditional law is renormalized to the positive half-line.

use crate::error::{HsdmError, Result};
use crate::normal::{self, LN_SQRT_2PI, PROB_GUARD};
use serde::{Deserialize, Serialize};

/// Conditioning weights below exp(-WINDOW_LOG_RATIO) relative to the nearest
/// training point are dropped.
const WINDOW_LOG_RATIO: f64 = 25.0;
/// Number of evaluation points used by the cross-validation criterion.
const CV_POINTS: usize = 1000;

pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Inverse of softplus, ln(e^y - 1), for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// ln(e^t / (1 + e^t)).
pub fn ln_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "CondDensityFields")]
pub struct CondDensityModel {
    pub kernel: String,
    pub h_y: f64,
    pub h_cond: f64,
    /// Conditioning values y_{i-1}, sorted ascending.
    pub cond: Vec<f64>,
    /// Responses y_i aligned with `cond`.
    pub resp: Vec<f64>,
    /// Mean leave-one-out log-likelihood at the selected bandwidths.
    pub cv_score: Option<f64>,
    /// Kernel mass of each response above y = 0.
    #[serde(skip_serializing)]
    pos_mass: Vec<f64>,
}

#[derive(Deserialize)]
struct CondDensityFields {
    kernel: String,
    h_y: f64,
    h_cond: f64,
    cond: Vec<f64>,
    resp: Vec<f64>,
    cv_score: Option<f64>,
}

impl From<CondDensityFields> for CondDensityModel {
    fn from(f: CondDensityFields) -> Self {
        let pos_mass = positive_mass(&f.resp, f.h_y);
        Self { kernel: f.kernel, h_y: f.h_y, h_cond: f.h_cond, cond: f.cond, resp: f.resp, cv_score: f.cv_score, pos_mass }
    }
}

/// Normal CDF that skips the special function where it is 0 or 1 to
/// double precision relative to a mixture total.
fn tail_cdf(z: f64) -> f64 {
    if z < -UNI_WINDOW {
        0.0
    } else if z > UNI_WINDOW {
        1.0
    } else {
        normal::cdf(z)
    }
}

fn positive_mass(resp: &[f64], h: f64) -> Vec<f64> {
    resp.iter().map(|r| normal::cdf(r / h)).collect()
}

/// The conditional law for one conditioning value: a Gaussian mixture over
/// the responses in the active window, truncated to y > 0.
#[derive(Debug, Clone)]
pub struct ConditionalLaw<'a> {
    resp: &'a [f64],
    /// Normalized mixture weights.
    weights: Vec<f64>,
    ln_weights: Vec<f64>,
    h: f64,
    /// Raw mixture mass above y = 0.
    mass_pos: f64,
    ln_mass_pos: f64,
}

impl CondDensityModel {
    /// Fit with bandwidths chosen by leave-one-out likelihood cross-validation.
    pub fn fit(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.len() < 2 {
            return Err(HsdmError::precondition(format!(
                "need at least 2 pairs, got {}",
                pairs.len()
            )));
        }
        check_finite(pairs)?;
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (_, sx) = mean_sd(&xs);
        let (_, sy) = mean_sd(&ys);
        if sx < 1e-12 || sy < 1e-12 {
            return Err(HsdmError::Degenerate(
                "conditioning or response values are all equal".into(),
            ));
        }
        let rate = (pairs.len() as f64).powf(-1.0 / 6.0);
        let (hy, hc, score) = cross_validate(&xs, &ys, sy * rate, sx * rate);
        let mut m = Self::with_bandwidths(pairs, hy, hc)?;
        m.cv_score = Some(score);
        Ok(m)
    }

    /// Build from consecutive log-durations t_1..t_n: pairs (y_{i-1}, y_i).
    pub fn from_log_durations(t: &[f64]) -> Result<Self> {
        Self::fit(&log_duration_pairs(t))
    }

    pub fn with_bandwidths(pairs: &[(f64, f64)], h_y: f64, h_cond: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(HsdmError::precondition("no training pairs"));
        }
        if !(h_y > 0.0 && h_cond > 0.0 && h_y.is_finite() && h_cond.is_finite()) {
            return Err(HsdmError::invalid("bandwidths must be positive"));
        }
        check_finite(pairs)?;
        let mut sorted = pairs.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let resp: Vec<f64> = sorted.iter().map(|p| p.1).collect();
        Ok(Self {
            kernel: "gaussian".into(),
            h_y,
            h_cond,
            cond: sorted.iter().map(|p| p.0).collect(),
            pos_mass: positive_mass(&resp, h_y),
            resp,
            cv_score: None,
        })
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != "gaussian" {
            return Err(HsdmError::invalid(format!("unsupported kernel {}", self.kernel)));
        }
        if !(self.h_y > 0.0 && self.h_cond > 0.0) {
            return Err(HsdmError::invalid("bandwidths must be positive"));
        }
        if self.cond.is_empty() || self.cond.len() != self.resp.len() {
            return Err(HsdmError::invalid("training pairs empty or misaligned"));
        }
        if self.cond.windows(2).any(|w| w[1] < w[0])
            || self.cond.iter().chain(&self.resp).any(|v| !v.is_finite())
        {
            return Err(HsdmError::invalid("training pairs unsorted or non-finite"));
        }
        Ok(())
    }

    /// Conditional law given the previous value on the smoothed scale.
    /// Conditioning values outside the training range are clamped to it.
    pub fn law_y(&self, y_prev: f64) -> ConditionalLaw<'_> {
        let lo = self.cond[0];
        let hi = *self.cond.last().expect("nonempty");
        let x = y_prev.clamp(lo, hi);
        let pos = self.cond.partition_point(|&c| c < x);
        let d_min = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter_map(|i| self.cond.get(i))
            .map(|c| (x - c).abs())
            .fold(f64::INFINITY, f64::min);
        let reach = (d_min * d_min + 2.0 * WINDOW_LOG_RATIO * self.h_cond * self.h_cond).sqrt();
        let start = self.cond.partition_point(|&c| c < x - reach);
        let end = self.cond.partition_point(|&c| c <= x + reach);
        let inv = 1.0 / (2.0 * self.h_cond * self.h_cond);
        let mut ln_w: Vec<f64> = self.cond[start..end]
            .iter()
            .map(|c| -(x - c).powi(2) * inv)
            .collect();
        let lse = log_sum_exp(ln_w.iter().copied());
        for v in &mut ln_w {
            *v -= lse;
        }
        let weights: Vec<f64> = ln_w.iter().map(|v| v.exp()).collect();
        let resp = &self.resp[start..end];
        let mass_pos: f64 = weights
            .iter()
            .zip(&self.pos_mass[start..end])
            .map(|(w, m)| w * m)
            .sum();
        ConditionalLaw {
            resp,
            weights,
            ln_weights: ln_w,
            h: self.h_y,
            mass_pos,
            ln_mass_pos: mass_pos.ln(),
        }
    }

    /// Conditional law given the previous log-duration.
    pub fn law(&self, t_prev: f64) -> ConditionalLaw<'_> {
        self.law_y(softplus(t_prev))
    }

    pub fn density(&self, t: f64, t_prev: f64) -> f64 {
        self.law(t_prev).density(t)
    }

    pub fn ln_density(&self, t: f64, t_prev: f64) -> f64 {
        self.law(t_prev).ln_density(t)
    }

    pub fn cdf(&self, t: f64, t_prev: f64) -> f64 {
        self.law(t_prev).cdf(t)
    }

    pub fn inverse_cdf(&self, p: f64, t_prev: f64) -> Result<f64> {
        self.law(t_prev).inverse_cdf(p)
    }
}

pub fn log_duration_pairs(t: &[f64]) -> Vec<(f64, f64)> {
    t.windows(2)
        .map(|w| (softplus(w[0]), softplus(w[1])))
        .collect()
}

fn check_finite(pairs: &[(f64, f64)]) -> Result<()> {
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(HsdmError::invalid("training pairs must be finite"));
    }
    Ok(())
}

impl ConditionalLaw<'_> {
    /// Number of training pairs carrying weight.
    pub fn window_len(&self) -> usize {
        self.resp.len()
    }

    /// Untruncated mixture CDF on the smoothed scale.
    pub fn raw_cdf_y(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.resp)
            .map(|(w, r)| w * tail_cdf((y - r) / self.h))
            .sum()
    }

    fn raw_sf_y(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(self.resp)
            .map(|(w, r)| w * tail_cdf((r - y) / self.h))
            .sum()
    }

    /// Untruncated mixture density on the smoothed scale.
    pub fn raw_density_y(&self, y: f64) -> f64 {
        self.raw_ln_density_y(y).exp()
    }

    pub fn raw_ln_density_y(&self, y: f64) -> f64 {
        let h = self.h;
        log_sum_exp(
            self.ln_weights
                .iter()
                .zip(self.resp)
                .map(move |(lw, r)| lw - 0.5 * ((y - r) / h).powi(2)),
        ) - h.ln()
            - LN_SQRT_2PI
    }

    /// CDF on the log-duration scale.
    pub fn cdf(&self, t: f64) -> f64 {
        if t == f64::NEG_INFINITY {
            return 0.0;
        }
        if t == f64::INFINITY {
            return 1.0;
        }
        let c = if t > 0.0 {
            1.0 - self.raw_sf_y(softplus(t)) / self.mass_pos
        } else {
            let y = softplus(t);
            // G(y) - G(0) without cancellation for small y.
            let d: f64 = self
                .weights
                .iter()
                .zip(self.resp)
                .map(|(w, r)| w * (normal::cdf((y - r) / self.h) - normal::cdf(-r / self.h)))
                .sum();
            d / self.mass_pos
        };
        c.clamp(0.0, 1.0)
    }

    /// Survival function on the log-duration scale.
    pub fn sf(&self, t: f64) -> f64 {
        (self.raw_sf_y(softplus(t)) / self.mass_pos).clamp(0.0, 1.0)
    }

    pub fn ln_density(&self, t: f64) -> f64 {
        self.raw_ln_density_y(softplus(t)) - self.ln_mass_pos + ln_sigmoid(t)
    }

    pub fn density(&self, t: f64) -> f64 {
        self.ln_density(t).exp()
    }

    /// Normal score Φ⁻¹(F(t)) computed from whichever tail is smaller, with
    /// the probability clipped to [PROB_GUARD, 1 - PROB_GUARD]. The flag
    /// reports whether clipping occurred.
    pub fn normal_score(&self, t: f64) -> (f64, bool) {
        // For t > 0 the CDF is computed from the survival sum anyway.
        let (c, s) = if t > 0.0 && t.is_finite() {
            let s = self.sf(t);
            ((1.0 - s).clamp(0.0, 1.0), s)
        } else {
            (self.cdf(t), f64::NAN)
        };
        if c <= 0.5 {
            normal::guarded_quantile(c)
        } else {
            let s = if s.is_nan() { self.sf(t) } else { s };
            let (q, clipped) = normal::guarded_quantile(s);
            (-q, clipped)
        }
    }

    /// Inverse CDF on the log-duration scale by bracketed Newton-bisection.
    pub fn inverse_cdf(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(HsdmError::invalid(format!("probability {p} not in (0, 1)")));
        }
        let upper = p > 0.5;
        // Root of g(t) = F(t) - p, evaluated through the smaller tail.
        let g = |t: f64| {
            if upper {
                (1.0 - p) - self.sf(t)
            } else {
                self.cdf(t) - p
            }
        };
        let ymax = self.resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = -5.0;
        while g(lo) > 0.0 {
            lo = 2.0 * lo - 5.0;
            if lo < -800.0 {
                return Err(HsdmError::Numerical("inverse cdf lower bracket not found".into()));
            }
        }
        let mut hi = ymax + 10.0 * self.h;
        while g(hi) < 0.0 {
            hi += 10.0 * self.h + hi.abs();
            if hi > 1e6 {
                return Err(HsdmError::Numerical("inverse cdf upper bracket not found".into()));
            }
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..300 {
            let gv = g(t);
            if gv == 0.0 {
                return Ok(t);
            }
            if gv < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let dens = self.density(t);
            let newton = t - gv / dens;
            let next = if dens > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - t).abs() <= 1e-12 * t.abs().max(1.0) || hi - lo <= 1e-13 * t.abs().max(1.0) {
                return Ok(next);
            }
            t = next;
        }
        Ok(t)
    }
}

/// Leave-one-out conditional log-likelihood over a log-spaced bandwidth grid
/// followed by a finer grid around the winner. The criterion averages over up
/// to CV_POINTS evenly strided evaluation points, each scored against all
/// other training pairs.
fn cross_validate(xs: &[f64], ys: &[f64], hy0: f64, hc0: f64) -> (f64, f64, f64) {
    let coarse: Vec<f64> = (-4..=4).map(|k| 2f64.powf(k as f64 / 2.0)).collect();
    let (fy, fc, _) = cv_grid(xs, ys, &scaled(hy0, &coarse), &scaled(hc0, &coarse));
    let fine: Vec<f64> = (-2..=2).map(|k| 2f64.powf(k as f64 / 8.0)).collect();
    cv_grid(xs, ys, &scaled(fy, &fine), &scaled(fc, &fine))
}

fn scaled(h: f64, factors: &[f64]) -> Vec<f64> {
    factors.iter().map(|f| h * f).collect()
}

fn cv_grid(xs: &[f64], ys: &[f64], hys: &[f64], hcs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len();
    let stride = n.div_ceil(CV_POINTS).max(1);
    let evals: Vec<usize> = (0..n).step_by(stride).collect();
    let (ny, nc) = (hys.len(), hcs.len());
    // Φ(y_j / h) per response bandwidth, for the truncation mass.
    let pos_mass: Vec<Vec<f64>> = hys
        .iter()
        .map(|h| ys.iter().map(|y| normal::cdf(y / h)).collect())
        .collect();
    let mut score = vec![0.0; ny * nc];
    let mut kc = vec![vec![0.0; n]; nc];
    let mut ky = vec![vec![0.0; n]; ny];
    for &i in &evals {
        for (c, h) in hcs.iter().enumerate() {
            let inv = 1.0 / (2.0 * h * h);
            for j in 0..n {
                kc[c][j] = if j == i { 0.0 } else { (-(xs[i] - xs[j]).powi(2) * inv).exp() };
            }
        }
        for (r, h) in hys.iter().enumerate() {
            let inv = 1.0 / (2.0 * h * h);
            for j in 0..n {
                ky[r][j] = (-(ys[i] - ys[j]).powi(2) * inv).exp();
            }
        }
        for c in 0..nc {
            for r in 0..ny {
                let num: f64 = kc[c].iter().zip(&ky[r]).map(|(a, b)| a * b).sum();
                let mass: f64 = kc[c].iter().zip(&pos_mass[r]).map(|(a, b)| a * b).sum();
                // The conditioning normalizer cancels between density and mass.
                let ll = if num > 0.0 && mass > 0.0 {
                    (num / mass).ln() - hys[r].ln() - LN_SQRT_2PI
                } else {
                    -1e6
                };
                score[r * nc + c] += ll;
            }
        }
    }
    let m = evals.len() as f64;
    let (best, value) = score
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k, *v / m))
        .expect("nonempty grid");
    (hys[best / nc], hcs[best % nc], value)
}

/// Kernels further than this many bandwidths away are treated as 0 or 1.
const UNI_WINDOW: f64 = 9.0;

/// Univariate Gaussian kernel density estimate over sorted points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateKde {
    pub points: Vec<f64>,
    pub h: f64,
}

impl UnivariateKde {
    /// Bandwidth by Silverman's rule, 0.9 min(sd, IQR/1.34) n^(-1/5).
    pub fn silverman(points: &[f64]) -> Result<Self> {
        if points.len() < 2 {
            return Err(HsdmError::precondition("need at least 2 points"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(HsdmError::invalid("points must be finite"));
        }
        let mut sorted = points.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (_, sd) = mean_sd(&sorted);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let (i, f) = (pos.floor() as usize, pos.fract());
            sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
        };
        let iqr = q(0.75) - q(0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        if spread <= 0.0 {
            return Err(HsdmError::Degenerate("all points are equal".into()));
        }
        let h = 0.9 * spread * (sorted.len() as f64).powf(-0.2);
        Ok(Self { points: sorted, h })
    }

    /// Index range of the points within WINDOW bandwidths of `x`.
    fn window(&self, x: f64) -> (usize, usize) {
        let reach = UNI_WINDOW * self.h;
        let lo = self.points.partition_point(|&p| p < x - reach);
        let hi = self.points.partition_point(|&p| p <= x + reach);
        (lo, hi)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let h = self.h;
        let (lo, hi) = self.window(x);
        let near = if lo < hi { &self.points[lo..hi] } else { &self.points[..] };
        log_sum_exp(near.iter().map(move |p| -0.5 * ((x - p) / h).powi(2)))
            - (self.points.len() as f64).ln()
            - h.ln()
            - LN_SQRT_2PI
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.points.len() as f64;
        let (lo, hi) = self.window(x);
        let near: f64 = self.points[lo..hi].iter().map(|p| normal::cdf((x - p) / self.h)).sum();
        (lo as f64 + near) / n
    }

    pub fn sf(&self, x: f64) -> f64 {
        let n = self.points.len() as f64;
        let (lo, hi) = self.window(x);
        let near: f64 = self.points[lo..hi].iter().map(|p| normal::sf((x - p) / self.h)).sum();
        ((self.points.len() - hi) as f64 + near) / n
    }

    /// Mean of exp(X) under the estimate.
    pub fn mean_exp(&self) -> f64 {
        let n = self.points.len() as f64;
        self.points.iter().map(|p| (p + 0.5 * self.h * self.h).exp()).sum::<f64>() / n
    }

    /// Points must be sorted and finite, bandwidth positive.
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 || !(self.h > 0.0 && self.h.is_finite()) {
            return Err(HsdmError::invalid("kde needs 2 points and a positive bandwidth"));
        }
        if self.points.iter().any(|p| !p.is_finite()) || self.points.windows(2).any(|w| w[0] > w[1]) {
            return Err(HsdmError::invalid("kde points must be finite and sorted"));
        }
        Ok(())
    }

    /// Shift every point by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| p + delta).collect(),
            h: self.h,
        }
    }
}

/// Clip a probability into the numeric guard band.
pub fn guard(p: f64) -> f64 {
    p.clamp(PROB_GUARD, 1.0 - PROB_GUARD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = 0.5 * (f(a) + f(b));
        for i in 1..n {
            s += f(a + i as f64 * h);
        }
        s * h
    }

    /// Bimodal self-exciting log-durations: a short and a long regime whose
    /// probability depends on the previous value.
    fn bimodal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        let mut t = vec![5.0];
        for _ in 1..n {
            let prev: f64 = *t.last().unwrap();
            let p_long = 1.0 / (1.0 + (-(prev - 4.0)).exp());
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = if rng.random::<f64>() < p_long {
                6.5 + 0.3 * (prev - 4.0) + 0.7 * z
            } else {
                1.0 + 0.5 * z
            };
            t.push(v);
        }
        t
    }

    #[test]
    fn degenerate_and_small_inputs_rejected() {
        assert!(matches!(
            CondDensityModel::fit(&[(0.0, 0.0); 10]),
            Err(HsdmError::Degenerate(_))
        ));
        assert!(matches!(
            CondDensityModel::fit(&[(1.0, 2.0)]),
            Err(HsdmError::Precondition(_))
        ));
    }

    #[test]
    fn single_pair_kernel_values() {
        let h = 0.3;
        let m = CondDensityModel::with_bandwidths(&[(1.0, 0.0)], h, 0.5).unwrap();
        let law = m.law_y(1.7);
        let expected = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
        assert!((law.raw_density_y(0.0) - expected).abs() < 1e-12);
        assert!((law.raw_cdf_y(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one_and_matches_cdf() {
        let t = bimodal(1500, 3);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        for t_prev in 1..=12 {
            let law = m.law(t_prev as f64);
            let total = trapezoid(|x| law.density(x), -30.0, 20.0, 20_000);
            assert!((total - 1.0).abs() < 1e-3, "t_prev {t_prev}: {total}");
            assert!(law.cdf(-700.0) < 1e-12 && law.cdf(60.0) > 1.0 - 1e-12);
            for &x in &[0.5, 1.0, 3.0, 6.0] {
                if law.density(x) < 1e-3 {
                    continue;
                }
                let h = 1e-5;
                let num = (law.cdf(x + h) - law.cdf(x - h)) / (2.0 * h);
                assert!((num - law.density(x)).abs() <= 1e-4 * law.density(x));
            }
        }
    }

    #[test]
    fn inverse_cdf_round_trip_and_median() {
        let t = bimodal(800, 4);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        for &t_prev in &[0.5, 3.0, 7.0] {
            let law = m.law(t_prev);
            for &x in &[-3.0, 0.2, 1.5, 4.0, 7.5, 9.0] {
                let c = law.cdf(x);
                if !(1e-6..=1.0 - 1e-6).contains(&c) {
                    continue;
                }
                let back = law.inverse_cdf(c).unwrap();
                assert!((back - x).abs() < 1e-8, "{x} -> {back}");
            }
            let med = law.inverse_cdf(0.5).unwrap();
            assert!((law.cdf(med) - 0.5).abs() < 1e-12);
        }
        assert!(m.inverse_cdf(0.0, 1.0).is_err());
        assert!(m.inverse_cdf(1.0, 1.0).is_err());
    }

    #[test]
    fn cdf_monotone_on_random_grids() {
        let t = bimodal(600, 5);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        let mut rng = rng_from(11);
        for _ in 0..200 {
            let t_prev = rng.random_range(-2.0..12.0);
            let law = m.law(t_prev);
            let mut grid: Vec<f64> = (0..20).map(|_| rng.random_range(-6.0..14.0)).collect();
            grid.sort_by(f64::total_cmp);
            let c: Vec<f64> = grid.iter().map(|&x| law.cdf(x)).collect();
            assert!(c.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn conditional_mode_tracks_conditioning_value() {
        let t = bimodal(3000, 6);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        // Highest density in the short and long regions, with a dip between.
        let peak = |t_prev: f64, lo: f64, hi: f64| {
            let law = m.law(t_prev);
            (0..=400)
                .map(|k| lo + (hi - lo) * k as f64 / 400.0)
                .map(|x| (x, law.density(x)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
        };
        for &t_prev in &[4.0, 7.0] {
            let (_, short) = peak(t_prev, -1.0, 3.0);
            let (_, long) = peak(t_prev, 4.5, 10.0);
            let dip = m.density(3.8, t_prev);
            assert!(dip < 0.5 * short.min(long), "t_prev {t_prev}");
        }
        assert!(peak(7.0, 4.5, 10.0).0 > peak(4.0, 4.5, 10.0).0 + 0.3);
        // Conditional mean rises with the conditioning value.
        let mean = |t_prev: f64| {
            let law = m.law(t_prev);
            trapezoid(|x| x * law.density(x), -20.0, 20.0, 8000)
        };
        let means: Vec<f64> = [1.0, 3.0, 5.0, 7.0].iter().map(|&v| mean(v)).collect();
        assert!(means.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{means:?}");
    }

    #[test]
    fn out_of_range_conditioning_is_clamped() {
        let t = bimodal(500, 7);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        let top = *m.cond.last().unwrap();
        let a = m.law_y(top).cdf(3.0);
        let b = m.law_y(top + 50.0).cdf(3.0);
        assert_eq!(a, b);
    }

    #[test]
    fn normal_score_is_symmetric_in_tails() {
        let t = bimodal(500, 8);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        let law = m.law(2.0);
        let (q, clipped) = law.normal_score(40.0);
        assert!(clipped && q > 6.0);
        let x = 5.0;
        let (q, _) = law.normal_score(x);
        assert!((normal::cdf(q) - law.cdf(x)).abs() < 1e-10);
    }

    #[test]
    fn serde_round_trip() {
        let t = bimodal(300, 9);
        let m = CondDensityModel::from_log_durations(&t).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: CondDensityModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        back.validate().unwrap();
    }

    #[test]
    fn softplus_round_trip() {
        for &t in &[-30.0, -2.0, 0.0, 1.0, 8.0, 40.0] {
            assert!((softplus_inv(softplus(t)) - t).abs() < 1e-9 * t.abs().max(1.0));
        }
    }

    #[test]
    fn univariate_kde_integrates() {
        let pts: Vec<f64> = (0..200).map(|k| (k as f64 * 0.37).sin() * 2.0).collect();
        let k = UnivariateKde::silverman(&pts).unwrap();
        let total = trapezoid(|x| k.pdf(x), -10.0, 10.0, 10_000);
        assert!((total - 1.0).abs() < 1e-6);
        assert!((k.cdf(0.3) + k.sf(0.3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn univariate_window_matches_full_sum() {
        let pts: Vec<f64> = (0..500).map(|k| (k as f64 * 0.71).sin() * 3.0 + 0.01 * k as f64).collect();
        let k = UnivariateKde::silverman(&pts).unwrap();
        let n = pts.len() as f64;
        for x in [-9.0, -2.5, 0.0, 1.7, 4.0, 30.0] {
            let pdf: f64 = pts.iter().map(|p| normal::pdf((x - p) / k.h)).sum::<f64>() / (n * k.h);
            let cdf: f64 = pts.iter().map(|p| normal::cdf((x - p) / k.h)).sum::<f64>() / n;
            assert!((k.pdf(x) - pdf).abs() <= 1e-12 * pdf.max(1e-300) + 1e-300, "{x}");
            assert!((k.cdf(x) - cdf).abs() < 1e-14, "{x}");
        }
        let mean: f64 = pts.iter().map(|p| p.exp()).sum::<f64>() / n * (0.5 * k.h * k.h).exp();
        assert!((k.mean_exp() / mean - 1.0).abs() < 1e-12);
    }
}
