//! Residual-based evaluation of predictions: uniformity (KS), serial
//! correlation (Ljung-Box), prediction log-likelihood comparisons and the
//! smoothing robustness ratio.

use crate::error::{HsdmError, Result};
use crate::prediction::PredictionRun;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::io::Write;

/// Models in the order of the comparison table.
pub const MODEL_ORDER: [&str; 5] = ["HSDM", "eACD", "sACD", "eFIACD", "sFIACD"];

/// Lags reported by the Ljung-Box test.
pub const LB_LAGS: [usize; 3] = [5, 10, 15];

/// Upper tail of the Kolmogorov distribution, P(K > x).
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // Theta-function form, fast for small x.
        let y = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
        let s: f64 = (1..=20)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * y).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * x * x).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// One-sample KS test of residuals against U(0, 1) with the asymptotic
/// p-value P(K > sqrt(n) D).
pub fn ks_uniform(c: &[f64]) -> Result<(f64, f64)> {
    let n = c.len();
    if n < 10 {
        return Err(HsdmError::precondition(format!("KS test needs at least 10 residuals, got {n}")));
    }
    if let Some(v) = c.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(HsdmError::invalid(format!("residual {v} outside (0, 1)")));
    }
    let mut s = c.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let above = (i + 1) as f64 / nf - v;
            let below = v - i as f64 / nf;
            above.max(below)
        })
        .fold(0.0, f64::max);
    Ok((d, kolmogorov_sf(nf.sqrt() * d)))
}

/// Sample autocorrelations at lags 1..=max_lag with the divide-by-n convention.
pub fn autocorrelations(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = dev.iter().map(|v| v * v).sum();
    if !(c0 > 0.0) {
        return Err(HsdmError::Degenerate("series is constant".into()));
    }
    Ok((1..=max_lag)
        .map(|k| dev[k..].iter().zip(&dev).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect())
}

/// Ljung-Box Q = n(n+2) sum_{k<=lag} rho_k^2 / (n - k) with a chi-square(lag) p-value.
pub fn ljung_box(c: &[f64], lag: usize) -> Result<(f64, f64)> {
    let n = c.len();
    if lag == 0 || lag >= n {
        return Err(HsdmError::precondition(format!("lag {lag} must be in 1..{n}")));
    }
    let rho = autocorrelations(c, lag)?;
    let nf = n as f64;
    let q = nf * (nf + 2.0) * rho.iter().enumerate().map(|(k, r)| r * r / (nf - (k + 1) as f64)).sum::<f64>();
    let chi = ChiSquared::new(lag as f64).map_err(|e| HsdmError::Numerical(e.to_string()))?;
    Ok((q, if q <= 0.0 { 1.0 } else { chi.sf(q) }))
}

/// One-sided Mann-Whitney test that `x` tends to exceed `y`. Returns (U, p)
/// with U counting pairs where x wins (ties count one half) and a
/// tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_greater(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(HsdmError::precondition("both samples must be nonempty"));
    }
    let mut all: Vec<(f64, usize)> = x.iter().map(|&v| (v, 0)).chain(y.iter().map(|&v| (v, 1))).collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return Err(HsdmError::invalid("samples must not contain NaN"));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for rank in ranks.iter_mut().take(j + 1).skip(i) {
            *rank = r;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all.iter().zip(&ranks).filter(|((_, g), _)| *g == 0).map(|(_, r)| r).sum();
    let (a, b) = (n1 as f64, n2 as f64);
    let u = r1 - a * (a + 1.0) / 2.0;
    let mean = a * b / 2.0;
    let nn = a + b;
    let var = a * b / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    if !(var > 0.0) {
        return Ok((u, 0.5));
    }
    let z = (u - mean - 0.5) / var.sqrt();
    Ok((u, crate::normal::sf(z)))
}

/// Sorted residuals against uniform plotting positions (i - 0.5) / n.
pub fn qq_points(c: &[f64]) -> Vec<(f64, f64)> {
    let mut s = c.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 0.5) / n, v))
        .collect()
}

/// (max - min) of reseeded log-likelihoods over the HSDM advantage.
pub fn smoothing_ratio(lls: &[f64], ll_hsdm: f64, ll_sfiacd: f64) -> Result<f64> {
    if lls.is_empty() || lls.iter().any(|v| !v.is_finite()) {
        return Err(HsdmError::invalid("need finite reseeded log-likelihoods"));
    }
    let denom = ll_hsdm - ll_sfiacd;
    if !(denom > 0.0) {
        return Err(HsdmError::Degenerate(format!(
            "ratio undefined: HSDM advantage {denom} is not positive"
        )));
    }
    let max = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = lls.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((max - min) / denom)
}

/// Residual tests and likelihood of one prediction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub model: String,
    pub date_label: String,
    pub n: usize,
    pub ks_d: f64,
    pub ks_p: f64,
    /// (lag, Q, p) for each reported lag.
    pub ljung_box: Vec<(usize, f64, f64)>,
    pub total_loglik: f64,
    pub mean_loglik: f64,
    pub clipped: usize,
}

/// Diagnostics of the records after the first `burn_in`.
pub fn diagnose_run(run: &PredictionRun, burn_in: usize) -> Result<RunDiagnostics> {
    let recs = run.after(burn_in);
    let c: Vec<f64> = recs.iter().map(|r| r.residual).collect();
    let (ks_d, ks_p) = ks_uniform(&c)?;
    let ljung_box = LB_LAGS
        .iter()
        .filter(|&&l| l < c.len())
        .map(|&l| ljung_box(&c, l).map(|(q, p)| (l, q, p)))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = recs.iter().map(|r| r.log_density).sum();
    Ok(RunDiagnostics {
        model: run.model.clone(),
        date_label: run.date_label.clone(),
        n: c.len(),
        ks_d,
        ks_p,
        ljung_box,
        total_loglik: total,
        mean_loglik: total / c.len() as f64,
        clipped: recs.iter().filter(|r| r.clipped).count(),
    })
}

impl RunDiagnostics {
    pub fn lb_p(&self, lag: usize) -> Option<f64> {
        self.ljung_box.iter().find(|(l, _, _)| *l == lag).map(|x| x.2)
    }
}

/// Per-event log-likelihood differences of one model over another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSummary {
    pub model: String,
    pub baseline: String,
    pub date_label: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub share_positive: f64,
    pub differences: Vec<f64>,
}

pub fn difference_summary(model: &PredictionRun, baseline: &PredictionRun) -> Result<DifferenceSummary> {
    if model.records.len() != baseline.records.len() {
        return Err(HsdmError::invalid(format!(
            "runs {} and {} have {} and {} events",
            model.model,
            baseline.model,
            model.records.len(),
            baseline.records.len()
        )));
    }
    if model.records.is_empty() {
        return Err(HsdmError::precondition("runs are empty"));
    }
    if model.records.iter().zip(&baseline.records).any(|(a, b)| a.index != b.index) {
        return Err(HsdmError::invalid("runs are not aligned event by event"));
    }
    let diffs: Vec<f64> = model
        .records
        .iter()
        .zip(&baseline.records)
        .map(|(a, b)| a.log_density - b.log_density)
        .collect();
    let n = diffs.len();
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Ok(DifferenceSummary {
        model: model.model.clone(),
        baseline: baseline.model.clone(),
        date_label: model.date_label.clone(),
        n,
        mean: diffs.iter().sum::<f64>() / n as f64,
        median,
        share_positive: diffs.iter().filter(|d| **d > 0.0).count() as f64 / n as f64,
        differences: diffs,
    })
}

/// Negative total prediction log-likelihoods per day and model, and the
/// per-event differences of the first model against each of the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub models: Vec<String>,
    /// (date, negative total log-likelihood per model in `models` order).
    pub rows: Vec<(String, Vec<f64>)>,
    pub differences: Vec<DifferenceSummary>,
}

/// Build the comparison from runs of several models over the same days.
/// `reference` names the model whose differences are reported.
pub fn compare_models(runs: &[PredictionRun], reference: &str) -> Result<Comparison> {
    let mut by_day: BTreeMap<&str, BTreeMap<&str, &PredictionRun>> = BTreeMap::new();
    for r in runs {
        if by_day.entry(&r.date_label).or_default().insert(&r.model, r).is_some() {
            return Err(HsdmError::invalid(format!("duplicate run for {} on {}", r.model, r.date_label)));
        }
    }
    let mut models: Vec<String> = MODEL_ORDER
        .iter()
        .filter(|m| runs.iter().any(|r| r.model == **m))
        .map(|m| m.to_string())
        .collect();
    let mut extra: Vec<String> = runs
        .iter()
        .map(|r| r.model.clone())
        .filter(|m| !MODEL_ORDER.contains(&m.as_str()))
        .collect();
    extra.sort();
    extra.dedup();
    models.extend(extra);
    let mut rows = Vec::new();
    let mut differences = Vec::new();
    for (day, per_model) in &by_day {
        let mut row = Vec::with_capacity(models.len());
        for m in &models {
            let run = per_model
                .get(m.as_str())
                .ok_or_else(|| HsdmError::invalid(format!("model {m} has no run on {day}")))?;
            row.push(-run.total_loglik());
        }
        rows.push((day.to_string(), row));
        if let Some(base) = per_model.get(reference) {
            for m in &models {
                if m != reference {
                    differences.push(difference_summary(base, per_model[m.as_str()])?);
                }
            }
        }
    }
    Ok(Comparison { models, rows, differences })
}

impl Comparison {
    /// Table of negative prediction log-likelihoods, one row per day.
    pub fn write_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.models.iter().map(|m| format!("neg_pll_{m}")));
        w.write_record(&header)?;
        for (day, vals) in &self.rows {
            let mut rec = vec![day.clone()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_differences<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "model", "baseline", "n", "mean", "median", "share_positive"])?;
        for d in &self.differences {
            w.write_record([
                d.date_label.clone(),
                d.model.clone(),
                d.baseline.clone(),
                d.n.to_string(),
                d.mean.to_string(),
                d.median.to_string(),
                d.share_positive.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histogram of values over `bins` equal-width bins spanning their range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + (k as f64 + 0.5) * width, c))
        .collect()
}

/// Write residual diagnostics as CSV, one row per run.
pub fn write_report<W: Write>(rows: &[RunDiagnostics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["model", "date", "n", "ks_d", "ks_p"].iter().map(|s| s.to_string()).collect();
    for l in LB_LAGS {
        header.push(format!("lb{l}_q"));
        header.push(format!("lb{l}_p"));
    }
    header.extend(["total_pll", "mean_pll", "clipped"].iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.model.clone(), r.date_label.clone(), r.n.to_string(), r.ks_d.to_string(), r.ks_p.to_string()];
        for l in LB_LAGS {
            match r.ljung_box.iter().find(|x| x.0 == l) {
                Some((_, q, p)) => {
                    rec.push(q.to_string());
                    rec.push(p.to_string());
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
        }
        rec.push(r.total_loglik.to_string());
        rec.push(r.mean_loglik.to_string());
        rec.push(r.clipped.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot data as (series, x, y) rows.
pub fn write_plot_data<W: Write>(series: &[(String, Vec<(f64, f64)>)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["series", "x", "y"])?;
    for (name, pts) in series {
        for (x, y) in pts {
            w.write_record([name.clone(), x.to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prediction::PredictionRecord;
    use crate::rng::{open_unit, rng_from};
    use proptest::prelude::*;

    #[test]
    fn ks_on_midpoints_is_half_over_n() {
        for n in [10usize, 37, 1000] {
            let c: Vec<f64> = (1..=n).map(|k| (2 * k - 1) as f64 / (2 * n) as f64).collect();
            let (d, _) = ks_uniform(&c).unwrap();
            assert!((d - 0.5 / n as f64).abs() < 1e-15);
        }
        let (d, p) = ks_uniform(&[0.5; 20]).unwrap();
        assert!((d - 0.5).abs() < 1e-15 && p < 1e-3);
        assert!(ks_uniform(&[0.5; 5]).is_err());
        assert!(ks_uniform(&[0.5, 1.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).is_err());
    }

    #[test]
    fn kolmogorov_branches_agree() {
        for x in [1.0, 1.1, 1.18, 1.3] {
            let y = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
            let theta = 1.0
                - (2.0 * std::f64::consts::PI).sqrt() / x
                    * (1..=50).map(|k| (-((2 * k - 1) as f64).powi(2) * y).exp()).sum::<f64>();
            let alt = 2.0 * (1..=50).map(|k| (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * x * x).exp()).sum::<f64>();
            assert!((theta - alt).abs() < 1e-12);
            assert!((kolmogorov_sf(x) - alt).abs() < 1e-12);
        }
        // Classical critical value at 5%.
        assert!((kolmogorov_sf(1.358_098_8) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn ks_p_values_are_uniform_under_the_null() {
        let mut pvals = Vec::new();
        for seed in 0..200 {
            let mut rng = rng_from(seed);
            let c: Vec<f64> = (0..10_000).map(|_| open_unit(&mut rng)).collect();
            pvals.push(ks_uniform(&c).unwrap().1);
        }
        let (_, p) = ks_uniform(&pvals).unwrap();
        assert!(p > 0.01, "{p}");
    }

    #[test]
    fn ljung_box_basics() {
        // Blocks of two: positive lag-1 and strongly negative lag-2 correlation.
        let x = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let rho = autocorrelations(&x, 2).unwrap();
        assert!(rho[1] < 0.0);
        assert!(ljung_box(&[1.0; 20], 3).is_err());
        assert!(ljung_box(&x, 8).is_err());
        let mut rng = rng_from(7);
        let mut v = 0.0;
        let ar: Vec<f64> = (0..5000)
            .map(|_| {
                v = 0.2 * v + crate::normal::quantile(open_unit(&mut rng));
                v
            })
            .collect();
        assert!(ljung_box(&ar, 10).unwrap().1 < 0.01);
    }

    #[test]
    fn zero_autocorrelation_gives_q_zero() {
        // x_k = cos(pi k / 2) has zero sample autocovariance at lag 1 and
        // sum over lag 2 cancels only partially, so use lag 1.
        let x = [1.0, 0.0, -1.0, 0.0];
        let (q, p) = ljung_box(&x, 1).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(p, 1.0);
    }

    fn brute_q(x: &[f64], lag: usize) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
        let mut q = 0.0;
        for k in 1..=lag {
            let mut ck = 0.0;
            for t in k..x.len() {
                ck += (x[t] - m) * (x[t - k] - m);
            }
            q += (ck / c0).powi(2) / (n - k as f64);
        }
        n * (n + 2.0) * q
    }

    fn brute_d(x: &[f64]) -> f64 {
        // Supremum of |F_n(t) - t| over t: check just before and at each point.
        let n = x.len() as f64;
        let mut d: f64 = 0.0;
        for &t in x {
            let le = x.iter().filter(|v| **v <= t).count() as f64 / n;
            let lt = x.iter().filter(|v| **v < t).count() as f64 / n;
            d = d.max((le - t).abs()).max((lt - t).abs());
        }
        d
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn statistics_match_direct_formulas(x in proptest::collection::vec(0.001f64..0.999, 12..60)) {
            let (d, _) = ks_uniform(&x).unwrap();
            prop_assert!((d - brute_d(&x)).abs() < 1e-10);
            let (q, _) = ljung_box(&x, 5).unwrap();
            let b = brute_q(&x, 5);
            prop_assert!((q - b).abs() < 1e-10 * b.max(1.0));
        }
    }

    #[test]
    fn mann_whitney_direction() {
        let x: Vec<f64> = (0..20).map(|k| 0.5 + k as f64 * 0.02).collect();
        let y: Vec<f64> = (0..20).map(|k| k as f64 * 0.02).collect();
        assert!(mann_whitney_greater(&x, &y).unwrap().1 < 0.01);
        assert!(mann_whitney_greater(&y, &x).unwrap().1 > 0.99);
        let (u, p) = mann_whitney_greater(&x, &x).unwrap();
        assert!((u - 200.0).abs() < 1e-12 && p > 0.4);
    }

    #[test]
    fn smoothing_ratio_arithmetic() {
        assert_eq!(smoothing_ratio(&[5.0, 5.0, 5.0], 10.0, 1.0).unwrap(), 0.0);
        assert!((smoothing_ratio(&[10.0, 11.0, 12.0], 200.0, 100.0).unwrap() - 0.02).abs() < 1e-15);
        assert!(smoothing_ratio(&[1.0, 2.0], 1.0, 3.0).is_err());
    }

    fn run(model: &str, lls: &[f64]) -> PredictionRun {
        let records = lls
            .iter()
            .enumerate()
            .map(|(i, &l)| PredictionRecord {
                index: i,
                time_prev_ms: i as i64,
                log_duration: 0.0,
                residual: (i as f64 + 0.5) / lls.len() as f64,
                log_density: l,
                mu: None,
                sigma: None,
                tau_mean: None,
                tau_sd: None,
                psi: None,
                clipped: false,
            })
            .collect();
        PredictionRun::new(model, "d1", records)
    }

    #[test]
    fn comparison_layout_and_self_difference() {
        let lls = [-1.0, -2.0, -0.5, -3.0];
        let runs: Vec<PredictionRun> = ["sFIACD", "HSDM", "eACD", "sACD", "eFIACD"]
            .iter()
            .map(|m| run(m, &lls))
            .collect();
        let cmp = compare_models(&runs, "HSDM").unwrap();
        assert_eq!(cmp.models, MODEL_ORDER.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        assert_eq!(cmp.rows[0].1, vec![6.5; 5]);
        assert_eq!(cmp.differences.len(), 4);
        for d in &cmp.differences {
            assert!(d.differences.iter().all(|v| *v == 0.0));
            assert_eq!(d.share_positive, 0.0);
        }
        let short = run("eACD", &lls[..3]);
        assert!(difference_summary(&runs[1], &short).is_err());
        let mut buf = Vec::new();
        cmp.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,neg_pll_HSDM,neg_pll_eACD,neg_pll_sACD,neg_pll_eFIACD,neg_pll_sFIACD"));
    }

    #[test]
    fn qq_points_are_sorted_against_plotting_positions() {
        let q = qq_points(&[0.9, 0.1, 0.5]);
        assert_eq!(q, vec![(0.5 / 3.0, 0.1), (1.5 / 3.0, 0.5), (2.5 / 3.0, 0.9)]);
    }
}
