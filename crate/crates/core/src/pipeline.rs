//! Train-on-day-k, test-on-day-k+1 workflows shared by the command line and
//! the evaluation suites.

use crate::benchmarks::{AcdModel, BenchmarkKind};
use crate::bundle::FittedModel;
use crate::data::DaySeries;
use crate::diagnostics::smoothing_ratio;
use crate::error::{HsdmError, Result};
use crate::model::{HsdmModel, HsdmOptions, DEFAULT_LAMBDA};
use crate::prediction::PredictionRun;
use crate::rng::derive_seed_str;
use crate::smoothing::{smooth_day, SmoothedDay};
use crate::trend::TrendUpdate;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Hsdm,
    Benchmark(BenchmarkKind),
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Hsdm,
        ModelKind::Benchmark(BenchmarkKind::EAcd),
        ModelKind::Benchmark(BenchmarkKind::SAcd),
        ModelKind::Benchmark(BenchmarkKind::EFiacd),
        ModelKind::Benchmark(BenchmarkKind::SFiacd),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Hsdm => "HSDM",
            Self::Benchmark(k) => k.name(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = HsdmError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("hsdm") {
            Ok(Self::Hsdm)
        } else {
            s.parse().map(Self::Benchmark)
        }
    }
}

/// Settings of one train/test evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub seed: u64,
    pub options: HsdmOptions,
    pub update: TrendUpdate,
    pub lambda: f64,
    pub models: Vec<ModelKind>,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            options: HsdmOptions::default(),
            update: TrendUpdate::Lse,
            lambda: DEFAULT_LAMBDA,
            models: ModelKind::ALL.to_vec(),
        }
    }
}

/// Seed of the smoothing draws for a day. Replicate 0 is the standard
/// smoothing; others are independent reseeds.
pub fn smoothing_seed(root: u64, date_label: &str, replicate: usize) -> u64 {
    if replicate == 0 {
        derive_seed_str(root, date_label)
    } else {
        derive_seed_str(root, &format!("{date_label}#{replicate}"))
    }
}

pub fn smooth(day: &DaySeries, root: u64, replicate: usize) -> Result<SmoothedDay> {
    smooth_day(day, smoothing_seed(root, &day.date_label, replicate))
}

pub fn fit_model(kind: ModelKind, train: &SmoothedDay, options: &HsdmOptions) -> Result<FittedModel> {
    Ok(match kind {
        ModelKind::Hsdm => FittedModel::Hsdm(Box::new(HsdmModel::fit(train, options)?)),
        ModelKind::Benchmark(k) => FittedModel::Benchmark(Box::new(AcdModel::fit_with(train, k, options.truncation)?)),
    })
}

/// Fitted models and their predictions for one pair of days.
#[derive(Debug, Clone)]
pub struct PairResult {
    pub train_label: String,
    pub test_label: String,
    pub models: Vec<FittedModel>,
    pub runs: Vec<PredictionRun>,
}

/// Fit every configured model on the smoothed training day and predict the
/// smoothed test day.
pub fn run_pair_smoothed(train: &SmoothedDay, test: &SmoothedDay, config: &PairConfig) -> Result<PairResult> {
    let mut models = Vec::with_capacity(config.models.len());
    let mut runs = Vec::with_capacity(config.models.len());
    for &kind in &config.models {
        let model = fit_model(kind, train, &config.options)?;
        runs.push(model.predict_day(test, config.update, config.lambda)?);
        models.push(model);
    }
    Ok(PairResult { train_label: train.date_label.clone(), test_label: test.date_label.clone(), models, runs })
}

pub fn run_pair(train: &DaySeries, test: &DaySeries, config: &PairConfig) -> Result<PairResult> {
    run_pair_smoothed(&smooth(train, config.seed, 0)?, &smooth(test, config.seed, 0)?, config)
}

/// Consecutive (train, test) index pairs of a list of days.
pub fn consecutive_pairs(n_days: usize) -> Vec<(usize, usize)> {
    (1..n_days).map(|k| (k - 1, k)).collect()
}

/// Test log-likelihoods of HSDM and semiparametric FIACD under several
/// smoothing draws of the same pair, and the resulting robustness ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingStudy {
    pub train_label: String,
    pub test_label: String,
    pub hsdm: Vec<f64>,
    pub sfiacd: Vec<f64>,
    /// None when the HSDM advantage on the base smoothing is not positive.
    pub ratio_hsdm: Option<f64>,
    pub ratio_sfiacd: Option<f64>,
}

pub fn smoothing_study(train: &DaySeries, test: &DaySeries, config: &PairConfig, replicates: usize) -> Result<SmoothingStudy> {
    if replicates < 2 {
        return Err(HsdmError::precondition("a smoothing study needs at least two replicates"));
    }
    let cfg = PairConfig {
        models: vec![ModelKind::Hsdm, ModelKind::Benchmark(BenchmarkKind::SFiacd)],
        ..config.clone()
    };
    let mut hsdm = Vec::with_capacity(replicates);
    let mut sfiacd = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let res = run_pair_smoothed(&smooth(train, cfg.seed, r)?, &smooth(test, cfg.seed, r)?, &cfg)?;
        hsdm.push(res.runs[0].total_loglik());
        sfiacd.push(res.runs[1].total_loglik());
    }
    let ratio = |lls: &[f64]| match smoothing_ratio(lls, hsdm[0], sfiacd[0]) {
        Ok(v) => Ok(Some(v)),
        Err(HsdmError::Degenerate(msg)) => {
            log::warn!("{} -> {}: {msg}", train.date_label, test.date_label);
            Ok(None)
        }
        Err(e) => Err(e),
    };
    Ok(SmoothingStudy {
        train_label: train.date_label.clone(),
        test_label: test.date_label.clone(),
        ratio_hsdm: ratio(&hsdm)?,
        ratio_sfiacd: ratio(&sfiacd)?,
        hsdm,
        sfiacd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_parse() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            assert_eq!(k.name().to_lowercase().parse::<ModelKind>().unwrap(), k);
        }
        assert!("garch".parse::<ModelKind>().is_err());
    }

    #[test]
    fn replicate_seeds_differ() {
        let a = smoothing_seed(1, "day-001", 0);
        assert_eq!(a, smoothing_seed(1, "day-001", 0));
        assert_ne!(a, smoothing_seed(1, "day-001", 1));
        assert_ne!(a, smoothing_seed(1, "day-002", 0));
        assert_eq!(consecutive_pairs(3), vec![(0, 1), (1, 2)]);
    }
}
