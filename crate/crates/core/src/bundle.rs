//! Fitted-model bundles: a directory holding `manifest.json` and one JSON
//! file per model component.

use crate::arfima::ArfimaModel;
use crate::benchmarks::{AcdModel, BenchmarkKind};
use crate::error::{HsdmError, Result};
use crate::kde::CondDensityModel;
use crate::model::{HsdmModel, HsdmOptions};
use crate::normal::PROB_GUARD;
use crate::prediction::PredictionRun;
use crate::smoothing::SmoothedDay;
use crate::trend::{TrendParams, TrendUpdate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const BUNDLE_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const COND_DENSITY_FILE: &str = "cond_density.json";
const TREND_FILE: &str = "trend.json";
const ARFIMA_FILE: &str = "arfima.json";
const STATE_FILE: &str = "state.json";
const ACD_FILE: &str = "acd.json";

/// Conventions shared by every component of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    pub log_duration: String,
    pub smoothing: String,
    pub trend_time: String,
    pub probability_guard: f64,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            log_duration: "ln(x - u)".into(),
            smoothing: "u ~ U(0,1), x integer ms".into(),
            trend_time: "normalized day time in [0, 1]".into(),
            probability_guard: PROB_GUARD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format: u32,
    pub model: String,
    pub smoothing_seed: u64,
    pub train_label: String,
    pub day_start_ms: i64,
    pub day_end_ms: i64,
    pub n_train: usize,
    pub conventions: Conventions,
    pub components: Vec<String>,
    /// Human-readable record of fitted choices (bandwidths, orders, ...).
    pub decisions: BTreeMap<String, String>,
}

impl BundleManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != BUNDLE_FORMAT {
            return Err(HsdmError::Schema(format!(
                "bundle format {} is not supported (expected {BUNDLE_FORMAT})",
                self.format
            )));
        }
        if self.conventions != Conventions::default() {
            return Err(HsdmError::Schema("bundle conventions differ from this build".into()));
        }
        if self.day_end_ms <= self.day_start_ms {
            return Err(HsdmError::Schema("day span is empty".into()));
        }
        let expected = expected_components(&self.model)?;
        let mut got = self.components.clone();
        got.sort();
        let mut want: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
        // The ARFIMA file is optional for HSDM submodels.
        if self.model == "HSDM" && !got.iter().any(|c| c == ARFIMA_FILE) {
            want.retain(|c| c != ARFIMA_FILE);
        }
        want.sort();
        if got != want {
            return Err(HsdmError::Schema(format!(
                "components {:?} do not match model {}",
                self.components, self.model
            )));
        }
        Ok(())
    }
}

fn expected_components(model: &str) -> Result<&'static [&'static str]> {
    if model == "HSDM" {
        Ok(&[COND_DENSITY_FILE, TREND_FILE, ARFIMA_FILE, STATE_FILE])
    } else if model.parse::<BenchmarkKind>().is_ok() {
        Ok(&[ACD_FILE])
    } else {
        Err(HsdmError::Schema(format!("unknown model {model}")))
    }
}

/// Remaining HSDM fields not held by another component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HsdmState {
    options: HsdmOptions,
    last_log_duration: f64,
    last_abs_bpi: f64,
    refit_rounds: Option<Vec<(f64, f64, f64)>>,
}

/// A fitted model of any supported kind.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Hsdm(Box<HsdmModel>),
    Benchmark(Box<AcdModel>),
}

impl FittedModel {
    pub fn name(&self) -> String {
        match self {
            Self::Hsdm(_) => "HSDM".into(),
            Self::Benchmark(m) => m.kind.name().into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Hsdm(m) => m.validate(),
            Self::Benchmark(m) => m.validate(),
        }
    }

    /// Predict a test day. Trend settings only affect HSDM.
    pub fn predict_day(&self, test: &SmoothedDay, update: TrendUpdate, lambda: f64) -> Result<PredictionRun> {
        match self {
            Self::Hsdm(m) => m.predict_day(test, update, lambda),
            Self::Benchmark(m) => m.predict_day(test),
        }
    }

    /// Component files as (name, JSON text) with the manifest describing them.
    pub fn to_parts(&self, day_start_ms: i64, day_end_ms: i64) -> Result<(BundleManifest, Vec<(String, String)>)> {
        let mut decisions = BTreeMap::new();
        let mut parts = Vec::new();
        let (seed, label, n) = match self {
            Self::Hsdm(m) => {
                decisions.insert("kde_bandwidth_response".into(), m.cond_density.h_y.to_string());
                decisions.insert("kde_bandwidth_conditioning".into(), m.cond_density.h_cond.to_string());
                if let Some(a) = &m.arfima {
                    decisions.insert("arfima_order".into(), format!("({}, d, {})", a.p, a.q));
                    decisions.insert("arfima_d".into(), a.d.to_string());
                }
                decisions.insert("use_trend".into(), m.options.use_trend.to_string());
                decisions.insert("bpi_lags".into(), m.options.bpi_lags.to_string());
                decisions.insert("joint_refit".into(), m.options.joint_refit.to_string());
                parts.push((COND_DENSITY_FILE.to_string(), to_json(&m.cond_density)?));
                parts.push((TREND_FILE.to_string(), to_json(&m.trend)?));
                if let Some(a) = &m.arfima {
                    parts.push((ARFIMA_FILE.to_string(), to_json(a)?));
                }
                let state = HsdmState {
                    options: m.options.clone(),
                    last_log_duration: m.last_log_duration,
                    last_abs_bpi: m.last_abs_bpi,
                    refit_rounds: m.refit_rounds.clone(),
                };
                parts.push((STATE_FILE.to_string(), to_json(&state)?));
                (m.smoothing_seed, m.train_label.clone(), m.n_train)
            }
            Self::Benchmark(m) => {
                decisions.insert("psi1".into(), m.psi1.to_string());
                decisions.insert("truncation".into(), m.truncation.to_string());
                parts.push((ACD_FILE.to_string(), to_json(m.as_ref())?));
                (m.smoothing_seed, m.train_label.clone(), m.n_obs)
            }
        };
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT,
            model: self.name(),
            smoothing_seed: seed,
            train_label: label,
            day_start_ms,
            day_end_ms,
            n_train: n,
            conventions: Conventions::default(),
            components: parts.iter().map(|p| p.0.clone()).collect(),
            decisions,
        };
        Ok((manifest, parts))
    }

    /// Rebuild from a manifest and its component texts, validating everything.
    pub fn from_parts(manifest: &BundleManifest, parts: &BTreeMap<String, String>) -> Result<Self> {
        manifest.validate()?;
        let get = |name: &str| -> Result<&str> {
            parts
                .get(name)
                .map(String::as_str)
                .ok_or_else(|| HsdmError::Schema(format!("bundle is missing {name}")))
        };
        let model = if manifest.model == "HSDM" {
            let cond_density: CondDensityModel = from_json(get(COND_DENSITY_FILE)?)?;
            let trend: TrendParams = from_json(get(TREND_FILE)?)?;
            let arfima: Option<ArfimaModel> = if manifest.components.iter().any(|c| c == ARFIMA_FILE) {
                Some(from_json(get(ARFIMA_FILE)?)?)
            } else {
                None
            };
            let state: HsdmState = from_json(get(STATE_FILE)?)?;
            Self::Hsdm(Box::new(HsdmModel {
                options: state.options,
                cond_density,
                trend,
                arfima,
                smoothing_seed: manifest.smoothing_seed,
                train_label: manifest.train_label.clone(),
                n_train: manifest.n_train,
                last_log_duration: state.last_log_duration,
                last_abs_bpi: state.last_abs_bpi,
                refit_rounds: state.refit_rounds,
            }))
        } else {
            let m: AcdModel = from_json(get(ACD_FILE)?)?;
            if m.kind.name() != manifest.model {
                return Err(HsdmError::Schema(format!(
                    "manifest names {} but the component holds {}",
                    manifest.model,
                    m.kind.name()
                )));
            }
            Self::Benchmark(Box::new(m))
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, dir: &Path, day_start_ms: i64, day_end_ms: i64) -> Result<BundleManifest> {
        let (manifest, parts) = self.to_parts(day_start_ms, day_end_ms)?;
        std::fs::create_dir_all(dir)?;
        for (name, text) in &parts {
            std::fs::write(dir.join(name), text)?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), to_json(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(BundleManifest, Self)> {
        let manifest = BundleManifest::from_json(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut parts = BTreeMap::new();
        for name in &manifest.components {
            parts.insert(name.clone(), std::fs::read_to_string(dir.join(name))?);
        }
        let model = Self::from_parts(&manifest, &parts)?;
        Ok((manifest, model))
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{bimodal_scenario, simulate_day};
    use crate::smoothing::smooth_day;

    fn day(n: usize, seed: u64) -> SmoothedDay {
        let spec = bimodal_scenario(seed, 1, n);
        smooth_day(&simulate_day(&spec, 0).unwrap().day, seed).unwrap()
    }

    #[test]
    fn bundles_round_trip_and_predict_identically() {
        let train = day(800, 1);
        let test = day(300, 2);
        let hsdm = FittedModel::Hsdm(Box::new(HsdmModel::fit(&train, &HsdmOptions::default()).unwrap()));
        let acd = FittedModel::Benchmark(Box::new(AcdModel::fit(&train, BenchmarkKind::SFiacd).unwrap()));
        for model in [hsdm, acd] {
            let dir = tempfile::tempdir().unwrap();
            let manifest = model.save(dir.path(), train.day_start_ms, train.day_end_ms).unwrap();
            let (back_manifest, back) = FittedModel::load(dir.path()).unwrap();
            assert_eq!(manifest, back_manifest);
            assert_eq!(back, model);
            let a = model.predict_day(&test, TrendUpdate::Lse, 10.0).unwrap();
            let b = back.predict_day(&test, TrendUpdate::Lse, 10.0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mismatched_bundles_are_rejected() {
        let train = day(800, 3);
        let model = FittedModel::Benchmark(Box::new(AcdModel::fit(&train, BenchmarkKind::EAcd).unwrap()));
        let (mut manifest, parts) = model.to_parts(0, 1).unwrap();
        let parts: BTreeMap<String, String> = parts.into_iter().collect();
        manifest.model = "sACD".into();
        assert!(FittedModel::from_parts(&manifest, &parts).is_err());
        manifest.model = "eACD".into();
        manifest.format = 2;
        assert!(FittedModel::from_parts(&manifest, &parts).is_err());
        manifest.format = BUNDLE_FORMAT;
        manifest.components = vec!["cond_density.json".into()];
        assert!(FittedModel::from_parts(&manifest, &parts).is_err());
        assert!(BundleManifest::from_json("{}").is_err());
    }
}
