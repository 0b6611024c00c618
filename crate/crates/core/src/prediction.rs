//! Per-event predictions of a test day and their CSV form.

use crate::error::{HsdmError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Position of the duration within the test day, from 0.
    pub index: usize,
    /// Clock time at which the duration started.
    pub time_prev_ms: i64,
    /// Observed smoothed log-duration.
    pub log_duration: f64,
    /// Final generalized residual: predictive CDF at the observation.
    pub residual: f64,
    /// Predictive log-density at the observation, log-duration scale.
    pub log_density: f64,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub tau_mean: Option<f64>,
    pub tau_sd: Option<f64>,
    /// Conditional mean of the benchmark ratio recursion.
    pub psi: Option<f64>,
    /// Whether a probability hit the numeric guard.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRun {
    pub model: String,
    pub date_label: String,
    pub records: Vec<PredictionRecord>,
}

impl PredictionRun {
    pub fn new(model: impl Into<String>, date_label: impl Into<String>, records: Vec<PredictionRecord>) -> Self {
        Self { model: model.into(), date_label: date_label.into(), records }
    }

    pub fn total_loglik(&self) -> f64 {
        self.records.iter().map(|r| r.log_density).sum()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual).collect()
    }

    pub fn log_densities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.log_density).collect()
    }

    /// Records from position `burn_in` on.
    pub fn after(&self, burn_in: usize) -> &[PredictionRecord] {
        &self.records[burn_in.min(self.records.len())..]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_runs(std::slice::from_ref(self), writer)
    }
}

const HEADER: [&str; 14] = [
    "model",
    "date",
    "index",
    "time_prev_ms",
    "log_duration",
    "residual",
    "log_density",
    "mu",
    "sigma",
    "tau_mean",
    "tau_sd",
    "psi",
    "clipped",
    "version",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write several runs into one CSV table.
pub fn write_runs<W: Write>(runs: &[PredictionRun], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for run in runs {
        for r in &run.records {
            w.write_record([
                run.model.clone(),
                run.date_label.clone(),
                r.index.to_string(),
                r.time_prev_ms.to_string(),
                r.log_duration.to_string(),
                r.residual.to_string(),
                r.log_density.to_string(),
                opt(r.mu),
                opt(r.sigma),
                opt(r.tau_mean),
                opt(r.tau_sd),
                opt(r.psi),
                u8::from(r.clipped).to_string(),
                "1".to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read runs back, grouping consecutive rows by (model, date).
pub fn read_runs<R: Read>(reader: R) -> Result<Vec<PredictionRun>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(HsdmError::Schema(format!(
            "prediction header must be {}",
            HEADER.join(",")
        )));
    }
    let mut runs: Vec<PredictionRun> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        let bad = |m: String| HsdmError::Row { row: line, message: m };
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .map_err(|_| bad(format!("column {} is not a number", HEADER[k])))
        };
        let optional = |k: usize| -> Result<Option<f64>> {
            if row[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        let record = PredictionRecord {
            index: row[2].parse().map_err(|_| bad("index is not an integer".into()))?,
            time_prev_ms: row[3].parse().map_err(|_| bad("time_prev_ms is not an integer".into()))?,
            log_duration: num(4)?,
            residual: num(5)?,
            log_density: num(6)?,
            mu: optional(7)?,
            sigma: optional(8)?,
            tau_mean: optional(9)?,
            tau_sd: optional(10)?,
            psi: optional(11)?,
            clipped: match &row[12] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("clipped must be 0 or 1".into())),
            },
        };
        if !(record.residual > 0.0 && record.residual < 1.0) {
            return Err(bad(format!("residual {} outside (0, 1)", record.residual)));
        }
        match runs.last_mut() {
            Some(run) if run.model == row[0] && run.date_label == row[1] => run.records.push(record),
            _ => runs.push(PredictionRun::new(&row[0], &row[1], vec![record])),
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize) -> PredictionRecord {
        PredictionRecord {
            index: i,
            time_prev_ms: 34_200_000 + i as i64,
            log_duration: 0.1 * i as f64 + 1.0 / 3.0,
            residual: 0.375,
            log_density: -2.15,
            mu: Some(0.01),
            sigma: Some(0.99),
            tau_mean: None,
            tau_sd: None,
            psi: Some(1.0 / 7.0),
            clipped: i == 1,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let runs = vec![
            PredictionRun::new("HSDM", "d1", vec![record(0), record(1)]),
            PredictionRun::new("eACD", "d1", vec![record(0)]),
        ];
        let mut buf = Vec::new();
        write_runs(&runs, &mut buf).unwrap();
        let back = read_runs(buf.as_slice()).unwrap();
        assert_eq!(back, runs);
        assert!((runs[0].total_loglik() + 4.3).abs() < 1e-12);
    }

    #[test]
    fn bad_rows_are_rejected() {
        assert!(read_runs("a,b\n1,2\n".as_bytes()).is_err());
        let mut buf = Vec::new();
        write_runs(&[PredictionRun::new("m", "d", vec![record(0)])], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(",0.375,", ",1.5,");
        assert!(matches!(read_runs(text.as_bytes()), Err(HsdmError::Row { row: 2, .. })));
    }
}
