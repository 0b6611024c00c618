//! Event-stream records at millisecond resolution and CSV ingestion.
//!
//! A day is stored as an anchor trade (the first row, which opens the day and
//! has no duration) followed by one [`TradeRecord`] per subsequent trade. The
//! duration of a record is the gap to the previous trade, so durations sum to
//! the last clock time minus the anchor time.

use crate::error::{HsdmError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// 09:30 in milliseconds since midnight.
pub const SESSION_OPEN_MS: i64 = 34_200_000;
/// 16:00 in milliseconds since midnight.
pub const SESSION_CLOSE_MS: i64 = 57_600_000;
pub const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    /// Milliseconds since midnight at which the trade occurred.
    pub clock_time_ms: i64,
    /// Milliseconds since the previous trade, at least 1.
    pub duration_ms: u64,
    /// ln(duration_ms) without smoothing.
    pub log_duration: f64,
    /// Book pressure imbalance observed at the trade.
    pub bpi: f64,
}

impl TradeRecord {
    /// Clock time of the previous trade, i.e. the start of this duration.
    pub fn prev_time_ms(&self) -> i64 {
        self.clock_time_ms - self.duration_ms as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaySeries {
    pub date_label: String,
    pub day_start_ms: i64,
    pub day_end_ms: i64,
    pub anchor_time_ms: i64,
    pub anchor_bpi: f64,
    pub records: Vec<TradeRecord>,
}

/// Trading session used to fix the day span. A day whose trades fall outside
/// the session has its span widened to cover them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub open_ms: i64,
    pub close_ms: i64,
}

impl Default for Session {
    fn default() -> Self {
        Self {
            open_ms: SESSION_OPEN_MS,
            close_ms: SESSION_CLOSE_MS,
        }
    }
}

impl DaySeries {
    /// Build a day from (clock time, bpi) pairs. The first pair is the anchor.
    pub fn from_events(
        date_label: impl Into<String>,
        events: &[(i64, f64)],
        session: Session,
    ) -> Result<Self> {
        let date_label = date_label.into();
        let (&(anchor_time_ms, anchor_bpi), rest) = events
            .split_first()
            .ok_or_else(|| HsdmError::precondition("a day needs at least one event"))?;
        let mut records = Vec::with_capacity(rest.len());
        let mut prev = anchor_time_ms;
        for (k, &(t, bpi)) in rest.iter().enumerate() {
            if t <= prev {
                return Err(HsdmError::Row {
                    row: k + 2,
                    message: format!(
                        "non-monotone timestamp {t} after {prev} in day '{date_label}'"
                    ),
                });
            }
            let duration_ms = (t - prev) as u64;
            records.push(TradeRecord {
                clock_time_ms: t,
                duration_ms,
                log_duration: (duration_ms as f64).ln(),
                bpi,
            });
            prev = t;
        }
        if !(0..MS_PER_DAY).contains(&anchor_time_ms) || !(0..MS_PER_DAY).contains(&prev) {
            return Err(HsdmError::Schema(format!(
                "clock times must lie in [0, {MS_PER_DAY}) milliseconds since midnight"
            )));
        }
        Ok(Self {
            date_label,
            day_start_ms: session.open_ms.min(anchor_time_ms),
            day_end_ms: session.close_ms.max(prev),
            anchor_time_ms,
            anchor_bpi,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn durations(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.duration_ms).collect()
    }

    pub fn prev_times_ms(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.prev_time_ms()).collect()
    }

    pub fn last_time_ms(&self) -> i64 {
        self.records
            .last()
            .map_or(self.anchor_time_ms, |r| r.clock_time_ms)
    }

    /// Book pressure imbalance at every trade including the anchor.
    pub fn bpi_with_anchor(&self) -> Vec<f64> {
        std::iter::once(self.anchor_bpi)
            .chain(self.records.iter().map(|r| r.bpi))
            .collect()
    }

    /// Events as (clock time, bpi), anchor first.
    pub fn events(&self) -> Vec<(i64, f64)> {
        std::iter::once((self.anchor_time_ms, self.anchor_bpi))
            .chain(self.records.iter().map(|r| (r.clock_time_ms, r.bpi)))
            .collect()
    }

    /// Check the structural invariants; used on deserialized input.
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.anchor_time_ms;
        for (k, r) in self.records.iter().enumerate() {
            if r.duration_ms < 1 || r.clock_time_ms <= prev {
                return Err(HsdmError::Row {
                    row: k + 2,
                    message: "clock times must be strictly increasing".into(),
                });
            }
            if r.clock_time_ms - prev != r.duration_ms as i64 {
                return Err(HsdmError::Row {
                    row: k + 2,
                    message: "duration differs from the clock-time gap".into(),
                });
            }
            prev = r.clock_time_ms;
        }
        if self.anchor_time_ms < self.day_start_ms || prev > self.day_end_ms {
            return Err(HsdmError::Schema("clock times outside the day span".into()));
        }
        Ok(())
    }
}

/// |BPI| aligned to the records of a day.
pub fn abs_bpi(series: &DaySeries) -> Vec<f64> {
    series.records.iter().map(|r| r.bpi.abs()).collect()
}

/// Column names in an input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub clock_time: String,
    pub bpi: String,
    /// Optional explicit durations; checked against the clock-time gaps.
    pub duration: Option<String>,
    /// Optional day label; rows are grouped into days by this column.
    pub date: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            clock_time: "clock_time_ms".into(),
            bpi: "bpi".into(),
            duration: Some("duration_ms".into()),
            date: Some("date".into()),
        }
    }
}

/// A row that could not be parsed and was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowIssue {
    /// 1-based line number in the file (the header is line 1).
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub days: Vec<DaySeries>,
    pub issues: Vec<RowIssue>,
}

/// Parse event rows from any reader. `default_label` names the day when the
/// file has no date column.
pub fn read_csv<R: Read>(
    reader: R,
    schema: &CsvSchema,
    session: Session,
    default_label: &str,
) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let clock_col = find(&schema.clock_time)
        .ok_or_else(|| HsdmError::Schema(format!("missing column '{}'", schema.clock_time)))?;
    let bpi_col = find(&schema.bpi)
        .ok_or_else(|| HsdmError::Schema(format!("missing column '{}'", schema.bpi)))?;
    let dur_col = schema.duration.as_deref().and_then(find);
    let date_col = schema.date.as_deref().and_then(find);

    // Days keep first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<(usize, i64, f64, Option<u64>)>> = BTreeMap::new();
    let mut issues = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                issues.push(RowIssue {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |c: usize| row.get(c).unwrap_or("");
        let clock = match field(clock_col).parse::<i64>() {
            Ok(v) => v,
            Err(_) => {
                issues.push(RowIssue {
                    line,
                    reason: format!("unparsable clock time '{}'", field(clock_col)),
                });
                continue;
            }
        };
        let bpi = match field(bpi_col).parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                issues.push(RowIssue {
                    line,
                    reason: format!("unparsable bpi '{}'", field(bpi_col)),
                });
                continue;
            }
        };
        let duration = match dur_col.map(field) {
            None | Some("") => None,
            Some(s) => match s.parse::<u64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    issues.push(RowIssue {
                        line,
                        reason: format!("unparsable duration '{s}'"),
                    });
                    continue;
                }
            },
        };
        let label = date_col
            .map(|c| field(c).to_string())
            .unwrap_or_else(|| default_label.to_string());
        if !grouped.contains_key(&label) {
            order.push(label.clone());
        }
        grouped
            .entry(label)
            .or_default()
            .push((line, clock, bpi, duration));
    }

    let mut days = Vec::with_capacity(order.len());
    for label in order {
        let rows = &grouped[&label];
        let mut events = Vec::with_capacity(rows.len());
        let mut prev: Option<i64> = None;
        for &(line, clock, bpi, duration) in rows {
            if let Some(p) = prev {
                if clock <= p {
                    return Err(HsdmError::Row {
                        row: line,
                        message: format!("non-monotone timestamp {clock} after {p}"),
                    });
                }
                if let Some(d) = duration {
                    if d as i64 != clock - p {
                        return Err(HsdmError::Row {
                            row: line,
                            message: format!(
                                "duration {d} does not match clock-time gap {}",
                                clock - p
                            ),
                        });
                    }
                }
            }
            prev = Some(clock);
            events.push((clock, bpi));
        }
        days.push(DaySeries::from_events(label, &events, session)?);
    }
    Ok(Ingested { days, issues })
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema, session: Session) -> Result<Ingested> {
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "day".into());
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), schema, session, &label)
}

/// Emit days in the ingestion format. The anchor row has an empty duration.
pub fn write_csv<W: Write>(days: &[DaySeries], writer: W, with_date: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if with_date {
        w.write_record(["date", "clock_time_ms", "bpi", "duration_ms"])?;
    } else {
        w.write_record(["clock_time_ms", "bpi", "duration_ms"])?;
    }
    for day in days {
        let mut emit = |t: i64, bpi: f64, dur: Option<u64>| -> Result<()> {
            let t = t.to_string();
            let bpi = bpi.to_string();
            let dur = dur.map(|d| d.to_string()).unwrap_or_default();
            if with_date {
                w.write_record([day.date_label.as_str(), &t, &bpi, &dur])?;
            } else {
                w.write_record([t.as_str(), &bpi, &dur])?;
            }
            Ok(())
        };
        emit(day.anchor_time_ms, day.anchor_bpi, None)?;
        for r in &day.records {
            emit(r.clock_time_ms, r.bpi, Some(r.duration_ms))?;
        }
    }
    w.flush()?;
    Ok(())
}
