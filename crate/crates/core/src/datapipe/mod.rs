//! Sensor ingestion and cleaning, sliding-window sequence construction,
//! temporal splitting and feature scaling.
//!
//! Stages run in a fixed order: ingest, hourly aggregation, outlier removal,
//! smoothing, imputation, synchronization, windowing, split, scaling.

mod window;

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, DurationRound, TimeDelta, Utc};

pub use window::{
    fit_scaler, make_windows, scour_series, split, split_sizes, write_manifest, ERefMode,
    ManifestRow, Scaler, SequencePair, Split, N_FEATURES,
};

pub const COLUMNS: [&str; 4] = ["timestamp", "e_bed_m", "e_stage_m", "q_m3s"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("input is empty")]
    Empty,
    #[error("line {line}: {detail}")]
    Malformed { line: u64, detail: String },
    #[error("line {line}: timestamp {timestamp} does not increase")]
    NonMonotone { line: u64, timestamp: String },
    #[error("need at least 5 sequences to split, got {0}")]
    TooFewSequences(usize),
    #[error("feature {0} has zero variance in the training inputs")]
    ZeroVariance(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Hourly (after aggregation) record of bed elevation, stage and discharge
/// for one bridge; `None` marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub bridge_id: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub e_bed: Vec<Option<f64>>,
    pub e_stage: Vec<Option<f64>>,
    pub q: Vec<Option<f64>>,
}

impl TimeSeriesFrame {
    pub fn new(bridge_id: impl Into<String>) -> Self {
        Self {
            bridge_id: bridge_id.into(),
            timestamps: Vec::new(),
            e_bed: Vec::new(),
            e_stage: Vec::new(),
            q: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn push(
        &mut self,
        t: DateTime<Utc>,
        e_bed: Option<f64>,
        e_stage: Option<f64>,
        q: Option<f64>,
    ) {
        self.timestamps.push(t);
        self.e_bed.push(e_bed);
        self.e_stage.push(e_stage);
        self.q.push(q);
    }

    fn columns_mut(&mut self) -> [&mut Vec<Option<f64>>; 3] {
        [&mut self.e_bed, &mut self.e_stage, &mut self.q]
    }

    /// Applies `f` to each feature column independently.
    pub fn map_columns(&self, f: impl Fn(&[Option<f64>]) -> Vec<Option<f64>>) -> Self {
        let mut out = self.clone();
        for col in out.columns_mut() {
            *col = f(col);
        }
        out
    }

    /// Writes the frame in the ingest schema. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(COLUMNS)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for i in 0..self.len() {
            w.write_record([
                self.timestamps[i].format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                fmt(self.e_bed[i]),
                fmt(self.e_stage[i]),
                fmt(self.q[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

/// Reads a sensor file from disk; the bridge id is the file stem.
pub fn ingest(path: impl AsRef<Path>) -> Result<TimeSeriesFrame, DataError> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("bridge")
        .to_string();
    ingest_reader(std::fs::File::open(path)?, id)
}

/// Parses `timestamp,e_bed_m,e_stage_m,q_m3s`; empty fields are missing
/// values. Timestamps must strictly increase.
pub fn ingest_reader(
    reader: impl Read,
    bridge_id: impl Into<String>,
) -> Result<TimeSeriesFrame, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Empty);
    }
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }
    let mut frame = TimeSeriesFrame::new(bridge_id);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DataError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DataError::Malformed {
                line,
                detail: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let ts = &rec[idx[0]];
        let t = parse_timestamp(ts).ok_or_else(|| DataError::Malformed {
            line,
            detail: format!("bad timestamp {ts:?}"),
        })?;
        if frame.timestamps.last().is_some_and(|&prev| t <= prev) {
            return Err(DataError::NonMonotone {
                line,
                timestamp: ts.to_string(),
            });
        }
        let mut vals = [None; 3];
        for (k, v) in vals.iter_mut().enumerate() {
            let field = &rec[idx[k + 1]];
            if field.is_empty() {
                continue;
            }
            let x: f64 = field.parse().map_err(|_| DataError::Malformed {
                line,
                detail: format!("{}: cannot parse {field:?}", COLUMNS[k + 1]),
            })?;
            if !x.is_finite() {
                return Err(DataError::Malformed {
                    line,
                    detail: format!("{}: value is not finite", COLUMNS[k + 1]),
                });
            }
            *v = Some(x);
        }
        frame.push(t, vals[0], vals[1], vals[2]);
    }
    if frame.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(frame)
}

/// One row per hour from the first to the last sample's hour; each value is
/// the mean of that hour's non-missing samples.
pub fn aggregate_hourly(frame: &TimeSeriesFrame) -> TimeSeriesFrame {
    let mut out = TimeSeriesFrame::new(frame.bridge_id.clone());
    if frame.is_empty() {
        return out;
    }
    let hour = TimeDelta::hours(1);
    let bucket = |t: DateTime<Utc>| t.duration_trunc(hour).expect("hour truncation is in range");
    let first = bucket(frame.timestamps[0]);
    let last = bucket(*frame.timestamps.last().expect("non-empty"));
    let n = ((last - first).num_hours() + 1) as usize;
    let mut sums = vec![[0.0f64; 3]; n];
    let mut counts = vec![[0usize; 3]; n];
    for i in 0..frame.len() {
        let b = (bucket(frame.timestamps[i]) - first).num_hours() as usize;
        for (k, col) in [&frame.e_bed, &frame.e_stage, &frame.q]
            .into_iter()
            .enumerate()
        {
            if let Some(v) = col[i] {
                sums[b][k] += v;
                counts[b][k] += 1;
            }
        }
    }
    for b in 0..n {
        let mean = |k: usize| (counts[b][k] > 0).then(|| sums[b][k] / counts[b][k] as f64);
        out.push(first + hour * b as i32, mean(0), mean(1), mean(2));
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Consistency constant turning a MAD into a normal standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

/// Rolling median/MAD filter for one column. The window is centered and
/// shifted inward at the edges so it always spans `window` rows; fewer than
/// three observed values in a window leave the point alone.
pub fn remove_outliers_series(series: &[Option<f64>], window: usize, k: f64) -> Vec<Option<f64>> {
    let n = series.len();
    if window == 0 || n < window {
        return series.to_vec();
    }
    let half = window / 2;
    let mut out = series.to_vec();
    let mut buf = Vec::with_capacity(window);
    let mut dev = Vec::with_capacity(window);
    for i in 0..n {
        let Some(x) = series[i] else { continue };
        let start = i.saturating_sub(half).min(n - window);
        buf.clear();
        buf.extend(series[start..start + window].iter().flatten());
        if buf.len() < 3 {
            continue;
        }
        let med = median(&mut buf);
        dev.clear();
        dev.extend(buf.iter().map(|v| (v - med).abs()));
        let mad = median(&mut dev);
        if (x - med).abs() > k * MAD_SCALE * mad {
            out[i] = None;
        }
    }
    out
}

pub fn remove_outliers(frame: &TimeSeriesFrame, window: usize, k: f64) -> TimeSeriesFrame {
    frame.map_columns(|c| remove_outliers_series(c, window, k))
}

/// Centered moving average over observed values; missing stays missing.
pub fn smooth_series(series: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let n = series.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            series[i]?;
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let (sum, count) = series[lo..hi]
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            Some(sum / count as f64)
        })
        .collect()
}

pub fn smooth(frame: &TimeSeriesFrame, window: usize) -> TimeSeriesFrame {
    frame.map_columns(|c| smooth_series(c, window))
}

/// Linear interpolation across interior gaps of at most `max_gap` rows.
pub fn impute_series(series: &[Option<f64>], max_gap: usize) -> Vec<Option<f64>> {
    let mut out = series.to_vec();
    let mut last: Option<usize> = None;
    for i in 0..series.len() {
        let Some(v) = series[i] else { continue };
        if let Some(j) = last {
            let gap = i - j - 1;
            if gap > 0 && gap <= max_gap {
                let a = series[j].expect("observed");
                for (s, slot) in out[j + 1..i].iter_mut().enumerate() {
                    let w = (s + 1) as f64 / (i - j) as f64;
                    *slot = Some(a + (v - a) * w);
                }
            }
        }
        last = Some(i);
    }
    out
}

pub fn impute_linear(frame: &TimeSeriesFrame, max_gap: usize) -> TimeSeriesFrame {
    frame.map_columns(|c| impute_series(c, max_gap))
}

/// Maximal row ranges where all three features are observed.
pub fn synchronize(frame: &TimeSeriesFrame) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for i in 0..=frame.len() {
        let usable = i < frame.len()
            && frame.e_bed[i].is_some()
            && frame.e_stage[i].is_some()
            && frame.q[i].is_some();
        match (usable, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    spans
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub outlier_window: usize,
    /// `None` disables outlier removal.
    pub outlier_k: Option<f64>,
    /// Values below 2 disable smoothing.
    pub smooth_window: usize,
    pub max_gap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            outlier_window: 25,
            outlier_k: Some(5.0),
            smooth_window: 5,
            max_gap: 6,
        }
    }
}

/// Cleaned hourly frame and its usable spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Cleaned {
    pub frame: TimeSeriesFrame,
    pub spans: Vec<Range<usize>>,
    /// Values nulled by the outlier filter, over all three features.
    pub outliers: usize,
}

pub fn clean(raw: &TimeSeriesFrame, cfg: &PipelineConfig) -> Cleaned {
    let hourly = aggregate_hourly(raw);
    let filtered = match cfg.outlier_k {
        Some(k) => remove_outliers(&hourly, cfg.outlier_window, k),
        None => hourly.clone(),
    };
    let count = |f: &TimeSeriesFrame| {
        [&f.e_bed, &f.e_stage, &f.q]
            .iter()
            .map(|c| c.iter().flatten().count())
            .sum::<usize>()
    };
    let outliers = count(&hourly) - count(&filtered);
    let smoothed = if cfg.smooth_window >= 2 {
        smooth(&filtered, cfg.smooth_window)
    } else {
        filtered
    };
    let frame = impute_linear(&smoothed, cfg.max_gap);
    let spans = synchronize(&frame);
    Cleaned {
        frame,
        spans,
        outliers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn impute_bracketing_only() {
        assert_eq!(
            impute_series(&[Some(1.0), None, Some(3.0)], 6),
            vec![Some(1.0), Some(2.0), Some(3.0)]
        );
        assert_eq!(
            impute_series(&[None, Some(1.0), None], 6),
            vec![None, Some(1.0), None]
        );
    }
}
