use std::io::Write;
use std::ops::Range;

use chrono::{DateTime, TimeDelta, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TimeSeriesFrame};
use crate::physics::{flow_depth, scour_depth};

/// Input channels per timestep: scour depth, flow depth, discharge.
pub const N_FEATURES: usize = 3;

/// Reference elevation used for depths within a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ERefMode {
    /// The bridge's as-built bed elevation.
    #[default]
    AsBuilt,
    /// The bed elevation at the window's first timestep.
    FirstStep,
}

impl ERefMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::AsBuilt => "as_built",
            Self::FirstStep => "first_step",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "as_built" => Some(Self::AsBuilt),
            "first_step" => Some(Self::FirstStep),
            _ => None,
        }
    }
}

/// One training sample: `m_in` input rows and `m_out` target scour depths.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    pub bridge_id: String,
    pub start: DateTime<Utc>,
    /// Unscaled inputs `[m_in, N_FEATURES]`, row-major by timestep.
    pub x: Vec<f64>,
    /// Target scour depths (m).
    pub y: Vec<f64>,
    pub e_ref: f64,
    /// Flow depth over the output window (m).
    pub y1_out: Vec<f64>,
    /// Discharge over the output window (m³/s).
    pub q_out: Vec<f64>,
}

impl SequencePair {
    pub fn m_in(&self) -> usize {
        self.x.len() / N_FEATURES
    }

    pub fn m_out(&self) -> usize {
        self.y.len()
    }
}

/// Stride-1 windows of length `m_in + m_out` inside each span.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    spans: &[Range<usize>],
    m_in: usize,
    m_out: usize,
    mode: ERefMode,
    as_built_elevation: f64,
) -> Result<Vec<SequencePair>, DataError> {
    if m_in == 0 || m_out == 0 {
        return Err(DataError::Invalid("m_in and m_out must be positive".into()));
    }
    let total = m_in + m_out;
    let mut pairs = Vec::new();
    for span in spans {
        if span.end > frame.len() {
            return Err(DataError::Invalid(format!(
                "span {span:?} exceeds frame length {}",
                frame.len()
            )));
        }
        let value = |col: &[Option<f64>], i: usize| {
            col[i].ok_or_else(|| {
                DataError::Invalid(format!("missing value at row {i} inside span {span:?}"))
            })
        };
        if span.len() < total {
            continue;
        }
        for s in span.start..=span.end - total {
            let e_ref = match mode {
                ERefMode::AsBuilt => as_built_elevation,
                ERefMode::FirstStep => value(&frame.e_bed, s)?,
            };
            let mut x = Vec::with_capacity(m_in * N_FEATURES);
            for i in s..s + m_in {
                x.push(scour_depth(e_ref, value(&frame.e_bed, i)?));
                x.push(flow_depth(value(&frame.e_stage, i)?, e_ref));
                x.push(value(&frame.q, i)?);
            }
            let mut y = Vec::with_capacity(m_out);
            let mut y1_out = Vec::with_capacity(m_out);
            let mut q_out = Vec::with_capacity(m_out);
            for i in s + m_in..s + total {
                y.push(scour_depth(e_ref, value(&frame.e_bed, i)?));
                y1_out.push(flow_depth(value(&frame.e_stage, i)?, e_ref));
                q_out.push(value(&frame.q, i)?);
            }
            pairs.push(SequencePair {
                bridge_id: frame.bridge_id.clone(),
                start: frame.timestamps[s],
                x,
                y,
                e_ref,
                y1_out,
                q_out,
            });
        }
    }
    Ok(pairs)
}

/// Scour depth per row. `AsBuilt` measures every observed row against the
/// as-built bed; `FirstStep` measures rows inside a span against the bed at
/// the span's first row. Other rows are `None`.
pub fn scour_series(
    frame: &TimeSeriesFrame,
    spans: &[Range<usize>],
    mode: ERefMode,
    as_built_elevation: f64,
) -> Vec<Option<f64>> {
    match mode {
        ERefMode::AsBuilt => frame
            .e_bed
            .iter()
            .map(|b| b.map(|b| scour_depth(as_built_elevation, b)))
            .collect(),
        ERefMode::FirstStep => {
            let mut out = vec![None; frame.len()];
            for span in spans.iter().filter(|s| s.end <= frame.len()) {
                let Some(Some(e_ref)) = frame.e_bed.get(span.start).copied() else {
                    continue;
                };
                for i in span.clone() {
                    out[i] = frame.e_bed[i].map(|b| scour_depth(e_ref, b));
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<SequencePair>,
    pub val: Vec<SequencePair>,
    pub test: Vec<SequencePair>,
}

/// Sizes `(train, val, test)` for `n` sequences.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize), DataError> {
    if n < 5 {
        return Err(DataError::TooFewSequences(n));
    }
    let test = n / 5;
    let rest = n - test;
    let train = (3 * rest + 2) / 4;
    Ok((train, rest - train, test))
}

/// Last fifth by start time goes to test; the rest is shuffled with `seed`
/// and divided 3:1 into train and validation.
pub fn split(mut pairs: Vec<SequencePair>, seed: u64) -> Result<Split, DataError> {
    let (n_train, _, n_test) = split_sizes(pairs.len())?;
    pairs.sort_by_key(|p| p.start);
    let test = pairs.split_off(pairs.len() - n_test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let val = pairs.split_off(n_train);
    Ok(Split {
        train: pairs,
        val,
        test,
    })
}

/// Per-feature standardization fitted on training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

pub fn fit_scaler(train: &[SequencePair]) -> Result<Scaler, DataError> {
    let mut count = 0usize;
    let mut sum = [0.0; N_FEATURES];
    for p in train {
        for row in p.x.chunks_exact(N_FEATURES) {
            for k in 0..N_FEATURES {
                sum[k] += row[k];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(DataError::Invalid(
            "cannot fit a scaler without training inputs".into(),
        ));
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0; N_FEATURES];
    for p in train {
        for row in p.x.chunks_exact(N_FEATURES) {
            for k in 0..N_FEATURES {
                sq[k] += (row[k] - mean[k]).powi(2);
            }
        }
    }
    let std = sq.map(|s| (s / count as f64).sqrt());
    for (k, s) in std.iter().enumerate() {
        // relative test so a constant series with rounding noise still fails
        if !(*s > 1e-12 * mean[k].abs().max(1.0)) {
            return Err(DataError::ZeroVariance(k));
        }
    }
    Ok(Scaler { mean, std })
}

impl Scaler {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % N_FEATURES]) / self.std[i % N_FEATURES])
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % N_FEATURES] + self.mean[i % N_FEATURES])
            .collect()
    }

    /// Maps a scaled scour-depth value back to meters.
    pub fn unscale_scour(&self, v: f64) -> f64 {
        v * self.std[0] + self.mean[0]
    }
}

/// One row of the sequence manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub bridge: String,
    pub kind: &'static str,
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
    pub sequences: usize,
}

impl ManifestRow {
    /// Train, validation and test rows; `end` is the last hour covered by
    /// any window of the set.
    pub fn from_split(bridge: &str, split: &Split, window_len: usize) -> Vec<Self> {
        let row = |kind, set: &[SequencePair]| {
            let start = set.iter().map(|p| p.start).min();
            let end = set
                .iter()
                .map(|p| p.start)
                .max()
                .map(|s| s + TimeDelta::hours(window_len as i64 - 1));
            Self {
                bridge: bridge.to_string(),
                kind,
                start,
                end,
                sequences: set.len(),
            }
        };
        vec![
            row("train", &split.train),
            row("validation", &split.val),
            row("test", &split.test),
        ]
    }
}

pub fn write_manifest(rows: &[ManifestRow], writer: impl Write) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bridge", "type", "start", "end", "sequences"])?;
    let fmt = |t: Option<DateTime<Utc>>| {
        t.map(|t| t.format("%Y-%m-%d %H:%M").to_string())
            .unwrap_or_default()
    };
    for r in rows {
        w.write_record([
            r.bridge.clone(),
            r.kind.to_string(),
            fmt(r.start),
            fmt(r.end),
            r.sequences.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
