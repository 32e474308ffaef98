//! Calibrated empirical equations: export after training, and standalone
//! episode prediction with overlapping-window intervals.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{DateTime, Utc};

use crate::datapipe::{scour_series, ERefMode, TimeSeriesFrame};
use crate::physics::{
    constrain, evaluate, BridgeAttributes, EquationVariant, LatentParams, P1Mode, PhysicsError,
    PhysicsParams,
};

#[derive(Debug, thiserror::Error)]
pub enum CeeError {
    #[error("a pure run has no calibrated equation")]
    NothingToExport,
    #[error("equation record line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("prediction and observation do not overlap in {0:?}")]
    EmptyOverlap(Range<usize>),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const EQUATION_COLUMNS: [&str; 8] = [
    "bridge",
    "variant",
    "p1",
    "p2",
    "p3",
    "t_l_hours",
    "alpha",
    "beta",
];
pub const PREDICTION_COLUMNS: [&str; 5] = ["timestamp", "mean_m", "lo95_m", "hi95_m", "count"];
const NA: &str = "N/A";
/// Normal quantile for a two-sided 95% interval.
pub const Z95: f64 = 1.96;
/// Shortest scouring run kept as an episode (hours).
pub const MIN_EPISODE_HOURS: usize = 2;

/// Coefficients of one calibrated equation; `None` prints as N/A.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedEquation {
    /// Bridge id, or `All` for a general model.
    pub bridge: String,
    pub variant: EquationVariant,
    pub p1: f64,
    pub p2: Option<f64>,
    pub p3: Option<f64>,
    pub t_l: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl CalibratedEquation {
    /// Record for the values a variant calibrates.
    pub fn from_params(
        bridge: impl Into<String>,
        variant: EquationVariant,
        c: &PhysicsParams,
    ) -> Self {
        let (td, gtd) = (
            variant == EquationVariant::Td,
            variant == EquationVariant::Gtd,
        );
        Self {
            bridge: bridge.into(),
            variant,
            p1: c.p1,
            p2: (!gtd).then_some(c.p2),
            p3: td.then_some(c.p3),
            t_l: (td || gtd).then_some(c.t_l),
            alpha: gtd.then_some(c.alpha),
            beta: gtd.then_some(c.beta),
        }
    }

    /// Coefficients for evaluation; absent values take their neutral setting.
    pub fn params(&self) -> PhysicsParams {
        PhysicsParams {
            p1: self.p1,
            p2: self.p2.unwrap_or(1.0),
            p3: self.p3.unwrap_or(1.0),
            t_l: self.t_l.unwrap_or(1.0),
            alpha: self.alpha.unwrap_or(1.0),
            beta: self.beta.unwrap_or(1.0),
        }
    }

    fn record(&self) -> [String; 8] {
        let f = |v: Option<f64>| v.map_or(NA.to_string(), |x| format!("{x:?}"));
        [
            self.bridge.clone(),
            self.variant.label().to_string(),
            f(Some(self.p1)),
            f(self.p2),
            f(self.p3),
            f(self.t_l),
            f(self.alpha),
            f(self.beta),
        ]
    }
}

/// Constrained coefficients of trained latent values. `None` (a pure run)
/// has nothing to export.
pub fn export_equation(
    bridge: impl Into<String>,
    latent: Option<&LatentParams>,
    m_in: usize,
    m_out: usize,
    p1_mode: P1Mode,
) -> Result<CalibratedEquation, CeeError> {
    let latent = latent.ok_or(CeeError::NothingToExport)?;
    let c = constrain(latent, m_in, m_out, p1_mode);
    Ok(CalibratedEquation::from_params(bridge, latent.variant, &c))
}

pub fn write_equations(eqs: &[CalibratedEquation], writer: impl Write) -> Result<(), CeeError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EQUATION_COLUMNS)?;
    for e in eqs {
        w.write_record(e.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_equations(reader: impl Read) -> Result<Vec<CalibratedEquation>, CeeError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().map(str::trim).ne(EQUATION_COLUMNS) {
        return Err(CeeError::Parse {
            line: 1,
            detail: format!("expected header {}", EQUATION_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CeeError::Parse {
            line,
            detail: e.to_string(),
        })?;
        let field = |k: usize| rec.get(k).unwrap_or("").trim();
        let opt = |k: usize| -> Result<Option<f64>, CeeError> {
            match field(k) {
                NA => Ok(None),
                s => s.parse().map(Some).map_err(|_| CeeError::Parse {
                    line,
                    detail: format!("{}: not a number or N/A: {s:?}", EQUATION_COLUMNS[k]),
                }),
            }
        };
        let variant = EquationVariant::from_label(field(1)).ok_or_else(|| CeeError::Parse {
            line,
            detail: format!("unknown variant {:?}", field(1)),
        })?;
        let p1 = opt(2)?.ok_or_else(|| CeeError::Parse {
            line,
            detail: "p1 is required".into(),
        })?;
        let eq = CalibratedEquation {
            bridge: field(0).to_string(),
            variant,
            p1,
            p2: opt(3)?,
            p3: opt(4)?,
            t_l: opt(5)?,
            alpha: opt(6)?,
            beta: opt(7)?,
        };
        let needs: &[(&str, Option<f64>)] = match variant {
            EquationVariant::Hec18 => &[("p2", eq.p2)],
            EquationVariant::Td => &[("p2", eq.p2), ("p3", eq.p3), ("t_l_hours", eq.t_l)],
            EquationVariant::Gtd => &[
                ("t_l_hours", eq.t_l),
                ("alpha", eq.alpha),
                ("beta", eq.beta),
            ],
        };
        if let Some((name, _)) = needs.iter().find(|(_, v)| v.is_none()) {
            return Err(CeeError::Parse {
                line,
                detail: format!("{} requires {name}", variant.label()),
            });
        }
        out.push(eq);
    }
    Ok(out)
}

/// Maximal runs of positive scour at least `min_len` long; missing values
/// end a run.
pub fn episodes_in(scour: &[Option<f64>], min_len: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, s) in scour.iter().enumerate() {
        match (s.is_some_and(|v| v > 0.0), start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                if i - s0 >= min_len {
                    out.push(s0..i);
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        if scour.len() - s0 >= min_len {
            out.push(s0..scour.len());
        }
    }
    out
}

/// Scouring episodes of a synchronized frame under a reference mode.
pub fn detect_episodes(
    frame: &TimeSeriesFrame,
    spans: &[Range<usize>],
    mode: ERefMode,
    as_built_elevation: f64,
    min_len: usize,
) -> Vec<Range<usize>> {
    let scour = scour_series(frame, spans, mode, as_built_elevation);
    episodes_in(&scour, min_len)
}

/// One evaluation window: covariates over `len` timesteps from `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct CeeWindow {
    /// Frame index of the window's first timestep.
    pub start: usize,
    pub e_ref: f64,
    pub y1: Vec<f64>,
    pub q: Vec<f64>,
}

/// Stride-spaced windows of `len` hours inside `spans` that overlap any of
/// `episodes`. Offsets are counted from each span start.
pub fn episode_windows(
    frame: &TimeSeriesFrame,
    spans: &[Range<usize>],
    episodes: &[Range<usize>],
    len: usize,
    stride: usize,
    mode: ERefMode,
    as_built_elevation: f64,
) -> Vec<CeeWindow> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    for span in spans {
        if span.len() < len || span.end > frame.len() {
            continue;
        }
        for s in (span.start..=span.end - len).step_by(stride.max(1)) {
            let w = s..s + len;
            if !episodes.iter().any(|e| e.start < w.end && w.start < e.end) {
                continue;
            }
            let cell = |c: &[Option<f64>], i: usize| c[i].unwrap_or(f64::NAN);
            let e_ref = match mode {
                ERefMode::AsBuilt => as_built_elevation,
                ERefMode::FirstStep => cell(&frame.e_bed, s),
            };
            out.push(CeeWindow {
                start: s,
                e_ref,
                y1: w.clone().map(|i| cell(&frame.e_stage, i) - e_ref).collect(),
                q: w.map(|i| cell(&frame.q, i)).collect(),
            });
        }
    }
    out
}

/// Aggregated prediction at one frame index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionPoint {
    pub index: usize,
    /// Scour depth below the as-built bed (m).
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub count: usize,
}

/// Evaluates the equation over every window and aggregates the overlapping
/// predictions per timestep.
///
/// Window values are shifted to the as-built datum by `as_built − e_ref`.
/// The time-dependent forms take `y1_max` and `q_max` from each window's
/// last timestep and restart at t = 0 on its first. Entries whose
/// covariates fall outside the equation's domain contribute nothing.
pub fn cee_predict(
    eq: &CalibratedEquation,
    bridge: &BridgeAttributes,
    windows: &[CeeWindow],
) -> Result<Vec<PredictionPoint>, CeeError> {
    let params = eq.params();
    let mut values: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for w in windows {
        let n = w.y1.len().min(w.q.len());
        if n == 0 {
            continue;
        }
        let offset = bridge.as_built_elevation - w.e_ref;
        for k in 0..n {
            let (y1, q) = match eq.variant {
                EquationVariant::Hec18 => (w.y1[k], w.q[k]),
                _ => (w.y1[n - 1], w.q[n - 1]),
            };
            match evaluate(eq.variant, k as f64, y1, q, &params, bridge) {
                Ok(v) if v.is_finite() && offset.is_finite() => {
                    values.entry(w.start + k).or_default().push(offset + v)
                }
                Ok(_) | Err(PhysicsError::Domain { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(values
        .into_iter()
        .map(|(index, mut v)| {
            // sorted summation keeps the result independent of window order
            v.sort_by(f64::total_cmp);
            let count = v.len();
            let mean = v.iter().sum::<f64>() / count as f64;
            let half = if count > 1 {
                let var =
                    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (count - 1) as f64;
                Z95 * var.sqrt() / (count as f64).sqrt()
            } else {
                0.0
            };
            PredictionPoint {
                index,
                mean,
                lo95: mean - half,
                hi95: mean + half,
                count,
            }
        })
        .collect())
}

/// RMSE of the mean prediction against observed scour inside `window`.
pub fn episode_rmse(
    prediction: &[PredictionPoint],
    observed: &[Option<f64>],
    window: Range<usize>,
) -> Result<f64, CeeError> {
    let mut sse = 0.0;
    let mut n = 0usize;
    for p in prediction.iter().filter(|p| window.contains(&p.index)) {
        if let Some(Some(o)) = observed.get(p.index) {
            sse += (p.mean - o) * (p.mean - o);
            n += 1;
        }
    }
    if n == 0 {
        return Err(CeeError::EmptyOverlap(window));
    }
    Ok((sse / n as f64).sqrt())
}

pub fn write_predictions(
    points: &[PredictionPoint],
    timestamps: &[DateTime<Utc>],
    writer: impl Write,
) -> Result<(), CeeError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PREDICTION_COLUMNS)?;
    for p in points {
        let t = timestamps
            .get(p.index)
            .map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
            .unwrap_or_default();
        w.write_record([
            t,
            format!("{:?}", p.mean),
            format!("{:?}", p.lo95),
            format!("{:?}", p.hi95),
            p.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
