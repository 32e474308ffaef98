//! Synthetic live-bed scour records with known equation parameters.
//!
//! Discharge is a base flow plus triangular flood pulses, flow depth follows
//! a fixed rating curve, and the bed erodes during each flood along the
//! time-dependent equation evaluated at the flood peak. Between floods the
//! scour decays exponentially back to the as-built bed.

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datapipe::TimeSeriesFrame;
use crate::physics::{growth, spinn_hec18, BridgeAttributes, PhysicsError, PhysicsParams};

/// Rating curve `y1 = RATING_COEFFICIENT · q^RATING_EXPONENT`; 0.5–4 m of
/// flow depth over 10–1000 m³/s.
pub const RATING_COEFFICIENT: f64 = 0.25;
pub const RATING_EXPONENT: f64 = 0.4;
/// Refill time constant between floods (hours).
pub const REFILL_HOURS: f64 = 48.0;

pub fn rating(q: f64) -> f64 {
    RATING_COEFFICIENT * q.max(0.0).powf(RATING_EXPONENT)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flood {
    /// Hour index of the pulse start.
    pub start: usize,
    /// Pulse length in hours; discharge peaks at `start + duration / 2`.
    pub duration: usize,
    pub peak_q: f64,
}

impl Flood {
    pub fn peak_hour(&self) -> usize {
        self.start + self.duration / 2
    }

    pub fn end(&self) -> usize {
        self.start + self.duration
    }

    /// Excess discharge above base flow at hour `h`.
    fn excess(&self, h: usize, base: f64) -> f64 {
        if h < self.start || h > self.end() || self.duration == 0 {
            return 0.0;
        }
        let peak = self.peak_hour();
        let frac = if h <= peak {
            if peak == self.start {
                1.0
            } else {
                (h - self.start) as f64 / (peak - self.start) as f64
            }
        } else {
            (self.end() - h) as f64 / (self.end() - peak) as f64
        };
        frac * (self.peak_q - base).max(0.0)
    }
}

/// Gaussian sensor noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Noise {
    pub e_bed: f64,
    pub e_stage: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub bridge: BridgeAttributes,
    /// True time-dependent equation coefficients (p1, p2, p3, T_L).
    pub truth: PhysicsParams,
    pub floods: Vec<Flood>,
    pub base_flow: f64,
    pub noise: Noise,
    pub seed: u64,
    pub start: DateTime<Utc>,
}

impl SynthSpec {
    /// A reference bridge with floods every 600 h, peaks drawn from
    /// 300–900 m³/s, and 0.02 m / 0.02 m / 0.5 m³/s sensor noise.
    pub fn standard(hours: usize, seed: u64) -> Self {
        let bridge = BridgeAttributes::new("synth", 100.0, 60.0, 1.5, 6.0, 0.0, 1.1, 1.0, 1.1)
            .expect("valid reference bridge");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let floods = (0..)
            .map(|k| 200 + 600 * k)
            .take_while(|&s| s + 120 < hours)
            .map(|start| Flood {
                start,
                duration: 120,
                peak_q: rng.random_range(300.0..900.0),
            })
            .collect();
        Self {
            bridge,
            truth: PhysicsParams {
                p1: 0.5,
                p2: 0.9,
                p3: 0.9,
                t_l: 24.0,
                alpha: 1.0,
                beta: 1.0,
            },
            floods,
            base_flow: 20.0,
            noise: Noise {
                e_bed: 0.02,
                e_stage: 0.02,
                q: 0.5,
            },
            seed,
            start: Utc
                .with_ymd_and_hms(2020, 1, 1, 0, 0, 0)
                .single()
                .expect("valid date"),
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        self.bridge.validate()?;
        let t = &self.truth;
        let bad = |d: String| PhysicsError::Domain {
            op: "synth",
            detail: d,
        };
        if !(t.p1.abs() < 1.0 && t.p2 > 0.0 && t.p2 < 1.0 && t.p3.abs() < 1.0 && t.t_l > 0.0) {
            return Err(bad(format!(
                "true parameters outside the constrained ranges: {t:?}"
            )));
        }
        if !(self.base_flow > 0.0) {
            return Err(bad("base flow must be positive".into()));
        }
        for f in &self.floods {
            if !(f.peak_q > self.base_flow) || f.duration == 0 {
                return Err(bad(format!(
                    "flood {f:?} must exceed the base flow and have a duration"
                )));
            }
        }
        Ok(())
    }

    /// Equilibrium scour for a discharge under the true coefficients.
    pub fn asymptote(&self, q: f64) -> Result<f64, PhysicsError> {
        spinn_hec18(rating(q), q, &self.truth, &self.bridge)
    }
}

/// Noise-free signals behind a generated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Scour depth below the as-built bed (m).
    pub scour: Vec<f64>,
    pub y1: Vec<f64>,
    pub q: Vec<f64>,
}

/// Generated frame plus its noise-free signals.
pub fn generate_with_truth(
    spec: &SynthSpec,
    hours: usize,
) -> Result<(TimeSeriesFrame, SynthTruth), PhysicsError> {
    spec.validate()?;
    if hours == 0 {
        return Err(PhysicsError::Domain {
            op: "synth",
            detail: "hours must be at least 1".into(),
        });
    }
    let q: Vec<f64> = (0..hours)
        .map(|h| {
            spec.base_flow
                + spec
                    .floods
                    .iter()
                    .map(|f| f.excess(h, spec.base_flow))
                    .sum::<f64>()
        })
        .collect();
    let y1: Vec<f64> = q.iter().map(|&q| rating(q)).collect();

    let mut floods = spec.floods.clone();
    floods.sort_by_key(|f| f.start);
    let mut scour = vec![0.0; hours];
    let mut current = 0.0;
    let mut anchor = (0usize, 0.0f64);
    let mut active: Option<(Flood, f64, f64)> = None;
    let rate = spec.truth.p3 / spec.truth.t_l;
    for (h, s) in scour.iter_mut().enumerate() {
        if let Some(f) = floods.iter().find(|f| f.start == h) {
            let target = spec.asymptote(f.peak_q)?;
            active = Some((*f, current, target));
        }
        match active {
            Some((f, s0, target)) if h <= f.end() => {
                let tau = (h - f.start) as f64;
                current = if target > s0 {
                    s0 + (target - s0) * growth(tau, rate)
                } else {
                    s0
                };
                if h == f.end() {
                    active = None;
                    anchor = (h, current);
                }
            }
            _ => {
                let dt = (h - anchor.0) as f64;
                current = anchor.1 * (-dt / REFILL_HOURS).exp();
            }
        }
        *s = current;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = |std: f64, rng: &mut ChaCha8Rng| {
        if std > 0.0 {
            Normal::new(0.0, std).expect("positive std").sample(rng)
        } else {
            0.0
        }
    };
    let datum = spec.bridge.as_built_elevation;
    let mut frame = TimeSeriesFrame::new(spec.bridge.id.clone());
    for h in 0..hours {
        let t = spec.start + TimeDelta::hours(h as i64);
        let e_bed = datum - scour[h] + noise(spec.noise.e_bed, &mut rng);
        let e_stage = datum + y1[h] + noise(spec.noise.e_stage, &mut rng);
        let qv = (q[h] + noise(spec.noise.q, &mut rng)).max(0.0);
        frame.push(t, Some(e_bed), Some(e_stage), Some(qv));
    }
    Ok((frame, SynthTruth { scour, y1, q }))
}

pub fn generate(spec: &SynthSpec, hours: usize) -> Result<TimeSeriesFrame, PhysicsError> {
    generate_with_truth(spec, hours).map(|(f, _)| f)
}
