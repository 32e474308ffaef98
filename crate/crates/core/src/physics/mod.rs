//! Pier-scour hydraulics: the HEC-18 live-bed equation, its calibrated and
//! time-dependent forms, latent-parameter constraints and the scour mask.
//!
//! Units are SI throughout: elevations and depths in meters, discharge in
//! m³/s, velocity in m/s, time in hours.

mod batch;

use std::io::Read;
use std::path::Path;

pub use batch::{PhysicsBatch, PhysicsRow, RawLatentVars};

use crate::autodiff::{sigmoid, AutodiffError};

pub const GRAVITY: f64 = 9.81;
/// Flow depths at or below this are treated as degenerate (meters).
pub const FLOW_DEPTH_EPS: f64 = 1e-3;
/// Lower bound on the decay time constant (hours).
pub const TL_EPS: f64 = 1e-6;
/// Lower bound on the flow-area ratio p2.
pub const P2_EPS: f64 = 1e-6;
/// Exponent on the Froude number in the live-bed equation.
pub const FROUDE_EXPONENT: f64 = 0.43;
/// Exponent on the relative flow depth y1/a.
pub const DEPTH_EXPONENT: f64 = 0.35;

#[derive(Debug, thiserror::Error)]
pub enum PhysicsError {
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("invalid attributes for bridge {id}: {detail}")]
    InvalidBridge { id: String, detail: String },
    #[error("bridge attributes line {line}: {detail}")]
    Parse { line: u64, detail: String },
    #[error("unknown bridge {0}")]
    UnknownBridge(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

fn domain(op: &'static str, detail: impl Into<String>) -> PhysicsError {
    PhysicsError::Domain {
        op,
        detail: detail.into(),
    }
}

/// Static pier and channel description of one bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeAttributes {
    pub id: String,
    pub as_built_elevation: f64,
    /// Channel width L (m).
    pub channel_width: f64,
    /// Pier width a (m).
    pub pier_width: f64,
    pub pier_length: f64,
    pub attack_angle_deg: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub gravity: f64,
}

pub const BRIDGE_COLUMNS: [&str; 9] = [
    "id",
    "as_built_elevation_m",
    "channel_width_m",
    "pier_width_m",
    "pier_length_m",
    "attack_angle_deg",
    "k1",
    "k2",
    "k3",
];

impl BridgeAttributes {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        as_built_elevation: f64,
        channel_width: f64,
        pier_width: f64,
        pier_length: f64,
        attack_angle_deg: f64,
        k1: f64,
        k2: f64,
        k3: f64,
    ) -> Result<Self, PhysicsError> {
        let b = Self {
            id: id.into(),
            as_built_elevation,
            channel_width,
            pier_width,
            pier_length,
            attack_angle_deg,
            k1,
            k2,
            k3,
            gravity: GRAVITY,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |detail: &str| {
            Err(PhysicsError::InvalidBridge {
                id: self.id.clone(),
                detail: detail.into(),
            })
        };
        let values = [
            self.as_built_elevation,
            self.channel_width,
            self.pier_width,
            self.pier_length,
            self.attack_angle_deg,
            self.k1,
            self.k2,
            self.k3,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value");
        }
        if self.pier_width <= 0.0 {
            return bad("pier width must be positive");
        }
        if self.channel_width <= 0.0 {
            return bad("channel width must be positive");
        }
        if self.k() <= 0.0 {
            return bad("k1*k2*k3 must be positive");
        }
        Ok(())
    }

    /// Combined correction factor K1·K2·K3.
    pub fn k(&self) -> f64 {
        self.k1 * self.k2 * self.k3
    }

    /// Site constant of the calibrated equation:
    /// `2 K a^0.65 / (g^0.215 L^0.43)`.
    pub fn site_coefficient(&self) -> f64 {
        2.0 * self.k() * self.pier_width.powf(1.0 - DEPTH_EXPONENT)
            / (self.gravity.powf(FROUDE_EXPONENT / 2.0) * self.channel_width.powf(FROUDE_EXPONENT))
    }

    /// Writes the attribute table with the [`BRIDGE_COLUMNS`] header.
    pub fn write_csv(
        bridges: &[Self],
        mut writer: impl std::io::Write,
    ) -> Result<(), PhysicsError> {
        writeln!(writer, "{}", BRIDGE_COLUMNS.join(","))?;
        for b in bridges {
            writeln!(
                writer,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                b.id,
                b.as_built_elevation,
                b.channel_width,
                b.pier_width,
                b.pier_length,
                b.attack_angle_deg,
                b.k1,
                b.k2,
                b.k3
            )?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Self>, PhysicsError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Parses the delimited attribute table; the header must contain every
    /// column in [`BRIDGE_COLUMNS`] (order free).
    pub fn from_reader(reader: impl Read) -> Result<Vec<Self>, PhysicsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| PhysicsError::Parse {
                line: 1,
                detail: e.to_string(),
            })?
            .clone();
        let mut index = [0usize; 9];
        for (slot, name) in index.iter_mut().zip(BRIDGE_COLUMNS) {
            *slot = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PhysicsError::Parse {
                    line: 1,
                    detail: format!("missing column {name}"),
                })?;
        }
        let mut out: Vec<Self> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| PhysicsError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                detail: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| rec.get(index[i]).unwrap_or("");
            let num = |i: usize| -> Result<f64, PhysicsError> {
                field(i).parse::<f64>().map_err(|_| PhysicsError::Parse {
                    line,
                    detail: format!("{}: cannot parse {:?}", BRIDGE_COLUMNS[i], field(i)),
                })
            };
            let b = Self::new(
                field(0),
                num(1)?,
                num(2)?,
                num(3)?,
                num(4)?,
                num(5)?,
                num(6)?,
                num(7)?,
                num(8)?,
            )?;
            if out.iter().any(|o| o.id == b.id) {
                return Err(PhysicsError::Parse {
                    line,
                    detail: format!("duplicate bridge id {}", b.id),
                });
            }
            out.push(b);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EquationVariant {
    Hec18,
    Td,
    Gtd,
}

impl EquationVariant {
    pub fn label(self) -> &'static str {
        match self {
            Self::Hec18 => "HEC18",
            Self::Td => "TD",
            Self::Gtd => "GTD",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HEC18" => Some(Self::Hec18),
            "TD" => Some(Self::Td),
            "GTD" => Some(Self::Gtd),
            _ => None,
        }
    }

    /// Whether the equation describes growth over the forecast horizon.
    pub fn is_time_dependent(self) -> bool {
        !matches!(self, Self::Hec18)
    }
}

/// How raw_p1 maps to p1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum P1Mode {
    #[default]
    Tanh,
    Unconstrained,
}

/// Unconstrained calibration variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentParams {
    pub variant: EquationVariant,
    pub raw_p1: f64,
    pub raw_p2: f64,
    pub raw_p3: f64,
    pub raw_tl: f64,
    pub raw_alpha: f64,
    pub raw_beta: f64,
}

/// Starting value for raw_p2 and raw_p3. At zero both ratios vanish and
/// every gradient of the time-dependent equation is zero.
pub const RAW_RATIO_INIT: f64 = 3.0;

impl LatentParams {
    pub fn zeros(variant: EquationVariant) -> Self {
        Self {
            variant,
            raw_p1: 0.0,
            raw_p2: 0.0,
            raw_p3: 0.0,
            raw_tl: 0.0,
            raw_alpha: 0.0,
            raw_beta: 0.0,
        }
    }

    /// Training start point: zeros except the two flow/decay ratios.
    pub fn initial(variant: EquationVariant) -> Self {
        Self {
            raw_p2: RAW_RATIO_INIT,
            raw_p3: RAW_RATIO_INIT,
            ..Self::zeros(variant)
        }
    }

    /// Names of the raw values the variant actually uses.
    pub fn active_names(variant: EquationVariant) -> &'static [&'static str] {
        match variant {
            EquationVariant::Hec18 => &["raw_p1", "raw_p2"],
            EquationVariant::Td => &["raw_p1", "raw_p2", "raw_p3", "raw_tl"],
            EquationVariant::Gtd => &["raw_p1", "raw_tl", "raw_alpha", "raw_beta"],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "raw_p1" => self.raw_p1,
            "raw_p2" => self.raw_p2,
            "raw_p3" => self.raw_p3,
            "raw_tl" => self.raw_tl,
            "raw_alpha" => self.raw_alpha,
            "raw_beta" => self.raw_beta,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, value: f64) -> bool {
        let slot = match name {
            "raw_p1" => &mut self.raw_p1,
            "raw_p2" => &mut self.raw_p2,
            "raw_p3" => &mut self.raw_p3,
            "raw_tl" => &mut self.raw_tl,
            "raw_alpha" => &mut self.raw_alpha,
            "raw_beta" => &mut self.raw_beta,
            _ => return false,
        };
        *slot = value;
        true
    }
}

/// Constrained equation coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsParams {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    /// Decay time constant (hours).
    pub t_l: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl PhysicsParams {
    /// Plain HEC-18 coefficients: p1 = p2 = p3 = 1.
    pub fn unit() -> Self {
        Self {
            p1: 1.0,
            p2: 1.0,
            p3: 1.0,
            t_l: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Upper end of the admissible decay time constant.
pub fn t_l_range(m_in: usize, m_out: usize) -> f64 {
    2.0 * (m_in + m_out) as f64
}

pub fn constrain(
    latent: &LatentParams,
    m_in: usize,
    m_out: usize,
    p1_mode: P1Mode,
) -> PhysicsParams {
    let p1 = match p1_mode {
        P1Mode::Tanh => latent.raw_p1.tanh(),
        P1Mode::Unconstrained => latent.raw_p1,
    };
    let p2 = match latent.variant {
        EquationVariant::Gtd => 1.0,
        _ => latent.raw_p2.tanh().clamp(P2_EPS, 1.0),
    };
    PhysicsParams {
        p1,
        p2,
        p3: latent.raw_p3.tanh(),
        t_l: (t_l_range(m_in, m_out) * sigmoid(latent.raw_tl)).max(TL_EPS),
        alpha: latent.raw_alpha,
        beta: latent.raw_beta,
    }
}

/// y1 = E_stage − E_ref.
pub fn flow_depth(e_stage: f64, e_ref: f64) -> f64 {
    e_stage - e_ref
}

/// y_s = E_ref − E_bed; positive while scoured, negative while filled.
pub fn scour_depth(e_ref: f64, e_bed: f64) -> f64 {
    e_ref - e_bed
}

fn check_depth(op: &'static str, y1: f64) -> Result<(), PhysicsError> {
    if y1 > FLOW_DEPTH_EPS {
        Ok(())
    } else {
        Err(domain(
            op,
            format!("flow depth {y1} m is at or below {FLOW_DEPTH_EPS} m"),
        ))
    }
}

fn check_discharge(op: &'static str, q: f64) -> Result<(), PhysicsError> {
    if q >= 0.0 && q.is_finite() {
        Ok(())
    } else {
        Err(domain(op, format!("discharge {q} must be non-negative")))
    }
}

/// V = q / (p2 · L · y1).
pub fn velocity(q: f64, p2: f64, channel_width: f64, y1: f64) -> Result<f64, PhysicsError> {
    check_depth("velocity", y1)?;
    if p2 <= 0.0 || channel_width <= 0.0 {
        return Err(domain("velocity", "p2 and channel width must be positive"));
    }
    Ok(q / (p2 * channel_width * y1))
}

/// Live-bed maximum pier scour `2 a K (y1/a)^0.35 Fr^0.43`, `Fr = V/√(g y1)`.
pub fn hec18_max_scour(y1: f64, v: f64, bridge: &BridgeAttributes) -> Result<f64, PhysicsError> {
    if y1 <= 0.0 {
        return Err(domain(
            "hec18",
            format!("flow depth {y1} m must be positive"),
        ));
    }
    if v < 0.0 {
        return Err(domain(
            "hec18",
            format!("velocity {v} must be non-negative"),
        ));
    }
    let a = bridge.pier_width;
    let froude = v / (bridge.gravity * y1).sqrt();
    Ok(2.0 * a * bridge.k() * (y1 / a).powf(DEPTH_EXPONENT) * froude.powf(FROUDE_EXPONENT))
}

/// Calibrated equation with velocity eliminated:
/// `p1 · 2K a^0.65 / (g^0.215 L^0.43 y1^0.295) · (q/p2)^0.43`.
pub fn spinn_hec18(
    y1: f64,
    q: f64,
    params: &PhysicsParams,
    bridge: &BridgeAttributes,
) -> Result<f64, PhysicsError> {
    check_depth("spinn_hec18", y1)?;
    check_discharge("spinn_hec18", q)?;
    if params.p2 <= 0.0 {
        return Err(domain("spinn_hec18", "p2 must be positive"));
    }
    let depth_power = DEPTH_EXPONENT - 1.5 * FROUDE_EXPONENT;
    Ok(params.p1
        * bridge.site_coefficient()
        * y1.powf(depth_power)
        * (q / params.p2).powf(FROUDE_EXPONENT))
}

/// Growth factor `1 − exp(−rate · t)`.
pub fn growth(t: f64, rate: f64) -> f64 {
    -(-rate * t).exp_m1()
}

/// Time-dependent form: the calibrated maximum scaled by `1 − e^(−p3 t / T_L)`.
pub fn td_scour(
    t: f64,
    y1_max: f64,
    q_max: f64,
    params: &PhysicsParams,
    bridge: &BridgeAttributes,
) -> Result<f64, PhysicsError> {
    if params.t_l <= TL_EPS {
        return Err(domain(
            "td_scour",
            format!("T_L {} h is at or below {TL_EPS}", params.t_l),
        ));
    }
    let ys_max = spinn_hec18(y1_max, q_max, params, bridge)?;
    Ok(ys_max * growth(t, params.p3 / params.t_l))
}

/// Site-agnostic form `p1 · y1^α · (q/p2)^β · (1 − e^(−t/T_L))`.
pub fn gtd_scour(
    t: f64,
    y1_max: f64,
    q_max: f64,
    params: &PhysicsParams,
) -> Result<f64, PhysicsError> {
    check_depth("gtd_scour", y1_max)?;
    check_discharge("gtd_scour", q_max)?;
    if params.t_l <= TL_EPS {
        return Err(domain(
            "gtd_scour",
            format!("T_L {} h is at or below {TL_EPS}", params.t_l),
        ));
    }
    if params.p2 <= 0.0 {
        return Err(domain("gtd_scour", "p2 must be positive"));
    }
    let amplitude = params.p1 * y1_max.powf(params.alpha) * (q_max / params.p2).powf(params.beta);
    if !amplitude.is_finite() {
        return Err(domain("gtd_scour", "amplitude is not finite"));
    }
    Ok(amplitude * growth(t, 1.0 / params.t_l))
}

/// Per-timestep scour indicator and whether the sequence has any scour.
pub fn episode_mask(y_s: &[f64]) -> (Vec<f64>, bool) {
    let mask: Vec<f64> = y_s
        .iter()
        .map(|&y| if y > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let flag = mask.iter().any(|&m| m > 0.0);
    (mask, flag)
}

/// Which part of the scour mask gates the physics loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    PerTimestep,
    #[default]
    PerSequence,
}

/// Equation value for one output timestep of one sequence.
pub fn evaluate(
    variant: EquationVariant,
    t: f64,
    y1: f64,
    q: f64,
    params: &PhysicsParams,
    bridge: &BridgeAttributes,
) -> Result<f64, PhysicsError> {
    match variant {
        EquationVariant::Hec18 => spinn_hec18(y1, q, params, bridge),
        EquationVariant::Td => td_scour(t, y1, q, params, bridge),
        EquationVariant::Gtd => gtd_scour(t, y1, q, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bridge(a: f64, l: f64, k1: f64, k2: f64, k3: f64) -> BridgeAttributes {
        BridgeAttributes::new("t", 10.0, l, a, 5.0, 0.0, k1, k2, k3).unwrap()
    }

    #[test]
    fn flow_and_scour_depth() {
        assert_eq!(flow_depth(10.0, 4.0), 6.0);
        assert_eq!(flow_depth(4.0, 4.0), 0.0);
        assert!((flow_depth(12.4, 10.4) - 2.0).abs() < 1e-12);
        assert_eq!(scour_depth(48.8, 48.8), 0.0);
        assert!((scour_depth(48.8, 47.3) - 1.5).abs() < 1e-12);
        assert!((scour_depth(48.8, 49.8) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn velocity_cases() {
        assert_eq!(velocity(100.0, 1.0, 50.0, 2.0).unwrap(), 1.0);
        assert_eq!(velocity(0.0, 1.0, 50.0, 2.0).unwrap(), 0.0);
        let v = velocity(300.0, 0.5, 152.7, 2.0).unwrap();
        assert!((v - 1.9646365422396859).abs() < 1e-12);
        assert!(matches!(
            velocity(1.0, 1.0, 1.0, 1e-4),
            Err(PhysicsError::Domain { .. })
        ));
    }

    #[test]
    fn hec18_cases() {
        let unit = bridge(1.0, 10.0, 1.0, 1.0, 1.0);
        assert_eq!(hec18_max_scour(2.0, 0.0, &unit).unwrap(), 0.0);
        assert!((hec18_max_scour(1.0, GRAVITY.sqrt(), &unit).unwrap() - 2.0).abs() < 1e-12);
        assert!(hec18_max_scour(0.0, 1.0, &unit).is_err());
    }

    #[test]
    fn constrain_cases() {
        let z = constrain(
            &LatentParams::zeros(EquationVariant::Td),
            168,
            168,
            P1Mode::Tanh,
        );
        assert_eq!(z.p1, 0.0);
        assert_eq!(z.p3, 0.0);
        assert_eq!(z.p2, P2_EPS);
        assert_eq!(z.t_l, 336.0);
        let mut big = LatentParams::zeros(EquationVariant::Td);
        big.raw_p1 = 40.0;
        big.raw_tl = 2.0;
        let c = constrain(&big, 168, 168, P1Mode::Tanh);
        assert_eq!(c.p1, 1.0);
        // 672 / (1 + e^-2)
        assert!((c.t_l - 591.8956364011369).abs() < 1e-9);
        let free = constrain(&big, 168, 168, P1Mode::Unconstrained);
        assert_eq!(free.p1, 40.0);
        let g = constrain(
            &LatentParams::zeros(EquationVariant::Gtd),
            4,
            3,
            P1Mode::Tanh,
        );
        assert_eq!(g.p2, 1.0);
    }

    #[test]
    fn masks() {
        assert_eq!(episode_mask(&[-1.0, -2.0]), (vec![0.0, 0.0], false));
        assert_eq!(episode_mask(&[1.0, 2.0]), (vec![1.0, 1.0], true));
        assert_eq!(episode_mask(&[-0.5, 0.3]), (vec![0.0, 1.0], true));
    }

    #[test]
    fn bridge_csv_requires_columns() {
        let text = "id,as_built_elevation_m,channel_width_m,pier_width_m,pier_length_m,attack_angle_deg,k1,k2\n1,1,1,1,1,0,1,1\n";
        let err = BridgeAttributes::from_reader(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("k3"), "{err}");
        let text = "id,as_built_elevation_m,channel_width_m,pier_width_m,pier_length_m,attack_angle_deg,k1,k2,k3\nx,1,1,0,1,0,1,1,1\n";
        assert!(matches!(
            BridgeAttributes::from_reader(text.as_bytes()),
            Err(PhysicsError::InvalidBridge { .. })
        ));
    }
}
