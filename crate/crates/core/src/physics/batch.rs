use super::{
    t_l_range, BridgeAttributes, EquationVariant, LatentParams, P1Mode, PhysicsError,
    DEPTH_EXPONENT, FLOW_DEPTH_EPS, FROUDE_EXPONENT, P2_EPS, TL_EPS,
};
use crate::autodiff::{Tape, Tensor, Var};

/// Raw latent values recorded as one-element tape parameters.
#[derive(Debug, Clone, Copy)]
pub struct RawLatentVars {
    pub variant: EquationVariant,
    pub p1: Var,
    pub p2: Option<Var>,
    pub p3: Option<Var>,
    pub tl: Option<Var>,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
}

impl RawLatentVars {
    /// Records the variant's active raw values, named `latent.<name>`.
    pub fn record(tape: &mut Tape, latent: &LatentParams) -> Self {
        let mut param =
            |name: &str, v: f64| tape.param(format!("latent.{name}"), Tensor::vector(vec![v]));
        let p1 = param("raw_p1", latent.raw_p1);
        let mut vars = Self {
            variant: latent.variant,
            p1,
            p2: None,
            p3: None,
            tl: None,
            alpha: None,
            beta: None,
        };
        match latent.variant {
            EquationVariant::Hec18 => {
                vars.p2 = Some(param("raw_p2", latent.raw_p2));
            }
            EquationVariant::Td => {
                vars.p2 = Some(param("raw_p2", latent.raw_p2));
                vars.p3 = Some(param("raw_p3", latent.raw_p3));
                vars.tl = Some(param("raw_tl", latent.raw_tl));
            }
            EquationVariant::Gtd => {
                vars.tl = Some(param("raw_tl", latent.raw_tl));
                vars.alpha = Some(param("raw_alpha", latent.raw_alpha));
                vars.beta = Some(param("raw_beta", latent.raw_beta));
            }
        }
        vars
    }

    /// Wraps vars already on the tape, given in
    /// [`LatentParams::active_names`] order.
    pub fn from_active(variant: EquationVariant, vars: &[Var]) -> Option<Self> {
        let names = LatentParams::active_names(variant);
        if vars.len() != names.len() {
            return None;
        }
        let find = |n: &str| names.iter().position(|x| *x == n).map(|i| vars[i]);
        Some(Self {
            variant,
            p1: find("raw_p1")?,
            p2: find("raw_p2"),
            p3: find("raw_p3"),
            tl: find("raw_tl"),
            alpha: find("raw_alpha"),
            beta: find("raw_beta"),
        })
    }

    /// `(name, var)` pairs for every recorded raw value.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        [
            ("raw_p1", Some(self.p1)),
            ("raw_p2", self.p2),
            ("raw_p3", self.p3),
            ("raw_tl", self.tl),
            ("raw_alpha", self.alpha),
            ("raw_beta", self.beta),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
    }
}

/// Physical covariates of one target window.
#[derive(Debug, Clone, Copy)]
pub struct PhysicsRow<'a> {
    pub y1_out: &'a [f64],
    pub q_out: &'a [f64],
    pub bridge: &'a BridgeAttributes,
}

/// Batch constants for evaluating an equation on the tape.
///
/// Everything that does not depend on the latent values is folded into
/// constants up front. Entries whose covariates fall outside the equation's
/// domain get a zero constant and a zero in [`PhysicsBatch::validity`].
#[derive(Debug, Clone)]
pub struct PhysicsBatch {
    variant: EquationVariant,
    batch: usize,
    m_out: usize,
    /// HEC18: `C y1^-0.295 q^0.43` per entry `[B, m_out]`; TD: the same at the
    /// last timestep `[B, 1]`; GTD: `ln y1_max` `[B, 1]`.
    first: Vec<f64>,
    /// GTD only: `ln q_max` `[B, 1]`.
    second: Vec<f64>,
    validity: Vec<f64>,
}

fn site_term(y1: f64, q: f64, bridge: &BridgeAttributes) -> Option<f64> {
    if !(y1 > FLOW_DEPTH_EPS) || !(q >= 0.0) {
        return None;
    }
    let v = bridge.site_coefficient()
        * y1.powf(DEPTH_EXPONENT - 1.5 * FROUDE_EXPONENT)
        * q.powf(FROUDE_EXPONENT);
    v.is_finite().then_some(v)
}

impl PhysicsBatch {
    pub fn new(
        variant: EquationVariant,
        m_out: usize,
        rows: &[PhysicsRow<'_>],
    ) -> Result<Self, PhysicsError> {
        let batch = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.y1_out.len() != m_out || r.q_out.len() != m_out {
                return Err(PhysicsError::Domain {
                    op: "physics_batch",
                    detail: format!(
                        "row {i}: expected {m_out} covariates, got y1 {} and q {}",
                        r.y1_out.len(),
                        r.q_out.len()
                    ),
                });
            }
        }
        if m_out == 0 {
            return Err(PhysicsError::Domain {
                op: "physics_batch",
                detail: "empty output window".into(),
            });
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut validity = Vec::with_capacity(batch * m_out);
        match variant {
            EquationVariant::Hec18 => {
                for r in rows {
                    for (&y1, &q) in r.y1_out.iter().zip(r.q_out) {
                        let term = site_term(y1, q, r.bridge);
                        first.push(term.unwrap_or(0.0));
                        validity.push(if term.is_some() { 1.0 } else { 0.0 });
                    }
                }
            }
            EquationVariant::Td => {
                for r in rows {
                    let term = site_term(r.y1_out[m_out - 1], r.q_out[m_out - 1], r.bridge);
                    first.push(term.unwrap_or(0.0));
                    let ok = if term.is_some() { 1.0 } else { 0.0 };
                    validity.extend(std::iter::repeat_n(ok, m_out));
                }
            }
            EquationVariant::Gtd => {
                for r in rows {
                    let (y1, q) = (r.y1_out[m_out - 1], r.q_out[m_out - 1]);
                    let ok = y1 > FLOW_DEPTH_EPS && q > 0.0;
                    first.push(if ok { y1.ln() } else { 0.0 });
                    second.push(if ok { q.ln() } else { 0.0 });
                    validity.extend(std::iter::repeat_n(if ok { 1.0 } else { 0.0 }, m_out));
                }
            }
        }
        Ok(Self {
            variant,
            batch,
            m_out,
            first,
            second,
            validity,
        })
    }

    pub fn variant(&self) -> EquationVariant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    /// 1 where the covariates admit an equation value, else 0; `[B · m_out]`.
    pub fn validity(&self) -> &[f64] {
        &self.validity
    }

    /// Equation prediction `[B, m_out]` as a differentiable function of the
    /// raw latent values.
    pub fn predict(
        &self,
        tape: &mut Tape,
        raw: &RawLatentVars,
        m_in: usize,
        p1_mode: P1Mode,
    ) -> Result<Var, PhysicsError> {
        if raw.variant != self.variant {
            return Err(PhysicsError::Domain {
                op: "physics_batch",
                detail: format!(
                    "latent variant {:?} does not match batch {:?}",
                    raw.variant, self.variant
                ),
            });
        }
        let missing = |name: &str| PhysicsError::Domain {
            op: "physics_batch",
            detail: format!("latent {name} not recorded"),
        };
        let p1 = match p1_mode {
            P1Mode::Tanh => tape.tanh(raw.p1),
            P1Mode::Unconstrained => raw.p1,
        };
        let (b, m) = (self.batch, self.m_out);
        match self.variant {
            EquationVariant::Hec18 => {
                let coef =
                    self.scale_coefficient(tape, p1, raw.p2.ok_or_else(|| missing("raw_p2"))?)?;
                let h = tape.constant(Tensor::new(vec![b, m], self.first.clone())?);
                Ok(tape.scale_by(h, coef)?)
            }
            EquationVariant::Td => {
                let coef =
                    self.scale_coefficient(tape, p1, raw.p2.ok_or_else(|| missing("raw_p2"))?)?;
                let t_l = self.time_constant(tape, raw.tl.ok_or_else(|| missing("raw_tl"))?, m_in);
                let p3 = tape.tanh(raw.p3.ok_or_else(|| missing("raw_p3"))?);
                let rate = tape.div(p3, t_l)?;
                let growth = self.growth(tape, rate)?;
                let h = tape.constant(Tensor::new(vec![b, 1], self.first.clone())?);
                let amp = tape.scale_by(h, coef)?;
                Ok(tape.matmul(amp, growth)?)
            }
            EquationVariant::Gtd => {
                let t_l = self.time_constant(tape, raw.tl.ok_or_else(|| missing("raw_tl"))?, m_in);
                let one = tape.constant(Tensor::vector(vec![1.0]));
                let rate = tape.div(one, t_l)?;
                let growth = self.growth(tape, rate)?;
                let ln_y1 = tape.constant(Tensor::new(vec![b, 1], self.first.clone())?);
                let ln_q = tape.constant(Tensor::new(vec![b, 1], self.second.clone())?);
                let a = tape.scale_by(ln_y1, raw.alpha.ok_or_else(|| missing("raw_alpha"))?)?;
                let c = tape.scale_by(ln_q, raw.beta.ok_or_else(|| missing("raw_beta"))?)?;
                let log_amp = tape.add(a, c)?;
                let amp = tape.exp(log_amp)?;
                let amp = tape.mask_mul(amp, self.validity.iter().step_by(m).copied().collect())?;
                let amp = tape.scale_by(amp, p1)?;
                Ok(tape.matmul(amp, growth)?)
            }
        }
    }

    /// `p1 · p2^-0.43`.
    fn scale_coefficient(
        &self,
        tape: &mut Tape,
        p1: Var,
        raw_p2: Var,
    ) -> Result<Var, PhysicsError> {
        let p2 = tape.tanh(raw_p2);
        let p2 = tape.clamp_min(p2, P2_EPS);
        let inv = tape.pow_scalar(p2, -FROUDE_EXPONENT)?;
        Ok(tape.mul(p1, inv)?)
    }

    fn time_constant(&self, tape: &mut Tape, raw_tl: Var, m_in: usize) -> Var {
        let s = tape.sigmoid(raw_tl);
        let t_l = tape.mul_scalar(s, t_l_range(m_in, self.m_out));
        tape.clamp_min(t_l, TL_EPS)
    }

    /// `1 − exp(−rate · t)` for t = 0..m_out as a `[1, m_out]` row.
    fn growth(&self, tape: &mut Tape, rate: Var) -> Result<Var, PhysicsError> {
        let t = tape.constant(Tensor::new(
            vec![1, self.m_out],
            (0..self.m_out).map(|t| t as f64).collect(),
        )?);
        let x = tape.scale_by(t, rate)?;
        let x = tape.neg(x);
        let e = tape.exp(x)?;
        let e = tape.neg(e);
        Ok(tape.add_scalar(e, 1.0))
    }
}
