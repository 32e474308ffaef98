//! Composite loss, Adam, the train/validate loop, metrics and the experiment
//! runner.

mod experiment;
mod gradcheck;
mod run;

pub use experiment::{
    aggregate, load_bridge_datasets, run_experiment, write_report, write_runs, BridgeDataset,
    ExperimentReport, ExperimentSpec, ReportRow, RunResult, Summary, SPEC_KEYS,
};
pub use gradcheck::{loss_grad_check, LossCheckCase};
pub use run::{forecast, train, EpochRecord, TrainData, TrainOutcome};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::datapipe::{DataError, Scaler, SequencePair};
use crate::models::{Forecaster, ModelError};
use crate::physics::{episode_mask, EquationVariant, MaskMode, P1Mode, PhysicsError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: data {data}, physics {physics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        data: f64,
        physics: f64,
    },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("missing bridge datasets: {}", .0.join(", "))]
    MissingBridges(Vec<String>),
    #[error("experiment spec line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("experiment spec line {line}: {detail}")]
    Spec { line: usize, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Which loss terms a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Pure,
    Spinn(EquationVariant),
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pure => "pure",
            Self::Spinn(EquationVariant::Hec18) => "spinn_hec18",
            Self::Spinn(EquationVariant::Td) => "spinn_td",
            Self::Spinn(EquationVariant::Gtd) => "spinn_gtd",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "pure" => Self::Pure,
            "spinn_hec18" => Self::Spinn(EquationVariant::Hec18),
            "spinn_td" => Self::Spinn(EquationVariant::Td),
            "spinn_gtd" => Self::Spinn(EquationVariant::Gtd),
            _ => return None,
        })
    }

    pub fn variant(self) -> Option<EquationVariant> {
        match self {
            Self::Pure => None,
            Self::Spinn(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, PartialOrd, Ord)]
pub enum Scope {
    #[default]
    SiteSpecific,
    General,
}

impl Scope {
    pub fn label(self) -> &'static str {
        match self {
            Self::SiteSpecific => "site_specific",
            Self::General => "general",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "site_specific" => Some(Self::SiteSpecific),
            "general" => Some(Self::General),
            _ => None,
        }
    }
}

/// How squared errors over the horizon are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossReduction {
    /// Mean over sequences and timesteps.
    #[default]
    Mean,
    /// Sum over the horizon, mean over sequences.
    HorizonSum,
}

impl LossReduction {
    pub fn label(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::HorizonSum => "sum",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Self::Mean),
            "sum" => Some(Self::HorizonSum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub method: Method,
    pub scope: Scope,
    pub mask_mode: MaskMode,
    pub p1_mode: P1Mode,
    pub reduction: LossReduction,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed,
            method,
            scope: Scope::SiteSpecific,
            mask_mode: MaskMode::default(),
            p1_mode: P1Mode::default(),
            reduction: LossReduction::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.eps > 0.0)
        {
            return Err(TrainError::Config(format!(
                "invalid optimizer settings {a:?}"
            )));
        }
        Ok(())
    }
}

/// Loss terms in m² (or m² summed over the horizon).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mse_data: f64,
    pub mse_phy: f64,
    pub total: f64,
}

fn check_len(op: &'static str, left: usize, right: usize) -> Result<(), TrainError> {
    if left != right {
        return Err(TrainError::Shape { op, left, right });
    }
    Ok(())
}

fn check_batch(op: &'static str, len: usize, m_out: usize) -> Result<usize, TrainError> {
    if m_out == 0 || len % m_out != 0 {
        return Err(TrainError::Shape {
            op,
            left: len,
            right: m_out,
        });
    }
    Ok(len / m_out)
}

/// Data term over flattened `[B, m_out]` arrays.
pub fn data_loss(
    y: &[f64],
    y_hat: &[f64],
    m_out: usize,
    reduction: LossReduction,
) -> Result<f64, TrainError> {
    check_len("data_loss", y.len(), y_hat.len())?;
    let b = check_batch("data_loss", y.len(), m_out)?;
    if b == 0 {
        return Err(TrainError::EmptySet("data_loss"));
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok(match reduction {
        LossReduction::Mean => sse / y.len() as f64,
        LossReduction::HorizonSum => sse / b as f64,
    })
}

/// Per-entry physics-loss weights `[B · m_out]`: the scour gate chosen by
/// `mode`, times `validity` when given.
pub fn physics_weights(
    y: &[f64],
    m_out: usize,
    mode: MaskMode,
    validity: Option<&[f64]>,
) -> Result<Vec<f64>, TrainError> {
    check_batch("physics_weights", y.len(), m_out)?;
    if let Some(v) = validity {
        check_len("physics_weights", y.len(), v.len())?;
    }
    let mut w = Vec::with_capacity(y.len());
    for seq in y.chunks_exact(m_out) {
        let (mask, flag) = episode_mask(seq);
        match mode {
            MaskMode::PerTimestep => w.extend(mask),
            MaskMode::PerSequence => {
                w.extend(std::iter::repeat_n(if flag { 1.0 } else { 0.0 }, m_out))
            }
        }
    }
    if let Some(v) = validity {
        for (w, v) in w.iter_mut().zip(v) {
            *w *= v;
        }
    }
    Ok(w)
}

/// Normalizer for a weighted physics term; `None` when nothing is selected.
fn physics_denominator(weights: &[f64], m_out: usize, reduction: LossReduction) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(match reduction {
        LossReduction::Mean => total,
        LossReduction::HorizonSum => weights
            .chunks_exact(m_out)
            .filter(|c| c.iter().any(|&w| w > 0.0))
            .count() as f64,
    })
}

/// Physics term: weighted mean of `(y − ŷ_phy)²`, exactly 0 when no entry
/// carries weight.
pub fn physics_loss(
    y: &[f64],
    y_phy: &[f64],
    weights: &[f64],
    m_out: usize,
    reduction: LossReduction,
) -> Result<f64, TrainError> {
    check_len("physics_loss", y.len(), y_phy.len())?;
    check_len("physics_loss", y.len(), weights.len())?;
    check_batch("physics_loss", y.len(), m_out)?;
    let Some(denom) = physics_denominator(weights, m_out, reduction) else {
        return Ok(0.0);
    };
    let s: f64 = y
        .iter()
        .zip(y_phy)
        .zip(weights)
        .map(|((a, p), w)| w * (a - p) * (a - p))
        .sum();
    Ok(s / denom)
}

/// Loss nodes on a tape. `physics` is absent when no entry carries weight,
/// in which case `total` is the data node itself.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub data: Var,
    pub physics: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        LossBreakdown {
            mse_data: v(self.data),
            mse_phy: self.physics.map(v).unwrap_or(0.0),
            total: v(self.total),
        }
    }
}

/// Data term of `y_hat` `[B, m_out]` against constant targets.
pub fn data_loss_var(
    tape: &mut Tape,
    y_hat: Var,
    y: &[f64],
    reduction: LossReduction,
) -> Result<Var, TrainError> {
    let shape = tape.shape(y_hat).to_vec();
    check_len("data_loss", shape.iter().product(), y.len())?;
    let target = tape.constant(Tensor::new(shape.clone(), y.to_vec())?);
    let d = tape.sub(y_hat, target)?;
    let sq = tape.mul(d, d)?;
    Ok(match reduction {
        LossReduction::Mean => tape.mean(sq)?,
        LossReduction::HorizonSum => {
            let s = tape.sum(sq);
            tape.mul_scalar(s, 1.0 / shape[0] as f64)
        }
    })
}

/// Weighted physics term of `y_phy` `[B, m_out]`; `None` when every weight
/// is zero.
pub fn physics_loss_var(
    tape: &mut Tape,
    y_phy: Var,
    y: &[f64],
    weights: &[f64],
    reduction: LossReduction,
) -> Result<Option<Var>, TrainError> {
    let shape = tape.shape(y_phy).to_vec();
    check_len("physics_loss", shape.iter().product(), y.len())?;
    check_len("physics_loss", y.len(), weights.len())?;
    let m_out = *shape.last().unwrap_or(&0);
    let Some(denom) = physics_denominator(weights, m_out, reduction) else {
        return Ok(None);
    };
    let target = tape.constant(Tensor::new(shape, y.to_vec())?);
    let d = tape.sub(y_phy, target)?;
    let sq = tape.mul(d, d)?;
    let masked = tape.mask_mul(sq, weights.to_vec())?;
    let s = tape.sum(masked);
    Ok(Some(tape.mul_scalar(s, 1.0 / denom)))
}

/// `data + physics`, where an absent physics term leaves the data node as
/// the total.
pub fn total_loss(
    tape: &mut Tape,
    data: Var,
    physics: Option<Var>,
) -> Result<LossVars, TrainError> {
    let total = match physics {
        Some(p) => tape.add(data, p)?,
        None => data,
    };
    Ok(LossVars {
        data,
        physics,
        total,
    })
}

/// Adam with bias correction. Moment buffers are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Nothing changes if any gradient is
    /// non-finite.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor)],
        grads: &[Vec<f64>],
    ) -> Result<(), TrainError> {
        check_len("adam_step", params.len(), grads.len())?;
        for ((name, t), g) in params.iter().zip(grads) {
            check_len("adam_step", t.len(), g.len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, (_, t))| m.len() != t.len())
        {
            return Err(TrainError::Config(
                "parameter layout changed between optimizer steps".into(),
            ));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, t), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in t
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Guard on the MAPE denominator (m).
pub const MAPE_DELTA: f64 = 0.01;

/// Test-set metrics: MSE (m²), MAPE (%), RMSE (m).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mse: f64,
    pub mape: f64,
    pub rmse: f64,
}

/// MSE over every entry; MAPE and RMSE per sequence, then averaged.
pub fn metrics(y: &[f64], y_hat: &[f64], m_out: usize) -> Result<Metrics, TrainError> {
    check_len("metrics", y.len(), y_hat.len())?;
    let b = check_batch("metrics", y.len(), m_out)?;
    if b == 0 {
        return Err(TrainError::EmptySet("test"));
    }
    let mut sse = 0.0;
    let mut mape = 0.0;
    let mut rmse = 0.0;
    for (ys, ps) in y.chunks_exact(m_out).zip(y_hat.chunks_exact(m_out)) {
        let mut seq_sse = 0.0;
        let mut seq_ape = 0.0;
        for (a, p) in ys.iter().zip(ps) {
            seq_sse += (a - p) * (a - p);
            seq_ape += (a - p).abs() / a.abs().max(MAPE_DELTA);
        }
        sse += seq_sse;
        mape += 100.0 * seq_ape / m_out as f64;
        rmse += (seq_sse / m_out as f64).sqrt();
    }
    Ok(Metrics {
        mse: sse / y.len() as f64,
        mape: mape / b as f64,
        rmse: rmse / b as f64,
    })
}

/// Forecasts `pairs` in meters and scores them against their targets.
pub fn evaluate(
    model: &Forecaster,
    scaler: &Scaler,
    pairs: &[SequencePair],
) -> Result<Metrics, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let y_hat = forecast(model, scaler, pairs, 256)?;
    let y: Vec<f64> = pairs.iter().flat_map(|p| p.y.iter().copied()).collect();
    metrics(&y, &y_hat, model.config().m_out)
}
