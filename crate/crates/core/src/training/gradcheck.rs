use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    data_loss_var, physics_loss_var, physics_weights, total_loss, LossReduction, Method, TrainError,
};
use crate::autodiff::{grad_check_with, AutodiffError, GradCheckOptions, GradCheckReport, Tensor};
use crate::datapipe::{Scaler, N_FEATURES};
use crate::models::{Architecture, Forecaster, ForwardMode, ModelConfig};
use crate::physics::{
    BridgeAttributes, EquationVariant, LatentParams, MaskMode, P1Mode, PhysicsBatch, PhysicsRow,
    RawLatentVars,
};

/// One randomized total-loss gradient check on a miniature model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossCheckCase {
    pub architecture: Architecture,
    pub method: Method,
    pub seed: u64,
}

const BATCH: usize = 2;
const MAX_DRAWS: usize = 64;
const KINK_MARGIN: f64 = 1e-3;

fn random_latent(variant: EquationVariant, rng: &mut ChaCha8Rng) -> LatentParams {
    let mut l = LatentParams::zeros(variant);
    // the power law has no site coefficient, so p1 stays near calibrated magnitudes
    l.raw_p1 = match variant {
        EquationVariant::Gtd => rng.random_range(-0.1..0.1),
        _ => rng.random_range(-1.5..1.5),
    };
    // keep tanh(raw_p2) away from its lower clamp
    l.raw_p2 = rng.random_range(0.3..2.0);
    l.raw_p3 = rng.random_range(0.3..2.0);
    l.raw_tl = rng.random_range(-2.0..2.0);
    l.raw_alpha = rng.random_range(0.2..1.0);
    l.raw_beta = rng.random_range(0.2..0.8);
    l
}

fn invalid(e: impl std::fmt::Display) -> AutodiffError {
    AutodiffError::Invalid(e.to_string())
}

/// Compares reverse-mode gradients of the full training loss (data plus
/// physics term) with central differences, over every network weight and
/// every active latent value.
///
/// Targets mix scouring and filling entries. CNN runs with inference-mode
/// normalization: under batch statistics the convolution biases cancel and
/// their exact gradient is zero, which a relative criterion cannot score.
pub fn loss_grad_check(
    case: LossCheckCase,
    options: GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    let config = ModelConfig::miniature(case.architecture);
    let (m_in, m_out) = (config.m_in, config.m_out);
    let model = Forecaster::new(config, case.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    rng.set_stream(2);
    let mode = match case.architecture {
        Architecture::Cnn => ForwardMode::Inference,
        _ => ForwardMode::Train,
    };
    // redraw inputs that put a ReLU within finite-difference reach of its kink
    let mut x = Vec::new();
    for _ in 0..MAX_DRAWS {
        x = (0..BATCH * m_in * N_FEATURES)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut tape = crate::autodiff::Tape::new();
        let vars = model.record(&mut tape);
        let xv = tape.constant(Tensor::new(vec![BATCH, m_in, N_FEATURES], x.clone())?);
        model
            .forward_with(&mut tape, &vars, xv, mode)
            .map_err(invalid)?;
        if tape.kink_margin().is_none_or(|m| m > KINK_MARGIN) {
            break;
        }
    }
    let mut y: Vec<f64> = (0..BATCH * m_out)
        .map(|_| rng.random_range(-0.5..1.5))
        .collect();
    y[0] = rng.random_range(0.2..1.5);
    y[m_out] = -rng.random_range(0.2..1.0);
    let y1: Vec<f64> = (0..BATCH * m_out)
        .map(|_| rng.random_range(0.5..4.0))
        .collect();
    let q: Vec<f64> = (0..BATCH * m_out)
        .map(|_| rng.random_range(10.0..100.0))
        .collect();
    let scaler = Scaler {
        mean: [rng.random_range(-0.5..0.5), 1.5, 120.0],
        std: [rng.random_range(0.2..1.0), 0.8, 60.0],
    };
    let bridge = BridgeAttributes::new("gc", 10.0, 60.0, 1.5, 6.0, 0.0, 1.1, 1.0, 1.1)?;
    let variant = case.method.variant();
    let latent = variant.map(|v| random_latent(v, &mut rng));

    let mut params = model.trainable();
    let n_model = params.len();
    if let Some(l) = &latent {
        for name in LatentParams::active_names(l.variant) {
            params.push((
                format!("latent.{name}"),
                Tensor::vector(vec![l.get(name).unwrap_or(0.0)]),
            ));
        }
    }
    let rows: Vec<PhysicsRow<'_>> = (0..BATCH)
        .map(|b| PhysicsRow {
            y1_out: &y1[b * m_out..(b + 1) * m_out],
            q_out: &q[b * m_out..(b + 1) * m_out],
            bridge: &bridge,
        })
        .collect();
    let physics = match variant {
        Some(v) => {
            let batch = PhysicsBatch::new(v, m_out, &rows)?;
            let weights =
                physics_weights(&y, m_out, MaskMode::PerTimestep, Some(batch.validity()))?;
            Some((batch, weights))
        }
        None => None,
    };

    let f = |tape: &mut crate::autodiff::Tape, vars: &[crate::autodiff::Var]| {
        let xv = tape.constant(Tensor::new(vec![BATCH, m_in, N_FEATURES], x.clone())?);
        let (out, _) = model
            .forward_with(tape, &vars[..n_model], xv, mode)
            .map_err(invalid)?;
        let out = tape.mul_scalar(out, scaler.std[0]);
        let y_hat = tape.add_scalar(out, scaler.mean[0]);
        let data = data_loss_var(tape, y_hat, &y, LossReduction::Mean).map_err(invalid)?;
        let phy = match (&physics, variant) {
            (Some((batch, weights)), Some(v)) => {
                let raw = RawLatentVars::from_active(v, &vars[n_model..])
                    .ok_or_else(|| invalid("latent layout"))?;
                let y_phy = batch
                    .predict(tape, &raw, m_in, P1Mode::Tanh)
                    .map_err(invalid)?;
                physics_loss_var(tape, y_phy, &y, weights, LossReduction::Mean).map_err(invalid)?
            }
            _ => None,
        };
        Ok(total_loss(tape, data, phy).map_err(invalid)?.total)
    };
    Ok(grad_check_with(f, &params, 1e-5, options)?)
}
