use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    data_loss, data_loss_var, physics_loss_var, physics_weights, total_loss, Adam, LossBreakdown,
    TrainConfig, TrainError,
};
use crate::autodiff::{Tape, Tensor};
use crate::datapipe::{Scaler, SequencePair, N_FEATURES};
use crate::models::{Forecaster, ForwardMode};
use crate::physics::{BridgeAttributes, LatentParams, PhysicsBatch, PhysicsRow, RawLatentVars};

/// Prepared splits plus what the physics term needs.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [SequencePair],
    pub val: &'a [SequencePair],
    pub scaler: &'a Scaler,
    pub bridges: &'a BTreeMap<String, BridgeAttributes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the minibatch losses.
    pub train: LossBreakdown,
    pub val_data: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation data loss.
    pub model: Forecaster,
    /// Latent values from the same epoch.
    pub latent: Option<LatentParams>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Train-set data loss of the initial and the selected weights.
    pub initial_train_data: f64,
    pub final_train_data: f64,
}

/// Forecasts in meters for every pair, flattened `[n, m_out]`.
pub fn forecast(
    model: &Forecaster,
    scaler: &Scaler,
    pairs: &[SequencePair],
    chunk: usize,
) -> Result<Vec<f64>, TrainError> {
    let c = model.config();
    let mut out = Vec::with_capacity(pairs.len() * c.m_out);
    for part in pairs.chunks(chunk.max(1)) {
        let mut x = Vec::with_capacity(part.len() * c.m_in * N_FEATURES);
        for p in part {
            check_pair(p, c.m_in, c.m_out)?;
            x.extend(scaler.apply(&p.x));
        }
        let y = model.predict(&x, part.len())?;
        out.extend(y.into_iter().map(|v| scaler.unscale_scour(v)));
    }
    Ok(out)
}

fn check_pair(p: &SequencePair, m_in: usize, m_out: usize) -> Result<(), TrainError> {
    if p.x.len() != m_in * N_FEATURES || p.y.len() != m_out {
        return Err(TrainError::Config(format!(
            "sequence starting {} has {} inputs and {} targets; the model expects {}x{} and {}",
            p.start,
            p.x.len(),
            p.y.len(),
            m_in,
            N_FEATURES,
            m_out
        )));
    }
    Ok(())
}

fn set_data_loss(
    model: &Forecaster,
    scaler: &Scaler,
    pairs: &[SequencePair],
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let y_hat = forecast(model, scaler, pairs, 256)?;
    let y: Vec<f64> = pairs.iter().flat_map(|p| p.y.iter().copied()).collect();
    data_loss(&y, &y_hat, model.config().m_out, config.reduction)
}

/// Trains `model` (and the latent equation values for SPINN methods) with
/// Adam, keeping the weights with the lowest validation data loss.
pub fn train(
    mut model: Forecaster,
    data: &TrainData<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySet("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let (m_in, m_out) = (model.config().m_in, model.config().m_out);
    for p in data.train.iter().chain(data.val) {
        check_pair(p, m_in, m_out)?;
    }
    let variant = config.method.variant();
    if variant.is_some() {
        let missing: Vec<String> = data
            .train
            .iter()
            .map(|p| &p.bridge_id)
            .filter(|id| !data.bridges.contains_key(*id))
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if !missing.is_empty() {
            return Err(TrainError::MissingBridges(missing));
        }
    }
    let scaled: Vec<Vec<f64>> = data.train.iter().map(|p| data.scaler.apply(&p.x)).collect();
    let mut latent = variant.map(LatentParams::initial);
    let mut adam = Adam::new(config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let initial_train_data = set_data_loss(&model, data.scaler, data.train, config)?;
    let mut best = (f64::INFINITY, 0usize, model.clone(), latent);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let b = idx.len();
            let mut tape = Tape::new();
            let vars = model.record(&mut tape);
            let raw = latent.as_ref().map(|l| RawLatentVars::record(&mut tape, l));
            let mut x = Vec::with_capacity(b * m_in * N_FEATURES);
            let mut y = Vec::with_capacity(b * m_out);
            for &i in idx {
                x.extend_from_slice(&scaled[i]);
                y.extend_from_slice(&data.train[i].y);
            }
            let xv = tape.constant(Tensor::new(vec![b, m_in, N_FEATURES], x)?);
            let (out, stats) = model.forward_with(&mut tape, &vars, xv, ForwardMode::Train)?;
            let out = tape.mul_scalar(out, data.scaler.std[0]);
            let y_hat = tape.add_scalar(out, data.scaler.mean[0]);
            let data_term = data_loss_var(&mut tape, y_hat, &y, config.reduction)?;
            let physics = match (variant, raw.as_ref()) {
                (Some(v), Some(raw)) => {
                    let rows: Vec<PhysicsRow<'_>> = idx
                        .iter()
                        .map(|&i| {
                            let p = &data.train[i];
                            PhysicsRow {
                                y1_out: &p.y1_out,
                                q_out: &p.q_out,
                                bridge: &data.bridges[&p.bridge_id],
                            }
                        })
                        .collect();
                    let batch = PhysicsBatch::new(v, m_out, &rows)?;
                    let weights =
                        physics_weights(&y, m_out, config.mask_mode, Some(batch.validity()))?;
                    if weights.iter().any(|&w| w > 0.0) {
                        let y_phy = batch.predict(&mut tape, raw, m_in, config.p1_mode)?;
                        physics_loss_var(&mut tape, y_phy, &y, &weights, config.reduction)?
                    } else {
                        None
                    }
                }
                _ => None,
            };
            let loss = total_loss(&mut tape, data_term, physics)?;
            let br = loss.breakdown(&tape);
            if !br.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    data: br.mse_data,
                    physics: br.mse_phy,
                });
            }
            let grads = tape.backward(loss.total)?;
            let mut params = model.trainable();
            let mut g: Vec<Vec<f64>> = vars
                .iter()
                .zip(&params)
                .map(|(v, (_, t))| {
                    grads
                        .of(*v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.len()])
                })
                .collect();
            let named = raw.as_ref().map(RawLatentVars::named).unwrap_or_default();
            for (name, var) in &named {
                let value = latent.as_ref().and_then(|l| l.get(name)).unwrap_or(0.0);
                params.push((format!("latent.{name}"), Tensor::vector(vec![value])));
                g.push(
                    grads
                        .of(*var)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0]),
                );
            }
            adam.step(&mut params, &g)?;
            let n_model = vars.len();
            let weights: Vec<Tensor> = params[..n_model].iter().map(|(_, t)| t.clone()).collect();
            model.set_trainable(&weights)?;
            if let Some(l) = latent.as_mut() {
                for ((name, _), (_, t)) in named.iter().zip(&params[n_model..]) {
                    l.set(name, t.data()[0]);
                }
            }
            model.update_running_stats(&stats);
            sum.mse_data += br.mse_data;
            sum.mse_phy += br.mse_phy;
            sum.total += br.total;
            batches += 1;
        }
        let n = batches as f64;
        let val_data = set_data_loss(&model, data.scaler, data.val, config)?;
        if !val_data.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: batches,
                data: val_data,
                physics: 0.0,
            });
        }
        history.push(EpochRecord {
            epoch,
            train: LossBreakdown {
                mse_data: sum.mse_data / n,
                mse_phy: sum.mse_phy / n,
                total: sum.total / n,
            },
            val_data,
        });
        if val_data < best.0 {
            best = (val_data, epoch, model.clone(), latent);
        }
    }
    let (_, best_epoch, model, latent) = best;
    let final_train_data = set_data_loss(&model, data.scaler, data.train, config)?;
    Ok(TrainOutcome {
        model,
        latent,
        best_epoch,
        history,
        initial_train_data,
        final_train_data,
    })
}
