//! Trained-run checkpoints: model blocks plus the scaler, reference mode and
//! latent equation values needed to forecast from raw sensor data.

use spinn_core::datapipe::{ERefMode, Scaler};
use spinn_core::models::{Checkpoint, ModelError};
use spinn_core::physics::{EquationVariant, LatentParams};
use spinn_core::{Forecaster, Method};

#[derive(Debug, Clone, PartialEq)]
pub struct RunBundle {
    pub model: Forecaster,
    pub scaler: Scaler,
    pub method: Method,
    pub e_ref: ERefMode,
    /// As-built bed elevation of the training bridge; absent for
    /// multi-bridge models.
    pub as_built_elevation: Option<f64>,
    pub training_set: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub latent: Option<LatentParams>,
}

fn bad(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn triple(s: &str, key: &str) -> Result<[f64; 3], ModelError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad(format!("bad value for {key}")))?;
    v.try_into()
        .map_err(|_| bad(format!("{key} needs 3 values")))
}

impl RunBundle {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let h = &mut ck.header;
        h.insert("method".into(), self.method.label().into());
        h.insert("e_ref".into(), self.e_ref.label().into());
        if let Some(e) = self.as_built_elevation {
            h.insert("as_built_elevation".into(), format!("{e:?}"));
        }
        h.insert("training_set".into(), self.training_set.clone());
        h.insert("seed".into(), self.seed.to_string());
        h.insert("best_epoch".into(), self.best_epoch.to_string());
        h.insert("scaler_mean".into(), join(&self.scaler.mean));
        h.insert("scaler_std".into(), join(&self.scaler.std));
        if let Some(l) = &self.latent {
            for name in LatentParams::active_names(l.variant) {
                let v = l.get(name).expect("active latent name");
                ck.push(
                    format!("latent.{name}"),
                    true,
                    spinn_core::Tensor::vector(vec![v]),
                );
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let model = Forecaster::from_checkpoint(ck)?;
        let get = |k: &str| {
            ck.header
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| bad(format!("missing header key {k}")))
        };
        let method = Method::from_label(get("method")?)
            .ok_or_else(|| bad("unknown method in checkpoint"))?;
        let e_ref = ERefMode::from_label(get("e_ref")?)
            .ok_or_else(|| bad("unknown e_ref in checkpoint"))?;
        let as_built_elevation = match ck.header.get("as_built_elevation") {
            Some(v) => Some(v.parse().map_err(|_| bad("bad as_built_elevation"))?),
            None => None,
        };
        let scaler = Scaler {
            mean: triple(get("scaler_mean")?, "scaler_mean")?,
            std: triple(get("scaler_std")?, "scaler_std")?,
        };
        let latent = match method.variant() {
            Some(v) => Some(read_latent(ck, v)?),
            None => None,
        };
        Ok(Self {
            model,
            scaler,
            method,
            e_ref,
            as_built_elevation,
            training_set: get("training_set")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| bad("bad seed"))?,
            best_epoch: get("best_epoch")?
                .parse()
                .map_err(|_| bad("bad best_epoch"))?,
            latent,
        })
    }
}

fn read_latent(ck: &Checkpoint, variant: EquationVariant) -> Result<LatentParams, ModelError> {
    let mut l = LatentParams::zeros(variant);
    for name in LatentParams::active_names(variant) {
        let block = ck
            .block(&format!("latent.{name}"))
            .ok_or_else(|| bad(format!("missing block latent.{name}")))?;
        let v = *block
            .tensor
            .data()
            .first()
            .ok_or_else(|| bad(format!("empty block latent.{name}")))?;
        l.set(name, v);
    }
    Ok(l)
}
