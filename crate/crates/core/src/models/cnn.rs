//! Two stride-1 convolutions over the input window viewed as a one-channel
//! `[m_in, n_features]` image, each followed by batch normalization and a
//! rectifier, then a linear head over the flattened feature map.

use super::{ForwardMode, LayerStats, Lookup, ModelConfig, ModelError, ParamSpec};
use crate::autodiff::{BatchNormMode, Tape, Var};

pub(super) fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (c1, c2) = c.cnn_channels;
    let k = c.cnn_kernel;
    let (h, w) = c.cnn_feature_map();
    let flat = c2 * h * w;
    let mut v = vec![
        ParamSpec::uniform("conv1.weight", &[c1, 1, k, k], k * k),
        ParamSpec::uniform("conv1.bias", &[c1], k * k),
    ];
    v.extend(norm_specs("bn1", c1));
    v.push(ParamSpec::uniform(
        "conv2.weight",
        &[c2, c1, k, k],
        c1 * k * k,
    ));
    v.push(ParamSpec::uniform("conv2.bias", &[c2], c1 * k * k));
    v.extend(norm_specs("bn2", c2));
    v.push(ParamSpec::uniform("head.weight", &[flat, c.m_out], flat));
    v.push(ParamSpec::uniform("head.bias", &[c.m_out], flat));
    v
}

fn norm_specs(prefix: &str, channels: usize) -> [ParamSpec; 4] {
    [
        ParamSpec::constant(&format!("{prefix}.gamma"), &[channels], 1.0, true),
        ParamSpec::constant(&format!("{prefix}.beta"), &[channels], 0.0, true),
        ParamSpec::constant(&format!("{prefix}.running_mean"), &[channels], 0.0, false),
        ParamSpec::constant(&format!("{prefix}.running_var"), &[channels], 1.0, false),
    ]
}

fn block(
    p: &Lookup<'_>,
    tape: &mut Tape,
    x: Var,
    conv: &str,
    norm: &str,
    padding: usize,
    mode: ForwardMode,
    stats: &mut LayerStats,
) -> Result<Var, ModelError> {
    let y = tape.conv2d(
        x,
        p.var(&format!("{conv}.weight")),
        p.var(&format!("{conv}.bias")),
        (padding, padding),
    )?;
    let gamma = p.var(&format!("{norm}.gamma"));
    let beta = p.var(&format!("{norm}.beta"));
    let (y, s) = match mode {
        ForwardMode::Train => tape.batch_norm(y, gamma, beta, BatchNormMode::Train)?,
        ForwardMode::Inference => {
            let mean = p.data(&format!("{norm}.running_mean"));
            let var = p.data(&format!("{norm}.running_var"));
            tape.batch_norm(y, gamma, beta, BatchNormMode::Inference { mean, var })?
        }
    };
    if let Some(s) = s {
        stats.push((norm.to_string(), s));
    }
    Ok(tape.relu(y))
}

pub(super) fn forward(
    c: &ModelConfig,
    p: &Lookup<'_>,
    tape: &mut Tape,
    x: Var,
    mode: ForwardMode,
) -> Result<(Var, LayerStats), ModelError> {
    let batch = tape.shape(x)[0];
    let mut stats = Vec::new();
    let img = tape.reshape(x, &[batch, 1, c.m_in, c.n_features])?;
    let y = block(
        p,
        tape,
        img,
        "conv1",
        "bn1",
        c.cnn_padding,
        mode,
        &mut stats,
    )?;
    let y = block(p, tape, y, "conv2", "bn2", c.cnn_padding, mode, &mut stats)?;
    let flat: usize = tape.shape(y)[1..].iter().product();
    let y = tape.reshape(y, &[batch, flat])?;
    let y = tape.affine(y, p.var("head.weight"), p.var("head.bias"))?;
    Ok((y, stats))
}
