//! One-layer LSTM (gate order input, forget, cell, output) with zero
//! initial state. Hidden states of every step are concatenated and mapped
//! to the horizon by one linear layer.

use super::{Lookup, ModelConfig, ModelError, ParamSpec};
use crate::autodiff::{Tape, Tensor, Var};

pub(super) fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (f, h) = (c.n_features, c.hidden);
    vec![
        ParamSpec::uniform("lstm.weight_ih", &[f, 4 * h], h),
        ParamSpec::uniform("lstm.weight_hh", &[h, 4 * h], h),
        ParamSpec::uniform("lstm.bias_ih", &[4 * h], h),
        ParamSpec::uniform("lstm.bias_hh", &[4 * h], h),
        ParamSpec::uniform("head.weight", &[c.m_in * h, c.m_out], c.m_in * h),
        ParamSpec::uniform("head.bias", &[c.m_out], c.m_in * h),
    ]
}

pub(super) fn forward(
    c: &ModelConfig,
    p: &Lookup<'_>,
    tape: &mut Tape,
    x: Var,
) -> Result<Var, ModelError> {
    let batch = tape.shape(x)[0];
    let h = c.hidden;
    let (w_ih, w_hh) = (p.var("lstm.weight_ih"), p.var("lstm.weight_hh"));
    let (b_ih, b_hh) = (p.var("lstm.bias_ih"), p.var("lstm.bias_hh"));
    let mut hidden = tape.constant(Tensor::zeros(&[batch, h]));
    let mut cell = tape.constant(Tensor::zeros(&[batch, h]));
    let mut states = Vec::with_capacity(c.m_in);
    for t in 0..c.m_in {
        let xt = tape.slice(x, 1, t, 1)?;
        let xt = tape.reshape(xt, &[batch, c.n_features])?;
        let a = tape.affine(xt, w_ih, b_ih)?;
        let r = tape.affine(hidden, w_hh, b_hh)?;
        let gates = tape.add(a, r)?;
        let i = tape.slice(gates, 1, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(gates, 1, h, h)?;
        let f = tape.sigmoid(f);
        let g = tape.slice(gates, 1, 2 * h, h)?;
        let g = tape.tanh(g);
        let o = tape.slice(gates, 1, 3 * h, h)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell);
        hidden = tape.mul(o, squashed)?;
        states.push(hidden);
    }
    let flat = tape.concat(&states, 1)?;
    Ok(tape.affine(flat, p.var("head.weight"), p.var("head.bias"))?)
}
