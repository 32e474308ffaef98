//! Single dense layer over time, shared by every channel, applied to the
//! input minus its last value; the last value is added back afterwards.
//! Only the scour channel is returned, so only that channel is computed.

use super::{Lookup, ModelConfig, ModelError, ParamSpec};
use crate::autodiff::{Tape, Tensor, Var};

pub(super) fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::uniform("linear.weight", &[c.m_in, c.m_out], c.m_in),
        ParamSpec::uniform("linear.bias", &[c.m_out], c.m_in),
    ]
}

pub(super) fn forward(
    c: &ModelConfig,
    p: &Lookup<'_>,
    tape: &mut Tape,
    x: Var,
) -> Result<Var, ModelError> {
    let batch = tape.shape(x)[0];
    let scour = tape.slice(x, 2, 0, 1)?;
    let scour = tape.reshape(scour, &[batch, c.m_in])?;
    let last = tape.slice(scour, 1, c.m_in - 1, 1)?;
    let ones_in = tape.constant(Tensor::full(&[1, c.m_in], 1.0));
    let ones_out = tape.constant(Tensor::full(&[1, c.m_out], 1.0));
    let last_in = tape.matmul(last, ones_in)?;
    let centered = tape.sub(scour, last_in)?;
    let y = tape.affine(centered, p.var("linear.weight"), p.var("linear.bias"))?;
    let last_out = tape.matmul(last, ones_out)?;
    Ok(tape.add(y, last_out)?)
}
