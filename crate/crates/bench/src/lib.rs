//! Shared fixtures for the benchmarks under `benches/`.

use std::collections::BTreeMap;

use spinn_core::datapipe::{clean, fit_scaler, make_windows, split, PipelineConfig, Split};
use spinn_core::synth::{generate, SynthSpec};
use spinn_core::{BridgeAttributes, ERefMode, Scaler};

pub struct Fixture {
    pub split: Split,
    pub scaler: Scaler,
    pub bridges: BTreeMap<String, BridgeAttributes>,
}

/// Windows of a seeded synthetic record, split and scaled.
pub fn synthetic(hours: usize, m_in: usize, m_out: usize) -> Fixture {
    let spec = SynthSpec::standard(hours, 0);
    let frame = generate(&spec, hours).expect("valid synthetic spec");
    let c = clean(&frame, &PipelineConfig::default());
    let pairs = make_windows(
        &c.frame,
        &c.spans,
        m_in,
        m_out,
        ERefMode::FirstStep,
        spec.bridge.as_built_elevation,
    )
    .expect("positive window lengths");
    let split = split(pairs, 0).expect("enough windows");
    let scaler = fit_scaler(&split.train).expect("non-empty train set");
    let bridges = [(spec.bridge.id.clone(), spec.bridge)].into();
    Fixture {
        split,
        scaler,
        bridges,
    }
}
