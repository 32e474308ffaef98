use proptest::prelude::*;
use spinn_core::datapipe::{clean, PipelineConfig};
use spinn_core::physics::td_scour;
use spinn_core::synth::*;

fn quiet(hours: usize, seed: u64) -> SynthSpec {
    let mut s = SynthSpec::standard(hours, seed);
    s.noise = Noise::default();
    s
}

#[test]
fn no_forcing_keeps_the_bed_at_as_built() {
    let mut s = quiet(300, 0);
    s.floods.clear();
    let f = generate(&s, 300).unwrap();
    assert_eq!(f.len(), 300);
    assert!(f
        .e_bed
        .iter()
        .all(|e| *e == Some(s.bridge.as_built_elevation)));
}

#[test]
fn single_flood_reaches_its_asymptote() {
    let mut s = quiet(2000, 0);
    s.floods = vec![Flood {
        start: 100,
        duration: 400,
        peak_q: 700.0,
    }];
    let (f, truth) = generate_with_truth(&s, 2000).unwrap();
    let y1_max = truth.y1.iter().cloned().fold(f64::MIN, f64::max);
    let q_max = truth.q.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(q_max, 700.0);
    // long-time limit of the time-dependent form
    let asymptote = td_scour(1e6, y1_max, q_max, &s.truth, &s.bridge).unwrap();
    let max_scour = f
        .e_bed
        .iter()
        .map(|e| s.bridge.as_built_elevation - e.unwrap())
        .fold(f64::MIN, f64::max);
    assert!(
        (max_scour - asymptote).abs() < 0.01 * asymptote,
        "{max_scour} vs {asymptote}"
    );
}

#[test]
fn same_seed_same_frame() {
    let s = SynthSpec::standard(1500, 9);
    assert_eq!(generate(&s, 1500).unwrap(), generate(&s, 1500).unwrap());
    let other = SynthSpec::standard(1500, 10);
    assert_ne!(generate(&s, 1500).unwrap(), generate(&other, 1500).unwrap());
}

#[test]
fn rejects_invalid_specs() {
    let s = SynthSpec::standard(100, 0);
    assert!(generate(&s, 0).is_err());
    let mut bad = s.clone();
    bad.truth.p2 = 1.5;
    assert!(generate(&bad, 100).is_err());
    let mut bad = s.clone();
    bad.floods.push(Flood {
        start: 10,
        duration: 5,
        peak_q: 1.0,
    });
    assert!(generate(&bad, 100).is_err());
}

#[test]
fn scour_is_nonnegative_and_refills_between_floods() {
    let s = quiet(8000, 3);
    let (_, truth) = generate_with_truth(&s, 8000).unwrap();
    assert!(truth.scour.iter().all(|&v| v >= 0.0));
    for pair in s.floods.windows(2) {
        let peak = truth.scour[pair[0].start..=pair[0].end()]
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        assert!(peak > 0.0);
        let before_next = truth.scour[pair[1].start - 1];
        assert!(before_next <= 0.05 * peak, "{before_next} vs {peak}");
    }
}

#[test]
fn rating_curve_spans_the_documented_depths() {
    assert!((rating(10.0) - 0.628).abs() < 1e-3);
    assert!((rating(1000.0) - 3.962).abs() < 1e-3);
}

#[test]
fn default_pipeline_flags_few_points() {
    for seed in 0..3 {
        let s = SynthSpec::standard(8000, seed);
        let f = generate(&s, 8000).unwrap();
        let c = clean(&f, &PipelineConfig::default());
        assert!(
            (c.outliers as f64) < 0.01 * (3 * f.len()) as f64,
            "seed {seed}: {} outliers",
            c.outliers
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_free_scour_never_negative(seed in 0u64..1000, hours in 200usize..3000) {
        let (_, truth) = generate_with_truth(&quiet(hours, seed), hours).unwrap();
        prop_assert!(truth.scour.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
