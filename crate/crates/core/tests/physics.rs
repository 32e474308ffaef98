use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinn_core::autodiff::{grad_check, Tape, Tensor};
use spinn_core::physics::*;

const TABLE: &str = "\
id,as_built_elevation_m,channel_width_m,pier_width_m,pier_length_m,attack_angle_deg,k1,k2,k3
212,48.8,65.2,1.5,8.5,0,0.9,1,1.1
527,193.2,153.3,1.2,10.7,10,1,1.8,1.1
539,10.4,152.7,1.3,7.9,0,0.9,1,1.1
742,35.2,152.4,1.5,7.3,0,1,1,1.1
";

fn bridges() -> Vec<BridgeAttributes> {
    BridgeAttributes::from_reader(TABLE.as_bytes()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn params(p1: f64, p2: f64, p3: f64, t_l: f64, alpha: f64, beta: f64) -> PhysicsParams {
    PhysicsParams {
        p1,
        p2,
        p3,
        t_l,
        alpha,
        beta,
    }
}

#[test]
fn attribute_table_parses() {
    let b = bridges();
    assert_eq!(b.len(), 4);
    assert_eq!(b[2].id, "539");
    assert_eq!(b[2].as_built_elevation, 10.4);
    assert!((b[1].k() - 1.98).abs() < 1e-12);
    let dup = format!("{TABLE}212,1,1,1,1,0,1,1,1\n");
    assert!(BridgeAttributes::from_reader(dup.as_bytes()).is_err());
}

#[test]
fn as_built_flow_depth() {
    let b = &bridges()[2];
    assert!((flow_depth(12.4, b.as_built_elevation) - 2.0).abs() < 1e-12);
}

#[test]
fn hec18_pinned_value() {
    // 2·1.5·0.99·(2/1.5)^0.35·(1.5/√(9.81·2))^0.43, evaluated separately
    let b = &bridges()[0];
    let v = hec18_max_scour(2.0, 1.5, b).unwrap();
    assert!(rel(v, 2.061930215729175) < 1e-12, "{v}");
}

#[test]
fn calibrated_hec18_pinned_value() {
    let b = &bridges()[2];
    let p = params(1.78, 1.0, 1.0, 1.0, 1.0, 1.0);
    let v = spinn_hec18(2.0, 300.0, &p, b).unwrap();
    assert!(rel(v, 2.7877064495863317) < 1e-12, "{v}");
    assert_eq!(spinn_hec18(2.0, 0.0, &p, b).unwrap(), 0.0);
}

#[test]
fn gtd_pinned_value() {
    let p = params(0.033, 1.0, 1.0, 2.35, 0.987, 0.697);
    let v = gtd_scour(24.0, 2.0, 300.0, &p).unwrap();
    assert!(rel(v, 3.4847218761290173) < 1e-12, "{v}");
    assert_eq!(gtd_scour(0.0, 2.0, 300.0, &p).unwrap(), 0.0);
    let lin = params(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
    assert!(rel(gtd_scour(1e4, 2.5, 40.0, &lin).unwrap(), 100.0) < 1e-12);
}

#[test]
fn td_boundaries() {
    let b = &bridges()[3];
    let p = params(0.5, 0.8, 1.0, 6.0, 0.0, 0.0);
    let ys = spinn_hec18(2.0, 300.0, &p, b).unwrap();
    assert_eq!(td_scour(0.0, 2.0, 300.0, &p, b).unwrap(), 0.0);
    assert!(rel(td_scour(1e5, 2.0, 300.0, &p, b).unwrap(), ys) < 1e-12);
    let at_tl = td_scour(6.0, 2.0, 300.0, &p, b).unwrap();
    assert!(rel(at_tl, 0.6321205588285577 * ys) < 1e-12);
    let degenerate = params(0.5, 0.8, 1.0, 0.0, 0.0, 0.0);
    assert!(td_scour(1.0, 2.0, 300.0, &degenerate, b).is_err());
}

#[test]
fn substitution_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let b = BridgeAttributes::new(
            "r",
            0.0,
            rng.random_range(5.0..300.0),
            rng.random_range(0.2..5.0),
            5.0,
            0.0,
            rng.random_range(0.5..1.5),
            rng.random_range(0.5..2.0),
            rng.random_range(1.0..1.3),
        )
        .unwrap();
        let y1 = rng.random_range(0.01..8.0);
        let q = rng.random_range(0.0..3000.0);
        let p = params(
            rng.random_range(-1.0..1.0),
            rng.random_range(0.01..1.0),
            1.0,
            1.0,
            0.0,
            0.0,
        );
        let direct = spinn_hec18(y1, q, &p, &b).unwrap();
        let composed = p.p1
            * hec18_max_scour(y1, velocity(q, p.p2, b.channel_width, y1).unwrap(), &b).unwrap();
        if direct != 0.0 || composed != 0.0 {
            worst = worst.max(rel(direct, composed));
        }
    }
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn dimensional_scaling() {
    let base = BridgeAttributes::new("s", 0.0, 80.0, 1.4, 5.0, 0.0, 1.0, 1.0, 1.1).unwrap();
    let p = params(0.7, 0.9, 1.0, 1.0, 0.0, 0.0);
    let (y1, q) = (2.3, 410.0);
    let f0 = spinn_hec18(y1, q, &p, &base).unwrap();
    let s: f64 = 1.7;
    let exponent = |f1: f64| (f1 / f0).ln() / s.ln();
    let mut b = base.clone();
    b.pier_width *= s;
    assert!((exponent(spinn_hec18(y1, q, &p, &b).unwrap()) - 0.65).abs() < 1e-12);
    let mut b = base.clone();
    b.channel_width *= s;
    assert!((exponent(spinn_hec18(y1, q, &p, &b).unwrap()) + 0.43).abs() < 1e-12);
    assert!((exponent(spinn_hec18(y1, q * s, &p, &base).unwrap()) - 0.43).abs() < 1e-12);
    assert!((exponent(spinn_hec18(y1 * s, q, &p, &base).unwrap()) + 0.295).abs() < 1e-12);
}

proptest! {
    #[test]
    fn td_is_nondecreasing_in_time(
        p3 in 0.01f64..1.0,
        t_l in 0.1f64..600.0,
        y1 in 0.1f64..6.0,
        q in 1.0f64..2000.0,
        t in 0.0f64..400.0,
        dt in 0.0f64..50.0,
    ) {
        let b = BridgeAttributes::new("m", 0.0, 100.0, 1.2, 5.0, 0.0, 1.0, 1.0, 1.1).unwrap();
        let p = params(0.4, 0.7, p3, t_l, 0.0, 0.0);
        let a = td_scour(t, y1, q, &p, &b).unwrap();
        let c = td_scour(t + dt, y1, q, &p, &b).unwrap();
        prop_assert!(c >= a);
    }

    #[test]
    fn boundary_is_exactly_zero(y1 in 0.01f64..6.0, q in 0.0f64..2000.0, alpha in -2.0f64..2.0, beta in -1.0f64..1.0) {
        let b = BridgeAttributes::new("m", 0.0, 100.0, 1.2, 5.0, 0.0, 1.0, 1.0, 1.1).unwrap();
        let p = params(0.4, 0.7, 0.9, 12.0, alpha, beta);
        prop_assert_eq!(td_scour(0.0, y1, q, &p, &b).unwrap(), 0.0);
        if q > 0.0 {
            prop_assert_eq!(gtd_scour(0.0, y1, q, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn constrained_ranges(raw in proptest::collection::vec(-30.0f64..30.0, 6), m_in in 1usize..400, m_out in 1usize..400) {
        for variant in [EquationVariant::Hec18, EquationVariant::Td, EquationVariant::Gtd] {
            let l = LatentParams { variant, raw_p1: raw[0], raw_p2: raw[1], raw_p3: raw[2], raw_tl: raw[3], raw_alpha: raw[4], raw_beta: raw[5] };
            let c = constrain(&l, m_in, m_out, P1Mode::Tanh);
            prop_assert!((-1.0..=1.0).contains(&c.p1));
            prop_assert!((-1.0..=1.0).contains(&c.p3));
            prop_assert!(c.p2 >= P2_EPS && c.p2 <= 1.0);
            prop_assert!(c.t_l >= TL_EPS && c.t_l <= 2.0 * (m_in + m_out) as f64);
            prop_assert_eq!(c.alpha, raw[4]);
        }
    }
}

struct Case {
    y1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    latent: LatentParams,
}

fn random_case(rng: &mut ChaCha8Rng, variant: EquationVariant, b: usize, m: usize) -> Case {
    let y1 = (0..b)
        .map(|_| (0..m).map(|_| rng.random_range(0.3..4.0)).collect())
        .collect();
    let q = (0..b)
        .map(|_| (0..m).map(|_| rng.random_range(20.0..900.0)).collect())
        .collect();
    let latent = LatentParams {
        variant,
        raw_p1: rng.random_range(-1.5..1.5),
        raw_p2: rng.random_range(0.2..2.0),
        raw_p3: rng.random_range(0.2..2.0),
        raw_tl: rng.random_range(-3.0..1.0),
        raw_alpha: rng.random_range(-0.5..1.2),
        raw_beta: rng.random_range(-0.3..0.8),
    };
    Case { y1, q, latent }
}

#[test]
fn batch_prediction_matches_scalar_equations() {
    let bridges = bridges();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (m_in, m) = (6, 5);
    for variant in [
        EquationVariant::Hec18,
        EquationVariant::Td,
        EquationVariant::Gtd,
    ] {
        for mode in [P1Mode::Tanh, P1Mode::Unconstrained] {
            let case = random_case(&mut rng, variant, 4, m);
            let rows: Vec<PhysicsRow> = (0..4)
                .map(|i| PhysicsRow {
                    y1_out: &case.y1[i],
                    q_out: &case.q[i],
                    bridge: &bridges[i],
                })
                .collect();
            let batch = PhysicsBatch::new(variant, m, &rows).unwrap();
            let mut tape = Tape::new();
            let raw = RawLatentVars::record(&mut tape, &case.latent);
            let pred = batch.predict(&mut tape, &raw, m_in, mode).unwrap();
            assert_eq!(tape.shape(pred), &[4, m]);
            let p = constrain(&case.latent, m_in, m, mode);
            for i in 0..4 {
                for t in 0..m {
                    let (y1, q) = match variant {
                        EquationVariant::Hec18 => (case.y1[i][t], case.q[i][t]),
                        _ => (case.y1[i][m - 1], case.q[i][m - 1]),
                    };
                    let expect = evaluate(variant, t as f64, y1, q, &p, &bridges[i]).unwrap();
                    let got = tape.value(pred).data()[i * m + t];
                    assert!(
                        (got - expect).abs() <= 1e-12 * expect.abs().max(1e-3),
                        "{variant:?} {got} {expect}"
                    );
                }
            }
        }
    }
}

#[test]
fn invalid_covariates_are_flagged() {
    let b = &bridges()[0];
    let y1 = [1.0, 0.0005, 2.0];
    let q = [10.0, 10.0, 0.0];
    let row = [PhysicsRow {
        y1_out: &y1,
        q_out: &q,
        bridge: b,
    }];
    assert_eq!(
        PhysicsBatch::new(EquationVariant::Hec18, 3, &row)
            .unwrap()
            .validity(),
        &[1.0, 0.0, 1.0]
    );
    assert_eq!(
        PhysicsBatch::new(EquationVariant::Td, 3, &row)
            .unwrap()
            .validity(),
        &[1.0, 1.0, 1.0]
    );
    assert_eq!(
        PhysicsBatch::new(EquationVariant::Gtd, 3, &row)
            .unwrap()
            .validity(),
        &[0.0, 0.0, 0.0]
    );
    let mut tape = Tape::new();
    let raw = RawLatentVars::record(&mut tape, &LatentParams::initial(EquationVariant::Gtd));
    let batch = PhysicsBatch::new(EquationVariant::Gtd, 3, &row).unwrap();
    let pred = batch.predict(&mut tape, &raw, 3, P1Mode::Tanh).unwrap();
    assert!(tape.value(pred).data().iter().all(|&v| v == 0.0));
}

#[test]
fn latent_gradients_match_finite_differences() {
    let bridges = bridges();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (m_in, m) = (4, 3);
    for variant in [
        EquationVariant::Hec18,
        EquationVariant::Td,
        EquationVariant::Gtd,
    ] {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let case = random_case(&mut rng, variant, 2, m);
            let target: Vec<f64> = (0..2 * m).map(|_| rng.random_range(-0.5..3.0)).collect();
            let names = LatentParams::active_names(variant);
            let params: Vec<(String, Tensor)> = names
                .iter()
                .map(|n| {
                    (
                        n.to_string(),
                        Tensor::vector(vec![case.latent.get(n).unwrap()]),
                    )
                })
                .collect();
            let f = |tape: &mut Tape, vars: &[spinn_core::autodiff::Var]| {
                let raw = RawLatentVars::from_active(variant, vars).unwrap();
                let rows: Vec<PhysicsRow> = (0..2)
                    .map(|i| PhysicsRow {
                        y1_out: &case.y1[i],
                        q_out: &case.q[i],
                        bridge: &bridges[i + 1],
                    })
                    .collect();
                let batch = PhysicsBatch::new(variant, m, &rows).unwrap();
                let pred = batch.predict(tape, &raw, m_in, P1Mode::Tanh).unwrap();
                let y = tape.constant(Tensor::new(vec![2, m], target.clone()).unwrap());
                let d = tape.sub(pred, y)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            };
            let report = grad_check(f, &params, 1e-5).unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst < 1e-4, "{variant:?}: {worst:e}");
    }
}
