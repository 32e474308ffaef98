use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinn_core::autodiff::{
    grad_check, op_suite, AutodiffError, BatchNormMode, Tape, Tensor, Var, CHECKED_OPS,
};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
const POINTS: usize = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Contracts an arbitrary output with fixed weights so every entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = rand_tensor(&mut rng, &shape, 0.5, 1.5);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn suite<F>(name: &str, make: F)
where
    F: Fn(
        &mut ChaCha8Rng,
    ) -> (
        Vec<(String, Tensor)>,
        Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>,
    ),
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let (params, f) = make(&mut rng);
        let report = grad_check(f, &params, EPS).unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

type Built = (
    Vec<(String, Tensor)>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>,
);

fn unary(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    op: fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
) -> Built {
    let seed = rng.random();
    (
        vec![("x".into(), x)],
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, seed)
        }),
    )
}

#[test]
fn tanh_of_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0]));
    let y = t.tanh(x);
    assert_eq!(t.value(y).data(), &[0.0]);
}

#[test]
fn affine_identity() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = t.affine(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn conv_column_kernel_matches_direct_sum() {
    let input = [0.3, -1.2, 2.5, 0.7, 4.1];
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 5, 1], input.to_vec()).unwrap());
    let w = t.constant(Tensor::full(&[1, 1, 5, 1], 1.0));
    let b = t.constant(Tensor::vector(vec![0.0]));
    let y = t.conv2d(x, w, b, (2, 0)).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 5, 1]);
    // brute force: out[i] = sum_k in[i + k - 2] over in-range taps
    for i in 0..5i64 {
        let expect: f64 = (0..5i64)
            .map(|k| i + k - 2)
            .filter(|r| (0..5).contains(r))
            .map(|r| input[r as usize])
            .sum();
        assert!((t.value(y).data()[i as usize] - expect).abs() < 1e-15);
    }
    assert!((t.value(y).data()[2] - input.iter().sum::<f64>()).abs() < 1e-15);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (bn, ci, h, w, co, kh, kw, ph, pw) = (2, 3, 6, 4, 2, 3, 5, 1, 2);
    let x = rand_tensor(&mut rng, &[bn, ci, h, w], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[co, ci, kh, kw], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[co], -1.0, 1.0);
    let mut t = Tape::new();
    let (xv, kv, bv) = (
        t.constant(x.clone()),
        t.constant(k.clone()),
        t.constant(bias.clone()),
    );
    let y = t.conv2d(xv, kv, bv, (ph, pw)).unwrap();
    let (ho, wo) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
    assert_eq!(t.shape(y), &[bn, co, ho, wo]);
    for b in 0..bn {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.data()[o];
                    for c in 0..ci {
                        for a in 0..kh {
                            for d in 0..kw {
                                let r = i as i64 + a as i64 - ph as i64;
                                let s = j as i64 + d as i64 - pw as i64;
                                if r < 0 || s < 0 || r >= h as i64 || s >= w as i64 {
                                    continue;
                                }
                                acc += k.data()[((o * ci + c) * kh + a) * kw + d]
                                    * x.data()[((b * ci + c) * h + r as usize) * w + s as usize];
                            }
                        }
                    }
                    let got = t.value(y).data()[((b * co + o) * ho + i) * wo + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn sum_gradient_is_ones() {
    let mut t = Tape::new();
    let x = t.param("x", Tensor::vector(vec![1.0, -2.0, 3.0]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.of(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.of(s).unwrap(), &[1.0]);
}

#[test]
fn mean_squared_gradient() {
    let mut t = Tape::new();
    let x = t.param("x", Tensor::vector(vec![2.0]));
    let c = t.constant(Tensor::vector(vec![1.0]));
    let d = t.sub(x, c).unwrap();
    let sq = t.mul(d, d).unwrap();
    let m = t.mean(sq).unwrap();
    let g = t.backward(m).unwrap();
    assert_eq!(g.named(&t)["x"].data(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.param("x", Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn structured_errors() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    match t.add(a, b) {
        Err(AutodiffError::Shape { op, shapes }) => {
            assert_eq!(op, "add");
            assert_eq!(shapes, vec![vec![2], vec![3]]);
        }
        other => panic!("{other:?}"),
    }
    let z = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(
        t.div(a, z),
        Err(AutodiffError::Domain { op: "divide", .. })
    ));
    let neg = t.constant(Tensor::vector(vec![-1.0, 2.0]));
    assert!(matches!(
        t.log(neg),
        Err(AutodiffError::Domain { op: "log", .. })
    ));
    assert!(matches!(
        t.pow_scalar(neg, 0.5),
        Err(AutodiffError::Domain { op: "power", .. })
    ));
    assert!(t.pow_scalar(neg, 2.0).is_ok());
    let zero = t.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(
        t.pow_scalar(zero, -1.0),
        Err(AutodiffError::Domain { .. })
    ));
    let m = t.constant(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
    assert!(matches!(
        t.matmul(m, m),
        Err(AutodiffError::Shape { op: "matmul", .. })
    ));
}

#[test]
fn grad_check_quadratic_is_exact() {
    let r = grad_check(
        |t, v| t.mul(v[0], v[0]).map(|y| t.sum(y)),
        &[("x".into(), Tensor::vector(vec![1.0]))],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
}

#[test]
fn grad_check_rejects_non_finite() {
    let r = grad_check(
        |t, v| {
            let y = t.mul_scalar(v[0], f64::INFINITY);
            Ok(t.sum(y))
        },
        &[("x".into(), Tensor::vector(vec![1.0]))],
        1e-5,
    );
    assert!(matches!(r, Err(AutodiffError::NonFinite(_))));
}

#[test]
fn grad_check_sigmoid_chain() {
    suite("sigmoid chain", |rng| {
        let x = rand_tensor(rng, &[4], -3.0, 3.0);
        unary(rng, x, |t, v| {
            let a = t.sigmoid(v);
            let b = t.sigmoid(a);
            Ok(t.sigmoid(b))
        })
    });
}

#[test]
fn grad_check_batchnorm_affine() {
    suite("batchnorm affine", |rng| {
        let params = vec![
            ("x".to_string(), rand_tensor(rng, &[5, 3], -2.0, 2.0)),
            ("gamma".to_string(), rand_tensor(rng, &[3], 0.5, 1.5)),
            ("beta".to_string(), rand_tensor(rng, &[3], -0.5, 0.5)),
            ("w".to_string(), rand_tensor(rng, &[3, 2], -1.0, 1.0)),
            ("b".to_string(), rand_tensor(rng, &[2], -1.0, 1.0)),
        ];
        let seed = rng.random();
        (
            params,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let (n, _) = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train)?;
                let y = t.affine(n, v[3], v[4])?;
                let y = t.tanh(y);
                weighted_sum(t, y, seed)
            }),
        )
    });
}

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_suite(POINTS, 7).unwrap();
    assert_eq!(checks.len(), CHECKED_OPS.len());
    for c in checks {
        assert_eq!(c.points, POINTS);
        assert!(c.max_rel_error < TOL, "{}: {:e}", c.op, c.max_rel_error);
    }
}

#[test]
fn shared_subexpression_accumulates() {
    let x0 = Tensor::vector(vec![0.7, -1.3]);
    // f = sum(tanh(x) * tanh(x) + tanh(x)), with one shared tanh node
    let mut shared = Tape::new();
    let x = shared.param("x", x0.clone());
    let h = shared.tanh(x);
    let sq = shared.mul(h, h).unwrap();
    let y = shared.add(sq, h).unwrap();
    let s = shared.sum(y);
    let g_shared = shared.backward(s).unwrap().tensor(&shared, x);

    let mut expanded = Tape::new();
    let x = expanded.param("x", x0);
    let (h1, h2, h3) = (expanded.tanh(x), expanded.tanh(x), expanded.tanh(x));
    let sq = expanded.mul(h1, h2).unwrap();
    let y = expanded.add(sq, h3).unwrap();
    let s = expanded.sum(y);
    let g_expanded = expanded.backward(s).unwrap().tensor(&expanded, x);

    for (a, b) in g_shared.data().iter().zip(g_expanded.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn batchnorm_inference_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = rand_tensor(&mut rng, &[4, 3], -5.0, 5.0);
    let mut t = Tape::new();
    let x = t.constant(x0.clone());
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
    let (y, stats) = t
        .batch_norm(
            x,
            g,
            b,
            BatchNormMode::Inference {
                mean: &mean,
                var: &var,
            },
        )
        .unwrap();
    assert!(stats.is_none());
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in t.value(y).data().iter().zip(x0.data()) {
        assert!((a - b * scale).abs() < 1e-15);
        assert!((a - b).abs() <= 5.0 * 5e-6 + 1e-12);
    }
}

#[test]
fn batch_stats_are_unbiased() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
    let g = t.constant(Tensor::full(&[1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let (_, stats) = t.batch_norm(x, g, b, BatchNormMode::Train).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![3.0]);
    // deviations -2, -1, 0, 3 -> squares sum 14, unbiased 14 / 3
    assert!((stats.var[0] - 14.0 / 3.0).abs() < 1e-15);
}

fn forward_once(x0: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let x = t.constant(x0.clone());
    let w = t.constant(Tensor::full(&[3, 3], 0.37));
    let b = t.constant(Tensor::full(&[3], -0.1));
    let y = t.affine(x, w, b).unwrap();
    let y = t.sigmoid(y);
    t.value(y).data().to_vec()
}

proptest! {
    #[test]
    fn forward_is_deterministic(v in proptest::collection::vec(-10.0f64..10.0, 6)) {
        let x = Tensor::new(vec![2, 3], v).unwrap();
        let (a, b) = (forward_once(&x), forward_once(&x));
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_shape_invariant(shape in proptest::collection::vec(0usize..4, 0..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn finite_inputs_give_finite_outputs(v in proptest::collection::vec(-50.0f64..50.0, 4)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(v));
        let a = t.tanh(x);
        let b = t.sigmoid(x);
        let c = t.relu(x);
        let d = t.exp(a).unwrap();
        for y in [a, b, c, d] {
            prop_assert!(t.value(y).all_finite());
        }
    }
}
