//! Randomized finite-difference checks for every tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, AutodiffError, BatchNormMode, Tape, Tensor, Var};

/// Worst relative error of one operation over its random points.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;
type Case = (Vec<(String, Tensor)>, Loss);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Values in `lo..hi` kept at least `gap` away from `kink`.
fn away_from(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kink: f64,
    gap: f64,
) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(lo..hi);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Contracts an output with fixed random weights so every entry matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape, 0.5, 1.5));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unary(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    op: fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
) -> Case {
    let seed = rng.random();
    (
        vec![("x".into(), x)],
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, seed)
        }),
    )
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Tensor,
    b: Tensor,
    op: fn(&mut Tape, Var, Var) -> Result<Var, AutodiffError>,
) -> Case {
    let seed = rng.random();
    (
        vec![("a".into(), a), ("b".into(), b)],
        Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, seed)
        }),
    )
}

fn ternary(
    rng: &mut ChaCha8Rng,
    params: [(&str, Tensor); 3],
    op: fn(&mut Tape, Var, Var, Var) -> Result<Var, AutodiffError>,
) -> Case {
    let seed = rng.random();
    (
        params.map(|(n, t)| (n.to_string(), t)).to_vec(),
        Box::new(move |t, v| {
            let y = op(t, v[0], v[1], v[2])?;
            weighted_sum(t, y, seed)
        }),
    )
}

fn case(op: &str, r: &mut ChaCha8Rng) -> Case {
    match op {
        "add" => {
            let (a, b) = (
                rand_tensor(r, &[2, 3], -2.0, 2.0),
                rand_tensor(r, &[2, 3], -2.0, 2.0),
            );
            binary(r, a, b, |t, a, b| t.add(a, b))
        }
        "sub" => {
            let (a, b) = (
                rand_tensor(r, &[3], -2.0, 2.0),
                rand_tensor(r, &[3], -2.0, 2.0),
            );
            binary(r, a, b, |t, a, b| t.sub(a, b))
        }
        "mul" => {
            let (a, b) = (
                rand_tensor(r, &[4], -2.0, 2.0),
                rand_tensor(r, &[4], -2.0, 2.0),
            );
            binary(r, a, b, |t, a, b| t.mul(a, b))
        }
        "div" => {
            let a = rand_tensor(r, &[4], -2.0, 2.0);
            let b = away_from(r, &[4], -2.0, 2.0, 0.0, 0.2);
            binary(r, a, b, |t, a, b| t.div(a, b))
        }
        "pow" => {
            let x = rand_tensor(r, &[4], 0.1, 3.0);
            unary(r, x, |t, v| t.pow_scalar(v, 0.43))
        }
        "pow_integer" => {
            let x = rand_tensor(r, &[4], -3.0, 3.0);
            unary(r, x, |t, v| t.pow_scalar(v, 3.0))
        }
        "exp" => {
            let x = rand_tensor(r, &[4], -3.0, 3.0);
            unary(r, x, |t, v| t.exp(v))
        }
        "log" => {
            let x = rand_tensor(r, &[4], 0.05, 5.0);
            unary(r, x, |t, v| t.log(v))
        }
        "tanh" => {
            let x = rand_tensor(r, &[4], -3.0, 3.0);
            unary(r, x, |t, v| Ok(t.tanh(v)))
        }
        "sigmoid" => {
            let x = rand_tensor(r, &[4], -5.0, 5.0);
            unary(r, x, |t, v| Ok(t.sigmoid(v)))
        }
        "relu" => {
            let x = away_from(r, &[6], -2.0, 2.0, 0.0, 1e-3);
            unary(r, x, |t, v| Ok(t.relu(v)))
        }
        "clamp_min" => {
            let x = away_from(r, &[6], -2.0, 2.0, 0.3, 1e-3);
            unary(r, x, |t, v| Ok(t.clamp_min(v, 0.3)))
        }
        "neg" => {
            let x = rand_tensor(r, &[3], -2.0, 2.0);
            unary(r, x, |t, v| Ok(t.neg(v)))
        }
        "add_scalar" => {
            let x = rand_tensor(r, &[3], -2.0, 2.0);
            unary(r, x, |t, v| Ok(t.add_scalar(v, 1.7)))
        }
        "mul_scalar" => {
            let x = rand_tensor(r, &[3], -2.0, 2.0);
            unary(r, x, |t, v| Ok(t.mul_scalar(v, -0.6)))
        }
        "scale_by" => {
            let (a, s) = (
                rand_tensor(r, &[3], -2.0, 2.0),
                rand_tensor(r, &[1], -2.0, 2.0),
            );
            binary(r, a, s, |t, a, s| t.scale_by(a, s))
        }
        "matmul" => {
            let (a, b) = (
                rand_tensor(r, &[3, 4], -1.0, 1.0),
                rand_tensor(r, &[4, 2], -1.0, 1.0),
            );
            binary(r, a, b, |t, a, b| t.matmul(a, b))
        }
        "affine" => {
            let p = [
                ("x", rand_tensor(r, &[3, 4], -1.0, 1.0)),
                ("w", rand_tensor(r, &[4, 2], -1.0, 1.0)),
                ("b", rand_tensor(r, &[2], -1.0, 1.0)),
            ];
            ternary(r, p, |t, x, w, b| t.affine(x, w, b))
        }
        "conv2d" => {
            let p = [
                ("x", rand_tensor(r, &[2, 2, 5, 3], -1.0, 1.0)),
                ("w", rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0)),
                ("b", rand_tensor(r, &[3], -1.0, 1.0)),
            ];
            ternary(r, p, |t, x, w, b| t.conv2d(x, w, b, (1, 1)))
        }
        "batch_norm_train" => {
            let p = [
                ("x", rand_tensor(r, &[3, 2, 2, 2], -2.0, 2.0)),
                ("gamma", rand_tensor(r, &[2], 0.5, 1.5)),
                ("beta", rand_tensor(r, &[2], -0.5, 0.5)),
            ];
            ternary(r, p, |t, x, g, b| {
                Ok(t.batch_norm(x, g, b, BatchNormMode::Train)?.0)
            })
        }
        "batch_norm_inference" => {
            let params = vec![
                ("x".to_string(), rand_tensor(r, &[3, 2], -2.0, 2.0)),
                ("gamma".to_string(), rand_tensor(r, &[2], 0.5, 1.5)),
                ("beta".to_string(), rand_tensor(r, &[2], -0.5, 0.5)),
            ];
            let seed = r.random();
            let mean = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            let var = vec![r.random_range(0.5..2.0), r.random_range(0.5..2.0)];
            (
                params,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let mode = BatchNormMode::Inference {
                        mean: &mean,
                        var: &var,
                    };
                    let (y, _) = t.batch_norm(v[0], v[1], v[2], mode)?;
                    weighted_sum(t, y, seed)
                }),
            )
        }
        "reshape" => {
            let x = rand_tensor(r, &[2, 3], -1.0, 1.0);
            unary(r, x, |t, v| {
                let y = t.reshape(v, &[3, 2])?;
                t.mul(y, y)
            })
        }
        "slice" => {
            let x = rand_tensor(r, &[2, 5, 2], -1.0, 1.0);
            unary(r, x, |t, v| {
                let y = t.slice(v, 1, 1, 3)?;
                t.mul(y, y)
            })
        }
        "concat" => {
            let (a, b) = (
                rand_tensor(r, &[2, 3], -1.0, 1.0),
                rand_tensor(r, &[2, 1], -1.0, 1.0),
            );
            binary(r, a, b, |t, a, b| {
                let y = t.concat(&[a, b, a], 1)?;
                t.mul(y, y)
            })
        }
        "sum" => {
            let x = rand_tensor(r, &[5], -1.0, 1.0);
            unary(r, x, |t, v| {
                let y = t.tanh(v);
                Ok(t.sum(y))
            })
        }
        "mean" => {
            let x = rand_tensor(r, &[5], -1.0, 1.0);
            unary(r, x, |t, v| {
                let y = t.mul(v, v)?;
                t.mean(y)
            })
        }
        "mask_mul" => {
            let x = rand_tensor(r, &[6], -1.0, 1.0);
            let mask: Vec<f64> = (0..6).map(|_| f64::from(r.random_bool(0.5))).collect();
            let seed = r.random();
            (
                vec![("x".into(), x)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.mask_mul(v[0], mask.clone())?;
                    let y = t.tanh(y);
                    weighted_sum(t, y, seed)
                }),
            )
        }
        other => unreachable!("no check for op {other}"),
    }
}

/// Every operation the tape records, as named in [`op_suite`] results.
pub const CHECKED_OPS: [&str; 27] = [
    "add",
    "sub",
    "mul",
    "div",
    "pow",
    "pow_integer",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "clamp_min",
    "neg",
    "add_scalar",
    "mul_scalar",
    "scale_by",
    "matmul",
    "affine",
    "conv2d",
    "batch_norm_train",
    "batch_norm_inference",
    "reshape",
    "slice",
    "concat",
    "sum",
    "mean",
    "mask_mul",
];

/// Central-difference check (step 1e-5) of each operation at `points`
/// random inputs inside its valid domain; kinked operations are sampled
/// away from the kink.
pub fn op_suite(points: usize, seed: u64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut out = Vec::with_capacity(CHECKED_OPS.len());
    for (i, op) in CHECKED_OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let (params, f) = case(op, &mut rng);
            worst = worst.max(grad_check(f, &params, 1e-5)?.max_rel_error);
        }
        out.push(OpCheck {
            op,
            points,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
