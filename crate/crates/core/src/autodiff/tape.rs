use std::collections::BTreeMap;

use super::{AutodiffError, Tensor};

/// Batch normalization epsilon added to the variance.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-normalization node obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Inference { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-normalization node in train
/// mode. `var` is the unbiased estimate used to update running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleBy(Var, Var),
    PowScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        padding: (usize, usize),
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    MaskMul(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: one accumulated gradient per reachable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw gradient values for `var`, if the loss depends on it.
    pub fn of(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var` shaped like its value; zeros if unreachable.
    pub fn tensor(&self, tape: &Tape, var: Var) -> Tensor {
        let shape = tape.value(var).shape().to_vec();
        match self.of(var) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every named parameter on `tape`, keyed by name.
    pub fn named(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        tape.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.name
                    .as_ref()
                    .map(|name| (name.clone(), self.tensor(tape, Var(i))))
            })
            .collect()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// `c = a · b + beta · c` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().take(m * n).for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` ([m, k]), `b`
    // ([k, n]) and `c` ([m, n], row-major) as checked by every caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    /// Parents of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::ScaleBy(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaskMul(a, _) => vec![*a],
            Op::Slice { x, .. } => vec![*x],
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    /// Smallest distance of any recorded `relu` or `clamp_min` input from its
    /// kink, or `None` when the tape holds neither op.
    pub fn kink_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        for node in &self.nodes {
            let (input, at) = match node.op {
                Op::Relu(a) => (a, 0.0),
                Op::ClampMin(a, lo) => (a, lo),
                _ => continue,
            };
            for &v in self.nodes[input.0].value.data() {
                let d = (v - at).abs();
                margin = Some(margin.map_or(d, |m| m.min(d)));
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.parents_require_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            name: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => rg(a) || rg(b),
            Op::ScaleBy(a, b) | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::ClampMin(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaskMul(a, _) => rg(a),
            Op::Slice { x, .. } => rg(x),
            Op::Affine(x, w, b) => rg(x) || rg(w) || rg(b),
            Op::Conv2d { x, w, b, .. } => rg(x) || rg(w) || rg(b),
            Op::BatchNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            Op::Concat { parts, .. } => parts.iter().any(rg),
        }
    }

    /// Records a value that no gradient is requested for.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named, differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            name: Some(name.into()),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, &[va.shape(), vb.shape()]));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("unary preserves shape")
    }

    fn finite_or_domain(op: &'static str, t: &Tensor) -> Result<(), AutodiffError> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(AutodiffError::Domain {
                op,
                detail: "result is not finite".into(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(b).data().contains(&0.0) {
            return Err(AutodiffError::Domain {
                op: "divide",
                detail: "division by zero".into(),
            });
        }
        let v = self.binary("divide", a, b, |x, y| x / y)?;
        Self::finite_or_domain("divide", &v)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let Some(factor) = self.value(s).item() else {
            return Err(shape_err("scale", &[self.shape(a), self.shape(s)]));
        };
        let v = self.unary(a, |x| x * factor);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    pub fn pow_scalar(&mut self, a: Var, exponent: f64) -> Result<Var, AutodiffError> {
        let integral = exponent.fract() == 0.0;
        for &x in self.value(a).data() {
            if x < 0.0 && !integral {
                return Err(AutodiffError::Domain {
                    op: "power",
                    detail: format!("negative base {x} with non-integer exponent {exponent}"),
                });
            }
            if x == 0.0 && exponent < 0.0 {
                return Err(AutodiffError::Domain {
                    op: "power",
                    detail: format!("zero base with negative exponent {exponent}"),
                });
            }
        }
        let v = self.unary(a, |x| x.powf(exponent));
        Self::finite_or_domain("power", &v)?;
        Ok(self.push(v, Op::PowScalar(a, exponent)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.unary(a, f64::exp);
        Self::finite_or_domain("exponential", &v)?;
        Ok(self.push(v, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive argument {x}"),
            });
        }
        let v = self.unary(a, f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.unary(a, f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `max(a, lo)`; the gradient is passed only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.unary(a, |x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(shape_err("affine", &[sx, sw, sb]));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            &mut out,
            1.0,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::Affine(x, w, b)))
    }

    /// Stride-1 2-D convolution with zero padding `(rows, cols)` on both sides.
    ///
    /// `x: [B, C_in, H, W]`, `w: [C_out, C_in, k_h, k_w]`, `b: [C_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        padding: (usize, usize),
    ) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = sx.len() != 4
            || sw.len() != 4
            || sx[1] != sw[1]
            || sb != [sw[0]]
            || sx[2] + 2 * padding.0 < sw[2]
            || sx[3] + 2 * padding.1 < sw[3];
        if bad {
            return Err(shape_err("conv2d", &[sx, sw, sb]));
        }
        let geo = ConvGeometry::new(sx, sw, padding);
        let mut out = vec![0.0; geo.batch * geo.c_out * geo.h_out * geo.w_out];
        geo.forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        let v = Tensor::new(vec![geo.batch, geo.c_out, geo.h_out, geo.w_out], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, padding }))
    }

    /// Batch normalization over axis 1 of a `[B, C]` or `[B, C, H, W]` input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>), AutodiffError> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if !(sx.len() == 2 || sx.len() == 4) || sg != [sx[1]] || sb != [sx[1]] {
            return Err(shape_err("batch_norm", &[sx, sg, sb]));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let count = batch * spatial;
        let xv = self.value(x).data();
        let at = |bi: usize, c: usize, s: usize| (bi * channels + c) * spatial + s;

        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count == 0 {
                    return Err(shape_err("batch_norm", &[sx]));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut acc = 0.0;
                    for bi in 0..batch {
                        for s in 0..spatial {
                            acc += xv[at(bi, c, s)];
                        }
                    }
                    mean[c] = acc / count as f64;
                    let mut sq = 0.0;
                    for bi in 0..batch {
                        for s in 0..spatial {
                            let d = xv[at(bi, c, s)] - mean[c];
                            sq += d * d;
                        }
                    }
                    var[c] = sq / count as f64;
                }
                let unbiased = if count > 1 {
                    var.iter()
                        .map(|v| v * count as f64 / (count - 1) as f64)
                        .collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Inference { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(shape_err("batch_norm", &[sx, &[mean.len()], &[var.len()]]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        if inv_std.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::Domain {
                op: "batch_norm",
                detail: "variance below -eps".into(),
            });
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut x_hat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            for c in 0..channels {
                for s in 0..spatial {
                    let i = at(bi, c, s);
                    x_hat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * x_hat[i] + bt[c];
                }
            }
        }
        let v = Tensor::new(sx.to_vec(), out)?;
        let train = stats.is_some();
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            },
        );
        Ok((var_out, stats))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err("reshape", &[self.shape(a), shape]));
        }
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", &[&shape, &[axis, start, len]]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let dim = shape[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let v = Tensor::new(new_shape, out)?;
        Ok(self.push(v, Op::Slice { x: a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Invalid(
                "concatenate needs at least one input".into(),
            ));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concatenate", &[&base]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concatenate", &[&base, s]));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", &[self.shape(a)]));
        }
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a)))
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, AutodiffError> {
        if mask.len() != self.value(a).len() {
            return Err(shape_err("mask_multiply", &[self.shape(a), &[mask.len()]]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(v, Op::MaskMul(a, mask)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |v: &Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(s) = slot(grads, nodes, *v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a).to_vec(), val(b).to_vec());
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = val(b);
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] / vb[k];
                    }
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    for k in 0..s.len() {
                        s[k] -= g[k] * out[k] / vb[k];
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::MulScalar(a, c) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c);
                }
            }
            Op::ScaleBy(a, f) => {
                let factor = val(f)[0];
                let va = val(a);
                let dot: f64 = va.iter().zip(g).map(|(x, g)| x * g).sum();
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * factor);
                }
                if let Some(s) = slot(grads, nodes, *f) {
                    s[0] += dot;
                }
            }
            Op::PowScalar(a, e) => {
                let va = val(a);
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] * e * va[k].powf(e - 1.0);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k];
                    }
                }
            }
            Op::Log(a) => {
                let va = val(a);
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] / va[k];
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                }
            }
            Op::Relu(a) => {
                let va = val(a);
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        if va[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                }
            }
            Op::ClampMin(a, lo) => {
                let va = val(a);
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        if va[k] > *lo {
                            s[k] += g[k];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(a), val(b));
                if let Some(s) = slot(grads, nodes, *a) {
                    gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), s, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), s, 1.0);
                }
            }
            Op::Affine(x, w, b) => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                let (vx, vw) = (val(x), val(w));
                if let Some(s) = slot(grads, nodes, *x) {
                    gemm(m, n, k, g, (n as isize, 1), vw, (1, n as isize), s, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *w) {
                    gemm(k, m, n, vx, (1, k as isize), g, (n as isize, 1), s, 1.0);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Conv2d { x, w, b, padding } => {
                let geo =
                    ConvGeometry::new(nodes[x.0].value.shape(), nodes[w.0].value.shape(), *padding);
                let (vx, vw) = (val(x), val(w));
                if let Some(s) = slot(grads, nodes, *x) {
                    geo.backward_input(g, vw, s);
                }
                if let Some(s) = slot(grads, nodes, *w) {
                    geo.backward_weight(g, vx, s);
                }
                if let Some(s) = slot(grads, nodes, *b) {
                    let plane = geo.h_out * geo.w_out;
                    for bi in 0..geo.batch {
                        for co in 0..geo.c_out {
                            let off = (bi * geo.c_out + co) * plane;
                            s[co] += g[off..off + plane].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let sx = nodes[x.0].value.shape();
                let (batch, channels) = (sx[0], sx[1]);
                let spatial: usize = sx[2..].iter().product();
                let count = (batch * spatial) as f64;
                let at = |bi: usize, c: usize, s: usize| (bi * channels + c) * spatial + s;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        for s in 0..spatial {
                            let i = at(bi, c, s);
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * x_hat[i];
                        }
                    }
                }
                let gv = val(gamma).to_vec();
                if let Some(s) = slot(grads, nodes, *x) {
                    for bi in 0..batch {
                        for c in 0..channels {
                            let scale = gv[c] * inv_std[c];
                            for sp in 0..spatial {
                                let i = at(bi, c, sp);
                                s[i] += if *train {
                                    scale / count * (count * g[i] - sum_g[c] - x_hat[i] * sum_gx[c])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
                if let Some(s) = slot(grads, nodes, *gamma) {
                    s.iter_mut().zip(&sum_gx).for_each(|(s, v)| *s += v);
                }
                if let Some(s) = slot(grads, nodes, *beta) {
                    s.iter_mut().zip(&sum_g).for_each(|(s, v)| *s += v);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::MaskMul(a, mask) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    for k in 0..s.len() {
                        s[k] += g[k] * mask[k];
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = nodes[x.0].value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let dim = shape[*axis];
                let len = nodes[i].value.shape()[*axis];
                if let Some(s) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let to = (o * dim + start) * inner;
                        let from = o * len * inner;
                        for k in 0..len * inner {
                            s[to + k] += g[from + k];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let d = nodes[p.0].value.shape()[*axis];
                    if let Some(s) = slot(grads, nodes, *p) {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let to = o * d * inner;
                            for k in 0..d * inner {
                                s[to + k] += g[from + k];
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Sum(a) => {
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                if let Some(s) = slot(grads, nodes, *a) {
                    s.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], (pad_h, pad_w): (usize, usize)) -> Self {
        let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        Self {
            batch: sx[0],
            c_in: sx[1],
            h,
            w,
            c_out: sw[0],
            kh,
            kw,
            pad_h,
            pad_w,
            h_out: h + 2 * pad_h + 1 - kh,
            w_out: w + 2 * pad_w + 1 - kw,
        }
    }

    /// Output rows `i` for which input row `i + ki - pad` is in bounds.
    fn rows(&self, ki: usize) -> std::ops::Range<usize> {
        let lo = self.pad_h.saturating_sub(ki);
        let hi = (self.h + self.pad_h).saturating_sub(ki).min(self.h_out);
        lo..hi.max(lo)
    }

    fn cols(&self, kj: usize) -> std::ops::Range<usize> {
        let lo = self.pad_w.saturating_sub(kj);
        let hi = (self.w + self.pad_w).saturating_sub(kj).min(self.w_out);
        lo..hi.max(lo)
    }

    fn x_at(&self, bi: usize, ci: usize, r: usize, c: usize) -> usize {
        ((bi * self.c_in + ci) * self.h + r) * self.w + c
    }

    fn y_at(&self, bi: usize, co: usize, i: usize, j: usize) -> usize {
        ((bi * self.c_out + co) * self.h_out + i) * self.w_out + j
    }

    fn w_at(&self, co: usize, ci: usize, ki: usize, kj: usize) -> usize {
        ((co * self.c_in + ci) * self.kh + ki) * self.kw + kj
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64]) {
        for bi in 0..self.batch {
            for co in 0..self.c_out {
                let base = self.y_at(bi, co, 0, 0);
                out[base..base + self.h_out * self.w_out].fill(bias[co]);
                for ci in 0..self.c_in {
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = wt[self.w_at(co, ci, ki, kj)];
                            let cols = self.cols(kj);
                            for i in self.rows(ki) {
                                let r = i + ki - self.pad_h;
                                let yo = self.y_at(bi, co, i, 0);
                                let xo = self.x_at(bi, ci, r, 0);
                                for j in cols.clone() {
                                    out[yo + j] += wv * x[xo + j + kj - self.pad_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, g: &[f64], wt: &[f64], dx: &mut [f64]) {
        for bi in 0..self.batch {
            for co in 0..self.c_out {
                for ci in 0..self.c_in {
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let wv = wt[self.w_at(co, ci, ki, kj)];
                            let cols = self.cols(kj);
                            for i in self.rows(ki) {
                                let r = i + ki - self.pad_h;
                                let yo = self.y_at(bi, co, i, 0);
                                let xo = self.x_at(bi, ci, r, 0);
                                for j in cols.clone() {
                                    dx[xo + j + kj - self.pad_w] += wv * g[yo + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        for bi in 0..self.batch {
            for co in 0..self.c_out {
                for ci in 0..self.c_in {
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            let cols = self.cols(kj);
                            let mut acc = 0.0;
                            for i in self.rows(ki) {
                                let r = i + ki - self.pad_h;
                                let yo = self.y_at(bi, co, i, 0);
                                let xo = self.x_at(bi, ci, r, 0);
                                for j in cols.clone() {
                                    acc += g[yo + j] * x[xo + j + kj - self.pad_w];
                                }
                            }
                            dw[self.w_at(co, ci, ki, kj)] += acc;
                        }
                    }
                }
            }
        }
    }
}
