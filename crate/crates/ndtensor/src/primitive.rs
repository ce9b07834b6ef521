//! Primitive operations: forward evaluation, shape checking and vector-Jacobian
//! products. Every reduction walks its operands left to right so results are
//! bit-stable.

use std::str::FromStr;

use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    MulElementwise,
    ScalarMul(f64),
    Relu,
    Sigmoid,
    Exp,
    Neg,
    SoftmaxLastdim,
    LayerNormLastdim { eps: f64 },
    ReduceSum,
    ReduceMean,
    ConcatLastdim,
    Transpose2d,
    Abs,
    BroadcastAddRow,
    BroadcastMulRow,
    Log,
    Clamp { min: f64, max: f64 },
    ScalarAdd(f64),
    SumLastdim,
    Reshape(Vec<usize>),
    /// Hard `x >= threshold` forward, identity backward.
    StraightThrough { threshold: f64 },
}

/// Attribute bag for [`Primitive::from_name`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub scalar: Option<f64>,
    pub eps: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub threshold: Option<f64>,
    pub shape: Option<Vec<usize>>,
}

impl Attrs {
    pub fn scalar(x: f64) -> Self {
        Self {
            scalar: Some(x),
            ..Self::default()
        }
    }
}

/// Names understood by [`Primitive::from_name`].
pub const PRIMITIVE_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul_elementwise",
    "scalar_mul",
    "relu",
    "sigmoid",
    "exp",
    "neg",
    "softmax_lastdim",
    "layernorm_lastdim",
    "reduce_sum",
    "reduce_mean",
    "concat_lastdim",
    "transpose2d",
    "abs",
    "broadcast_add_row",
    "broadcast_mul_row",
    "log",
    "clamp",
    "scalar_add",
    "sum_lastdim",
    "reshape",
    "straight_through",
];

impl Primitive {
    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Self> {
        fn need(attr: Option<f64>, primitive: &'static str, name: &'static str) -> Result<f64> {
            attr.ok_or(TensorError::MissingAttr { primitive, attr: name })
        }
        Ok(match name {
            "matmul" => Self::MatMul,
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul_elementwise" => Self::MulElementwise,
            "scalar_mul" => Self::ScalarMul(need(attrs.scalar, "scalar_mul", "scalar")?),
            "relu" => Self::Relu,
            "sigmoid" => Self::Sigmoid,
            "exp" => Self::Exp,
            "neg" => Self::Neg,
            "softmax_lastdim" => Self::SoftmaxLastdim,
            "layernorm_lastdim" => Self::LayerNormLastdim {
                eps: attrs.eps.unwrap_or(LAYERNORM_EPS),
            },
            "reduce_sum" => Self::ReduceSum,
            "reduce_mean" => Self::ReduceMean,
            "concat_lastdim" => Self::ConcatLastdim,
            "transpose2d" => Self::Transpose2d,
            "abs" => Self::Abs,
            "broadcast_add_row" => Self::BroadcastAddRow,
            "broadcast_mul_row" => Self::BroadcastMulRow,
            "log" => Self::Log,
            "clamp" => Self::Clamp {
                min: need(attrs.min, "clamp", "min")?,
                max: need(attrs.max, "clamp", "max")?,
            },
            "scalar_add" => Self::ScalarAdd(need(attrs.scalar, "scalar_add", "scalar")?),
            "sum_lastdim" => Self::SumLastdim,
            "reshape" => Self::Reshape(attrs.shape.clone().ok_or(TensorError::MissingAttr {
                primitive: "reshape",
                attr: "shape",
            })?),
            "straight_through" => Self::StraightThrough {
                threshold: need(attrs.threshold, "straight_through", "threshold")?,
            },
            other => return Err(TensorError::UnknownPrimitive(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::MulElementwise => "mul_elementwise",
            Self::ScalarMul(_) => "scalar_mul",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Exp => "exp",
            Self::Neg => "neg",
            Self::SoftmaxLastdim => "softmax_lastdim",
            Self::LayerNormLastdim { .. } => "layernorm_lastdim",
            Self::ReduceSum => "reduce_sum",
            Self::ReduceMean => "reduce_mean",
            Self::ConcatLastdim => "concat_lastdim",
            Self::Transpose2d => "transpose2d",
            Self::Abs => "abs",
            Self::BroadcastAddRow => "broadcast_add_row",
            Self::BroadcastMulRow => "broadcast_mul_row",
            Self::Log => "log",
            Self::Clamp { .. } => "clamp",
            Self::ScalarAdd(_) => "scalar_add",
            Self::SumLastdim => "sum_lastdim",
            Self::Reshape(_) => "reshape",
            Self::StraightThrough { .. } => "straight_through",
        }
    }

    fn check_arity(&self, got: usize) -> Result<()> {
        let (ok, expected) = match self {
            Self::MatMul
            | Self::Add
            | Self::Sub
            | Self::MulElementwise
            | Self::BroadcastAddRow
            | Self::BroadcastMulRow => (got == 2, "2"),
            Self::ConcatLastdim => (got >= 1, "at least 1"),
            _ => (got == 1, "1"),
        };
        if ok {
            Ok(())
        } else {
            Err(TensorError::Arity {
                primitive: self.name(),
                expected,
                got,
            })
        }
    }

    /// Forward evaluation. Returns the output and any auxiliary values the
    /// backward rule needs beyond inputs and output.
    pub(crate) fn forward<T: Real>(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
        self.check_arity(inputs.len())?;
        let name = self.name();
        let mismatch = |a: &Tensor<T>, b: &Tensor<T>| TensorError::ShapeMismatch {
            primitive: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let a = inputs[0];
        let unary = |f: &dyn Fn(T) -> T| Tensor::from_fn(a.shape(), |k| f(a.data()[k]));
        let out = match self {
            Self::MatMul => {
                let b = inputs[1];
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(a, b));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))?
            }
            Self::Add | Self::Sub | Self::MulElementwise => {
                let b = inputs[1];
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                let (x, y) = (a.data(), b.data());
                Tensor::from_fn(a.shape(), |k| match self {
                    Self::Add => x[k] + y[k],
                    Self::Sub => x[k] - y[k],
                    _ => x[k] * y[k],
                })
            }
            Self::BroadcastAddRow | Self::BroadcastMulRow => {
                let b = inputs[1];
                let c = a.last_dim();
                if a.shape().len() != 2 || b.numel() != c || b.shape().len() > 2 || b.outer() != 1 {
                    return Err(mismatch(a, b));
                }
                let (x, r) = (a.data(), b.data());
                let add = matches!(self, Self::BroadcastAddRow);
                Tensor::from_fn(a.shape(), |k| if add { x[k] + r[k % c] } else { x[k] * r[k % c] })
            }
            Self::ScalarMul(s) => {
                let s = T::lit(*s);
                unary(&|x| x * s)
            }
            Self::ScalarAdd(s) => {
                let s = T::lit(*s);
                unary(&|x| x + s)
            }
            Self::Relu => unary(&|x| if x > T::zero() { x } else { T::zero() }),
            Self::Sigmoid => unary(&sigmoid),
            Self::Exp => unary(&|x| x.exp()),
            Self::Log => unary(&|x| x.ln()),
            Self::Neg => unary(&|x| -x),
            Self::Abs => unary(&|x| x.abs()),
            Self::Clamp { min, max } => {
                let (lo, hi) = (T::lit(*min), T::lit(*max));
                unary(&|x| x.max(lo).min(hi))
            }
            Self::StraightThrough { threshold } => {
                let t = T::lit(*threshold);
                unary(&|x| if x >= t { T::one() } else { T::zero() })
            }
            Self::SoftmaxLastdim => {
                let c = a.last_dim();
                let mut out = Vec::with_capacity(a.numel());
                for row in a.data().chunks(c) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let start = out.len();
                    let mut s = T::zero();
                    for &x in row {
                        let e = (x - m).exp();
                        s = s + e;
                        out.push(e);
                    }
                    for e in &mut out[start..] {
                        *e = *e / s;
                    }
                }
                Tensor::new(a.shape().to_vec(), out)?
            }
            Self::LayerNormLastdim { eps } => {
                let c = a.last_dim();
                let n = T::lit(c as f64);
                let eps = T::lit(*eps);
                let mut out = Vec::with_capacity(a.numel());
                let mut inv_std = Vec::with_capacity(a.outer());
                for row in a.data().chunks(c) {
                    let mean = row.iter().copied().sum::<T>() / n;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + eps).sqrt();
                    out.extend(row.iter().map(|&x| (x - mean) * inv));
                    inv_std.push(inv);
                }
                return Ok((Tensor::new(a.shape().to_vec(), out)?, inv_std));
            }
            Self::ReduceSum => Tensor::scalar(a.data().iter().copied().sum()),
            Self::ReduceMean => {
                Tensor::scalar(a.data().iter().copied().sum::<T>() / T::lit(a.numel() as f64))
            }
            Self::SumLastdim => {
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = 1;
                let sums = a.data().chunks(a.last_dim()).map(|r| r.iter().copied().sum()).collect();
                Tensor::new(shape, sums)?
            }
            Self::ConcatLastdim => {
                let lead = &a.shape()[..a.shape().len() - 1];
                for b in &inputs[1..] {
                    if &b.shape()[..b.shape().len() - 1] != lead {
                        return Err(mismatch(a, b));
                    }
                }
                let outer = a.outer();
                let total: usize = inputs.iter().map(|t| t.last_dim()).sum();
                let mut out = Vec::with_capacity(outer * total);
                for r in 0..outer {
                    for t in inputs {
                        out.extend_from_slice(t.row(r));
                    }
                }
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = total;
                Tensor::new(shape, out)?
            }
            Self::Transpose2d => {
                if a.shape().len() != 2 {
                    return Err(TensorError::ShapeMismatch {
                        primitive: name,
                        lhs: a.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                let (r, c) = (a.shape()[0], a.shape()[1]);
                Tensor::new(vec![c, r], transpose(a.data(), r, c))?
            }
            Self::Reshape(shape) => {
                if shape.iter().product::<usize>() != a.numel() {
                    return Err(TensorError::ShapeMismatch {
                        primitive: name,
                        lhs: a.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                a.clone().reshaped(shape)?
            }
        };
        Ok((out, Vec::new()))
    }

    /// Vector-Jacobian product. `grad` is dL/d(out); returns dL/d(input) for
    /// every input in order.
    pub(crate) fn backward<T: Real>(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        aux: &[T],
        grad: &[T],
    ) -> Vec<Vec<T>> {
        let a = inputs[0];
        let map = |f: &dyn Fn(usize) -> T| (0..grad.len()).map(f).collect::<Vec<T>>();
        match self {
            Self::MatMul => {
                let b = inputs[1];
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                let bt = transpose(b.data(), k, n);
                let at = transpose(a.data(), m, k);
                vec![matmul(grad, &bt, m, n, k), matmul(&at, grad, k, m, n)]
            }
            Self::Add => vec![grad.to_vec(), grad.to_vec()],
            Self::Sub => vec![grad.to_vec(), grad.iter().map(|&g| -g).collect()],
            Self::MulElementwise => {
                let b = inputs[1];
                vec![
                    map(&|k| grad[k] * b.data()[k]),
                    map(&|k| grad[k] * a.data()[k]),
                ]
            }
            Self::BroadcastAddRow => {
                let c = a.last_dim();
                let mut db = vec![T::zero(); c];
                for row in grad.chunks(c) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                vec![grad.to_vec(), db]
            }
            Self::BroadcastMulRow => {
                let c = a.last_dim();
                let r = inputs[1].data();
                let mut db = vec![T::zero(); c];
                for (grow, arow) in grad.chunks(c).zip(a.data().chunks(c)) {
                    for j in 0..c {
                        db[j] = db[j] + grow[j] * arow[j];
                    }
                }
                vec![map(&|k| grad[k] * r[k % c]), db]
            }
            Self::ScalarMul(s) => {
                let s = T::lit(*s);
                vec![map(&|k| grad[k] * s)]
            }
            Self::ScalarAdd(_) | Self::StraightThrough { .. } | Self::Reshape(_) => vec![grad.to_vec()],
            Self::Neg => vec![map(&|k| -grad[k])],
            Self::Relu => vec![map(&|k| {
                if a.data()[k] > T::zero() {
                    grad[k]
                } else {
                    T::zero()
                }
            })],
            Self::Abs => vec![map(&|k| {
                let x = a.data()[k];
                if x > T::zero() {
                    grad[k]
                } else if x < T::zero() {
                    -grad[k]
                } else {
                    T::zero()
                }
            })],
            Self::Sigmoid => vec![map(&|k| {
                let y = out.data()[k];
                grad[k] * y * (T::one() - y)
            })],
            Self::Exp => vec![map(&|k| grad[k] * out.data()[k])],
            Self::Log => vec![map(&|k| grad[k] / a.data()[k])],
            Self::Clamp { min, max } => {
                let (lo, hi) = (T::lit(*min), T::lit(*max));
                vec![map(&|k| {
                    let x = a.data()[k];
                    if x >= lo && x <= hi {
                        grad[k]
                    } else {
                        T::zero()
                    }
                })]
            }
            Self::SoftmaxLastdim => {
                let c = a.last_dim();
                let mut dx = Vec::with_capacity(grad.len());
                for (g, y) in grad.chunks(c).zip(out.data().chunks(c)) {
                    let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                    dx.extend(g.iter().zip(y).map(|(&g, &y)| y * (g - dot)));
                }
                vec![dx]
            }
            Self::LayerNormLastdim { .. } => {
                let c = a.last_dim();
                let n = T::lit(c as f64);
                let mut dx = Vec::with_capacity(grad.len());
                for ((g, xhat), &inv) in grad.chunks(c).zip(out.data().chunks(c)).zip(aux) {
                    let sum_g: T = g.iter().copied().sum();
                    let sum_gx: T = g.iter().zip(xhat).map(|(&g, &x)| g * x).sum();
                    dx.extend(
                        g.iter()
                            .zip(xhat)
                            .map(|(&g, &x)| inv / n * (n * g - sum_g - x * sum_gx)),
                    );
                }
                vec![dx]
            }
            Self::ReduceSum => vec![vec![grad[0]; a.numel()]],
            Self::ReduceMean => vec![vec![grad[0] / T::lit(a.numel() as f64); a.numel()]],
            Self::SumLastdim => {
                let c = a.last_dim();
                vec![(0..a.numel()).map(|k| grad[k / c]).collect()]
            }
            Self::ConcatLastdim => {
                let total = out.last_dim();
                let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
                for row in grad.chunks(total) {
                    let mut off = 0;
                    for (gi, t) in grads.iter_mut().zip(inputs) {
                        let w = t.last_dim();
                        gi.extend_from_slice(&row[off..off + w]);
                        off += w;
                    }
                }
                grads
            }
            Self::Transpose2d => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                vec![transpose(grad, c, r)]
            }
        }
    }
}

impl FromStr for Primitive {
    type Err = TensorError;

    /// Parses attribute-free primitives; use [`Primitive::from_name`] for the rest.
    fn from_str(s: &str) -> Result<Self> {
        Self::from_name(s, &Attrs::default())
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `a` is m×k, `b` is k×n, both row-major.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
