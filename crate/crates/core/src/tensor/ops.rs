//! Pure tensor math. Kernels in [`crate::kernel`] are thin wrappers around
//! these functions; tests and oracles may call them directly.

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Buffer, DType, Element, Shape, Tensor};
use crate::error::{Error, Result};

pub trait Num:
    Element
    + Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self;
}

pub trait Float: Num {
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

macro_rules! impl_num {
    ($t:ty) => {
        impl Num for $t {
            fn zero() -> Self {
                0 as $t
            }
            fn one() -> Self {
                1 as $t
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn from_usize(v: usize) -> Self {
                v as $t
            }
        }
    };
}
impl_num!(f32);
impl_num!(f64);
impl_num!(i32);
impl_num!(i64);

impl Float for f32 {
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
}

impl Float for f64 {
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

pub(crate) fn unsupported(op: &str, dtype: DType) -> Error {
    Error::InvalidArgument(format!("{op} does not support dtype {dtype}"))
}

/// Runs `$body` with `T` bound to the element type of a numeric dtype.
macro_rules! by_num {
    ($dtype:expr, $op:expr, $body:block) => {
        match $dtype {
            DType::F32 => {
                #[allow(dead_code)]
                type T = f32;
                $body
            }
            DType::F64 => {
                #[allow(dead_code)]
                type T = f64;
                $body
            }
            DType::I32 => {
                #[allow(dead_code)]
                type T = i32;
                $body
            }
            DType::I64 => {
                #[allow(dead_code)]
                type T = i64;
                $body
            }
            other => Err($crate::tensor::ops::unsupported($op, other)),
        }
    };
}

macro_rules! by_float {
    ($dtype:expr, $op:expr, $body:block) => {
        match $dtype {
            DType::F32 => {
                #[allow(dead_code)]
                type T = f32;
                $body
            }
            DType::F64 => {
                #[allow(dead_code)]
                type T = f64;
                $body
            }
            other => Err($crate::tensor::ops::unsupported($op, other)),
        }
    };
}

macro_rules! by_any {
    ($dtype:expr, $body:block) => {
        match $dtype {
            DType::F32 => {
                #[allow(dead_code)]
                type T = f32;
                $body
            }
            DType::F64 => {
                #[allow(dead_code)]
                type T = f64;
                $body
            }
            DType::I32 => {
                #[allow(dead_code)]
                type T = i32;
                $body
            }
            DType::I64 => {
                #[allow(dead_code)]
                type T = i64;
                $body
            }
            DType::Bool => {
                #[allow(dead_code)]
                type T = bool;
                $body
            }
            DType::String => {
                #[allow(dead_code)]
                type T = String;
                $body
            }
        }
    };
}

#[allow(unused_imports)]
pub(crate) use {by_any, by_float, by_num};

fn same_dtype(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch {
            op: op.into(),
            expected: a.dtype(),
            got: b.dtype(),
        });
    }
    Ok(())
}

fn shape_err(op: &str, a: &Shape, b: &Shape) -> Error {
    Error::ShapeMismatch {
        op: op.into(),
        a: a.clone(),
        b: b.clone(),
    }
}

/// Elementwise binary op; a rank-0 operand is broadcast against the other.
fn zip_broadcast<T: Copy, U: Element>(
    op: &str,
    a: &Tensor,
    av: &[T],
    b: &Tensor,
    bv: &[T],
    f: impl Fn(T, T) -> U,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().clone(), out)
    } else if a.rank() == 0 {
        let x = av[0];
        Tensor::new(b.shape().clone(), bv.iter().map(|&y| f(x, y)).collect())
    } else if b.rank() == 0 {
        let y = bv[0];
        Tensor::new(a.shape().clone(), av.iter().map(|&x| f(x, y)).collect())
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "Add",
            BinaryOp::Sub => "Sub",
            BinaryOp::Mul => "Mul",
            BinaryOp::Div => "Div",
            BinaryOp::Maximum => "Maximum",
            BinaryOp::Minimum => "Minimum",
        }
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let name = op.name();
    same_dtype(name, a, b)?;
    by_num!(a.dtype(), name, {
        let (av, bv) = (a.as_slice::<T>()?, b.as_slice::<T>()?);
        if op == BinaryOp::Div && a.dtype().is_integer() && bv.iter().any(|&y| y == T::zero()) {
            return Err(Error::invalid("integer division by zero"));
        }
        match op {
            BinaryOp::Add => zip_broadcast(name, a, av, b, bv, |x, y| x + y),
            BinaryOp::Sub => zip_broadcast(name, a, av, b, bv, |x, y| x - y),
            BinaryOp::Mul => zip_broadcast(name, a, av, b, bv, |x, y| x * y),
            BinaryOp::Div => zip_broadcast(name, a, av, b, bv, |x, y| x / y),
            BinaryOp::Maximum => {
                zip_broadcast(name, a, av, b, bv, |x, y| if y > x { y } else { x })
            }
            BinaryOp::Minimum => {
                zip_broadcast(name, a, av, b, bv, |x, y| if y < x { y } else { x })
            }
        }
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Add, a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Sub, a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Mul, a, b)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(BinaryOp::Div, a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Less,
    LessEqual,
    Greater,
    GreaterEqual,
    Equal,
    NotEqual,
}

pub fn compare(op: CompareOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dtype("Compare", a, b)?;
    fn cmp<T: PartialOrd + Copy>(op: CompareOp, x: T, y: T) -> bool {
        match op {
            CompareOp::Less => x < y,
            CompareOp::LessEqual => x <= y,
            CompareOp::Greater => x > y,
            CompareOp::GreaterEqual => x >= y,
            CompareOp::Equal => x == y,
            CompareOp::NotEqual => x != y,
        }
    }
    match a.dtype() {
        DType::Bool => {
            let (av, bv) = (a.as_slice::<bool>()?, b.as_slice::<bool>()?);
            zip_broadcast("Compare", a, av, b, bv, |x, y| cmp(op, x, y))
        }
        DType::String => Err(unsupported("Compare", DType::String)),
        dt => by_num!(dt, "Compare", {
            let (av, bv) = (a.as_slice::<T>()?, b.as_slice::<T>()?);
            zip_broadcast("Compare", a, av, b, bv, |x, y| cmp(op, x, y))
        }),
    }
}

pub fn logical_not(a: &Tensor) -> Result<Tensor> {
    let v = a.as_slice::<bool>()?;
    Tensor::new(a.shape().clone(), v.iter().map(|x| !x).collect())
}

pub fn logical_and(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (av, bv) = (a.as_slice::<bool>()?, b.as_slice::<bool>()?);
    zip_broadcast("LogicalAnd", a, av, b, bv, |x, y| x && y)
}

fn map_num(op: &str, a: &Tensor, f64f: impl Fn(f64) -> f64) -> Result<Tensor> {
    by_num!(a.dtype(), op, {
        let v = a.as_slice::<T>()?;
        Tensor::new(
            a.shape().clone(),
            v.iter().map(|&x| T::from_f64(f64f(x.to_f64()))).collect::<Vec<T>>(),
        )
    })
}

pub fn neg(a: &Tensor) -> Result<Tensor> {
    by_num!(a.dtype(), "Neg", {
        let v = a.as_slice::<T>()?;
        Tensor::new(a.shape().clone(), v.iter().map(|&x| -x).collect::<Vec<T>>())
    })
}

pub fn square(a: &Tensor) -> Result<Tensor> {
    by_num!(a.dtype(), "Square", {
        let v = a.as_slice::<T>()?;
        Tensor::new(a.shape().clone(), v.iter().map(|&x| x * x).collect::<Vec<T>>())
    })
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    by_num!(a.dtype(), "Relu", {
        let v = a.as_slice::<T>()?;
        Tensor::new(
            a.shape().clone(),
            v.iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect::<Vec<T>>(),
        )
    })
}

/// Upstream gradient masked by `x > 0`.
pub fn relu_grad(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_dtype("ReluGrad", grad, x)?;
    if grad.shape() != x.shape() {
        return Err(shape_err("ReluGrad", grad.shape(), x.shape()));
    }
    by_num!(x.dtype(), "ReluGrad", {
        let (g, xv) = (grad.as_slice::<T>()?, x.as_slice::<T>()?);
        Tensor::new(
            x.shape().clone(),
            g.iter()
                .zip(xv)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect::<Vec<T>>(),
        )
    })
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    by_float!(a.dtype(), "Sigmoid", {
        let v = a.as_slice::<T>()?;
        Tensor::new(
            a.shape().clone(),
            v.iter()
                .map(|&x| T::one() / (T::one() + (-x).exp()))
                .collect::<Vec<T>>(),
        )
    })
}

/// `g · y · (1 − y)` where `y` is the sigmoid output.
pub fn sigmoid_grad(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    same_dtype("SigmoidGrad", y, grad)?;
    if grad.shape() != y.shape() {
        return Err(shape_err("SigmoidGrad", grad.shape(), y.shape()));
    }
    by_float!(y.dtype(), "SigmoidGrad", {
        let (yv, g) = (y.as_slice::<T>()?, grad.as_slice::<T>()?);
        Tensor::new(
            y.shape().clone(),
            yv.iter()
                .zip(g)
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect::<Vec<T>>(),
        )
    })
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    by_float!(a.dtype(), "Exp", { map_num("Exp", a, f64::exp) })
}

fn last_dim(op: &str, a: &Tensor) -> Result<usize> {
    match a.dims().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::invalid(format!(
            "{op} needs a rank >= 1 tensor with a non-empty last axis, got {}",
            a.shape()
        ))),
    }
}

fn softmax_row<T: Float>(row: &[T], out: &mut Vec<T>) {
    let mut max = row[0];
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let start = out.len();
    let mut sum = T::zero();
    for &x in row {
        let e = (x - max).exp();
        sum = sum + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let c = last_dim("Softmax", a)?;
    by_float!(a.dtype(), "Softmax", {
        let v = a.as_slice::<T>()?;
        let mut out: Vec<T> = Vec::with_capacity(v.len());
        for row in v.chunks(c) {
            softmax_row(row, &mut out);
        }
        Tensor::new(a.shape().clone(), out)
    })
}

/// Vector-Jacobian product of softmax: `y ⊙ (g − Σ g⊙y)` per row.
pub fn softmax_grad(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    same_dtype("SoftmaxGrad", y, grad)?;
    if y.shape() != grad.shape() {
        return Err(shape_err("SoftmaxGrad", y.shape(), grad.shape()));
    }
    let c = last_dim("SoftmaxGrad", y)?;
    by_float!(y.dtype(), "SoftmaxGrad", {
        let (yv, g) = (y.as_slice::<T>()?, grad.as_slice::<T>()?);
        let mut out: Vec<T> = Vec::with_capacity(yv.len());
        for (yr, gr) in yv.chunks(c).zip(g.chunks(c)) {
            let mut dot = T::zero();
            for (&y, &g) in yr.iter().zip(gr) {
                dot = dot + y * g;
            }
            out.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
        }
        Tensor::new(y.shape().clone(), out)
    })
}

fn xent_check(logits: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    same_dtype("SoftmaxCrossEntropy", logits, labels)?;
    if logits.rank() != 2 || logits.shape() != labels.shape() {
        return Err(shape_err(
            "SoftmaxCrossEntropy",
            logits.shape(),
            labels.shape(),
        ));
    }
    let (b, c) = (logits.dims()[0], logits.dims()[1]);
    if c == 0 {
        return Err(Error::invalid("SoftmaxCrossEntropy needs at least one class"));
    }
    Ok((b, c))
}

/// Per-row cross entropy `−Σ labels · log softmax(logits)` for `[b×c]`
/// inputs; returns a `[b]` loss vector.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, c) = xent_check(logits, labels)?;
    by_float!(logits.dtype(), "SoftmaxCrossEntropy", {
        let (lv, yv) = (logits.as_slice::<T>()?, labels.as_slice::<T>()?);
        let mut out: Vec<T> = Vec::with_capacity(b);
        for (row, lab) in lv.chunks(c).zip(yv.chunks(c)) {
            let mut max = row[0];
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = T::zero();
            for &x in row {
                sum = sum + (x - max).exp();
            }
            let log_z = max + sum.ln();
            let mut loss = T::zero();
            for (&x, &y) in row.iter().zip(lab) {
                loss = loss + y * (log_z - x);
            }
            out.push(loss);
        }
        Tensor::new(vec![b], out)
    })
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits:
/// `(softmax(logits) − labels) · g[row]`.
pub fn softmax_cross_entropy_grad(
    logits: &Tensor,
    labels: &Tensor,
    grad: &Tensor,
) -> Result<Tensor> {
    let (b, c) = xent_check(logits, labels)?;
    same_dtype("SoftmaxCrossEntropyGrad", logits, grad)?;
    if grad.dims() != [b] {
        return Err(shape_err(
            "SoftmaxCrossEntropyGrad",
            grad.shape(),
            &Shape::new(vec![b]),
        ));
    }
    by_float!(logits.dtype(), "SoftmaxCrossEntropyGrad", {
        let (lv, yv, g) = (
            logits.as_slice::<T>()?,
            labels.as_slice::<T>()?,
            grad.as_slice::<T>()?,
        );
        let mut out: Vec<T> = Vec::with_capacity(b * c);
        for ((row, lab), &g) in lv.chunks(c).zip(yv.chunks(c)).zip(g) {
            let start = out.len();
            softmax_row(row, &mut out);
            for (p, &y) in out[start..].iter_mut().zip(lab) {
                *p = (*p - y) * g;
            }
        }
        Tensor::new(logits.shape().clone(), out)
    })
}

fn matrix_dims(op: &str, t: &Tensor, transpose: bool) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::invalid(format!(
            "{op} expects rank-2 operands, got shape {}",
            t.shape()
        )));
    }
    let (r, c) = (t.dims()[0], t.dims()[1]);
    Ok(if transpose { (c, r) } else { (r, c) })
}

/// Matrix product `op(a) · op(b)` where `op` optionally transposes.
///
/// Each output element accumulates its products in increasing inner-index
/// order starting from zero, so results match a naive triple loop exactly.
pub fn matmul_t(a: &Tensor, b: &Tensor, transpose_a: bool, transpose_b: bool) -> Result<Tensor> {
    same_dtype("MatMul", a, b)?;
    let (p, q) = matrix_dims("MatMul", a, transpose_a)?;
    let (q2, r) = matrix_dims("MatMul", b, transpose_b)?;
    if q != q2 {
        return Err(shape_err("MatMul", a.shape(), b.shape()));
    }
    by_num!(a.dtype(), "MatMul", {
        let (av, bv) = (a.as_slice::<T>()?, b.as_slice::<T>()?);
        let (a_cols, b_cols) = (a.dims()[1], b.dims()[1]);
        let at = |i: usize, k: usize| {
            if transpose_a {
                av[k * a_cols + i]
            } else {
                av[i * a_cols + k]
            }
        };
        let mut out: Vec<T> = vec![T::zero(); p * r];
        if transpose_b {
            for i in 0..p {
                for j in 0..r {
                    let mut acc = T::zero();
                    for k in 0..q {
                        acc = acc + at(i, k) * bv[j * b_cols + k];
                    }
                    out[i * r + j] = acc;
                }
            }
        } else {
            for i in 0..p {
                let orow = &mut out[i * r..(i + 1) * r];
                for k in 0..q {
                    let x = at(i, k);
                    let brow = &bv[k * b_cols..k * b_cols + r];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o = *o + x * y;
                    }
                }
            }
        }
        Tensor::new(vec![p, r], out)
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, b, false, false)
}

/// Batched matrix product over a shared leading axis: `[b,m,n]·[b,n,p]`.
pub fn batch_matmul(a: &Tensor, b: &Tensor, adj_a: bool, adj_b: bool) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.dims()[0] != b.dims()[0] {
        return Err(shape_err("BatchMatMul", a.shape(), b.shape()));
    }
    let items = (0..a.dims()[0])
        .map(|i| matmul_t(&row(a, i)?, &row(b, i)?, adj_a, adj_b))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        let (m, _) = matrix_dims("BatchMatMul", &row_shape_probe(a)?, adj_a)?;
        let (_, p) = matrix_dims("BatchMatMul", &row_shape_probe(b)?, adj_b)?;
        return Ok(Tensor::zeros(a.dtype(), [0, m, p]));
    }
    stack(&items)
}

fn row_shape_probe(a: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros(a.dtype(), a.dims()[1..].to_vec()))
}

/// Elementwise sum of `inputs`, accumulated in input order.
pub fn addn(inputs: &[Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("AddN needs at least one input"))?;
    for t in &inputs[1..] {
        same_dtype("AddN", first, t)?;
        if t.shape() != first.shape() {
            return Err(shape_err("AddN", first.shape(), t.shape()));
        }
    }
    if inputs.len() == 1 {
        return Ok(first.clone());
    }
    by_num!(first.dtype(), "AddN", {
        let mut acc: Vec<T> = first.as_slice::<T>()?.to_vec();
        for t in &inputs[1..] {
            for (a, &x) in acc.iter_mut().zip(t.as_slice::<T>()?) {
                *a = *a + x;
            }
        }
        Tensor::new(first.shape().clone(), acc)
    })
}

fn check_axis(op: &str, a: &Tensor, axis: usize) -> Result<()> {
    if axis >= a.rank() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {}",
            a.shape()
        )));
    }
    Ok(())
}

/// Sum (or mean) over one axis, or over all elements when `axis` is `None`.
/// Sums accumulate sequentially along the reduced axis starting at zero.
pub fn reduce(a: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    let op = if mean { "ReduceMean" } else { "ReduceSum" };
    by_num!(a.dtype(), op, {
        let v = a.as_slice::<T>()?;
        match axis {
            None => {
                let mut acc = T::zero();
                for &x in v {
                    acc = acc + x;
                }
                if mean {
                    acc = acc / T::from_usize(v.len().max(1));
                }
                Ok(Tensor::scalar(acc))
            }
            Some(axis) => {
                check_axis(op, a, axis)?;
                let dims = a.dims();
                let outer: usize = dims[..axis].iter().product();
                let n = dims[axis];
                let inner: usize = dims[axis + 1..].iter().product();
                let mut out: Vec<T> = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            let slot = &mut out[o * inner + i];
                            *slot = *slot + v[base + i];
                        }
                    }
                }
                if mean {
                    let d = T::from_usize(n.max(1));
                    for x in &mut out {
                        *x = *x / d;
                    }
                }
                let mut out_dims = dims.to_vec();
                out_dims.remove(axis);
                Tensor::new(out_dims, out)
            }
        }
    })
}

/// Broadcasts a reduction's upstream gradient back to the input's shape.
pub fn reduce_grad(grad: &Tensor, input_shape: &Shape, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    by_num!(grad.dtype(), "ReduceGrad", {
        let g = grad.as_slice::<T>()?;
        let n_total = input_shape.num_elements();
        match axis {
            None => {
                if g.len() != 1 {
                    return Err(shape_err("ReduceGrad", grad.shape(), &Shape::scalar()));
                }
                let mut x = g[0];
                if mean {
                    x = x / T::from_usize(n_total.max(1));
                }
                Tensor::new(input_shape.clone(), vec![x; n_total])
            }
            Some(axis) => {
                let dims = input_shape.dims();
                if axis >= dims.len() {
                    return Err(Error::invalid("ReduceGrad axis out of range"));
                }
                let outer: usize = dims[..axis].iter().product();
                let n = dims[axis];
                let inner: usize = dims[axis + 1..].iter().product();
                if g.len() != outer * inner {
                    return Err(shape_err("ReduceGrad", grad.shape(), input_shape));
                }
                let d = T::from_usize(n.max(1));
                let mut out: Vec<T> = Vec::with_capacity(n_total);
                for o in 0..outer {
                    for _ in 0..n {
                        for i in 0..inner {
                            let x = g[o * inner + i];
                            out.push(if mean { x / d } else { x });
                        }
                    }
                }
                Tensor::new(input_shape.clone(), out)
            }
        }
    })
}

/// Reduces a gradient to the shape of a broadcast operand: a scalar operand
/// receives the sum of the gradient, anything else must already match.
pub fn reduce_like(grad: &Tensor, like: &Tensor) -> Result<Tensor> {
    if grad.shape() == like.shape() {
        Ok(grad.clone())
    } else if like.rank() == 0 {
        reduce(grad, None, false)
    } else {
        Err(shape_err("ReduceLike", grad.shape(), like.shape()))
    }
}

fn concat_layout(op: &str, shapes: &[&Shape], axis: usize) -> Result<(usize, Vec<usize>, usize, Vec<usize>)> {
    let first = shapes[0];
    if axis >= first.rank() {
        return Err(Error::invalid(format!("{op}: axis {axis} out of range for {first}")));
    }
    for s in shapes {
        if s.rank() != first.rank()
            || s.dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err(op, first, s));
        }
    }
    let outer: usize = first.dims()[..axis].iter().product();
    let inner: usize = first.dims()[axis + 1..].iter().product();
    let sizes: Vec<usize> = shapes.iter().map(|s| s.dims()[axis]).collect();
    let mut out_dims = first.dims().to_vec();
    out_dims[axis] = sizes.iter().sum();
    Ok((outer, sizes, inner, out_dims))
}

pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("Concat needs at least one input"))?;
    for t in inputs {
        same_dtype("Concat", first, t)?;
    }
    let shapes: Vec<&Shape> = inputs.iter().map(|t| t.shape()).collect();
    let (outer, sizes, inner, out_dims) = concat_layout("Concat", &shapes, axis)?;
    by_any!(first.dtype(), {
        let slices = inputs
            .iter()
            .map(|t| t.as_slice::<T>())
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<T> = Vec::with_capacity(out_dims.iter().product());
        for o in 0..outer {
            for (s, n) in slices.iter().zip(&sizes) {
                out.extend_from_slice(&s[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Tensor::new(out_dims, out)
    })
}

/// The slice of a concatenation's gradient belonging to input `index`.
pub fn concat_grad(grad: &Tensor, input_shapes: &[&Shape], axis: usize, index: usize) -> Result<Tensor> {
    let (_, sizes, _, out_dims) = concat_layout("ConcatGrad", input_shapes, axis)?;
    if grad.dims() != out_dims.as_slice() {
        return Err(shape_err("ConcatGrad", grad.shape(), &Shape::new(out_dims)));
    }
    let mut begin = vec![0usize; grad.rank()];
    begin[axis] = sizes[..index].iter().sum();
    let mut size: Vec<i64> = grad.dims().iter().map(|&d| d as i64).collect();
    size[axis] = sizes[index] as i64;
    slice(grad, &begin, &size)
}

fn resolve_slice(op: &str, shape: &Shape, begin: &[usize], size: &[i64]) -> Result<Vec<usize>> {
    if begin.len() != shape.rank() || size.len() != shape.rank() {
        return Err(Error::invalid(format!(
            "{op}: begin/size must have rank {} entries",
            shape.rank()
        )));
    }
    let mut out = Vec::with_capacity(size.len());
    for i in 0..shape.rank() {
        let d = shape.dims()[i];
        let s = if size[i] < 0 { d.saturating_sub(begin[i]) } else { size[i] as usize };
        if begin[i] + s > d {
            return Err(Error::invalid(format!(
                "{op}: slice [{}, {}) exceeds dimension {i} of size {d}",
                begin[i],
                begin[i] + s
            )));
        }
        out.push(s);
    }
    Ok(out)
}

/// Copies the block `[begin, begin+size)`; a negative size extends to the end.
pub fn slice(a: &Tensor, begin: &[usize], size: &[i64]) -> Result<Tensor> {
    let out_dims = resolve_slice("Slice", a.shape(), begin, size)?;
    let out_shape = Shape::new(out_dims);
    by_any!(a.dtype(), {
        let v = a.as_slice::<T>()?;
        let strides = a.shape().strides();
        let n = out_shape.num_elements();
        let mut out: Vec<T> = Vec::with_capacity(n);
        for flat in 0..n {
            let idx = out_shape.unravel(flat);
            let src: usize = idx
                .iter()
                .zip(begin)
                .zip(&strides)
                .map(|((i, b), s)| (i + b) * s)
                .sum();
            out.push(v[src].clone());
        }
        Tensor::new(out_shape.clone(), out)
    })
}

/// Scatters a slice's gradient into zeros shaped like the sliced input.
pub fn slice_grad(grad: &Tensor, input_shape: &Shape, begin: &[usize]) -> Result<Tensor> {
    let size: Vec<i64> = grad.dims().iter().map(|&d| d as i64).collect();
    resolve_slice("SliceGrad", input_shape, begin, &size)?;
    by_num!(grad.dtype(), "SliceGrad", {
        let g = grad.as_slice::<T>()?;
        let strides = input_shape.strides();
        let mut out: Vec<T> = vec![T::zero(); input_shape.num_elements()];
        for (flat, &x) in g.iter().enumerate() {
            let idx = grad.shape().unravel(flat);
            let dst: usize = idx
                .iter()
                .zip(begin)
                .zip(&strides)
                .map(|((i, b), s)| (i + b) * s)
                .sum();
            out[dst] = x;
        }
        Tensor::new(input_shape.clone(), out)
    })
}

/// Reads an index vector given as i32 or i64.
pub fn index_vec(t: &Tensor, op: &str) -> Result<Vec<i64>> {
    match t.dtype() {
        DType::I64 => Ok(t.as_slice::<i64>()?.to_vec()),
        DType::I32 => Ok(t.as_slice::<i32>()?.iter().map(|&x| x as i64).collect()),
        other => Err(Error::DTypeMismatch {
            op: op.into(),
            expected: DType::I64,
            got: other,
        }),
    }
}

fn check_index(op: &str, i: i64, bound: usize) -> Result<usize> {
    if i < 0 || i as usize >= bound {
        return Err(Error::IndexOutOfRange {
            op: op.into(),
            index: i,
            bound,
        });
    }
    Ok(i as usize)
}

/// Row `j` of the output is row `indices[j]` of `params`.
pub fn gather_rows(params: &Tensor, indices: &Tensor) -> Result<Tensor> {
    if params.rank() == 0 {
        return Err(Error::invalid("GatherRows needs params of rank >= 1"));
    }
    if indices.rank() != 1 {
        return Err(Error::invalid(format!(
            "GatherRows needs a rank-1 index vector, got {}",
            indices.shape()
        )));
    }
    let idx = index_vec(indices, "GatherRows")?;
    let n = params.dims()[0];
    let row = params.shape().row_len();
    let out_shape = params.shape().with_leading(idx.len());
    by_any!(params.dtype(), {
        let v = params.as_slice::<T>()?;
        let mut out: Vec<T> = Vec::with_capacity(idx.len() * row);
        for &i in &idx {
            let i = check_index("GatherRows", i, n)?;
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        Tensor::new(out_shape.clone(), out)
    })
}

/// Splits the rows of `data` into `num_shards` tensors by the per-row shard
/// assignment, preserving the original order within each shard.
pub fn dynamic_partition(data: &Tensor, assignments: &Tensor, num_shards: usize) -> Result<Vec<Tensor>> {
    if data.rank() == 0 {
        return Err(Error::invalid("DynamicPartition needs data of rank >= 1"));
    }
    let parts = index_vec(assignments, "DynamicPartition")?;
    if parts.len() != data.dims()[0] || assignments.rank() != 1 {
        return Err(shape_err("DynamicPartition", data.shape(), assignments.shape()));
    }
    let row = data.shape().row_len();
    by_any!(data.dtype(), {
        let v = data.as_slice::<T>()?;
        let mut shards: Vec<Vec<T>> = vec![Vec::new(); num_shards];
        let mut counts = vec![0usize; num_shards];
        for (r, &p) in parts.iter().enumerate() {
            let s = check_index("DynamicPartition", p, num_shards)?;
            shards[s].extend_from_slice(&v[r * row..(r + 1) * row]);
            counts[s] += 1;
        }
        shards
            .into_iter()
            .zip(counts)
            .map(|(buf, c)| Tensor::new(data.shape().with_leading(c), buf))
            .collect()
    })
}

/// Output row `positions[s][j]` is row `j` of `data[s]`. Positions must
/// cover `0..k` exactly once.
pub fn dynamic_stitch(positions: &[Tensor], data: &[Tensor]) -> Result<Tensor> {
    if positions.len() != data.len() || data.is_empty() {
        return Err(Error::invalid(format!(
            "DynamicStitch needs equal, non-zero numbers of position and data tensors (got {} and {})",
            positions.len(),
            data.len()
        )));
    }
    let first = &data[0];
    if first.rank() == 0 {
        return Err(Error::invalid("DynamicStitch data must have rank >= 1"));
    }
    let row_dims = &first.dims()[1..];
    let mut pos_all = Vec::with_capacity(positions.len());
    let mut total = 0usize;
    for (p, d) in positions.iter().zip(data) {
        same_dtype("DynamicStitch", first, d)?;
        let pv = index_vec(p, "DynamicStitch")?;
        if d.rank() == 0 || &d.dims()[1..] != row_dims || d.dims()[0] != pv.len() {
            return Err(shape_err("DynamicStitch", p.shape(), d.shape()));
        }
        total += pv.len();
        pos_all.push(pv);
    }
    let mut seen = vec![false; total];
    for pv in &pos_all {
        for &i in pv {
            let i = check_index("DynamicStitch", i, total)?;
            if seen[i] {
                return Err(Error::invalid(format!("DynamicStitch: duplicate position {i}")));
            }
            seen[i] = true;
        }
    }
    let row = first.shape().row_len();
    let out_shape = first.shape().with_leading(total);
    by_any!(first.dtype(), {
        let mut out: Vec<Option<&[T]>> = vec![None; total];
        for (pv, d) in pos_all.iter().zip(data) {
            let v = d.as_slice::<T>()?;
            for (j, &i) in pv.iter().enumerate() {
                out[i as usize] = Some(&v[j * row..(j + 1) * row]);
            }
        }
        let mut flat: Vec<T> = Vec::with_capacity(total * row);
        for r in out {
            flat.extend_from_slice(r.expect("coverage checked above"));
        }
        Tensor::new(out_shape.clone(), flat)
    })
}

/// `base` with `values[j]` added to row `indices[j]`; duplicates accumulate.
pub fn scatter_add_rows(base: &Tensor, indices: &Tensor, values: &Tensor) -> Result<Tensor> {
    let mut out = base.clone();
    scatter_add_rows_in_place(&mut out, indices, values, 1.0)?;
    Ok(out)
}

/// In-place `base[indices[j]] += scale · values[j]`.
pub fn scatter_add_rows_in_place(base: &mut Tensor, indices: &Tensor, values: &Tensor, scale: f64) -> Result<()> {
    same_dtype("ScatterAdd", base, values)?;
    if base.rank() == 0 {
        return Err(Error::invalid("ScatterAdd needs a base of rank >= 1"));
    }
    let idx = index_vec(indices, "ScatterAdd")?;
    let row = base.shape().row_len();
    if values.rank() == 0
        || values.dims()[0] != idx.len()
        || values.shape().row_len() != row
        || values.dims()[1..] != base.dims()[1..]
    {
        return Err(shape_err("ScatterAdd", base.shape(), values.shape()));
    }
    let n = base.dims()[0];
    for &i in &idx {
        check_index("ScatterAdd", i, n)?;
    }
    let dtype = base.dtype();
    by_num!(dtype, "ScatterAdd", {
        let vals = values.as_slice::<T>()?.to_vec();
        let s = T::from_f64(scale);
        let unit = scale == 1.0;
        let buf = T::view_mut(base.buffer_mut()).expect("dtype checked");
        for (j, &i) in idx.iter().enumerate() {
            let dst = &mut buf[i as usize * row..(i as usize + 1) * row];
            for (d, &x) in dst.iter_mut().zip(&vals[j * row..(j + 1) * row]) {
                *d = if unit { *d + x } else { *d + s * x };
            }
        }
        Ok(())
    })
}

/// In-place `base += alpha · x` over equally shaped tensors.
pub fn axpy_in_place(base: &mut Tensor, x: &Tensor, alpha: f64) -> Result<()> {
    same_dtype("Axpy", base, x)?;
    if base.shape() != x.shape() {
        return Err(shape_err("Axpy", base.shape(), x.shape()));
    }
    let dtype = base.dtype();
    by_num!(dtype, "Axpy", {
        let a = T::from_f64(alpha);
        let buf = T::view_mut(base.buffer_mut()).expect("dtype checked");
        let xs = x.as_slice::<T>()?;
        if alpha == 1.0 {
            for (b, &v) in buf.iter_mut().zip(xs) {
                *b = *b + v;
            }
        } else {
            for (b, &v) in buf.iter_mut().zip(xs) {
                *b = *b + a * v;
            }
        }
        Ok(())
    })
}

/// `[0, 1, …, rows−1]` as i64, where `rows` is the leading dimension of `a`.
pub fn range_like(a: &Tensor) -> Result<Tensor> {
    let n = *a
        .dims()
        .first()
        .ok_or_else(|| Error::invalid("RangeLike needs rank >= 1"))?;
    Ok(Tensor::vector((0..n as i64).collect::<Vec<i64>>()))
}

pub fn zeros_like(a: &Tensor) -> Tensor {
    Tensor::zeros(a.dtype(), a.shape().clone())
}

pub fn ones_like(a: &Tensor) -> Result<Tensor> {
    by_num!(a.dtype(), "OnesLike", {
        Tensor::new(a.shape().clone(), vec![T::one(); a.len()])
    })
}

pub fn fill(shape: &Shape, value: f64, dtype: DType) -> Result<Tensor> {
    by_num!(dtype, "Fill", {
        Tensor::new(shape.clone(), vec![T::from_f64(value); shape.num_elements()])
    })
}

pub fn cast(a: &Tensor, to: DType) -> Result<Tensor> {
    if a.dtype() == to {
        return Ok(a.clone());
    }
    let v = match a.dtype() {
        DType::Bool => a
            .as_slice::<bool>()?
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>(),
        DType::String => return Err(unsupported("Cast", DType::String)),
        DType::I64 => {
            // route i64 directly to avoid precision loss for large ids
            let src = a.as_slice::<i64>()?;
            return match to {
                DType::I32 => Tensor::new(a.shape().clone(), src.iter().map(|&x| x as i32).collect()),
                DType::Bool => Tensor::new(a.shape().clone(), src.iter().map(|&x| x != 0).collect()),
                DType::F32 => Tensor::new(a.shape().clone(), src.iter().map(|&x| x as f32).collect()),
                DType::F64 => Tensor::new(a.shape().clone(), src.iter().map(|&x| x as f64).collect()),
                other => Err(unsupported("Cast", other)),
            };
        }
        _ => a.to_f64_vec()?,
    };
    match to {
        DType::Bool => Tensor::new(a.shape().clone(), v.iter().map(|&x| x != 0.0).collect()),
        DType::String => Err(unsupported("Cast", DType::String)),
        dt => by_num!(dt, "Cast", {
            Tensor::new(a.shape().clone(), v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>())
        }),
    }
}

/// Integer floor modulus (result has the sign of the divisor).
pub fn floor_mod(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dtype("Mod", a, b)?;
    match a.dtype() {
        DType::I64 => {
            let (av, bv) = (a.as_slice::<i64>()?, b.as_slice::<i64>()?);
            if bv.contains(&0) {
                return Err(Error::invalid("Mod by zero"));
            }
            zip_broadcast("Mod", a, av, b, bv, |x, y| ((x % y) + y) % y)
        }
        DType::I32 => {
            let (av, bv) = (a.as_slice::<i32>()?, b.as_slice::<i32>()?);
            if bv.contains(&0) {
                return Err(Error::invalid("Mod by zero"));
            }
            zip_broadcast("Mod", a, av, b, bv, |x, y| ((x % y) + y) % y)
        }
        other => Err(unsupported("Mod", other)),
    }
}

pub fn floor_div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_dtype("FloorDiv", a, b)?;
    match a.dtype() {
        DType::I64 => {
            let (av, bv) = (a.as_slice::<i64>()?, b.as_slice::<i64>()?);
            if bv.contains(&0) {
                return Err(Error::invalid("FloorDiv by zero"));
            }
            zip_broadcast("FloorDiv", a, av, b, bv, |x, y| x.div_euclid(y))
        }
        DType::I32 => {
            let (av, bv) = (a.as_slice::<i32>()?, b.as_slice::<i32>()?);
            if bv.contains(&0) {
                return Err(Error::invalid("FloorDiv by zero"));
            }
            zip_broadcast("FloorDiv", a, av, b, bv, |x, y| x.div_euclid(y))
        }
        other => Err(unsupported("FloorDiv", other)),
    }
}

/// Uniform samples in `[lo, hi)` from a seeded ChaCha stream.
pub fn random_uniform(shape: &Shape, dtype: DType, seed: u64, lo: f64, hi: f64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.num_elements();
    by_float!(dtype, "RandomUniform", {
        let v: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor::new(shape.clone(), v)
    })
}

/// Stable ascending argsort of an integer vector.
pub fn argsort(a: &Tensor) -> Result<Tensor> {
    let v = index_vec(a, "ArgSort")?;
    let mut order: Vec<i64> = (0..v.len() as i64).collect();
    order.sort_by_key(|&i| v[i as usize]);
    Ok(Tensor::vector(order))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("Stack needs at least one tensor"))?;
    let mut dims = vec![items.len()];
    dims.extend_from_slice(first.dims());
    by_any!(first.dtype(), {
        let mut out: Vec<T> = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(shape_err("Stack", first.shape(), t.shape()));
            }
            out.extend_from_slice(t.as_slice::<T>()?);
        }
        Tensor::new(dims, out)
    })
}

/// Row `i` of the leading axis, with that axis removed.
pub fn row(a: &Tensor, i: usize) -> Result<Tensor> {
    if a.rank() == 0 || i >= a.dims()[0] {
        return Err(Error::invalid(format!("row {i} out of range for {}", a.shape())));
    }
    let len = a.shape().row_len();
    by_any!(a.dtype(), {
        let v = a.as_slice::<T>()?;
        Tensor::new(a.dims()[1..].to_vec(), v[i * len..(i + 1) * len].to_vec())
    })
}

pub fn check_same_buffer_kind(a: &Buffer, b: &Buffer) -> bool {
    a.dtype() == b.dtype()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new([rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn batch_matmul_is_per_slice_matmul() {
        let a = Tensor::new([2, 2, 3], (0..12).map(|x| x as f64).collect::<Vec<_>>()).unwrap();
        let b = Tensor::new([2, 2, 3], (0..12).map(|x| (x * x) as f64).collect::<Vec<_>>()).unwrap();
        let c = batch_matmul(&a, &b, false, true).unwrap();
        assert_eq!(c.dims(), &[2, 2, 2]);
        // slice 1, row 0 of a is [6,7,8]; row 1 of b slice 1 is [81,100,121]
        assert_eq!(c.to_vec::<f64>().unwrap()[5], 6.0 * 81.0 + 7.0 * 100.0 + 8.0 * 121.0);
        assert!(batch_matmul(&a, &b, false, false).is_err());
    }

    fn random_f64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let eye = m(2, 2, &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let b = m(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec::<f64>().unwrap(), vec![19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_f64(&mut rng, &[7, 5]);
        let b = random_f64(&mut rng, &[5, 3]);
        let (av, bv) = (a.to_vec::<f64>().unwrap(), b.to_vec::<f64>().unwrap());
        let mut oracle = vec![0.0f64; 21];
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += av[i * 5 + k] * bv[k * 3 + j];
                }
                oracle[i * 3 + j] = acc;
            }
        }
        let got = matmul(&a, &b).unwrap().to_vec::<f64>().unwrap();
        for (g, o) in got.iter().zip(&oracle) {
            assert_eq!(g.to_bits(), o.to_bits());
        }
    }

    #[test]
    fn matmul_transposes_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_f64(&mut rng, &[4, 3]);
        let b = random_f64(&mut rng, &[4, 2]);
        let at = transpose(&a);
        let bt = transpose(&b);
        assert!(matmul_t(&a, &b, true, false).unwrap().bit_eq(&matmul(&at, &b).unwrap()));
        let c = random_f64(&mut rng, &[2, 4]);
        assert!(matmul_t(&c, &at, false, true).unwrap().bit_eq(&matmul(&c, &a).unwrap()));
        assert!(matmul_t(&a, &c, true, true).unwrap().bit_eq(&matmul(&at, &transpose(&c)).unwrap()));
        assert!(matmul_t(&bt, &at, false, true).unwrap().bit_eq(&matmul(&bt, &a).unwrap()));
    }

    fn transpose(a: &Tensor) -> Tensor {
        let (r, c) = (a.dims()[0], a.dims()[1]);
        let v = a.to_vec::<f64>().unwrap();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        m(c, r, &out)
    }

    #[test]
    fn matmul_errors_name_shapes() {
        let a = m(2, 3, &[0.; 6]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2,3]"), "{err}");
        let b = Tensor::new([3, 1], vec![0f32; 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn addn_cases() {
        let x = Tensor::vector(vec![1.5f64]);
        assert_eq!(addn(&[x.clone()]).unwrap(), x);
        let ins: Vec<Tensor> = [1., 2., 3.].iter().map(|&v| Tensor::vector(vec![v])).collect();
        assert_eq!(addn(&ins).unwrap().to_vec::<f64>().unwrap(), vec![6.0]);
        assert!(addn(&[]).is_err());
        assert!(addn(&[x, Tensor::vector(vec![1.0f64, 2.0])]).is_err());
    }

    #[test]
    fn addn_matches_sequential_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ins: Vec<Tensor> = (0..4).map(|_| random_f64(&mut rng, &[9])).collect();
        let mut fold = ins[0].to_vec::<f64>().unwrap();
        for t in &ins[1..] {
            for (a, b) in fold.iter_mut().zip(t.to_vec::<f64>().unwrap()) {
                *a += b;
            }
        }
        let got = addn(&ins).unwrap().to_vec::<f64>().unwrap();
        assert!(got.iter().zip(&fold).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gather_rows_cases() {
        let p = m(4, 2, &[0., 1., 10., 11., 20., 21., 30., 31.]);
        let g = gather_rows(&p, &Tensor::vector(vec![2i64, 0])).unwrap();
        assert_eq!(g.to_vec::<f64>().unwrap(), vec![20., 21., 0., 1.]);
        let g = gather_rows(&p, &Tensor::vector(vec![1i64, 1])).unwrap();
        assert_eq!(g.to_vec::<f64>().unwrap(), vec![10., 11., 10., 11.]);
        match gather_rows(&p, &Tensor::vector(vec![4i64])) {
            Err(Error::IndexOutOfRange { index, .. }) => assert_eq!(index, 4),
            other => panic!("expected out of range, got {other:?}"),
        }
    }

    #[test]
    fn partition_cases() {
        let ids = Tensor::vector(vec![5i64, 9, 3, 7]);
        let parts = Tensor::vector(vec![1i32, 0, 1, 0]);
        let shards = dynamic_partition(&ids, &parts, 2).unwrap();
        assert_eq!(shards[0].to_vec::<i64>().unwrap(), vec![9, 7]);
        assert_eq!(shards[1].to_vec::<i64>().unwrap(), vec![5, 3]);

        let empty = dynamic_partition(&Tensor::vector(Vec::<i64>::new()), &Tensor::vector(Vec::<i32>::new()), 3).unwrap();
        assert_eq!(empty.len(), 3);
        assert!(empty.iter().all(|t| t.is_empty()));

        assert!(dynamic_partition(&ids, &Tensor::vector(vec![0i32, 2, 0, 0]), 2).is_err());
    }

    #[test]
    fn stitch_cases() {
        let d = Tensor::vector(vec![4i64, 5, 6]);
        let s = dynamic_stitch(&[Tensor::vector(vec![0i64, 1, 2])], &[d.clone()]).unwrap();
        assert_eq!(s, d);
        let err = dynamic_stitch(
            &[Tensor::vector(vec![0i64, 0]), Tensor::vector(vec![1i64])],
            &[Tensor::vector(vec![1i64, 2]), Tensor::vector(vec![3i64])],
        );
        assert!(err.is_err());
        let missing = dynamic_stitch(&[Tensor::vector(vec![0i64, 2])], &[Tensor::vector(vec![1i64, 2])]);
        assert!(missing.is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_f64(&mut rng, &[3, 17]);
        let y = softmax(&x).unwrap().to_vec::<f64>().unwrap();
        for r in y.chunks(17) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let x32 = cast(&x, DType::F32).unwrap();
        let y = softmax(&x32).unwrap().to_vec::<f32>().unwrap();
        for r in y.chunks(17) {
            assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_and_grad() {
        let x = Tensor::vector(vec![-1.0f64, 0.0, 2.0]);
        assert_eq!(relu(&x).unwrap().to_vec::<f64>().unwrap(), vec![0., 0., 2.]);
        let x = Tensor::vector(vec![-1.0f64, 2.0]);
        let g = Tensor::vector(vec![1.0f64, 1.0]);
        assert_eq!(relu_grad(&g, &x).unwrap().to_vec::<f64>().unwrap(), vec![0., 1.]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let a = Tensor::vector(vec![1.0f64, 2.0]);
        let s = Tensor::scalar(10.0f64);
        assert_eq!(add(&a, &s).unwrap().to_vec::<f64>().unwrap(), vec![11., 12.]);
        assert_eq!(sub(&s, &a).unwrap().to_vec::<f64>().unwrap(), vec![9., 8.]);
        let b = Tensor::vector(vec![1.0f64, 2.0, 3.0]);
        assert!(matches!(add(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_and_grad() {
        let x = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(reduce(&x, None, false).unwrap().scalar_value::<f64>().unwrap(), 21.);
        assert_eq!(reduce(&x, Some(0), false).unwrap().to_vec::<f64>().unwrap(), vec![5., 7., 9.]);
        assert_eq!(reduce(&x, Some(1), true).unwrap().to_vec::<f64>().unwrap(), vec![2., 5.]);
        let g = reduce_grad(&Tensor::vector(vec![1.0f64, 2.0]), x.shape(), Some(1), false).unwrap();
        assert_eq!(g.to_vec::<f64>().unwrap(), vec![1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let b = m(2, 1, &[5., 6.]);
        let c = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.to_vec::<f64>().unwrap(), vec![1., 2., 5., 3., 4., 6.]);
        assert_eq!(concat_grad(&c, &[a.shape(), b.shape()], 1, 0).unwrap(), a);
        assert_eq!(concat_grad(&c, &[a.shape(), b.shape()], 1, 1).unwrap(), b);
        let s = slice(&c, &[1, 1], &[1, -1]).unwrap();
        assert_eq!(s.to_vec::<f64>().unwrap(), vec![4., 6.]);
        let g = slice_grad(&s, c.shape(), &[1, 1]).unwrap();
        assert_eq!(g.to_vec::<f64>().unwrap(), vec![0., 0., 0., 0., 4., 6.]);
    }

    #[test]
    fn xent_grad_matches_softmax_minus_labels() {
        let logits = m(1, 3, &[1., 2., 3.]);
        let labels = m(1, 3, &[0., 0., 1.]);
        let g = softmax_cross_entropy_grad(&logits, &labels, &Tensor::vector(vec![1.0f64])).unwrap();
        let p = softmax(&logits).unwrap().to_vec::<f64>().unwrap();
        let gv = g.to_vec::<f64>().unwrap();
        assert!((gv[2] - (p[2] - 1.0)).abs() < 1e-15);
        let loss = softmax_cross_entropy(&logits, &labels).unwrap().to_vec::<f64>().unwrap();
        assert!((loss[0] + p[2].ln()).abs() < 1e-12);
    }

    fn arb_partition() -> impl Strategy<Value = (Vec<i64>, Vec<i32>, usize)> {
        (1usize..5).prop_flat_map(|shards| {
            prop::collection::vec((any::<i64>(), 0..shards as i32), 0..40).prop_map(move |pairs| {
                let (d, p): (Vec<i64>, Vec<i32>) = pairs.into_iter().unzip();
                (d, p, shards)
            })
        })
    }

    proptest! {
        #[test]
        fn stitch_inverts_partition((data, parts, shards) in arb_partition()) {
            let d = Tensor::vector(data.clone());
            let p = Tensor::vector(parts.clone());
            let pos = dynamic_partition(&range_like(&d).unwrap(), &p, shards).unwrap();
            let vals = dynamic_partition(&d, &p, shards).unwrap();
            let back = dynamic_stitch(&pos, &vals).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn partition_is_stable_sort_by_shard((data, parts, shards) in arb_partition()) {
            let out = dynamic_partition(&Tensor::vector(data.clone()), &Tensor::vector(parts.clone()), shards).unwrap();
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.sort_by_key(|&i| parts[i]);
            let oracle: Vec<i64> = order.iter().map(|&i| data[i]).collect();
            let got: Vec<i64> = out.iter().flat_map(|t| t.to_vec::<i64>().unwrap()).collect();
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn gather_equals_one_hot_matmul(n in 1usize..8, d in 1usize..5, k in 0usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_f64(&mut rng, &[n, d]);
            let idx: Vec<i64> = (0..k).map(|_| rng.gen_range(0..n as i64)).collect();
            let mut onehot = vec![0.0f64; k * n];
            for (j, &i) in idx.iter().enumerate() {
                onehot[j * n + i as usize] = 1.0;
            }
            let oh = Tensor::new([k, n], onehot).unwrap();
            let want = matmul(&oh, &params).unwrap();
            let got = gather_rows(&params, &Tensor::vector(idx)).unwrap();
            prop_assert!(got.bit_eq(&want));
        }

        #[test]
        fn stitch_equals_direct_scatter(k in 0usize..30, shards in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<i64> = (0..k as i64).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let vals: Vec<f64> = (0..k).map(|_| rng.gen()).collect();
            let mut positions = vec![Vec::new(); shards];
            let mut data = vec![Vec::new(); shards];
            for (j, &p) in perm.iter().enumerate() {
                let s = rng.gen_range(0..shards);
                positions[s].push(p);
                data[s].push(vals[j]);
            }
            let mut oracle = vec![0.0f64; k];
            for (ps, ds) in positions.iter().zip(&data) {
                for (&p, &v) in ps.iter().zip(ds) {
                    oracle[p as usize] = v;
                }
            }
            let pt: Vec<Tensor> = positions.into_iter().map(Tensor::vector).collect();
            let dt: Vec<Tensor> = data.into_iter().map(Tensor::vector).collect();
            let got = dynamic_stitch(&pt, &dt).unwrap().to_vec::<f64>().unwrap();
            prop_assert_eq!(got, oracle);
        }
    }
}
