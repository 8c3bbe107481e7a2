//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! construction order. Since an operation can only reference nodes that
//! already exist, the tape is acyclic and reverse construction order is a
//! valid topological order for the backward sweep.

mod backward;

pub use backward::Gradients;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_at_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    ClampMin(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Sum { x: Var },
    Mean { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, rstd: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, ids: Vec<usize> },
    ScatterRows { x: Var, ids: Vec<usize> },
    StopGradient(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm floor used by [`Graph::l2_normalize`].
pub const L2_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

// 0.5·(1 + tanh(u)) = σ(2u), which needs a single exp.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(inner + inner)).exp())
}

pub(crate) fn gelu_forward<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    s + x * T::lit(2.0) * s * (T::one() - s) * dinner
}

#[derive(Default)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Direct inputs of the operation that produced `v`.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Gelu(x)
            | Op::ClampMin(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::StopGradient(x)
            | Op::Sum { x }
            | Op::Mean { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: Result<Tensor<T>>,
        op: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let value = value?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.grad_any(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b));
        self.binary(a, b, v, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b));
        self.binary(a, b, v, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b));
        self.binary(a, b, v, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "div", |x, y| x / y);
        self.binary(a, b, v, Op::Div)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| -e);
        self.unary(x, v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).scale(s);
        self.unary(x, v, Op::Scale(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&e| e <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                msg: "non-positive input".into(),
            });
        }
        let v = self.value(x).map(|e| e.ln());
        Ok(self.unary(x, v, Op::Log(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_forward);
        self.unary(x, v, Op::Gelu(x))
    }

    /// `max(x, floor)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let v = self.value(x).map(|e| e.max(floor));
        self.unary(x, v, Op::ClampMin(x, floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.unary(x, v, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).broadcast_to(shape)?;
        Ok(self.unary(x, v, Op::BroadcastTo(x)))
    }

    /// Sum along `axis`, which is kept with length 1.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).sum_axis(axis, true)?;
        Ok(self.unary(x, v, Op::Sum { x }))
    }

    /// Mean along `axis`, which is kept with length 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = T::lit(self.shape(x).get(axis).copied().unwrap_or(1) as f64);
        let v = self.value(x).sum_axis(axis, true)?.map(|e| e / n);
        Ok(self.unary(x, v, Op::Mean { x, axis }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        let s = self.sum(flat, 0)?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        let s = self.mean(flat, 0)?;
        self.reshape(s, &[])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).softmax(axis)?;
        Ok(self.unary(x, v, Op::Softmax { x, axis }))
    }

    /// `log Σ exp(x)` along `axis` (kept with length 1), max-stabilized.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        t.check_axis("logsumexp", axis)?;
        if !t.is_finite() {
            return Err(Error::Numeric {
                op: "logsumexp",
                msg: "non-finite input".into(),
            });
        }
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| d[idx(a)]).fold(T::neg_infinity(), T::max);
                let s: T = (0..n).map(|a| (d[idx(a)] - max).exp()).sum();
                out.push(max + s.ln());
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let v = Tensor::from_parts(shape, out);
        Ok(self.unary(x, v, Op::LogSumExp { x, axis }))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", t.shape(), self.shape(gain)));
        }
        let rows = t.numel() / d.max(1);
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in t.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&e| (e - mean) * r));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let shape = t.shape().to_vec();
        let xhat = Tensor::from_parts(shape.clone(), xhat);
        let rg = self.grad_any(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", "scalar input"))?;
        let mut norms = Vec::with_capacity(t.numel() / d.max(1));
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let n = row
                .iter()
                .map(|&e| e * e)
                .sum::<T>()
                .sqrt()
                .max(T::lit(L2_NORM_EPS));
            norms.push(n);
            out.extend(row.iter().map(|&e| e / n));
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.unary(x, v, Op::L2Normalize { x, norms }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&values, axis)?;
        let rg = self.grad_any(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, end)?;
        Ok(self.unary(x, v, Op::Slice { x, axis, start }))
    }

    /// Rows of `table` (first axis) selected by `ids`; the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).gather_rows(ids)?;
        Ok(self.unary(
            table,
            v,
            Op::GatherRows {
                x: table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Row `i` of `x` is added into row `ids[i]` of a `rows`-row zero tensor.
    pub fn scatter_rows(&mut self, x: Var, ids: &[usize], rows: usize) -> Result<Var> {
        let v = self.value(x).scatter_rows(ids, rows)?;
        Ok(self.unary(
            x,
            v,
            Op::ScatterRows {
                x,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Identity in the forward pass, blocks every gradient path through `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient(x), false)
    }

    /// `x · w + b` with `w: [in, out]` shared over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests;
