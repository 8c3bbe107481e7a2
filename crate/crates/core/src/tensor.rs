//! Dense row-major tensors and the kernels the autodiff graph is built on.
//!
//! A [`Tensor`] is an immutable value: every operation allocates its result.
//! Broadcasting follows the usual trailing-axis alignment rules.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape` (row-major), the flat offset of the
/// element of a tensor of shape `src_shape` broadcast onto it.
pub(crate) fn broadcast_offsets(out_shape: &[usize], src_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = contiguous_strides(src_shape);
    let lead = rank - src_shape.len();
    let strides: Vec<usize> = (0..rank)
        .map(|i| {
            if i < lead || src_shape[i - lead] == 1 {
                0
            } else {
                src_strides[i - lead]
            }
        })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    if total == 0 {
        return offsets;
    }
    if rank == 0 {
        offsets.push(0);
        return offsets;
    }
    let inner = out_shape[rank - 1];
    let step = strides[rank - 1];
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..total / inner {
        offsets.extend((0..inner).map(|k| base + k * step));
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    offsets
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn from_slice(values: &[T]) -> Self {
        Tensor::from_parts(vec![values.len()], values.to_vec())
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Normal samples redrawn until they fall within two standard deviations.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::lit(z * std);
                }
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(low..high))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let strides = contiguous_strides(&self.shape);
        let off: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor::from_parts(self.shape.clone(), data));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::dim(op, &self.shape, &other.shape))?;
        let oa = broadcast_offsets(&out_shape, &self.shape);
        let ob = broadcast_offsets(&out_shape, &other.shape);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(self.data[i], other.data[j]))
            .collect();
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Materializes the broadcast of `self` onto `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::dim("broadcast_to", &self.shape, shape)),
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let offs = broadcast_offsets(shape, &self.shape);
        Ok(Tensor::from_parts(
            shape.to_vec(),
            offs.iter().map(|&o| self.data[o]).collect(),
        ))
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of
    /// [`Tensor::broadcast_to`]).
    pub fn reduce_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(s) if s == self.shape => {}
            _ => return Err(Error::dim("reduce_to_shape", &self.shape, shape)),
        }
        let offs = broadcast_offsets(&self.shape, shape);
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&o, &v) in offs.iter().zip(&self.data) {
            out[o] += v;
        }
        Ok(Tensor::from_parts(shape.to_vec(), out))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// [`Tensor::matmul`] with either operand's last two axes transposed,
    /// without materializing the transpose.
    pub fn matmul_t(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (ar, ac) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (br, bc) = (other.shape[rb - 2], other.shape[rb - 1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        // Strides of the logical (possibly transposed) operands.
        let sa = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
        let sb = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        let batch_a = &self.shape[..ra - 2];
        let batch_b = &other.shape[..rb - 2];
        let batch = broadcast_shape(batch_a, batch_b)
            .ok_or_else(|| Error::dim("matmul", &self.shape, &other.shape))?;
        let nb: usize = batch.iter().product();
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); nb * m * n];

        // Right operand shared across the whole batch: one tall product.
        if !trans_a && batch_b.iter().product::<usize>() == 1 && batch_a == batch.as_slice() {
            T::gemm_acc(nb * m, k, n, &self.data, sa, &other.data, sb, &mut out);
            return Ok(Tensor::from_parts(out_shape, out));
        }
        let oa = broadcast_offsets(&batch, batch_a);
        let ob = broadcast_offsets(&batch, batch_b);
        for (bi, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
            T::gemm_acc(
                m,
                k,
                n,
                &self.data[ia * m * k..(ia + 1) * m * k],
                sa,
                &other.data[ib * k * n..(ib + 1) * k * n],
                sb,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("invalid axes {axes:?} for shape {:?}", self.shape),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides = contiguous_strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        if self.numel() == 0 || r == 0 {
            data.extend_from_slice(&self.data);
            return Ok(Tensor::from_parts(out_shape, data));
        }
        let inner = out_shape[r - 1];
        let step = perm_strides[r - 1];
        let mut counter = vec![0usize; r - 1];
        let mut base = 0usize;
        for _ in 0..self.numel() / inner {
            data.extend((0..inner).map(|k| self.data[base + k * step]));
            for ax in (0..r - 1).rev() {
                counter[ax] += 1;
                base += perm_strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                base -= perm_strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub(crate) fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        self.check_axis("sum", axis)?;
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &self.data[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis("softmax", axis)?;
        if !self.is_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                msg: "non-finite input".into(),
            });
        }
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * n + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..n {
                    max = max.max(self.data[idx(a)]);
                }
                let mut total = T::zero();
                for a in 0..n {
                    let e = (self.data[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..n {
                    out[idx(a)] /= total;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Index of the maximum along `axis` for every other position; ties go to
    /// the lowest index. Result has the shape of `self` with `axis` removed.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        self.check_axis("argmax", axis)?;
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * n * inner + i];
                for a in 1..n {
                    let v = self.data[(o * n + a) * inner + i];
                    if v > best_v {
                        best = a;
                        best_v = v;
                    }
                }
                out[o * inner + i] = best;
            }
        }
        Ok(out)
    }

    /// One-hot encoding of [`Tensor::argmax`] along `axis`, same shape as `self`.
    pub fn one_hot_argmax(&self, axis: usize) -> Result<Self> {
        let idx = self.argmax(axis)?;
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                out[(o * n + idx[o * inner + i]) * inner + i] = T::one();
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        first.check_axis("concat", axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        self.check_axis("slice", axis)?;
        if start > end || end > self.shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} out of bounds for shape {:?}", self.shape),
            ));
        }
        let (outer, n, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Rows of a matrix-like tensor (first axis) picked by `ids`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        if self.rank() == 0 {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let rows = self.shape[0];
        let width: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {id} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(&self.data[id * width..(id + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = ids.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Adds row `i` of `self` into row `ids[i]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(&self, ids: &[usize], rows: usize) -> Result<Self> {
        if self.rank() == 0 || self.shape[0] != ids.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} ids for shape {:?}", ids.len(), self.shape),
            ));
        }
        let width: usize = self.shape[1..].iter().product();
        let mut out = vec![T::zero(); rows * width];
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::shape(
                    "scatter_rows",
                    format!("row {id} out of range for {rows} rows"),
                ));
            }
            for (d, &s) in out[id * width..(id + 1) * width]
                .iter_mut()
                .zip(&self.data[i * width..(i + 1) * width])
            {
                *d += s;
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }
}
