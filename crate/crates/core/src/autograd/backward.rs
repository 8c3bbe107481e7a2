use super::{gelu_derivative, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_at_axis, Tensor};

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

/// Re-inserts a reduced axis of length 1 and broadcasts back to `shape`.
fn expand_reduced<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    g.broadcast_to(shape)
}

/// Gradient of the right operand of a matmul. A rank-2 right operand shared
/// across the batch gets one tall product instead of a batched one.
fn matmul_grad_rhs<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, b_shape: &[usize]) -> Result<Tensor<T>> {
    let ra = a.rank();
    if b_shape.len() == 2 && ra > 2 {
        let k = a.shape()[ra - 1];
        let n = g.shape()[g.rank() - 1];
        let rows = a.numel() / k;
        let a2 = a.reshape(&[rows, k])?;
        let g2 = g.reshape(&[rows, n])?;
        return a2.matmul_t(&g2, true, false);
    }
    a.matmul_t(g, true, false)?.reduce_to_shape(b_shape)
}

impl<T: Scalar> Graph<T> {
    /// Reverse sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must have one element, has shape {shape:?}"),
            ));
        }
        self.backward_with(output, Tensor::ones(&shape))
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::dim("backward", seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| &self.nodes[v.0].value;

            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.reduce_to_shape(val(a).shape())?)?;
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.reduce_to_shape(val(b).shape())?)?;
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.reduce_to_shape(val(a).shape())?)?;
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.map(|e| -e).reduce_to_shape(val(b).shape())?)?;
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.mul(val(b))?.reduce_to_shape(val(a).shape())?)?;
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.mul(val(a))?.reduce_to_shape(val(b).shape())?)?;
                    }
                }
                Op::Div(a, b) => {
                    if needs(a) {
                        let ga = g.zip_with(val(b), "div", |x, y| x / y)?;
                        accumulate(&mut grads[a.0], ga.reduce_to_shape(val(a).shape())?)?;
                    }
                    if needs(b) {
                        // d(a/b)/db = -out/b
                        let gb = g
                            .mul(&node.value)?
                            .zip_with(val(b), "div", |x, y| -x / y)?;
                        accumulate(&mut grads[b.0], gb.reduce_to_shape(val(b).shape())?)?;
                    }
                }
                Op::Neg(x) => accumulate(&mut grads[x.0], g.map(|e| -e))?,
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads[x.0], g.map(|e| e * s))?
                }
                Op::Exp(x) => accumulate(&mut grads[x.0], g.mul(&node.value)?)?,
                Op::Log(x) => {
                    accumulate(&mut grads[x.0], g.zip_with(val(x), "log", |gi, xi| gi / xi)?)?
                }
                Op::Gelu(x) => accumulate(
                    &mut grads[x.0],
                    g.zip_with(val(x), "gelu", |gi, xi| gi * gelu_derivative(xi))?,
                )?,
                Op::ClampMin(x, floor) => {
                    let floor = *floor;
                    accumulate(
                        &mut grads[x.0],
                        g.zip_with(val(x), "clamp_min", |gi, xi| {
                            if xi > floor {
                                gi
                            } else {
                                T::zero()
                            }
                        })?,
                    )?
                }
                Op::MatMul(a, b) => {
                    if needs(a) {
                        let ga = g.matmul_t(val(b), false, true)?;
                        accumulate(&mut grads[a.0], ga.reduce_to_shape(val(a).shape())?)?;
                    }
                    if needs(b) {
                        let gb = matmul_grad_rhs(val(a), &g, val(b).shape())?;
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::Permute(x, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    accumulate(&mut grads[x.0], g.permute(&inv)?)?
                }
                Op::Reshape(x) => accumulate(&mut grads[x.0], g.reshape(val(x).shape())?)?,
                Op::BroadcastTo(x) => {
                    accumulate(&mut grads[x.0], g.reduce_to_shape(val(x).shape())?)?
                }
                Op::Sum { x, .. } => accumulate(&mut grads[x.0], expand_reduced(&g, val(x).shape())?)?,
                Op::Mean { x, axis } => {
                    let n = T::lit(val(x).shape()[*axis] as f64);
                    let ge = expand_reduced(&g, val(x).shape())?.map(|e| e / n);
                    accumulate(&mut grads[x.0], ge)?
                }
                Op::Softmax { x, axis } => {
                    // y * (g - Σ g·y)
                    let y = &node.value;
                    let gy = g.mul(y)?;
                    let dot = gy.sum_axis(*axis, true)?;
                    let gx = g.sub(&dot)?.mul(y)?;
                    accumulate(&mut grads[x.0], gx)?
                }
                Op::LogSumExp { x, axis } => {
                    let p = val(x).softmax(*axis)?;
                    accumulate(&mut grads[x.0], p.mul(&g)?)?
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = *xhat.shape().last().unwrap_or(&1);
                    let gd = g.data();
                    let hd = xhat.data();
                    if needs(gain) {
                        let mut gg = vec![T::zero(); d];
                        for (i, (&gi, &hi)) in gd.iter().zip(hd).enumerate() {
                            gg[i % d] += gi * hi;
                        }
                        accumulate(&mut grads[gain.0], Tensor::from_parts(vec![d], gg))?;
                    }
                    if needs(bias) {
                        let mut gb = vec![T::zero(); d];
                        for (i, &gi) in gd.iter().enumerate() {
                            gb[i % d] += gi;
                        }
                        accumulate(&mut grads[bias.0], Tensor::from_parts(vec![d], gb))?;
                    }
                    if needs(x) {
                        let w = val(gain).data();
                        let n = T::lit(d as f64);
                        let mut gx = Vec::with_capacity(gd.len());
                        for (r, (grow, hrow)) in gd.chunks(d).zip(hd.chunks(d)).enumerate() {
                            let dh: Vec<T> = grow.iter().zip(w).map(|(&a, &b)| a * b).collect();
                            let mean_dh = dh.iter().copied().sum::<T>() / n;
                            let mean_dh_h =
                                dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                            gx.extend(
                                dh.iter()
                                    .zip(hrow)
                                    .map(|(&a, &h)| rstd[r] * (a - mean_dh - h * mean_dh_h)),
                            );
                        }
                        accumulate(
                            &mut grads[x.0],
                            Tensor::from_parts(xhat.shape().to_vec(), gx),
                        )?;
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap_or(&1);
                    let mut gx = Vec::with_capacity(y.numel());
                    for (r, (grow, yrow)) in g.data().chunks(d).zip(y.data().chunks(d)).enumerate() {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        gx.extend(
                            grow.iter()
                                .zip(yrow)
                                .map(|(&gi, &yi)| (gi - yi * dot) / norms[r]),
                        );
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(y.shape().to_vec(), gx))?
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(p).shape()[*axis];
                        if needs(p) {
                            accumulate(&mut grads[p.0], g.slice(*axis, start, start + len)?)?;
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let src = val(x).shape();
                    let (outer, n, inner) = split_at_axis(src, *axis);
                    let len = g.shape()[*axis];
                    let mut out = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        out[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(src.to_vec(), out))?
                }
                Op::GatherRows { x, ids } => {
                    let rows = val(x).shape()[0];
                    accumulate(&mut grads[x.0], g.scatter_rows(ids, rows)?)?
                }
                Op::ScatterRows { x, ids } => accumulate(&mut grads[x.0], g.gather_rows(ids)?)?,
            }
        }
        Ok(Gradients { grads })
    }
}
