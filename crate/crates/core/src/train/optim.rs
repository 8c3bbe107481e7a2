use std::f64::consts::PI;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear warm-up over `warmup` steps to `base`, then cosine decay to zero
/// at `total`.
pub fn learning_rate(base: f64, step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. A non-positive `max_norm` disables
/// clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies to matrices (rank ≥ 2)
/// only; biases, norm gains, positional tables of rank 1 and the temperature
/// are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    names: Vec<String>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamW {
            t: 0,
            m: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            names: params.names().cloned().collect(),
        }
    }

    /// `grads` follow the iteration order of `params`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.names.len() {
            return Err(Error::shape("adamw", format!("{} gradients for {} parameters", grads.len(), self.names.len())));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::lit(1.0 - BETA1.powi(self.t as i32));
        let c2 = T::lit(1.0 - BETA2.powi(self.t as i32));
        let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(EPS));
        for (i, name) in self.names.iter().enumerate() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has unknown parameter {name}")))?;
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", g.shape(), p.shape()));
            }
            let decay = p.rank() >= 2;
            let mut pd = p.data().to_vec();
            let mut md = self.m[i].data().to_vec();
            let mut vd = self.v[i].data().to_vec();
            for (((w, m), v), &gr) in pd.iter_mut().zip(md.iter_mut()).zip(vd.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * gr;
                *v = b2 * *v + (T::one() - b2) * gr * gr;
                let step = (*m / c1) / ((*v / c2).sqrt() + eps);
                let dec = if decay { wd * *w } else { T::zero() };
                *w -= lr * (step + dec);
            }
            *p = Tensor::new(p.shape(), pd)?;
            self.m[i] = Tensor::new(p.shape(), md)?;
            self.v[i] = Tensor::new(p.shape(), vd)?;
        }
        Ok(())
    }

    pub fn to_container(&self, c: &mut Container) {
        c.insert_u64("adam.t", &[self.t]);
        for (i, name) in self.names.iter().enumerate() {
            c.insert_tensor(format!("adam.m.{name}"), &self.m[i]);
            c.insert_tensor(format!("adam.v.{name}"), &self.v[i]);
        }
    }

    pub fn load_from(&mut self, c: &Container) -> Result<()> {
        let missing = |n: &str| Error::Config(format!("checkpoint lacks optimizer record {n}"));
        self.t = match c.u64s("adam.t") {
            Some([t]) => *t,
            _ => return Err(missing("adam.t")),
        };
        for (i, name) in self.names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut self.m[i]), ("adam.v.", &mut self.v[i])] {
                let key = format!("{prefix}{name}");
                let t: Tensor<T> = c.tensor(&key).ok_or_else(|| missing(&key))?;
                if t.shape() != slot.shape() {
                    return Err(Error::dim("adamw_load", t.shape(), slot.shape()));
                }
                *slot = t;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lr = |s| learning_rate(1.0, s, 4, 20);
        assert_eq!(lr(0), 0.25);
        assert_eq!(lr(3), 1.0);
        assert_eq!(lr(4), 1.0);
        assert!((lr(12) - 0.5).abs() < 1e-12);
        assert!(lr(19) > 0.0 && lr(19) < 0.01);
        assert_eq!(learning_rate(1.0, 0, 0, 10), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::from_slice(&[3.0]), Tensor::from_slice(&[4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
        let mut h = vec![Tensor::<f64>::from_slice(&[0.3])];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0].item(), 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step has magnitude lr (up to eps).
        let mut ps = ParamStore::<f64>::new();
        ps.insert("w", Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
        ps.insert("b", Tensor::from_slice(&[2.0]));
        let mut opt = AdamW::new(&ps);
        let grads: Vec<Tensor<f64>> = ps
            .iter()
            .map(|(n, _)| {
                if n == "b" {
                    Tensor::from_slice(&[-5.0])
                } else {
                    Tensor::from_f64(&[1, 2], &[0.5, 0.0]).unwrap()
                }
            })
            .collect();
        opt.update(&mut ps, &grads, 0.1, 0.5).unwrap();
        assert!((ps.get("b").unwrap().item() - 2.1).abs() < 1e-6);
        let w = ps.get("w").unwrap().data();
        // Decoupled decay: w -= lr * wd * w on top of the Adam step.
        assert!((w[0] - (1.0 - 0.1 * (1.0 + 0.5))).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 0.1 * 0.5)).abs() < 1e-12);
    }
}
