//! Grouping block: Gumbel-softmax assignment of segment tokens to group
//! tokens, the straight-through hard assignment, and the weighted merge that
//! turns each group into a new segment token.
//!
//! All functions accept unbatched `[M, D]` / `[S, D]` inputs or batched
//! `[B, M, D]` / `[B, S, D]` ones. Assignment matrices are `[.., M, S]` with
//! the group axis second to last, so each column (one segment) is a
//! distribution over groups.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::AssignMode;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor of the merge. Under hard assignment every non-empty group
/// has mass at least 1, so the floor only affects empty groups (which output
/// their residual) and soft groups holding less than one segment's worth of
/// mass. A floor of 1 keeps the straight-through gradient into an empty
/// group's row bounded by the value vectors themselves.
pub const MERGE_EPS: f64 = 1.0;

/// Graph handles of one grouping block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GroupingBlockParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub norm_groups: (Var, Var),
    pub norm_segments: (Var, Var),
}

impl GroupingBlockParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut impl Rng) {
        for w in ["wq", "wk", "wv", "wo"] {
            store.linear_weight(format!("{prefix}.{w}"), &[width, width], rng);
        }
        for n in ["norm_groups", "norm_segments"] {
            store.ones(format!("{prefix}.{n}.gain"), &[width]);
            store.zeros(format!("{prefix}.{n}.bias"), &[width]);
        }
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        let p = |n: &str| bound.get(&format!("{prefix}.{n}"));
        GroupingBlockParams {
            wq: p("wq"),
            wk: p("wk"),
            wv: p("wv"),
            wo: p("wo"),
            norm_groups: (p("norm_groups.gain"), p("norm_groups.bias")),
            norm_segments: (p("norm_segments.gain"), p("norm_segments.bias")),
        }
    }
}

/// Gumbel(0, 1) perturbation of the grouping logits, an independent draw for
/// every (group, segment) pair.
#[derive(Clone, Debug)]
pub struct GumbelNoise<T> {
    /// `[B, M, N]` or `[M, N]`.
    samples: Option<Tensor<T>>,
}

impl<T: Scalar> GumbelNoise<T> {
    pub fn disabled() -> Self {
        GumbelNoise { samples: None }
    }

    pub fn sample(batch: Option<usize>, groups: usize, segments: usize, rng: &mut impl Rng) -> Self {
        let shape: Vec<usize> = match batch {
            Some(b) => vec![b, groups, segments],
            None => vec![groups, segments],
        };
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // 1 - U lies in (0, 1], keeping both logarithms finite.
                let u: f64 = 1.0 - rng.gen::<f64>();
                let u = u.max(f64::MIN_POSITIVE);
                T::lit(-(-u.ln()).max(f64::MIN_POSITIVE).ln())
            })
            .collect();
        GumbelNoise {
            samples: Some(Tensor::from_parts(shape, data)),
        }
    }

    pub fn from_samples(samples: Tensor<T>) -> Self {
        GumbelNoise {
            samples: Some(samples),
        }
    }

    pub fn enabled(&self) -> bool {
        self.samples.is_some()
    }

    pub fn samples(&self) -> Option<&Tensor<T>> {
        self.samples.as_ref()
    }
}

/// A group-by-segment assignment living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Assignment {
    pub var: Var,
    pub mode: AssignMode,
}

/// Detached group-by-segment matrix `[M, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T> {
    values: Tensor<T>,
    mode: AssignMode,
}

impl<T: Scalar> AssignmentMatrix<T> {
    pub fn new(values: Tensor<T>, mode: AssignMode) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("assignment", format!("expected [M, S], got {:?}", values.shape())));
        }
        Ok(AssignmentMatrix { values, mode })
    }

    /// Hard assignment from the final group of every segment.
    pub fn from_labels(groups: usize, labels: &[usize]) -> Result<Self> {
        let s = labels.len();
        let mut data = vec![T::zero(); groups * s];
        for (j, &g) in labels.iter().enumerate() {
            if g >= groups {
                return Err(Error::shape("assignment", format!("group {g} >= {groups}")));
            }
            data[g * s + j] = T::one();
        }
        Ok(AssignmentMatrix {
            values: Tensor::from_parts(vec![groups, s], data),
            mode: AssignMode::Hard,
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn mode(&self) -> AssignMode {
        self.mode
    }

    pub fn groups(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn segments(&self) -> usize {
        self.values.shape()[1]
    }

    /// Group index of every segment (column argmax, lowest index on ties).
    pub fn labels(&self) -> Vec<usize> {
        self.values.argmax(0).expect("rank-2 assignment")
    }

    /// Every column exactly one-hot.
    pub fn is_one_hot(&self) -> bool {
        let (m, s) = (self.groups(), self.segments());
        let d = self.values.data();
        (0..s).all(|j| {
            let mut ones = 0;
            for i in 0..m {
                let v = d[i * s + j];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return false;
                }
            }
            ones == 1
        })
    }

    /// Largest deviation of a column sum from 1, and whether all entries lie in [0, 1].
    pub fn column_stochastic_error(&self) -> (f64, bool) {
        let sums = self.values.sum_axis(0, false).expect("rank-2 assignment");
        let err = sums
            .data()
            .iter()
            .map(|v| (v.as_f64() - 1.0).abs())
            .fold(0.0, f64::max);
        let in_range = self
            .values
            .data()
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one());
        (err, in_range)
    }
}

fn check_width<T: Scalar>(g: &Graph<T>, groups: Var, segments: Var) -> Result<()> {
    let (gs, ss) = (g.shape(groups), g.shape(segments));
    let ok = gs.len() == ss.len()
        && gs.len() >= 2
        && gs.last() == ss.last()
        && gs[..gs.len() - 2] == ss[..ss.len() - 2];
    if !ok {
        return Err(Error::dim("grouping", gs, ss));
    }
    Ok(())
}

/// Soft assignment: softmax over the group axis of
/// `(W_q·norm(g_i) · W_k·norm(s_j) + γ_i) / temperature`.
pub fn assign_soft<T: Scalar>(
    g: &mut Graph<T>,
    groups: Var,
    segments: Var,
    params: &GroupingBlockParams,
    noise: &GumbelNoise<T>,
    temperature: T,
) -> Result<Assignment> {
    check_width(g, groups, segments)?;
    let gn = g.layer_norm(groups, params.norm_groups.0, params.norm_groups.1)?;
    let sn = g.layer_norm(segments, params.norm_segments.0, params.norm_segments.1)?;
    let q = g.matmul(gn, params.wq)?;
    let k = g.matmul(sn, params.wk)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let width = g.shape(q)[g.shape(q).len() - 1];
    let mut logits = g.scale(logits, T::lit(1.0 / (width as f64).sqrt()));
    if let Some(s) = noise.samples() {
        if s.shape() != g.shape(logits) {
            return Err(Error::dim("gumbel_noise", s.shape(), g.shape(logits)));
        }
        let gamma = g.constant(s.clone());
        logits = g.add(logits, gamma)?;
    }
    if temperature != T::one() {
        logits = g.scale(logits, T::one() / temperature);
    }
    let axis = g.shape(logits).len() - 2;
    let a = g.softmax(logits, axis)?;
    Ok(Assignment {
        var: a,
        mode: AssignMode::Soft,
    })
}

/// Straight-through hard assignment: `one_hot(argmax A) + (A - sg(A))`.
///
/// The forward value is exactly one-hot per column, while the gradient with
/// respect to `A` is the identity.
pub fn assign_hard<T: Scalar>(g: &mut Graph<T>, a: Assignment) -> Result<Assignment> {
    if a.mode != AssignMode::Soft {
        return Err(Error::shape("assign_hard", "input must be a soft assignment"));
    }
    let axis = g.shape(a.var).len() - 2;
    let hot = g.value(a.var).one_hot_argmax(axis)?;
    let hot = g.constant(hot);
    let frozen = g.stop_gradient(a.var);
    let zero_valued = g.sub(a.var, frozen)?;
    let hard = g.add(hot, zero_valued)?;
    Ok(Assignment {
        var: hard,
        mode: AssignMode::Hard,
    })
}

/// New segment tokens `ĝ_i + W_o · (Σ_j A_ij W_v ŝ_j) / max(Σ_j A_ij, ε)`.
pub fn merge_segments<T: Scalar>(
    g: &mut Graph<T>,
    groups: Var,
    segments: Var,
    a: Assignment,
    params: &GroupingBlockParams,
) -> Result<Var> {
    check_width(g, groups, segments)?;
    let (gs, ss, as_) = (g.shape(groups), g.shape(segments), g.shape(a.var));
    let r = as_.len();
    if r != gs.len() || as_[r - 2] != gs[r - 2] || as_[r - 1] != ss[r - 2] {
        return Err(Error::dim("merge_segments", as_, gs));
    }
    let values = g.matmul(segments, params.wv)?;
    let numer = g.matmul(a.var, values)?;
    let mass = g.sum(a.var, r - 1)?;
    let mass = g.clamp_min(mass, T::lit(MERGE_EPS));
    let pooled = g.div(numer, mass)?;
    let out = g.matmul(pooled, params.wo)?;
    g.add(groups, out)
}

/// Assignment (soft, optionally straightened to hard) followed by the merge.
/// Returns the new segment tokens and the assignment used to make them.
pub fn grouping_block<T: Scalar>(
    g: &mut Graph<T>,
    groups: Var,
    segments: Var,
    params: &GroupingBlockParams,
    noise: &GumbelNoise<T>,
    mode: AssignMode,
    temperature: T,
) -> Result<(Var, Assignment)> {
    let soft = assign_soft(g, groups, segments, params, noise, temperature)?;
    let a = match mode {
        AssignMode::Soft => soft,
        AssignMode::Hard => assign_hard(g, soft)?,
    };
    let merged = merge_segments(g, groups, segments, a, params)?;
    Ok((merged, a))
}
