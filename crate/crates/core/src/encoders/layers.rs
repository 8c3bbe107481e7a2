//! Building blocks shared by both encoders.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to attention logits of masked keys.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

impl NormParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) {
        store.ones(format!("{prefix}.gain"), &[width]);
        store.zeros(format!("{prefix}.bias"), &[width]);
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        NormParams {
            gain: bound.get(&format!("{prefix}.gain")),
            bias: bound.get(&format!("{prefix}.bias")),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: Var,
    pub b: Var,
}

impl LinearParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) {
        store.linear_weight(format!("{prefix}.w"), &[inputs, outputs], rng);
        store.zeros(format!("{prefix}.b"), &[outputs]);
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        LinearParams {
            w: bound.get(&format!("{prefix}.w")),
            b: bound.get(&format!("{prefix}.b")),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, self.w, Some(self.b))
    }
}

/// Two linear maps with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) {
        LinearParams::register(store, &format!("{prefix}.fc1"), inputs, hidden, rng);
        LinearParams::register(store, &format!("{prefix}.fc2"), hidden, outputs, rng);
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        MlpParams {
            fc1: LinearParams::bind(bound, &format!("{prefix}.fc1")),
            fc2: LinearParams::bind(bound, &format!("{prefix}.fc2")),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

impl AttentionParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize, rng: &mut impl Rng) {
        for n in ["q", "k", "v", "out"] {
            LinearParams::register(store, &format!("{prefix}.{n}"), width, width, rng);
        }
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        let l = |n: &str| LinearParams::bind(bound, &format!("{prefix}.{n}"));
        AttentionParams {
            q: l("q"),
            k: l("k"),
            v: l("v"),
            out: l("out"),
        }
    }
}

/// Additive key mask `[B, 1, 1, T]`: 0 for keys to attend to, a large
/// negative number for padding.
pub fn key_mask<T: Scalar>(valid: &[usize], len: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(valid.len() * len);
    for &n in valid {
        data.extend((0..len).map(|t| if t < n { T::zero() } else { T::lit(MASKED_LOGIT) }));
    }
    Tensor::from_parts(vec![valid.len(), 1, 1, len], data)
}

/// Lifts `[T, D]` to `[1, T, D]`; returns whether it did.
fn ensure_batched<T: Scalar>(g: &mut Graph<T>, x: Var, op: &'static str) -> Result<(Var, bool)> {
    match g.shape(x).len() {
        2 => {
            let s = g.shape(x).to_vec();
            Ok((g.reshape(x, &[1, s[0], s[1]])?, true))
        }
        3 => Ok((x, false)),
        _ => Err(Error::shape(op, format!("expected [T, D] or [B, T, D], got {:?}", g.shape(x)))),
    }
}

fn unbatch<T: Scalar>(g: &mut Graph<T>, x: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = g.shape(x).to_vec();
        g.reshape(x, &s[1..])
    } else {
        Ok(x)
    }
}

/// Scaled dot-product multi-head self-attention over `[B, T, D]` (or `[T, D]`).
/// `mask` is an additive `[B, 1, 1, T]` tensor from [`key_mask`].
pub fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let (x, lifted) = ensure_batched(g, x, "self_attention")?;
    let (b, t, d) = {
        let s = g.shape(x);
        (s[0], s[1], s[2])
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("self_attention", format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, lin: &LinearParams| -> Result<Var> {
        let y = lin.apply(g, x)?;
        let y = g.reshape(y, &[b, t, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, &p.q)?;
    let k = split(g, &p.k)?;
    let v = split(g, &p.v)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, T::lit(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let attn = g.softmax(logits, 3)?;
    let y = g.matmul(attn, v)?;
    let y = g.permute(y, &[0, 2, 1, 3])?;
    let y = g.reshape(y, &[b, t, d])?;
    let y = p.out.apply(g, y)?;
    unbatch(g, y, lifted)
}

/// Pre-norm Transformer layer parameters.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayerParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

impl TransformerLayerParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) {
        NormParams::register(store, &format!("{prefix}.norm1"), width);
        AttentionParams::register(store, &format!("{prefix}.attn"), width, rng);
        NormParams::register(store, &format!("{prefix}.norm2"), width);
        MlpParams::register(store, &format!("{prefix}.mlp"), width, width * mlp_ratio, width, rng);
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        TransformerLayerParams {
            norm1: NormParams::bind(bound, &format!("{prefix}.norm1")),
            attn: AttentionParams::bind(bound, &format!("{prefix}.attn")),
            norm2: NormParams::bind(bound, &format!("{prefix}.norm2")),
            mlp: MlpParams::bind(bound, &format!("{prefix}.mlp")),
        }
    }
}

/// `x + attn(norm(x))`, then `+ mlp(norm(.))`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &TransformerLayerParams,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let h = p.norm1.apply(g, x)?;
    let h = self_attention(g, h, &p.attn, heads, mask)?;
    let x = g.add(x, h)?;
    let h = p.norm2.apply(g, x)?;
    let h = p.mlp.apply(g, h)?;
    g.add(x, h)
}

/// MLP-Mixer connector: a linear map across the token axis taking `M_prev`
/// tokens to `M_next`, then a residual channel MLP.
#[derive(Clone, Copy, Debug)]
pub struct MixerParams {
    pub tokens: LinearParams,
    pub norm: NormParams,
    pub channels: MlpParams,
}

impl MixerParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        prev_tokens: usize,
        next_tokens: usize,
        width: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) {
        LinearParams::register(store, &format!("{prefix}.tokens"), prev_tokens, next_tokens, rng);
        NormParams::register(store, &format!("{prefix}.norm"), width);
        MlpParams::register(store, &format!("{prefix}.channels"), width, width * mlp_ratio, width, rng);
    }

    pub fn bind(bound: &Bound, prefix: &str) -> Self {
        MixerParams {
            tokens: LinearParams::bind(bound, &format!("{prefix}.tokens")),
            norm: NormParams::bind(bound, &format!("{prefix}.norm")),
            channels: MlpParams::bind(bound, &format!("{prefix}.channels")),
        }
    }
}

/// `[B, M_prev, D]` (or `[M_prev, D]`) to `[B, M_next, D]`.
pub fn mixer_connect<T: Scalar>(g: &mut Graph<T>, x: Var, p: &MixerParams) -> Result<Var> {
    let (x, lifted) = ensure_batched(g, x, "mixer_connect")?;
    let xt = g.permute(x, &[0, 2, 1])?;
    let y = p.tokens.apply(g, xt)?;
    let y = g.permute(y, &[0, 2, 1])?;
    let h = p.norm.apply(g, y)?;
    let h = p.channels.apply(g, h)?;
    let y = g.add(y, h)?;
    unbatch(g, y, lifted)
}
