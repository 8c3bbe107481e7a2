//! Text encoder: token and positional embeddings, non-causal Transformer
//! layers with padding masked out, end-of-sequence pooling.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

use super::layers::{key_mask, transformer_layer, MlpParams, NormParams, TransformerLayerParams};
use super::tokenizer::TokenizedText;

#[derive(Clone, Debug)]
pub struct TextParams {
    pub embed: Var,
    pub pos: Var,
    pub layers: Vec<TransformerLayerParams>,
    pub norm: NormParams,
    pub proj: MlpParams,
}

impl TextParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
        let d = cfg.text_width;
        store.tokens("text.embed", &[cfg.vocab_size, d], rng);
        store.weight("text.pos", &[cfg.max_text_length, d], rng);
        for i in 0..cfg.text_layers {
            TransformerLayerParams::register(store, &format!("text.layer{i}"), d, cfg.mlp_ratio, rng);
        }
        NormParams::register(store, "text.norm", d);
        MlpParams::register(store, "text.proj", d, d, cfg.projection_width, rng);
    }

    pub fn bind(bound: &Bound, cfg: &ModelConfig) -> Self {
        TextParams {
            embed: bound.get("text.embed"),
            pos: bound.get("text.pos"),
            layers: (0..cfg.text_layers)
                .map(|i| TransformerLayerParams::bind(bound, &format!("text.layer{i}")))
                .collect(),
            norm: NormParams::bind(bound, "text.norm"),
            proj: MlpParams::bind(bound, "text.proj"),
        }
    }
}

/// Unit-norm text embeddings `[B, P]`, taken at each sequence's `<eos>`.
///
/// Sequences are cut to the longest one in the batch; shorter ones have
/// their padding keys masked, so the result does not depend on batch
/// composition.
pub fn encode_text<T: Scalar>(
    g: &mut Graph<T>,
    texts: &[TokenizedText],
    p: &TextParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    if texts.is_empty() {
        return Err(Error::shape("encode_text", "empty batch"));
    }
    let b = texts.len();
    let len = texts.iter().map(TokenizedText::len).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(b * len);
    for t in texts {
        if t.end_position >= cfg.max_text_length || t.ids.len() < len {
            return Err(Error::shape(
                "encode_text",
                format!("sequence of {} ids with end {} for max length {}", t.ids.len(), t.end_position, cfg.max_text_length),
            ));
        }
        if let Some(&bad) = t.ids[..len].iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::shape("encode_text", format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
        ids.extend_from_slice(&t.ids[..len]);
    }
    let d = cfg.text_width;
    let x = g.embedding_lookup(p.embed, &ids)?;
    let x = g.reshape(x, &[b, len, d])?;
    let pos = g.slice(p.pos, 0, 0, len)?;
    let mut x = g.add(x, pos)?;
    let lens: Vec<usize> = texts.iter().map(TokenizedText::len).collect();
    let mask = if lens.iter().all(|&n| n == len) {
        None
    } else {
        Some(g.constant(key_mask(&lens, len)))
    };
    for layer in &p.layers {
        x = transformer_layer(g, x, layer, cfg.text_heads, mask)?;
    }
    let x = p.norm.apply(g, x)?;
    let x = g.reshape(x, &[b * len, d])?;
    let rows: Vec<usize> = texts.iter().enumerate().map(|(i, t)| i * len + t.end_position).collect();
    let eos = g.gather_rows(x, &rows)?;
    let z = p.proj.apply(g, eos)?;
    g.l2_normalize(z)
}
