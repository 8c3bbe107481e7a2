//! Image encoder: patch embedding, Transformer layers interleaved with
//! grouping stages, pooling and projection.

use rand::{Rng, RngCore};

use crate::autograd::{Graph, Var};
use crate::config::{AssignMode, ModelConfig};
use crate::error::{Error, Result};
use crate::grouping::{grouping_block, Assignment, AssignmentMatrix, GroupingBlockParams, GumbelNoise};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::layers::{
    mixer_connect, transformer_layer, LinearParams, MixerParams, MlpParams, NormParams,
    TransformerLayerParams,
};

/// How the grouping blocks run in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub assign: AssignMode,
    pub gumbel: bool,
}

impl ForwardMode {
    /// Hard assignment without noise, the inference setting.
    pub fn inference() -> Self {
        ForwardMode {
            assign: AssignMode::Hard,
            gumbel: false,
        }
    }

    pub fn train(assign: AssignMode) -> Self {
        ForwardMode { assign, gumbel: true }
    }
}

#[derive(Clone, Debug)]
pub struct StageParams {
    /// Learnable tokens, absent when the stage derives its tokens from the
    /// previous stage through `mixer`.
    pub group_tokens: Option<Var>,
    pub mixer: Option<MixerParams>,
    pub grouping: GroupingBlockParams,
}

#[derive(Clone, Debug)]
pub struct VisionParams {
    pub patch: LinearParams,
    pub pos: Var,
    pub stages: Vec<StageParams>,
    pub layers: Vec<TransformerLayerParams>,
    pub norm: NormParams,
    pub proj: MlpParams,
}

impl VisionParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) {
        let d = cfg.hidden_width;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        LinearParams::register(store, "vision.patch", patch_dim, d, rng);
        store.weight("vision.pos", &[cfg.num_patches(), d], rng);
        for i in 0..cfg.num_layers {
            TransformerLayerParams::register(store, &format!("vision.layer{i}"), d, cfg.mlp_ratio, rng);
        }
        let mut prev_tokens = 0;
        for (l, st) in cfg.stages.iter().enumerate() {
            let prefix = format!("vision.stage{l}");
            if l == 0 {
                store.tokens(format!("{prefix}.group_tokens"), &[st.learned_tokens, d], rng);
                if st.learned_tokens != st.num_group_tokens {
                    MixerParams::register(
                        store,
                        &format!("{prefix}.mixer"),
                        st.learned_tokens,
                        st.num_group_tokens,
                        d,
                        cfg.mlp_ratio,
                        rng,
                    );
                }
            } else if st.mixer_connector {
                MixerParams::register(
                    store,
                    &format!("{prefix}.mixer"),
                    prev_tokens,
                    st.num_group_tokens,
                    d,
                    cfg.mlp_ratio,
                    rng,
                );
            } else {
                store.tokens(format!("{prefix}.group_tokens"), &[st.num_group_tokens, d], rng);
            }
            GroupingBlockParams::register(store, &format!("{prefix}.grouping"), d, rng);
            prev_tokens = st.num_group_tokens;
        }
        NormParams::register(store, "vision.norm", d);
        MlpParams::register(store, "vision.proj", d, d, cfg.projection_width, rng);
    }

    pub fn bind(bound: &Bound, cfg: &ModelConfig) -> Self {
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(l, st)| {
                let prefix = format!("vision.stage{l}");
                let has_tokens = l == 0 || !st.mixer_connector;
                let has_mixer = if l == 0 {
                    st.learned_tokens != st.num_group_tokens
                } else {
                    st.mixer_connector
                };
                StageParams {
                    group_tokens: has_tokens.then(|| bound.get(&format!("{prefix}.group_tokens"))),
                    mixer: has_mixer.then(|| MixerParams::bind(bound, &format!("{prefix}.mixer"))),
                    grouping: GroupingBlockParams::bind(bound, &format!("{prefix}.grouping")),
                }
            })
            .collect();
        VisionParams {
            patch: LinearParams::bind(bound, "vision.patch"),
            pos: bound.get("vision.pos"),
            stages,
            layers: (0..cfg.num_layers)
                .map(|i| TransformerLayerParams::bind(bound, &format!("vision.layer{i}")))
                .collect(),
            norm: NormParams::bind(bound, "vision.norm"),
            proj: MlpParams::bind(bound, "vision.proj"),
        }
    }
}

/// Segment tokens after the final stage and everything recorded on the way.
#[derive(Clone, Debug)]
pub struct EncoderState {
    /// `[B, M_L, D]`, after the remaining layers and the final norm.
    pub segment_tokens: Var,
    /// Group tokens used by the last grouping block, `[B, M_L, D]`.
    pub group_tokens: Var,
    /// One `[B, M_l, S_l]` assignment per stage.
    pub assignments: Vec<Assignment>,
}

impl EncoderState {
    /// Detached per-stage assignment matrices of batch element `b`.
    pub fn assignment_matrices<T: Scalar>(&self, g: &Graph<T>, b: usize) -> Result<Vec<AssignmentMatrix<T>>> {
        self.assignments
            .iter()
            .map(|a| {
                let v = g.value(a.var);
                let (m, s) = (v.shape()[1], v.shape()[2]);
                let one = v.slice(0, b, b + 1)?.reshape(&[m, s])?;
                AssignmentMatrix::new(one, a.mode)
            })
            .collect()
    }
}

/// `[B, H, W, C]` (or `[H, W, C]`) images to `[B, N, p·p·C]` flattened
/// patches, patches in row-major grid order, each patch row-major then by
/// channel.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let images = match images.rank() {
        3 => {
            let s = images.shape();
            images.reshape(&[1, s[0], s[1], s[2]])?
        }
        4 => images.clone(),
        _ => return Err(Error::shape("patchify", format!("expected [B, H, W, C], got {:?}", images.shape()))),
    };
    let (b, h, w, c) = {
        let s = images.shape();
        (s[0], s[1], s[2], s[3])
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let row = ((bi * h + py * patch + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[row..row + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, gh * gw, patch * patch * c], out)
}

/// Bilinear resampling of a `[from·from, D]` positional grid to `[to·to, D]`
/// with pixel-center alignment.
pub fn interpolate_positional<T: Scalar>(pos: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    if pos.rank() != 2 || pos.shape()[0] != from * from || from == 0 || to == 0 {
        return Err(Error::shape(
            "interpolate_positional",
            format!("{:?} is not a {from}x{from} grid", pos.shape()),
        ));
    }
    let d = pos.shape()[1];
    let src = pos.data();
    let coord = |i: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(to * to * d);
    for y in 0..to {
        let (y0, y1, fy) = coord(y);
        for x in 0..to {
            let (x0, x1, fx) = coord(x);
            let w = [
                (y0 * from + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * from + x1, (1.0 - fy) * fx),
                (y1 * from + x0, fy * (1.0 - fx)),
                (y1 * from + x1, fy * fx),
            ];
            for c in 0..d {
                let v: f64 = w.iter().map(|&(r, wt)| wt * src[r * d + c].as_f64()).sum();
                out.push(T::lit(v));
            }
        }
    }
    Tensor::new(&[to * to, d], out)
}

/// Linear patch projection plus positional embedding: `[B, N, D]`.
///
/// Images at a resolution other than the configured one use a bilinearly
/// resampled, non-trainable copy of the positional grid.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    images: &Tensor<T>,
    p: &VisionParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let patches = patchify(images, cfg.patch_size)?;
    let n = patches.shape()[1];
    let x = g.constant(patches);
    let x = p.patch.apply(g, x)?;
    let pos = if n == cfg.num_patches() {
        p.pos
    } else {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::Config(format!(
                "positional interpolation needs a square patch grid, got {n} patches"
            )));
        }
        let resampled = interpolate_positional(g.value(p.pos), cfg.grid(), side)?;
        g.constant(resampled)
    };
    g.add(x, pos)
}

fn batched_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, batch: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let t = g.reshape(tokens, &[1, s[0], s[1]])?;
    g.broadcast_to(t, &[batch, s[0], s[1]])
}

/// Runs the patch embedding, every grouping stage and the remaining layers.
/// `rng` is required when `mode.gumbel` is set.
pub fn encode_image_tokens<T: Scalar>(
    g: &mut Graph<T>,
    images: &Tensor<T>,
    p: &VisionParams,
    cfg: &ModelConfig,
    mode: ForwardMode,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<EncoderState> {
    cfg.validate()?;
    let mut x = patch_embed(g, images, p, cfg)?;
    let batch = g.shape(x)[0];
    let mut layer = 0;
    let mut prev_groups: Option<Var> = None;
    let mut assignments = Vec::with_capacity(cfg.stages.len());
    let temperature = T::lit(cfg.gumbel_temperature);
    for (l, (st, sp)) in cfg.stages.iter().zip(&p.stages).enumerate() {
        let tokens = match (sp.group_tokens, prev_groups) {
            (Some(t), _) => batched_tokens(g, t, batch)?,
            (None, Some(prev)) => {
                let mixer = sp.mixer.as_ref().expect("mixer-connected stage has a mixer");
                mixer_connect(g, prev, mixer)?
            }
            (None, None) => unreachable!("first stage always has learnable tokens"),
        };
        let m_in = g.shape(tokens)[1];
        let mut h = g.concat(&[tokens, x], 1)?;
        while layer < st.insert_after_layer {
            h = transformer_layer(g, h, &p.layers[layer], cfg.num_heads, None)?;
            layer += 1;
        }
        let total = g.shape(h)[1];
        let mut groups = g.slice(h, 1, 0, m_in)?;
        let segments = g.slice(h, 1, m_in, total)?;
        if l == 0 {
            if let Some(mixer) = &sp.mixer {
                groups = mixer_connect(g, groups, mixer)?;
            }
        }
        let noise = match (&mut rng, mode.gumbel) {
            (Some(r), true) => GumbelNoise::sample(Some(batch), st.num_group_tokens, total - m_in, r),
            (None, true) => return Err(Error::Config("gumbel noise requested without an rng".into())),
            (_, false) => GumbelNoise::disabled(),
        };
        let (merged, a) = grouping_block(g, groups, segments, &sp.grouping, &noise, mode.assign, temperature)?;
        assignments.push(a);
        prev_groups = Some(groups);
        x = merged;
    }
    while layer < cfg.num_layers {
        x = transformer_layer(g, x, &p.layers[layer], cfg.num_heads, None)?;
        layer += 1;
    }
    let segment_tokens = p.norm.apply(g, x)?;
    Ok(EncoderState {
        segment_tokens,
        group_tokens: prev_groups.expect("at least one stage"),
        assignments,
    })
}

/// Unit-norm image embeddings `[B, P]`: average of the final segment
/// tokens, projected and normalized.
pub fn encode_image<T: Scalar>(
    g: &mut Graph<T>,
    images: &Tensor<T>,
    p: &VisionParams,
    cfg: &ModelConfig,
    mode: ForwardMode,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Var, EncoderState)> {
    let state = encode_image_tokens(g, images, p, cfg, mode, rng)?;
    let pooled = g.mean(state.segment_tokens, 1)?;
    let s = g.shape(pooled).to_vec();
    let pooled = g.reshape(pooled, &[s[0], s[2]])?;
    let z = p.proj.apply(g, pooled)?;
    Ok((g.l2_normalize(z)?, state))
}

/// Unit-norm embedding of every final segment, `[B, M_L, P]`, with hard
/// assignment and no noise.
pub fn encode_image_segments<T: Scalar>(
    g: &mut Graph<T>,
    images: &Tensor<T>,
    p: &VisionParams,
    cfg: &ModelConfig,
) -> Result<(Var, EncoderState)> {
    let state = encode_image_tokens(g, images, p, cfg, ForwardMode::inference(), None)?;
    let z = p.proj.apply(g, state.segment_tokens)?;
    Ok((g.l2_normalize(z)?, state))
}
