//! Contrastive objectives between image and text embeddings.
//!
//! Embeddings are unit-norm rows. Logits are `z_a · z_b / τ`; every
//! directional term is the batch mean of `-log softmax` at the matched pair.

pub mod prompts;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use prompts::{generate_prompts, PromptSet, DEFAULT_TEMPLATES};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// `τ = exp(-s)` with `s` clamped so that `τ ∈ [TAU_MIN, TAU_MAX]`.
/// Returns a `[1]`-shaped node.
pub fn temperature_from_param<T: Scalar>(g: &mut Graph<T>, s: Var) -> Var {
    // clamp(s, -ln TAU_MAX, -ln TAU_MIN); the upper clamp as -clamp_min(-s).
    let lo = g.clamp_min(s, T::lit(-TAU_MAX.ln()));
    let neg = g.neg(lo);
    let hi = g.clamp_min(neg, T::lit(TAU_MIN.ln()));
    g.exp(hi)
}

/// The two directional terms of a symmetric contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct DirectionalLoss {
    pub image_to_text: Var,
    pub text_to_image: Var,
    pub total: Var,
}

fn check_tau<T: Scalar>(g: &Graph<T>, tau: Var, op: &'static str) -> Result<()> {
    let t = g.value(tau);
    if t.numel() != 1 {
        return Err(Error::shape(op, format!("temperature must hold one value, got {:?}", t.shape())));
    }
    let v = t.data()[0];
    if !(v > T::zero()) || !v.is_finite() {
        return Err(Error::Domain {
            op,
            msg: format!("temperature must be positive and finite, got {v}"),
        });
    }
    Ok(())
}

fn check_rows<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::dim(op, sa, sb));
    }
    Ok((sa[0], sa[1]))
}

/// Scalar tau node reshaped for broadcasting against any logits.
fn tau_scalar<T: Scalar>(g: &mut Graph<T>, tau: Var) -> Result<Var> {
    g.reshape(tau, &[])
}

/// Mean over a `[.., B]`-shaped selection of `logsumexp - matched`.
fn mean_nll<T: Scalar>(g: &mut Graph<T>, lse: Var, matched: Var) -> Result<Var> {
    let d = g.sub(lse, matched)?;
    g.mean_all(d)
}

/// Standard image-text loss: `L_{I→T} + L_{T→I}` with matched pairs on the
/// diagonal. `tau` is a one-element node.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, z_images: Var, z_texts: Var, tau: Var) -> Result<DirectionalLoss> {
    check_tau(g, tau, "contrastive_loss")?;
    let (b, _) = check_rows(g, z_images, z_texts, "contrastive_loss")?;
    let t = tau_scalar(g, tau)?;
    let zt = g.transpose(z_texts)?;
    let sim = g.matmul(z_images, zt)?;
    let logits = g.div(sim, t)?;
    let eye = g.constant(Tensor::eye(b));
    let diag = g.mul(logits, eye)?;
    let matched_rows = g.sum(diag, 1)?;
    let matched_cols = g.sum(diag, 0)?;
    let lse_rows = g.logsumexp(logits, 1)?;
    let lse_cols = g.logsumexp(logits, 0)?;
    let image_to_text = mean_nll(g, lse_rows, matched_rows)?;
    let text_to_image = mean_nll(g, lse_cols, matched_cols)?;
    let total = g.add(image_to_text, text_to_image)?;
    Ok(DirectionalLoss {
        image_to_text,
        text_to_image,
        total,
    })
}

/// Multi-label loss against `K` prompted texts per image, `z_prompted:
/// [K, B, P]`.
///
/// Image to texts: the `K` positives share one softmax over all `K·B`
/// candidates. Texts to image: the mean of `K·B` ordinary text-to-image terms.
pub fn multilabel_contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    z_images: Var,
    z_prompted: Var,
    tau: Var,
) -> Result<DirectionalLoss> {
    check_tau(g, tau, "multilabel_contrastive_loss")?;
    let (si, sp) = (g.shape(z_images).to_vec(), g.shape(z_prompted).to_vec());
    if si.len() != 2 || sp.len() != 3 || sp[1..] != si[..] || sp[0] == 0 || si[0] == 0 {
        return Err(Error::dim("multilabel_contrastive_loss", &si, &sp));
    }
    let b = si[0];
    let t = tau_scalar(g, tau)?;
    // sim[k, i, j] = z_i^I · z_j^{T_k}
    let zp = g.transpose(z_prompted)?;
    let sim = g.matmul(z_images, zp)?;
    let logits = g.div(sim, t)?;
    let eye = g.constant(Tensor::eye(b));
    let diag = g.mul(logits, eye)?;

    let matched = g.sum(diag, 2)?; // [K, B, 1]
    let pooled = g.logsumexp(matched, 0)?; // [1, B, 1]
    let per_k = g.logsumexp(logits, 2)?; // [K, B, 1]
    let all = g.logsumexp(per_k, 0)?; // [1, B, 1]
    let image_to_text = mean_nll(g, all, pooled)?;

    // Text (k, i) against images j is sim[k, j, i]: reduce over axis 1.
    let matched_t = g.sum(diag, 1)?; // [K, 1, B]
    let lse_t = g.logsumexp(logits, 1)?; // [K, 1, B]
    let text_to_image = mean_nll(g, lse_t, matched_t)?;

    let total = g.add(image_to_text, text_to_image)?;
    Ok(DirectionalLoss {
        image_to_text,
        text_to_image,
        total,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub image_text: DirectionalLoss,
    pub multilabel: Option<DirectionalLoss>,
    pub total: Var,
}

/// Image-text loss plus, when prompted embeddings are given, the multi-label
/// loss.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    z_images: Var,
    z_texts: Var,
    z_prompted: Option<Var>,
    tau: Var,
) -> Result<TotalLoss> {
    let image_text = contrastive_loss(g, z_images, z_texts, tau)?;
    let (multilabel, total) = match z_prompted {
        Some(zp) => {
            let ml = multilabel_contrastive_loss(g, z_images, zp, tau)?;
            let total = g.add(image_text.total, ml.total)?;
            (Some(ml), total)
        }
        None => (None, image_text.total),
    };
    Ok(TotalLoss {
        image_text,
        multilabel,
        total,
    })
}
