//! Image and text encoders and the dual-encoder model holding both.

pub mod layers;
pub mod text;
pub mod tokenizer;
pub mod vision;

use rand::{Rng, RngCore};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Container;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use layers::{mixer_connect, self_attention, transformer_layer, MixerParams, TransformerLayerParams};
pub use text::{encode_text, TextParams};
pub use tokenizer::{TokenizedText, Vocab};
pub use vision::{
    encode_image, encode_image_segments, encode_image_tokens, patch_embed, EncoderState, ForwardMode,
    VisionParams,
};

/// Name of the contrastive temperature parameter `s`, with `τ = exp(-s)`.
pub const TEMPERATURE_PARAM: &str = "temperature.s";

/// Both encoders' weights plus the contrastive temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupVit<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// A model's parameters registered on one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub bound: Bound,
    pub vision: VisionParams,
    pub text: TextParams,
    pub temperature: Var,
}

impl<T: Scalar> GroupVit<T> {
    /// Fresh weights; `temperature_init` is the initial `τ`.
    pub fn new(config: ModelConfig, temperature_init: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        VisionParams::register(&mut params, &config, rng);
        TextParams::register(&mut params, &config, rng);
        params.insert(TEMPERATURE_PARAM, Tensor::from_slice(&[T::lit(-temperature_init.ln())]));
        Ok(GroupVit { config, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        self.bind_from(self.params.bind(g, trainable))
    }

    /// Wraps handles already placed on a graph, e.g. by [`Bound::from_vars`].
    pub fn bind_from(&self, bound: Bound) -> BoundModel {
        BoundModel {
            vision: VisionParams::bind(&bound, &self.config),
            text: TextParams::bind(&bound, &self.config),
            temperature: bound.get(TEMPERATURE_PARAM),
            bound,
        }
    }

    /// Current `τ = exp(-s)`, before clamping.
    pub fn temperature(&self) -> f64 {
        (-self.params.get(TEMPERATURE_PARAM).expect("registered").item().as_f64()).exp()
    }

    pub fn to_container(&self, c: &mut Container) {
        self.params.to_container("param.", c);
    }

    pub fn load_from(&mut self, c: &Container) -> Result<()> {
        self.params.load_from("param.", c)
    }
}

impl BoundModel {
    pub fn encode_image<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        cfg: &ModelConfig,
        images: &Tensor<T>,
        mode: ForwardMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, EncoderState)> {
        encode_image(g, images, &self.vision, cfg, mode, rng)
    }

    pub fn encode_text<T: Scalar>(&self, g: &mut Graph<T>, cfg: &ModelConfig, texts: &[TokenizedText]) -> Result<Var> {
        encode_text(g, texts, &self.text, cfg)
    }
}
