//! The hybrid ViT split into its four owners: client tokenizer, server
//! encoder, server adapter, client head.

mod adapter;
mod config;
mod encoder;
mod head;
mod init;
mod sampler;
mod tokenizer;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

pub use adapter::{Adapter, NormMode, RunningStats};
pub use config::{ConvSpec, ImageShape, ModelConfig, ParamCounts};
pub use encoder::{block_forward, Encoder, PrefixOutput};
pub use head::{bonafide_scores, Head, ATTACK, BONAFIDE};
pub use init::trunc_normal;
pub use sampler::{BlockSampler, SamplerMode};
pub use tokenizer::Tokenizer;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// What the classification head reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HeadInput {
    /// Adapter output on the patch tokens of a sampled depth.
    PseudoClass,
    /// The cls token after the last block; the adapter is bypassed.
    ClsToken,
}

/// A complete model: every parameter set plus the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub head_input: HeadInput,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub adapter: Adapter,
    pub head: Head,
}

impl ModelBundle {
    /// Initializes in a fixed order: tokenizer, encoder, adapter, head.
    pub fn init(config: ModelConfig, head_input: HeadInput, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            head_input,
            tokenizer: Tokenizer::init(&config, rng),
            encoder: Encoder::init(&config, rng),
            adapter: Adapter::init(&config, rng),
            head: Head::init(&config, rng),
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            tokenizer: self.tokenizer.params.numel(),
            encoder: self.encoder.groups.iter().map(|g| g.numel()).sum(),
            adapter: self.adapter.params.numel(),
            head: self.head.params.numel(),
        }
    }

    /// Head inputs (`[B, d]`) for each requested depth, sharing one tokenizer
    /// and encoder pass. Adapter norms run in evaluation mode. With
    /// [`HeadInput::ClsToken`] every depth must be `L`.
    pub fn features_at_depths(&self, images: &Tensor, depths: &[usize]) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        let Some(&deepest) = depths.iter().max() else {
            return Ok(Vec::new());
        };
        if self.head_input == HeadInput::ClsToken && depths.iter().any(|&d| d != cfg.layers) {
            return Err(Error::Config(format!("cls-token models only read depth {}", cfg.layers)));
        }
        let mut g = Graph::new();
        let tp = g.constants(&self.tokenizer.params);
        let x = g.constant(images.clone());
        let tokens = self.tokenizer.forward(cfg, &mut g, &tp, x)?;
        let leaves = self.encoder.bind(&mut g, deepest, false);
        let prefix = self.encoder.forward_prefix(cfg, &mut g, &leaves, tokens, deepest)?;
        if self.head_input == HeadInput::ClsToken {
            let cls = g.value(prefix.cls).clone();
            return Ok(depths.iter().map(|_| cls.clone()).collect());
        }
        let ap = g.constants(&self.adapter.params);
        let s = cfg.tokens();
        let mut out = Vec::with_capacity(depths.len());
        for &depth in depths {
            let stream = prefix.streams[depth - 1];
            let patch = g.slice(stream, 1, 1, s)?;
            let (z, _) = self.adapter.forward(cfg, &mut g, &ap, patch, NormMode::Eval)?;
            out.push(g.value(z).clone());
        }
        Ok(out)
    }

    /// Bonafide scores for each requested depth.
    pub fn scores_at_depths(&self, images: &Tensor, depths: &[usize]) -> Result<Vec<Vec<Real>>> {
        self.features_at_depths(images, depths)?
            .iter()
            .map(|z| Ok(bonafide_scores(&self.head.classify(z)?)))
            .collect()
    }
}
