use alloc::format;

use rand::Rng;

use super::init::{conv_weight, trunc_normal, LINEAR_STD};
use super::ModelConfig;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::tensor::Tensor;

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const POS: usize = 6;

/// Client-side CNN tokenizer: two conv+ReLU layers, a linear projection of
/// every grid cell to `d`, and a learnable positional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub params: ParamSet,
}

impl Tokenizer {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, c1, c2, d) = (cfg.image.channels, cfg.conv1.out_channels, cfg.conv2.out_channels, cfg.dim);
        let mut p = ParamSet::new();
        p.push("tokenizer.conv1.weight", conv_weight(&[c1, cfg.conv1.kernel, cfg.conv1.kernel, c], rng), true);
        p.push("tokenizer.conv1.bias", Tensor::zeros(&[c1]), false);
        p.push("tokenizer.conv2.weight", conv_weight(&[c2, cfg.conv2.kernel, cfg.conv2.kernel, c1], rng), true);
        p.push("tokenizer.conv2.bias", Tensor::zeros(&[c2]), false);
        p.push("tokenizer.proj.weight", trunc_normal(&[c2, d], LINEAR_STD, rng), true);
        p.push("tokenizer.proj.bias", Tensor::zeros(&[d]), false);
        p.push("tokenizer.pos_embed", trunc_normal(&[cfg.tokens(), d], LINEAR_STD, rng), false);
        Self { params: p }
    }

    /// `images[B, H, W, C] → tokens[B, S, d]`.
    pub fn forward(&self, cfg: &ModelConfig, g: &mut Graph, p: &[NodeId], images: NodeId) -> Result<NodeId> {
        let shape = g.value(images).shape();
        let expected = [cfg.image.height, cfg.image.width, cfg.image.channels];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::invalid(
                "tokenize",
                format!("expected images [B, {}, {}, {}], got {shape:?}", expected[0], expected[1], expected[2]),
            ));
        }
        let batch = shape[0];
        let x = g.conv2d(images, p[CONV1_W], cfg.conv1.stride, cfg.conv1.padding)?;
        let x = g.add_broadcast(x, p[CONV1_B])?;
        let x = g.relu(x);
        let x = g.conv2d(x, p[CONV2_W], cfg.conv2.stride, cfg.conv2.padding)?;
        let x = g.add_broadcast(x, p[CONV2_B])?;
        let x = g.relu(x);
        let x = g.reshape(x, &[batch, cfg.tokens(), cfg.conv2.out_channels])?;
        let x = g.matmul(x, p[PROJ_W])?;
        let x = g.add_broadcast(x, p[PROJ_B])?;
        g.add_broadcast(x, p[POS])
    }

    /// Gradient-free tokenization.
    pub fn tokenize(&self, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constants(&self.params);
        let x = g.constant(images.clone());
        let out = self.forward(cfg, &mut g, &p, x)?;
        Ok(g.value(out).clone())
    }
}
