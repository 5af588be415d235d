use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::init::{trunc_normal, LINEAR_STD};
use super::ModelConfig;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::real::{self, Real};
use crate::tensor::Tensor;

const LN1_G: usize = 0;
const LN1_B: usize = 1;
const QKV_W: usize = 2;
const QKV_B: usize = 3;
const PROJ_W: usize = 4;
const PROJ_B: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const FC1_W: usize = 8;
const FC1_B: usize = 9;
const FC2_W: usize = 10;
const FC2_B: usize = 11;

/// Server-side stack of `L` pre-norm self-attention blocks plus the cls token.
///
/// Parameters are grouped for optimization and aggregation: group 0 is the cls
/// embedding, group `i` (1-based) is block `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub groups: Vec<ParamSet>,
}

/// Graph nodes produced by a prefix pass.
#[derive(Clone, Debug)]
pub struct PrefixOutput {
    /// Patch tokens `[B, S, d]` after the last evaluated block.
    pub tokens: NodeId,
    /// cls token `[B, d]` after the last evaluated block.
    pub cls: NodeId,
    /// Full stream `[B, S+1, d]` after each evaluated block, in order.
    pub streams: Vec<NodeId>,
}

impl Encoder {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let hidden = cfg.mlp_ratio * d;
        let mut groups = Vec::with_capacity(cfg.layers + 1);
        let mut cls = ParamSet::new();
        cls.push("encoder.cls_token", trunc_normal(&[1, d], LINEAR_STD, rng), false);
        groups.push(cls);
        for i in 1..=cfg.layers {
            let name = |suffix: &str| format!("encoder.blocks.{i}.{suffix}");
            let mut b = ParamSet::new();
            b.push(name("ln1.gamma"), Tensor::ones(&[d]), false);
            b.push(name("ln1.beta"), Tensor::zeros(&[d]), false);
            b.push(name("attn.qkv.weight"), trunc_normal(&[d, 3 * d], LINEAR_STD, rng), true);
            b.push(name("attn.qkv.bias"), Tensor::zeros(&[3 * d]), false);
            b.push(name("attn.proj.weight"), trunc_normal(&[d, d], LINEAR_STD, rng), true);
            b.push(name("attn.proj.bias"), Tensor::zeros(&[d]), false);
            b.push(name("ln2.gamma"), Tensor::ones(&[d]), false);
            b.push(name("ln2.beta"), Tensor::zeros(&[d]), false);
            b.push(name("mlp.fc1.weight"), trunc_normal(&[d, hidden], LINEAR_STD, rng), true);
            b.push(name("mlp.fc1.bias"), Tensor::zeros(&[hidden]), false);
            b.push(name("mlp.fc2.weight"), trunc_normal(&[hidden, d], LINEAR_STD, rng), true);
            b.push(name("mlp.fc2.bias"), Tensor::zeros(&[d]), false);
            groups.push(b);
        }
        Self { groups }
    }

    pub fn layers(&self) -> usize {
        self.groups.len() - 1
    }

    /// Registers the cls group and blocks `1..=depth` as graph leaves.
    pub fn bind(&self, g: &mut Graph, depth: usize, trainable: bool) -> Vec<Vec<NodeId>> {
        self.groups[..=depth.min(self.layers())]
            .iter()
            .map(|set| if trainable { g.params(set) } else { g.constants(set) })
            .collect()
    }

    /// Runs tokens through the first `depth` blocks. `leaves` must come from
    /// [`Encoder::bind`] with at least `depth` blocks.
    pub fn forward_prefix(
        &self,
        cfg: &ModelConfig,
        g: &mut Graph,
        leaves: &[Vec<NodeId>],
        tokens: NodeId,
        depth: usize,
    ) -> Result<PrefixOutput> {
        if depth == 0 || depth > self.layers() {
            return Err(Error::Config(format!("block index {depth} outside 1..={}", self.layers())));
        }
        if leaves.len() <= depth {
            return Err(Error::Config(format!("only {} blocks bound, {depth} requested", leaves.len() - 1)));
        }
        let shape = g.value(tokens).shape();
        if shape.len() != 3 || shape[1] != cfg.tokens() || shape[2] != cfg.dim {
            return Err(Error::shape("encode_prefix", shape, &[cfg.tokens(), cfg.dim]));
        }
        let (batch, s) = (shape[0], shape[1]);
        let cls = g.expand(leaves[0][0], batch)?;
        let mut x = g.concat(cls, tokens, 1)?;
        let mut streams = Vec::with_capacity(depth);
        for block in &leaves[1..=depth] {
            x = block_forward(cfg, g, block, x)?;
            streams.push(x);
        }
        let patch = g.slice(x, 1, 1, s)?;
        let cls = g.slice(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[batch, cfg.dim])?;
        Ok(PrefixOutput {
            tokens: patch,
            cls,
            streams,
        })
    }

    /// Gradient-free prefix pass returning `(s_ℓ [B, S, d], cls [B, d])`.
    pub fn encode_prefix(&self, cfg: &ModelConfig, tokens: &Tensor, depth: usize) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, depth, false);
        let t = g.constant(tokens.clone());
        let out = self.forward_prefix(cfg, &mut g, &leaves, t, depth)?;
        Ok((g.value(out.tokens).clone(), g.value(out.cls).clone()))
    }
}

/// One pre-norm block on the stream `x[B, T, d]`.
pub fn block_forward(cfg: &ModelConfig, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = g.layer_norm(x, p[LN1_G], p[LN1_B], cfg.ln_eps)?;
    let attn = attention(cfg, g, p, h)?;
    let x = g.add(x, attn)?;
    let h = g.layer_norm(x, p[LN2_G], p[LN2_B], cfg.ln_eps)?;
    let h = g.matmul(h, p[FC1_W])?;
    let h = g.add_broadcast(h, p[FC1_B])?;
    let h = g.gelu(h);
    let h = g.matmul(h, p[FC2_W])?;
    let h = g.add_broadcast(h, p[FC2_B])?;
    g.add(x, h)
}

/// Multi-head scaled dot-product self-attention, composed from primitives.
fn attention(cfg: &ModelConfig, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
    let (batch, t) = (g.value(x).shape()[0], g.value(x).shape()[1]);
    let (d, heads, hd) = (cfg.dim, cfg.heads, cfg.head_dim());
    let qkv = g.matmul(x, p[QKV_W])?;
    let qkv = g.add_broadcast(qkv, p[QKV_B])?;
    let split = |g: &mut Graph, offset: usize, perm: &[usize]| -> Result<NodeId> {
        let part = g.slice(qkv, 2, offset, d)?;
        let part = g.reshape(part, &[batch, t, heads, hd])?;
        g.permute(part, perm)
    };
    let q = split(g, 0, &[0, 2, 1, 3])?;
    let k_t = split(g, d, &[0, 2, 3, 1])?;
    let v = split(g, 2 * d, &[0, 2, 1, 3])?;
    let scores = g.batch_matmul(q, k_t)?;
    let scores = g.scale(scores, 1.0 / real::sqrt(hd as Real));
    let weights = g.softmax(scores);
    let out = g.batch_matmul(weights, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[batch, t, d])?;
    let out = g.matmul(out, p[PROJ_W])?;
    g.add_broadcast(out, p[PROJ_B])
}
