use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::init::conv_weight;
use super::ModelConfig;
use crate::autodiff::{BatchNormMode, BatchStats, Graph, NodeId};
use crate::error::{Error, Result};
use crate::param::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

const CONV1_W: usize = 0;
const BN1_G: usize = 1;
const BN1_B: usize = 2;
const CONV2_W: usize = 3;
const BN2_G: usize = 4;
const BN2_B: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    fn update(&mut self, batch: &BatchStats, momentum: Real) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Server-side adapter shared by all blocks: on the `√S×√S×d` token grid,
/// (conv 3×3 → BN → ReLU) twice, then global average pooling to one d-vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub params: ParamSet,
    /// Running statistics of the two batch norms. Checkpointed, never averaged.
    pub running: [RunningStats; 2],
}

impl Adapter {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let mut p = ParamSet::new();
        p.push("adapter.conv1.weight", conv_weight(&[d, 3, 3, d], rng), true);
        p.push("adapter.bn1.gamma", Tensor::ones(&[d]), false);
        p.push("adapter.bn1.beta", Tensor::zeros(&[d]), false);
        p.push("adapter.conv2.weight", conv_weight(&[d, 3, 3, d], rng), true);
        p.push("adapter.bn2.gamma", Tensor::ones(&[d]), false);
        p.push("adapter.bn2.beta", Tensor::zeros(&[d]), false);
        Self {
            params: p,
            running: [RunningStats::new(d), RunningStats::new(d)],
        }
    }

    /// `s_ℓ[B, S, d] → z̃[B, d]`. Training mode normalizes with batch
    /// statistics and returns them for [`Adapter::fold_stats`]; evaluation
    /// mode uses the running statistics and returns none.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        g: &mut Graph,
        p: &[NodeId],
        tokens: NodeId,
        mode: NormMode,
    ) -> Result<(NodeId, Vec<BatchStats>)> {
        let shape = g.value(tokens).shape();
        let side = cfg.grid_side();
        if shape.len() != 3 || shape[1] != side * side || shape[2] != cfg.dim {
            return Err(Error::shape("adapt", shape, &[side * side, cfg.dim]));
        }
        let batch = shape[0];
        let mut x = g.reshape(tokens, &[batch, side, side, cfg.dim])?;
        let mut batch_stats = Vec::new();
        for (i, (w, gamma, beta)) in [(CONV1_W, BN1_G, BN1_B), (CONV2_W, BN2_G, BN2_B)].into_iter().enumerate() {
            x = g.conv2d(x, p[w], 1, 1)?;
            let bn_mode = match mode {
                NormMode::Train => BatchNormMode::Train,
                NormMode::Eval => BatchNormMode::Eval {
                    mean: &self.running[i].mean,
                    var: &self.running[i].var,
                },
            };
            let (y, stats) = g.batch_norm(x, p[gamma], p[beta], bn_mode, cfg.bn_eps)?;
            batch_stats.extend(stats);
            x = g.relu(y);
        }
        Ok((g.global_avg_pool(x)?, batch_stats))
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn fold_stats(&mut self, cfg: &ModelConfig, stats: &[BatchStats]) {
        for (running, batch) in self.running.iter_mut().zip(stats) {
            running.update(batch, cfg.bn_momentum);
        }
    }

    /// Gradient-free adapter pass.
    pub fn adapt(&mut self, cfg: &ModelConfig, tokens: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constants(&self.params);
        let t = g.constant(tokens.clone());
        let (out, stats) = self.forward(cfg, &mut g, &p, t, mode)?;
        self.fold_stats(cfg, &stats);
        Ok(g.value(out).clone())
    }
}
