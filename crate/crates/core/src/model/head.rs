use alloc::vec::Vec;

use rand::Rng;

use super::init::{trunc_normal, LINEAR_STD};
use super::ModelConfig;
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::param::ParamSet;
use crate::real::{self, Real};
use crate::tensor::Tensor;

/// Class index of a presentation attack.
pub const ATTACK: usize = 0;
/// Class index of a bonafide presentation.
pub const BONAFIDE: usize = 1;

/// Client-side linear classifier `d → 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub params: ParamSet,
}

impl Head {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        p.push("head.weight", trunc_normal(&[cfg.dim, 2], LINEAR_STD, rng), true);
        p.push("head.bias", Tensor::zeros(&[2]), false);
        Self { params: p }
    }

    pub fn forward(&self, g: &mut Graph, p: &[NodeId], z: NodeId) -> Result<NodeId> {
        let logits = g.matmul(z, p[0])?;
        g.add_broadcast(logits, p[1])
    }

    /// Gradient-free classification, `z̃[B, d] → logits[B, 2]`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constants(&self.params);
        let zn = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zn)?;
        Ok(g.value(out).clone())
    }
}

/// `softmax(logits)[bonafide]` per row.
pub fn bonafide_scores(logits: &Tensor) -> Vec<Real> {
    logits
        .data()
        .chunks_exact(2)
        .map(|row| {
            let m = row[0].max(row[1]);
            let (a, b) = (real::exp(row[ATTACK] - m), real::exp(row[BONAFIDE] - m));
            b / (a + b)
        })
        .collect()
}
