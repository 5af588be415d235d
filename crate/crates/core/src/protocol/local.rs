use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::batcher::EpochBatcher;
use crate::adam::{Adam, AdamConfig};
use crate::autodiff::Graph;
use crate::error::Result;
use crate::model::{BlockSampler, HeadInput, ModelBundle, NormMode};
use crate::real::Real;
use crate::synth::DomainDataset;
use crate::tensor::Tensor;

/// Optimizer state for every component of a bundle.
#[derive(Clone, Debug)]
pub struct BundleOptimizers {
    pub tokenizer: Adam,
    pub encoder: Vec<Adam>,
    pub adapter: Adam,
    pub head: Adam,
}

impl BundleOptimizers {
    pub fn new(config: AdamConfig, bundle: &ModelBundle) -> Self {
        Self {
            tokenizer: Adam::new(config, &bundle.tokenizer.params),
            encoder: bundle.encoder.groups.iter().map(|g| Adam::new(config, g)).collect(),
            adapter: Adam::new(config, &bundle.adapter.params),
            head: Adam::new(config, &bundle.head.params),
        }
    }

    pub fn reset(&mut self) {
        self.tokenizer.reset();
        self.encoder.iter_mut().for_each(Adam::reset);
        self.adapter.reset();
        self.head.reset();
    }
}

/// A whole model trained in one place: the centralized baselines and each
/// participant of plain federated averaging. One step per call, every
/// component updated immediately.
pub struct LocalTrainer {
    pub bundle: ModelBundle,
    pub optimizers: BundleOptimizers,
    data: Arc<DomainDataset>,
    batcher: EpochBatcher,
    sampler: BlockSampler,
}

impl LocalTrainer {
    pub fn new(
        bundle: ModelBundle,
        adam: AdamConfig,
        data: Arc<DomainDataset>,
        batch: usize,
        batch_rng: ChaCha8Rng,
        sampler: BlockSampler,
    ) -> Self {
        Self {
            optimizers: BundleOptimizers::new(adam, &bundle),
            batcher: EpochBatcher::new(data.len(), batch, batch_rng),
            bundle,
            data,
            sampler,
        }
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }

    /// One minibatch step; returns the depth used and the batch-mean loss.
    pub fn step(&mut self) -> Result<(usize, Real)> {
        let (images, labels) = self.data.batch(&self.batcher.next_batch())?;
        let b = &mut self.bundle;
        let cfg = b.config;
        let depth = match b.head_input {
            HeadInput::PseudoClass => self.sampler.draw(),
            HeadInput::ClsToken => cfg.layers,
        };
        let mut g = Graph::new();
        let tp = g.params(&b.tokenizer.params);
        let x = g.constant(images);
        let tokens = b.tokenizer.forward(&cfg, &mut g, &tp, x)?;
        let leaves = b.encoder.bind(&mut g, depth, true);
        let prefix = b.encoder.forward_prefix(&cfg, &mut g, &leaves, tokens, depth)?;
        let (z, ap) = match b.head_input {
            HeadInput::PseudoClass => {
                let ap = g.params(&b.adapter.params);
                let (z, stats) = b.adapter.forward(&cfg, &mut g, &ap, prefix.tokens, NormMode::Train)?;
                b.adapter.fold_stats(&cfg, &stats);
                (z, Some(ap))
            }
            HeadInput::ClsToken => (prefix.cls, None),
        };
        let hp = g.params(&b.head.params);
        let logits = b.head.forward(&mut g, &hp, z)?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        let o = &mut self.optimizers;
        o.head.step(&mut b.head.params, &g.grads_of(&hp))?;
        if let Some(ap) = ap {
            o.adapter.step(&mut b.adapter.params, &g.grads_of(&ap))?;
        }
        // Every bound group took part in the pass: unreached tensors count as
        // zero gradients, as on the server.
        for (group, ids) in leaves.iter().enumerate() {
            let grads: Vec<_> = ids
                .iter()
                .map(|&id| Some(g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))))
                .collect();
            o.encoder[group].step(&mut b.encoder.groups[group], &grads)?;
        }
        o.tokenizer.step(&mut b.tokenizer.params, &g.grads_of(&tp))?;
        Ok((depth, g.value(loss).item()))
    }
}
