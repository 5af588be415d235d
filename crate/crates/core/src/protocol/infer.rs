use alloc::vec::Vec;

use crate::error::Result;
use crate::metrics::ScoreSet;
use crate::model::{BlockSampler, HeadInput, ModelBundle, SamplerMode};
use crate::real::Real;
use crate::synth::DomainDataset;
use crate::tensor::Tensor;

/// How the encoder depth is chosen at inference time. Models that classify
/// the cls token always read the last block.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InferencePolicy {
    /// One draw per call, or one per sample with `per_sample`.
    Sampled { range: SamplerMode, seed: u64, per_sample: bool },
    Fixed(usize),
    /// Each sample's score is the mean over `draws` independent depths.
    Averaged { range: SamplerMode, seed: u64, draws: usize },
}

/// Bonafide scores `softmax(logits)[bonafide]` for a batch of images.
pub fn infer(bundle: &ModelBundle, images: &Tensor, policy: InferencePolicy) -> Result<Vec<Real>> {
    let mut state = PolicyState::new(bundle, policy)?;
    state.scores(bundle, images)
}

/// Scores a whole dataset in chunks of `chunk` samples. The policy's random
/// stream runs on across chunks, so a per-call draw becomes a per-chunk draw.
pub fn score_dataset(
    bundle: &ModelBundle,
    data: &DomainDataset,
    policy: InferencePolicy,
    chunk: usize,
) -> Result<ScoreSet> {
    let mut state = PolicyState::new(bundle, policy)?;
    let mut scores = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (images, _) = data.batch(part)?;
        scores.extend(state.scores(bundle, &images)?);
    }
    ScoreSet::new(
        scores,
        data.samples.iter().map(|s| s.label).collect(),
        data.samples.iter().map(|s| s.group).collect(),
    )
}

enum PolicyState {
    Fixed(usize),
    PerCall(BlockSampler),
    PerSample(BlockSampler, usize),
}

impl PolicyState {
    fn new(bundle: &ModelBundle, policy: InferencePolicy) -> Result<Self> {
        let layers = bundle.config.layers;
        if bundle.head_input == HeadInput::ClsToken {
            return Ok(PolicyState::Fixed(layers));
        }
        Ok(match policy {
            InferencePolicy::Fixed(depth) => PolicyState::Fixed(depth),
            InferencePolicy::Sampled { range, seed, per_sample } => {
                let s = BlockSampler::seeded(range, layers, seed)?;
                if per_sample {
                    PolicyState::PerSample(s, 1)
                } else {
                    PolicyState::PerCall(s)
                }
            }
            InferencePolicy::Averaged { range, seed, draws } => {
                PolicyState::PerSample(BlockSampler::seeded(range, layers, seed)?, draws.max(1))
            }
        })
    }

    fn scores(&mut self, bundle: &ModelBundle, images: &Tensor) -> Result<Vec<Real>> {
        match self {
            PolicyState::Fixed(depth) => Ok(bundle.scores_at_depths(images, &[*depth])?.remove(0)),
            PolicyState::PerCall(s) => {
                let depth = s.draw();
                Ok(bundle.scores_at_depths(images, &[depth])?.remove(0))
            }
            PolicyState::PerSample(s, draws) => {
                let (lo, hi) = s.mode().range();
                let depths: Vec<usize> = (lo..=hi).collect();
                let table = bundle.scores_at_depths(images, &depths)?;
                let n = images.shape()[0];
                Ok((0..n)
                    .map(|i| {
                        let total: Real = (0..*draws).map(|_| table[s.draw() - lo][i]).sum();
                        total / *draws as Real
                    })
                    .collect())
            }
        }
    }
}
