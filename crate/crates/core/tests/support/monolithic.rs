//! A single-process reference for the split schedule: every client's batch
//! goes through one graph spanning tokenizer to loss. Update timing follows
//! the federated schedule (client and adapter steps right after each
//! backward, the encoder once per round, client modules averaged on unifying
//! rounds) but shares none of the protocol code, optimizer or batching.

#![allow(dead_code)]

use fedsis_core::autodiff::Graph;
use fedsis_core::model::{BlockSampler, HeadInput, ModelBundle, ModelConfig, NormMode, SamplerMode};
use fedsis_core::param::ParamSet;
use fedsis_core::synth::DomainDataset;
use fedsis_core::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct OracleAdam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for OracleAdam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Clone)]
struct Slot {
    m: Vec<Real>,
    v: Vec<Real>,
    t: i32,
}

#[derive(Clone)]
struct Moments(Vec<Slot>);

impl Moments {
    fn new(set: &ParamSet) -> Self {
        Moments(
            set.iter()
                .map(|p| Slot {
                    m: vec![0.0; p.value.numel()],
                    v: vec![0.0; p.value.numel()],
                    t: 0,
                })
                .collect(),
        )
    }

    fn step(&mut self, c: &OracleAdam, set: &mut ParamSet, grads: &[Vec<Real>]) {
        for ((p, g), s) in set.iter_mut().zip(grads).zip(&mut self.0) {
            s.t += 1;
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let bc1 = 1.0 - c.beta1.powi(s.t);
            let bc2 = 1.0 - c.beta2.powi(s.t);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i] + decay * *w;
                s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * gi;
                s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * gi * gi;
                *w -= c.lr * (s.m[i] / bc1) / ((s.v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

struct Loader {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Loader {
    fn new(n: usize, batch: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, batch, rng }
    }

    fn next(&mut self) -> Vec<usize> {
        (0..self.batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub struct OracleRun {
    pub tokenizers: Vec<ParamSet>,
    pub heads: Vec<ParamSet>,
    pub bundle: ModelBundle,
    /// Depth drawn for each client, round by round.
    pub depths: Vec<Vec<usize>>,
}

pub struct OracleConfig {
    pub model: ModelConfig,
    pub head_input: HeadInput,
    pub rounds: u32,
    pub unify_every: u32,
    pub batch: usize,
    pub sampler: SamplerMode,
    pub seed: u64,
    pub adam: OracleAdam,
}

fn grads_or_zero(g: &Graph, ids: &[fedsis_core::autodiff::NodeId]) -> Vec<Vec<Real>> {
    ids.iter()
        .map(|&id| match g.grad(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; g.value(id).numel()],
        })
        .collect()
}

/// Plain weighted sum of the clients' sets, weights proportional to size.
fn average(sets: &[ParamSet], sizes: &[usize]) -> ParamSet {
    let total: usize = sizes.iter().sum();
    let mut out = sets[0].clone();
    for (i, p) in out.iter_mut().enumerate() {
        for (j, v) in p.value.data_mut().iter_mut().enumerate() {
            *v = sets
                .iter()
                .zip(sizes)
                .map(|(s, &n)| (n as Real / total as Real) * s.get(i).data()[j])
                .sum();
        }
    }
    out
}

pub fn run(cfg: &OracleConfig, data: &[DomainDataset]) -> OracleRun {
    let m = cfg.model;
    let k = data.len();
    let mut bundle = ModelBundle::init(m, cfg.head_input, &mut rng_for(cfg.seed, 0)).unwrap();
    let mut sampler = BlockSampler::new(cfg.sampler, m.layers, rng_for(cfg.seed, 1)).unwrap();
    let mut loaders: Vec<Loader> = data.iter().enumerate().map(|(i, d)| Loader::new(d.len(), cfg.batch, rng_for(cfg.seed, 100 + i as u64))).collect();
    let mut tokenizers = vec![bundle.tokenizer.params.clone(); k];
    let mut heads = vec![bundle.head.params.clone(); k];
    let mut tok_m: Vec<Moments> = tokenizers.iter().map(Moments::new).collect();
    let mut head_m: Vec<Moments> = heads.iter().map(Moments::new).collect();
    let mut enc_m: Vec<Moments> = bundle.encoder.groups.iter().map(Moments::new).collect();
    let mut ad_m = Moments::new(&bundle.adapter.params);
    let sizes: Vec<usize> = data.iter().map(DomainDataset::len).collect();
    let mut depths = Vec::new();

    for round in 1..=cfg.rounds {
        let mut sums: Vec<Option<Vec<Vec<Real>>>> = vec![None; m.layers + 1];
        let mut counts = vec![0usize; m.layers + 1];
        let mut drawn = Vec::with_capacity(k);
        for c in 0..k {
            let depth = match cfg.head_input {
                HeadInput::PseudoClass => sampler.draw(),
                HeadInput::ClsToken => m.layers,
            };
            drawn.push(depth);
            let (images, labels) = data[c].batch(&loaders[c].next()).unwrap();
            let mut g = Graph::new();
            let tp = g.params(&tokenizers[c]);
            let x = g.constant(images);
            let tokens = bundle.tokenizer.forward(&m, &mut g, &tp, x).unwrap();
            let enc: Vec<_> = bundle.encoder.groups[..=depth].iter().map(|s| g.params(s)).collect();
            let prefix = bundle.encoder.forward_prefix(&m, &mut g, &enc, tokens, depth).unwrap();
            let (z, ap) = match cfg.head_input {
                HeadInput::PseudoClass => {
                    let ap = g.params(&bundle.adapter.params);
                    let (z, stats) = bundle.adapter.forward(&m, &mut g, &ap, prefix.tokens, NormMode::Train).unwrap();
                    bundle.adapter.fold_stats(&m, &stats);
                    (z, Some(ap))
                }
                HeadInput::ClsToken => (prefix.cls, None),
            };
            let hp = g.params(&heads[c]);
            let logits = bundle.head.forward(&mut g, &hp, z).unwrap();
            let loss = g.cross_entropy(logits, &labels).unwrap();
            g.backward(loss).unwrap();

            head_m[c].step(&cfg.adam, &mut heads[c], &grads_or_zero(&g, &hp));
            if let Some(ap) = ap {
                ad_m.step(&cfg.adam, &mut bundle.adapter.params, &grads_or_zero(&g, &ap));
            }
            for (group, ids) in enc.iter().enumerate() {
                let grads = grads_or_zero(&g, ids);
                counts[group] += 1;
                match &mut sums[group] {
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
                    slot @ None => *slot = Some(grads),
                }
            }
            tok_m[c].step(&cfg.adam, &mut tokenizers[c], &grads_or_zero(&g, &tp));
        }
        for (group, acc) in sums.into_iter().enumerate() {
            let Some(mut acc) = acc else { continue };
            let n = counts[group] as Real;
            acc.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v /= n));
            enc_m[group].step(&cfg.adam, &mut bundle.encoder.groups[group], &acc);
        }
        if round % cfg.unify_every == 0 || round == cfg.rounds {
            let t = average(&tokenizers, &sizes);
            let h = average(&heads, &sizes);
            tokenizers.iter_mut().for_each(|s| *s = t.clone());
            heads.iter_mut().for_each(|s| *s = h.clone());
        }
        depths.push(drawn);
    }
    bundle.tokenizer.params = tokenizers[0].clone();
    bundle.head.params = heads[0].clone();
    OracleRun {
        tokenizers,
        heads,
        bundle,
        depths,
    }
}

/// Largest element difference over every parameter and running statistic.
pub fn max_bundle_diff(a: &ModelBundle, b: &ModelBundle) -> Real {
    let mut sets: Vec<(&ParamSet, &ParamSet)> = vec![(&a.tokenizer.params, &b.tokenizer.params), (&a.adapter.params, &b.adapter.params), (&a.head.params, &b.head.params)];
    sets.extend(a.encoder.groups.iter().zip(&b.encoder.groups));
    let mut worst: Real = 0.0;
    for (x, y) in sets {
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y.iter()) {
            worst = worst.max(p.value.max_abs_diff(&q.value));
        }
    }
    for (r, s) in a.adapter.running.iter().zip(&b.adapter.running) {
        for (u, v) in r.mean.iter().zip(&s.mean).chain(r.var.iter().zip(&s.var)) {
            worst = worst.max((u - v).abs());
        }
    }
    worst
}

/// Every tensor of a bundle, flattened, for reporting.
pub fn flat(b: &ModelBundle) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = b.tokenizer.params.tensors().cloned().collect();
    for g in &b.encoder.groups {
        out.extend(g.tensors().cloned());
    }
    out.extend(b.adapter.params.tensors().cloned());
    out.extend(b.head.params.tensors().cloned());
    out
}
