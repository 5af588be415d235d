//! Training and inference state machines.
//!
//! In the split modes each client owns a tokenizer and a head, the server owns
//! the encoder, the adapter and the block sampler, and every exchange goes
//! through a [`Transport`] that records payload sizes. One collaboration round
//! visits every client once:
//!
//! ```text
//! client  TokenBatch ─────────▶ server   draws ℓ, prefix 1..ℓ, adapter
//! client ◀───────── PseudoClassBatch
//! client  head, loss, step ─▶ PseudoClassGrad
//! server  adapter step, encoder grads accumulated ─▶ TokenGrad
//! client  tokenizer step
//! ```
//!
//! The encoder steps once at the end of the round. Every `unify_every` rounds,
//! and after the last one, tokenizers and heads are replaced by their
//! sample-weighted mean.

mod batcher;
mod client;
mod infer;
mod local;
mod message;
mod server;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batcher::EpochBatcher;
pub use client::Client;
pub use infer::{infer, score_dataset, InferencePolicy};
pub use local::{BundleOptimizers, LocalTrainer};
pub use message::{Message, MessageKind, RequestId, Transfer, Transport};
pub use server::{aggregate_uploads, EncoderAccumulator, EncoderDivisor, Server};

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{BlockSampler, HeadInput, ModelBundle, ModelConfig, SamplerMode};
use crate::param::sample_weights;
use crate::real::Real;
use crate::synth::DomainDataset;
use crate::tensor::Tensor;

/// Random stream of the model initialization.
pub const STREAM_INIT: u64 = 0;
/// Random stream of the block sampler.
pub const STREAM_SAMPLER: u64 = 1;
/// Random stream of shuffled client visit orders.
pub const STREAM_VISIT: u64 = 2;
/// Client `k` shuffles its data on stream `STREAM_BATCH + k`; pooled
/// loaders use `STREAM_BATCH`.
pub const STREAM_BATCH: u64 = 100;

/// A ChaCha8 generator for one named stream of a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    /// Split learning with sampled intermediate blocks and an adapter.
    FedSis,
    /// Split learning classifying the final cls token.
    Festa,
    /// Every client trains a full cls-token model; all parameters averaged.
    FedAvg,
    /// One cls-token model on the pooled data.
    Centralized,
    /// One sampled-block model on the pooled data.
    CentralizedIs,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::FedSis, Mode::Festa, Mode::FedAvg, Mode::Centralized, Mode::CentralizedIs];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedSis => "fedsis",
            Mode::Festa => "festa",
            Mode::FedAvg => "fedavg",
            Mode::Centralized => "centralized",
            Mode::CentralizedIs => "centralized_is",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown mode {name:?}; expected one of fedsis, festa, fedavg, centralized, centralized_is")))
    }

    pub fn head_input(self) -> HeadInput {
        match self {
            Mode::FedSis | Mode::CentralizedIs => HeadInput::PseudoClass,
            Mode::Festa | Mode::FedAvg | Mode::Centralized => HeadInput::ClsToken,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VisitOrder {
    #[default]
    Ascending,
    /// A fresh permutation every round.
    Shuffled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// The precision this build computes in.
    pub fn compiled() -> Self {
        if core::mem::size_of::<Real>() == 4 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// How client parameters are weighted when averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Weighting {
    /// `N_k / N`, with sizes fixed at startup.
    #[default]
    Samples,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub model: ModelConfig,
    pub rounds: u32,
    pub unify_every: u32,
    /// One entry per client, or a single entry for all of them. Pooled modes
    /// use the sum.
    pub batch_sizes: Vec<usize>,
    pub adam: AdamConfig,
    pub sampler: SamplerMode,
    pub seed: u64,
    pub precision: Precision,
    pub visit_order: VisitOrder,
    pub divisor: EncoderDivisor,
    pub reset_moments_on_unify: bool,
    pub weighting: Weighting,
}

impl TrainingConfig {
    pub fn new(mode: Mode, model: ModelConfig) -> Self {
        Self {
            mode,
            model,
            rounds: 200,
            unify_every: 10,
            batch_sizes: alloc::vec![8],
            adam: AdamConfig::default(),
            sampler: SamplerMode::full(model.layers),
            seed: 0,
            precision: Precision::compiled(),
            visit_order: VisitOrder::Ascending,
            divisor: EncoderDivisor::Contributors,
            reset_moments_on_unify: false,
            weighting: Weighting::Samples,
        }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        self.model.validate()?;
        if clients == 0 {
            return Err(Error::Config("at least one client dataset is required".into()));
        }
        if self.unify_every == 0 {
            return Err(Error::Config("unify_every must be at least 1".into()));
        }
        if self.batch_sizes.len() != 1 && self.batch_sizes.len() != clients {
            return Err(Error::Config(format!(
                "{} batch sizes for {clients} clients; give one or one per client",
                self.batch_sizes.len()
            )));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.mode.head_input() == HeadInput::PseudoClass {
            self.sampler.validate(self.model.layers)?;
        }
        if self.precision != Precision::compiled() {
            return Err(Error::Config(format!(
                "configured precision {:?} but this build computes in {:?}",
                self.precision,
                Precision::compiled()
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self, client: usize) -> usize {
        if self.batch_sizes.len() == 1 {
            self.batch_sizes[0]
        } else {
            self.batch_sizes[client]
        }
    }

    pub fn is_unify_round(&self, round: u32) -> bool {
        round.is_multiple_of(self.unify_every) || round == self.rounds
    }

    /// The sampler the mode trains with: cls-token modes always read the last block.
    pub fn sampler_mode(&self) -> SamplerMode {
        match self.mode.head_input() {
            HeadInput::PseudoClass => self.sampler,
            HeadInput::ClsToken => SamplerMode::Fixed(self.model.layers),
        }
    }
}

/// One client's share of one round.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundRecord {
    pub round: u32,
    pub client: usize,
    /// Encoder depth used for the client's batch.
    pub depth: usize,
    pub loss: Real,
    /// Token batch plus head-input batch.
    pub fwd_bytes: u64,
    /// Head-input gradient plus token gradient.
    pub bwd_bytes: u64,
    /// Parameter upload plus broadcast, when the round unified.
    pub unify_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<RoundRecord>,
    pub transfers: Vec<Transfer>,
    pub total_bytes: u64,
}

/// Runs `config.rounds` rounds on one dataset per client.
pub fn run_training(config: &TrainingConfig, datasets: &[DomainDataset]) -> Result<TrainingOutcome> {
    config.validate(datasets.len())?;
    for (k, d) in datasets.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::Data(format!("client {k} has no samples")));
        }
        if d.image != config.model.image {
            return Err(Error::Data(format!(
                "client {k} images are {:?}, model expects {:?}",
                d.image, config.model.image
            )));
        }
    }
    let mut init_rng = stream_rng(config.seed, STREAM_INIT);
    let bundle = ModelBundle::init(config.model, config.mode.head_input(), &mut init_rng)?;
    let sampler = BlockSampler::new(config.sampler_mode(), config.model.layers, stream_rng(config.seed, STREAM_SAMPLER))?;
    match config.mode {
        Mode::FedSis | Mode::Festa => run_split(config, datasets, bundle, sampler),
        Mode::FedAvg => run_fedavg(config, datasets, bundle, sampler),
        Mode::Centralized | Mode::CentralizedIs => run_pooled(config, datasets, bundle, sampler),
    }
}

fn client_weights(config: &TrainingConfig, sizes: &[usize]) -> Result<Vec<Real>> {
    match config.weighting {
        Weighting::Samples => sample_weights(sizes),
        Weighting::Uniform => Ok(alloc::vec![1.0 / sizes.len() as Real; sizes.len()]),
    }
}

fn visit_order(config: &TrainingConfig, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    if config.visit_order == VisitOrder::Shuffled {
        order.shuffle(rng);
    }
    order
}

fn run_split(
    config: &TrainingConfig,
    datasets: &[DomainDataset],
    bundle: ModelBundle,
    sampler: BlockSampler,
) -> Result<TrainingOutcome> {
    let cfg = config.model;
    let k = datasets.len();
    let mut transport = Transport::new();
    let mut clients: Vec<Client> = datasets
        .iter()
        .enumerate()
        .map(|(id, d)| {
            Client::new(
                id,
                cfg,
                bundle.tokenizer.clone(),
                bundle.head.clone(),
                config.adam,
                Arc::new(d.clone()),
                config.batch_size(id),
                stream_rng(config.seed, STREAM_BATCH + id as u64),
            )
        })
        .collect();
    // The initial broadcast of the client-side modules.
    let initial: Vec<Tensor> = bundle.tokenizer.params.tensors().chain(bundle.head.params.tensors()).cloned().collect();
    for c in &mut clients {
        let msg = transport.relay(Message {
            kind: MessageKind::ParamBroadcast,
            round: 0,
            client: c.id,
            request: None,
            payload: initial.clone(),
        });
        c.apply_broadcast(&msg, false)?;
    }
    let mut server = Server::new(
        cfg,
        bundle.head_input,
        bundle.encoder,
        bundle.adapter,
        config.adam,
        sampler,
        config.divisor,
    );
    let sizes: Vec<usize> = clients.iter().map(Client::samples).collect();
    let weights = client_weights(config, &sizes)?;
    let mut visit_rng = stream_rng(config.seed, STREAM_VISIT);
    let mut log = Vec::with_capacity(config.rounds as usize * k);
    for round in 1..=config.rounds {
        server.begin_round(round, 0..k)?;
        let first = log.len();
        for id in visit_order(config, k, &mut visit_rng) {
            let ctx = |e: Error| e.in_round(round, id);
            let client = &mut clients[id];
            let tokens = transport.relay(client.forward_next(round).map_err(ctx)?);
            let head_in = transport.relay(server.server_forward(&tokens).map_err(ctx)?);
            let (grad, loss) = client.client_loss_and_backward(&head_in).map_err(ctx)?;
            let grad = transport.relay(grad);
            let token_grad = transport.relay(server.server_backward(&grad).map_err(ctx)?);
            client.client_backward(&token_grad).map_err(ctx)?;
            log.push(RoundRecord {
                round,
                client: id,
                depth: server.depth_for(id).unwrap_or(0),
                loss,
                fwd_bytes: tokens.payload_bytes() + head_in.payload_bytes(),
                bwd_bytes: grad.payload_bytes() + token_grad.payload_bytes(),
                unify_bytes: 0,
            });
        }
        server.end_round_encoder_update().map_err(|e| e.in_round(round, k))?;
        if config.is_unify_round(round) {
            let uploads: Vec<Message> = clients.iter().map(|c| transport.relay(c.upload(round))).collect();
            let broadcasts = aggregate_uploads(&uploads, &weights).map_err(|e| e.in_round(round, k))?;
            for (c, (up, msg)) in clients.iter_mut().zip(uploads.iter().zip(broadcasts)) {
                let msg = transport.relay(msg);
                c.apply_broadcast(&msg, config.reset_moments_on_unify)?;
                let bytes = up.payload_bytes() + msg.payload_bytes();
                if let Some(rec) = log[first..].iter_mut().find(|r| r.client == c.id) {
                    rec.unify_bytes = bytes;
                }
            }
        }
    }
    let total_bytes = transport.total_bytes();
    let lead = &clients[0];
    let bundle = ModelBundle {
        config: cfg,
        head_input: config.mode.head_input(),
        tokenizer: lead.tokenizer.clone(),
        encoder: server.encoder,
        adapter: server.adapter,
        head: lead.head.clone(),
    };
    Ok(TrainingOutcome {
        bundle,
        log,
        transfers: transport.into_log(),
        total_bytes,
    })
}

/// Every trainable tensor in a fixed order: tokenizer, encoder groups, head.
fn bundle_tensors(b: &ModelBundle) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = b.tokenizer.params.tensors().cloned().collect();
    for g in &b.encoder.groups {
        out.extend(g.tensors().cloned());
    }
    out.extend(b.head.params.tensors().cloned());
    out
}

fn load_bundle(b: &mut ModelBundle, tensors: &[Tensor]) -> Result<()> {
    let mut rest = tensors;
    let mut take = |set: &mut crate::param::ParamSet| -> Result<()> {
        if rest.len() < set.len() {
            return Err(Error::Protocol("broadcast too short for the model".into()));
        }
        let (head, tail) = rest.split_at(set.len());
        rest = tail;
        client::load(set, head)
    };
    take(&mut b.tokenizer.params)?;
    for g in &mut b.encoder.groups {
        take(g)?;
    }
    take(&mut b.head.params)
}

fn run_fedavg(
    config: &TrainingConfig,
    datasets: &[DomainDataset],
    bundle: ModelBundle,
    sampler: BlockSampler,
) -> Result<TrainingOutcome> {
    let k = datasets.len();
    let mut transport = Transport::new();
    let initial = bundle_tensors(&bundle);
    let mut trainers: Vec<LocalTrainer> = Vec::with_capacity(k);
    for (id, d) in datasets.iter().enumerate() {
        let msg = transport.relay(Message {
            kind: MessageKind::ParamBroadcast,
            round: 0,
            client: id,
            request: None,
            payload: initial.clone(),
        });
        let mut local = bundle.clone();
        load_bundle(&mut local, &msg.payload)?;
        trainers.push(LocalTrainer::new(
            local,
            config.adam,
            Arc::new(d.clone()),
            config.batch_size(id),
            stream_rng(config.seed, STREAM_BATCH + id as u64),
            sampler.clone(),
        ));
    }
    let sizes: Vec<usize> = trainers.iter().map(LocalTrainer::samples).collect();
    let weights = client_weights(config, &sizes)?;
    let mut visit_rng = stream_rng(config.seed, STREAM_VISIT);
    let mut log = Vec::new();
    for round in 1..=config.rounds {
        let first = log.len();
        for id in visit_order(config, k, &mut visit_rng) {
            let (depth, loss) = trainers[id].step().map_err(|e| e.in_round(round, id))?;
            log.push(RoundRecord {
                round,
                client: id,
                depth,
                loss,
                fwd_bytes: 0,
                bwd_bytes: 0,
                unify_bytes: 0,
            });
        }
        if config.is_unify_round(round) {
            let uploads: Vec<Message> = trainers
                .iter()
                .enumerate()
                .map(|(id, t)| {
                    transport.relay(Message {
                        kind: MessageKind::ParamUpload,
                        round,
                        client: id,
                        request: None,
                        payload: bundle_tensors(&t.bundle),
                    })
                })
                .collect();
            let broadcasts = aggregate_uploads(&uploads, &weights).map_err(|e| e.in_round(round, k))?;
            for (id, (t, (up, msg))) in trainers.iter_mut().zip(uploads.iter().zip(broadcasts)).enumerate() {
                let msg = transport.relay(msg);
                load_bundle(&mut t.bundle, &msg.payload)?;
                if config.reset_moments_on_unify {
                    t.optimizers.reset();
                }
                if let Some(rec) = log[first..].iter_mut().find(|r| r.client == id) {
                    rec.unify_bytes = up.payload_bytes() + msg.payload_bytes();
                }
            }
        }
    }
    let total_bytes = transport.total_bytes();
    Ok(TrainingOutcome {
        bundle: trainers.swap_remove(0).bundle,
        log,
        transfers: transport.into_log(),
        total_bytes,
    })
}

/// All client data in one dataset, clients in order.
pub fn pool(datasets: &[DomainDataset]) -> Result<DomainDataset> {
    let first = datasets.first().ok_or_else(|| Error::Data("nothing to pool".into()))?;
    Ok(DomainDataset {
        domain: first.domain,
        image: first.image,
        samples: datasets.iter().flat_map(|d| d.samples.iter().cloned()).collect(),
    })
}

fn run_pooled(
    config: &TrainingConfig,
    datasets: &[DomainDataset],
    bundle: ModelBundle,
    sampler: BlockSampler,
) -> Result<TrainingOutcome> {
    let batch = (0..datasets.len()).map(|k| config.batch_size(k)).sum();
    let mut trainer = LocalTrainer::new(
        bundle,
        config.adam,
        Arc::new(pool(datasets)?),
        batch,
        stream_rng(config.seed, STREAM_BATCH),
        sampler,
    );
    let mut log = Vec::with_capacity(config.rounds as usize);
    for round in 1..=config.rounds {
        let (depth, loss) = trainer.step().map_err(|e| e.in_round(round, 0))?;
        log.push(RoundRecord {
            round,
            client: 0,
            depth,
            loss,
            fwd_bytes: 0,
            bwd_bytes: 0,
            unify_bytes: 0,
        });
    }
    Ok(TrainingOutcome {
        bundle: trainer.bundle,
        log,
        transfers: Vec::new(),
        total_bytes: 0,
    })
}

#[cfg(test)]
mod tests;
