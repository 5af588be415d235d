use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::client::single_payload;
use super::message::{Message, MessageKind, RequestId};
use crate::adam::{Adam, AdamConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Adapter, BlockSampler, Encoder, HeadInput, ModelConfig, NormMode};
use crate::param::weighted_mean_tensors;
use crate::real::Real;
use crate::tensor::Tensor;

/// What each encoder group's accumulated gradient is divided by at the end
/// of a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EncoderDivisor {
    /// The number of requests that reached the group this round.
    #[default]
    Contributors,
    /// The number of clients scheduled for the round.
    Clients,
}

/// A forward pass kept alive until its backward arrives.
struct Activation {
    graph: Graph,
    input: NodeId,
    output: NodeId,
    encoder_leaves: Vec<Vec<NodeId>>,
    adapter_leaves: Vec<NodeId>,
    depth: usize,
}

/// Per-group gradient sums of the open round.
#[derive(Clone, Debug)]
pub struct EncoderAccumulator {
    sums: Vec<Option<Vec<Tensor>>>,
    contributors: Vec<usize>,
}

impl EncoderAccumulator {
    fn new(groups: usize) -> Self {
        Self {
            sums: vec![None; groups],
            contributors: vec![0; groups],
        }
    }

    /// Contributions per group; group 0 is the cls embedding, group `i` block `i`.
    pub fn contributors(&self) -> &[usize] {
        &self.contributors
    }

    /// Accumulated gradient sum of a group, if any request reached it.
    pub fn sum(&self, group: usize) -> Option<&[Tensor]> {
        self.sums[group].as_deref()
    }

    fn add(&mut self, group: usize, grads: Vec<Tensor>) -> Result<()> {
        match &mut self.sums[group] {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
            }
            slot @ None => *slot = Some(grads),
        }
        self.contributors[group] += 1;
        Ok(())
    }
}

struct OpenRound {
    id: u32,
    expected: BTreeSet<usize>,
    depths: BTreeMap<usize, usize>,
    finished: BTreeSet<usize>,
    accumulator: EncoderAccumulator,
}

/// Owner of the shared encoder, the adapter and the block sampler.
pub struct Server {
    config: ModelConfig,
    head_input: HeadInput,
    pub encoder: Encoder,
    pub adapter: Adapter,
    encoder_opt: Vec<Adam>,
    adapter_opt: Adam,
    sampler: BlockSampler,
    divisor: EncoderDivisor,
    cache: BTreeMap<RequestId, Activation>,
    seen: BTreeSet<RequestId>,
    round: Option<OpenRound>,
}

impl Server {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: ModelConfig,
        head_input: HeadInput,
        encoder: Encoder,
        adapter: Adapter,
        adam: AdamConfig,
        sampler: BlockSampler,
        divisor: EncoderDivisor,
    ) -> Self {
        Self {
            encoder_opt: encoder.groups.iter().map(|g| Adam::new(adam, g)).collect(),
            adapter_opt: Adam::new(adam, &adapter.params),
            config,
            head_input,
            encoder,
            adapter,
            sampler,
            divisor,
            cache: BTreeMap::new(),
            seen: BTreeSet::new(),
            round: None,
        }
    }

    pub fn encoder_optimizers(&self) -> &[Adam] {
        &self.encoder_opt
    }

    pub fn adapter_optimizer(&self) -> &Adam {
        &self.adapter_opt
    }

    /// Whether a forward for `request` is waiting for its backward.
    pub fn is_cached(&self, request: RequestId) -> bool {
        self.cache.contains_key(&request)
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }

    /// The accumulator of the open round.
    pub fn accumulator(&self) -> Option<&EncoderAccumulator> {
        self.round.as_ref().map(|r| &r.accumulator)
    }

    /// Depth drawn for `client` in the open round.
    pub fn depth_for(&self, client: usize) -> Option<usize> {
        self.round.as_ref().and_then(|r| r.depths.get(&client).copied())
    }

    /// Opens a collaboration round for the given clients with a zeroed
    /// accumulator.
    pub fn begin_round(&mut self, round: u32, clients: impl IntoIterator<Item = usize>) -> Result<()> {
        if let Some(open) = &self.round {
            return Err(Error::Protocol(format!("round {} is still open", open.id)));
        }
        self.round = Some(OpenRound {
            id: round,
            expected: clients.into_iter().collect(),
            depths: BTreeMap::new(),
            finished: BTreeSet::new(),
            accumulator: EncoderAccumulator::new(self.encoder.groups.len()),
        });
        Ok(())
    }

    /// Draws a depth for this client and round, runs the encoder prefix and
    /// the adapter (or reads the final cls token) and caches the graph.
    pub fn server_forward(&mut self, msg: &Message) -> Result<Message> {
        if msg.kind != MessageKind::TokenBatch {
            return Err(Error::Protocol(format!("server expected TokenBatch, got {:?}", msg.kind)));
        }
        let request = msg
            .request
            .ok_or_else(|| Error::Protocol("token batch without a request id".into()))?;
        if self.seen.contains(&request) {
            return Err(Error::Protocol(format!("duplicate request id {request:?}")));
        }
        let round = self.open_round(msg.round)?;
        if !round.expected.contains(&msg.client) || request.client != msg.client {
            return Err(Error::Protocol(format!("client {} is not scheduled in round {}", msg.client, round.id)));
        }
        if round.depths.contains_key(&msg.client) {
            return Err(Error::Protocol(format!("client {} already exchanged in round {}", msg.client, round.id)));
        }
        let tokens = single_payload(msg)?;
        let cfg = self.config;
        let depth = match self.head_input {
            HeadInput::PseudoClass => self.sampler.draw(),
            HeadInput::ClsToken => cfg.layers,
        };
        let mut graph = Graph::new();
        let input = graph.param(tokens.clone());
        let encoder_leaves = self.encoder.bind(&mut graph, depth, true);
        let prefix = self.encoder.forward_prefix(&cfg, &mut graph, &encoder_leaves, input, depth)?;
        let (output, adapter_leaves) = match self.head_input {
            HeadInput::PseudoClass => {
                let ap = graph.params(&self.adapter.params);
                let (z, stats) = self.adapter.forward(&cfg, &mut graph, &ap, prefix.tokens, NormMode::Train)?;
                self.adapter.fold_stats(&cfg, &stats);
                (z, ap)
            }
            HeadInput::ClsToken => (prefix.cls, Vec::new()),
        };
        let payload = vec![graph.value(output).clone()];
        self.seen.insert(request);
        self.round.as_mut().unwrap().depths.insert(msg.client, depth);
        self.cache.insert(
            request,
            Activation {
                graph,
                input,
                output,
                encoder_leaves,
                adapter_leaves,
                depth,
            },
        );
        Ok(Message {
            kind: MessageKind::PseudoClassBatch,
            round: msg.round,
            client: msg.client,
            request: Some(request),
            payload,
        })
    }

    /// Backpropagates a head-input gradient: steps the adapter, adds the
    /// encoder gradients of blocks `1..=ℓ` to the round accumulator and
    /// returns the token gradient.
    pub fn server_backward(&mut self, msg: &Message) -> Result<Message> {
        if msg.kind != MessageKind::PseudoClassGrad {
            return Err(Error::Protocol(format!("server expected PseudoClassGrad, got {:?}", msg.kind)));
        }
        let request = msg
            .request
            .ok_or_else(|| Error::Protocol("gradient without a request id".into()))?;
        self.open_round(msg.round)?;
        let grad = single_payload(msg)?.clone();
        let mut act = self
            .cache
            .remove(&request)
            .ok_or_else(|| Error::Protocol(format!("no cached forward for request {request:?}")))?;
        let expected = act.graph.value(act.output).shape().to_vec();
        if grad.shape() != expected.as_slice() {
            let err = Error::shape("head-input gradient", &expected, grad.shape());
            self.cache.insert(request, act);
            return Err(err);
        }
        if let Err(e) = act.graph.backward_from(act.output, grad) {
            self.cache.insert(request, act);
            return Err(e);
        }
        if !act.adapter_leaves.is_empty() {
            let grads = act.graph.grads_of(&act.adapter_leaves);
            self.adapter_opt.step(&mut self.adapter.params, &grads)?;
        }
        let round = self.round.as_mut().unwrap();
        for (group, leaves) in act.encoder_leaves.iter().enumerate().take(act.depth + 1) {
            let grads = leaves
                .iter()
                .map(|&id| act.graph.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(act.graph.value(id).shape())))
                .collect();
            round.accumulator.add(group, grads)?;
        }
        round.finished.insert(msg.client);
        let token_grad = act
            .graph
            .take_grad(act.input)
            .unwrap_or_else(|| Tensor::zeros(act.graph.value(act.input).shape()));
        Ok(Message {
            kind: MessageKind::TokenGrad,
            round: msg.round,
            client: msg.client,
            request: Some(request),
            payload: vec![token_grad],
        })
    }

    /// Closes the round: one Adam step per encoder group that received
    /// gradients, each divided per [`EncoderDivisor`]. Groups nobody reached
    /// are skipped entirely. Returns the per-group contributor counts.
    pub fn end_round_encoder_update(&mut self) -> Result<Vec<usize>> {
        let Some(round) = &self.round else {
            return Err(Error::Protocol("no collaboration round is open".into()));
        };
        if !self.cache.is_empty() || round.finished != round.expected {
            let missing: Vec<usize> = round.expected.difference(&round.finished).copied().collect();
            return Err(Error::Protocol(format!(
                "encoder update called mid-round {}: clients {missing:?} have not finished",
                round.id
            )));
        }
        let round = self.round.take().unwrap();
        let clients = round.expected.len();
        let acc = round.accumulator;
        for (group, sums) in acc.sums.into_iter().enumerate() {
            let Some(mut sums) = sums else { continue };
            let divisor = match self.divisor {
                EncoderDivisor::Contributors => acc.contributors[group],
                EncoderDivisor::Clients => clients,
            } as Real;
            let grads = sums
                .iter_mut()
                .map(|t| {
                    t.data_mut().iter_mut().for_each(|v| *v /= divisor);
                    Some(t.clone())
                })
                .collect::<Vec<_>>();
            self.encoder_opt[group].step(&mut self.encoder.groups[group], &grads)?;
        }
        Ok(acc.contributors)
    }

    fn open_round(&self, round: u32) -> Result<&OpenRound> {
        match &self.round {
            Some(open) if open.id == round => Ok(open),
            Some(open) => Err(Error::Protocol(format!("message for round {round} while round {} is open", open.id))),
            None => Err(Error::Protocol(format!("message for round {round} but no round is open"))),
        }
    }
}

/// FedAvg over client uploads: one broadcast per uploading client carrying
/// the `weights`-weighted mean of every uploaded tensor.
pub fn aggregate_uploads(uploads: &[Message], weights: &[Real]) -> Result<Vec<Message>> {
    if let Some(bad) = uploads.iter().find(|m| m.kind != MessageKind::ParamUpload) {
        return Err(Error::Protocol(format!("expected ParamUpload, got {:?}", bad.kind)));
    }
    let lists: Vec<&[Tensor]> = uploads.iter().map(|m| m.payload.as_slice()).collect();
    let mean = weighted_mean_tensors(&lists, weights)?;
    Ok(uploads
        .iter()
        .map(|m| Message {
            kind: MessageKind::ParamBroadcast,
            round: m.round,
            client: m.client,
            request: None,
            payload: mean.clone(),
        })
        .collect())
}
