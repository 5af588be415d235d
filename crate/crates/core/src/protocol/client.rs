use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::batcher::EpochBatcher;
use super::message::{Message, MessageKind, RequestId};
use crate::adam::{Adam, AdamConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Head, ModelConfig, Tokenizer};
use crate::param::ParamSet;
use crate::real::Real;
use crate::synth::DomainDataset;
use crate::tensor::Tensor;

enum Stage {
    AwaitingHeadInput,
    AwaitingTokenGrad,
}

struct Pending {
    request: RequestId,
    round: u32,
    stage: Stage,
    graph: Graph,
    tokens: NodeId,
    params: Vec<NodeId>,
    labels: Vec<usize>,
}

/// A data owner: tokenizer and head with their optimizers, the local
/// dataset and at most one exchange in flight.
pub struct Client {
    pub id: usize,
    config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub head: Head,
    tokenizer_opt: Adam,
    head_opt: Adam,
    data: Arc<DomainDataset>,
    batcher: EpochBatcher,
    next_seq: u64,
    pending: Option<Pending>,
}

impl Client {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        config: ModelConfig,
        tokenizer: Tokenizer,
        head: Head,
        adam: AdamConfig,
        data: Arc<DomainDataset>,
        batch: usize,
        batch_rng: ChaCha8Rng,
    ) -> Self {
        Self {
            id,
            config,
            tokenizer_opt: Adam::new(adam, &tokenizer.params),
            head_opt: Adam::new(adam, &head.params),
            tokenizer,
            head,
            batcher: EpochBatcher::new(data.len(), batch, batch_rng),
            data,
            next_seq: 0,
            pending: None,
        }
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn optimizers(&self) -> (&Adam, &Adam) {
        (&self.tokenizer_opt, &self.head_opt)
    }

    /// Draws the next local batch.
    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.batcher.next_batch();
        self.data.batch(&idx)
    }

    /// Tokenizes the next local batch and opens an exchange.
    pub fn forward_next(&mut self, round: u32) -> Result<Message> {
        self.ensure_idle()?;
        let (images, labels) = self.next_batch()?;
        self.client_forward(round, &images, labels)
    }

    /// Tokenizes `images`; the labels stay here for the loss.
    pub fn client_forward(&mut self, round: u32, images: &Tensor, labels: Vec<usize>) -> Result<Message> {
        self.ensure_idle()?;
        if labels.len() != images.shape()[0] {
            return Err(Error::Data(format!("{} labels for {} images", labels.len(), images.shape()[0])));
        }
        let mut graph = Graph::new();
        let params = graph.params(&self.tokenizer.params);
        let x = graph.constant(images.clone());
        let tokens = self.tokenizer.forward(&self.config, &mut graph, &params, x)?;
        let request = RequestId {
            client: self.id,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        let payload = vec![graph.value(tokens).clone()];
        self.pending = Some(Pending {
            request,
            round,
            stage: Stage::AwaitingHeadInput,
            graph,
            tokens,
            params,
            labels,
        });
        Ok(Message {
            kind: MessageKind::TokenBatch,
            round,
            client: self.id,
            request: Some(request),
            payload,
        })
    }

    /// Applies the head, takes one Adam step on it and returns the gradient
    /// with respect to the head inputs together with the batch-mean loss.
    pub fn client_loss_and_backward(&mut self, msg: &Message) -> Result<(Message, Real)> {
        let pending = self.expect(msg, MessageKind::PseudoClassBatch)?;
        if !matches!(pending.stage, Stage::AwaitingHeadInput) {
            return Err(Error::Protocol(format!("client {}: head inputs already consumed", self.id)));
        }
        let labels = pending.labels.clone();
        let z = single_payload(msg)?;
        if z.rank() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "head input shape {:?} does not match {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let mut g = Graph::new();
        let zn = g.param(z.clone());
        let hp = g.params(&self.head.params);
        let logits = self.head.forward(&mut g, &hp, zn)?;
        let loss = g.cross_entropy(logits, &labels)?;
        g.backward(loss)?;
        let loss_value = g.value(loss).item();
        let grad_z = g.take_grad(zn).unwrap_or_else(|| Tensor::zeros(z.shape()));
        let head_grads = g.grads_of(&hp);
        self.head_opt.step(&mut self.head.params, &head_grads)?;
        let pending = self.pending.as_mut().unwrap();
        pending.stage = Stage::AwaitingTokenGrad;
        Ok((
            Message {
                kind: MessageKind::PseudoClassGrad,
                round: msg.round,
                client: self.id,
                request: msg.request,
                payload: vec![grad_z],
            },
            loss_value,
        ))
    }

    /// Finishes the exchange: backpropagates through the tokenizer and takes
    /// one Adam step on it.
    pub fn client_backward(&mut self, msg: &Message) -> Result<()> {
        let pending = self.expect(msg, MessageKind::TokenGrad)?;
        if !matches!(pending.stage, Stage::AwaitingTokenGrad) {
            return Err(Error::Protocol(format!("client {}: token gradient before head inputs", self.id)));
        }
        let grad = single_payload(msg)?.clone();
        let mut pending = self.pending.take().unwrap();
        let expected = pending.graph.value(pending.tokens).shape().to_vec();
        if grad.shape() != expected.as_slice() {
            let err = Error::shape("token gradient", &expected, grad.shape());
            self.pending = Some(pending);
            return Err(err);
        }
        if let Err(e) = pending.graph.backward_from(pending.tokens, grad) {
            self.pending = Some(pending);
            return Err(e);
        }
        let grads = pending.graph.grads_of(&pending.params);
        self.tokenizer_opt.step(&mut self.tokenizer.params, &grads)
    }

    /// Local tokenizer and head parameters for aggregation.
    pub fn upload(&self, round: u32) -> Message {
        let payload = self.tokenizer.params.tensors().chain(self.head.params.tensors()).cloned().collect();
        Message {
            kind: MessageKind::ParamUpload,
            round,
            client: self.id,
            request: None,
            payload,
        }
    }

    /// Replaces tokenizer and head with broadcast parameters.
    pub fn apply_broadcast(&mut self, msg: &Message, reset_moments: bool) -> Result<()> {
        if msg.kind != MessageKind::ParamBroadcast {
            return Err(Error::Protocol(format!("client {}: expected a parameter broadcast, got {:?}", self.id, msg.kind)));
        }
        let nt = self.tokenizer.params.len();
        if msg.payload.len() != nt + self.head.params.len() {
            return Err(Error::Protocol(format!(
                "client {}: broadcast carries {} tensors, expected {}",
                self.id,
                msg.payload.len(),
                nt + self.head.params.len()
            )));
        }
        let (tok, head) = msg.payload.split_at(nt);
        load(&mut self.tokenizer.params, tok)?;
        load(&mut self.head.params, head)?;
        if reset_moments {
            self.tokenizer_opt.reset();
            self.head_opt.reset();
        }
        Ok(())
    }

    fn ensure_idle(&self) -> Result<()> {
        match &self.pending {
            Some(p) => Err(Error::Protocol(format!(
                "client {} already has request {} of round {} outstanding",
                self.id, p.request.seq, p.round
            ))),
            None => Ok(()),
        }
    }

    fn expect(&self, msg: &Message, kind: MessageKind) -> Result<&Pending> {
        if msg.kind != kind {
            return Err(Error::Protocol(format!("client {}: expected {kind:?}, got {:?}", self.id, msg.kind)));
        }
        match &self.pending {
            Some(p) if Some(p.request) == msg.request && msg.client == self.id => Ok(p),
            Some(p) => Err(Error::Protocol(format!(
                "client {}: reply for {:?} does not match outstanding request {:?}",
                self.id, msg.request, p.request
            ))),
            None => Err(Error::Protocol(format!("client {}: no outstanding request for {:?}", self.id, msg.request))),
        }
    }
}

pub(crate) fn single_payload(msg: &Message) -> Result<&Tensor> {
    match msg.payload.as_slice() {
        [t] => Ok(t),
        other => Err(Error::Protocol(format!("{:?} must carry one tensor, got {}", msg.kind, other.len()))),
    }
}

/// Overwrites parameter values from a payload with the same layout.
pub(crate) fn load(set: &mut ParamSet, tensors: &[Tensor]) -> Result<()> {
    if tensors.len() != set.len() {
        return Err(Error::Protocol(format!("{} tensors for {} parameters", tensors.len(), set.len())));
    }
    for (p, t) in set.iter().zip(tensors) {
        if p.value.shape() != t.shape() {
            return Err(Error::shape("parameter load", p.value.shape(), t.shape()));
        }
    }
    for (p, t) in set.iter_mut().zip(tensors) {
        p.value = t.clone();
    }
    Ok(())
}
