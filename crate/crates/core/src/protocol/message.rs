use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::real::BYTES_PER_ELEM;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MessageKind {
    /// Client to server: patch tokens of one batch.
    TokenBatch,
    /// Server to client: head inputs for the same batch.
    PseudoClassBatch,
    /// Client to server: loss gradient with respect to the head inputs.
    PseudoClassGrad,
    /// Server to client: loss gradient with respect to the patch tokens.
    TokenGrad,
    /// Server to client: aggregated client-side parameters.
    ParamBroadcast,
    /// Client to server: local client-side parameters for aggregation.
    ParamUpload,
}

/// Identifies one forward/backward exchange. Issued by the client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RequestId {
    pub client: usize,
    pub seq: u64,
}

/// Everything that crosses the client/server boundary. There is no field
/// for images or labels: payloads are activations, gradients or parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u32,
    pub client: usize,
    pub request: Option<RequestId>,
    pub payload: Vec<Tensor>,
}

impl Message {
    pub fn payload_bytes(&self) -> u64 {
        self.payload.iter().map(|t| (t.numel() * BYTES_PER_ELEM) as u64).sum()
    }
}

/// One delivered message as recorded by the transport.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transfer {
    pub kind: MessageKind,
    pub round: u32,
    pub client: usize,
    pub request: Option<RequestId>,
    pub bytes: u64,
}

/// Reliable, ordered in-process delivery with a byte log.
#[derive(Clone, Debug, Default)]
pub struct Transport {
    queue: VecDeque<Message>,
    log: Vec<Transfer>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, msg: Message) {
        self.log.push(Transfer {
            kind: msg.kind,
            round: msg.round,
            client: msg.client,
            request: msg.request,
            bytes: msg.payload_bytes(),
        });
        self.queue.push_back(msg);
    }

    pub fn recv(&mut self) -> Option<Message> {
        self.queue.pop_front()
    }

    /// Sends and immediately receives, for sequential scheduling.
    pub fn relay(&mut self, msg: Message) -> Message {
        self.send(msg);
        self.recv().expect("message just queued")
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[Transfer] {
        &self.log
    }

    pub fn into_log(self) -> Vec<Transfer> {
        self.log
    }

    pub fn total_bytes(&self) -> u64 {
        self.log.iter().map(|t| t.bytes).sum()
    }
}
