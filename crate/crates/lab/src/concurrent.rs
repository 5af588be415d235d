//! Split training with one thread per client.
//!
//! Clients run their own forward and backward halves and exchange messages
//! with the server over channels. The server handles requests one at a time
//! in arrival order, so adapter steps and block draws interleave the way
//! they would with real network latency. Each round still ends at a barrier
//! before the encoder step and any unification. Results depend on thread
//! timing except with a single client.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;

use fedsis_core::model::{BlockSampler, ModelBundle};
use fedsis_core::param::sample_weights;
use fedsis_core::protocol::{
    aggregate_uploads, stream_rng, Client, Message, MessageKind, Mode, RoundRecord, Server, TrainingConfig,
    TrainingOutcome, Transport, Weighting, STREAM_BATCH, STREAM_INIT, STREAM_SAMPLER,
};
use fedsis_core::synth::DomainDataset;
use fedsis_core::{Error, Real, Tensor};

use crate::error::{LabError, Result};

enum ToClient {
    Train(u32),
    Reply(Message),
    Upload(u32),
    Broadcast(Message),
    Stop,
}

enum ToServer {
    Msg(Message),
    Done { client: usize, loss: Real },
    Failed(Error),
}

fn reply(rx: &Receiver<ToClient>) -> std::result::Result<Message, Error> {
    match rx.recv() {
        Ok(ToClient::Reply(m)) => Ok(m),
        _ => Err(Error::Protocol("server hung up mid exchange".into())),
    }
}

fn handle(client: &mut Client, cmd: ToClient, rx: &Receiver<ToClient>, tx: &Sender<ToServer>, reset: bool) -> std::result::Result<(), Error> {
    match cmd {
        ToClient::Train(round) => {
            let id = client.id;
            let mut exchange = || -> std::result::Result<(), Error> {
                tx.send(ToServer::Msg(client.forward_next(round)?)).ok();
                let (grad, loss) = client.client_loss_and_backward(&reply(rx)?)?;
                tx.send(ToServer::Msg(grad)).ok();
                client.client_backward(&reply(rx)?)?;
                tx.send(ToServer::Done { client: id, loss }).ok();
                Ok(())
            };
            exchange().map_err(|e| e.in_round(round, id))
        }
        ToClient::Upload(round) => {
            tx.send(ToServer::Msg(client.upload(round))).ok();
            Ok(())
        }
        ToClient::Broadcast(msg) => client.apply_broadcast(&msg, reset),
        ToClient::Reply(_) | ToClient::Stop => Err(Error::Protocol("unexpected message outside an exchange".into())),
    }
}

/// Serves commands until told to stop; returns the client's final state.
fn client_loop(mut client: Client, rx: Receiver<ToClient>, tx: Sender<ToServer>, reset: bool) -> Option<Client> {
    while let Ok(cmd) = rx.recv() {
        if matches!(cmd, ToClient::Stop) {
            return Some(client);
        }
        if let Err(e) = handle(&mut client, cmd, &rx, &tx, reset) {
            let _ = tx.send(ToServer::Failed(e));
            return None;
        }
    }
    None
}

struct RoundTally {
    depth: usize,
    fwd: u64,
    bwd: u64,
}

/// Trains a split mode (`fedsis` or `festa`) with concurrent clients.
pub fn run_concurrent(config: &TrainingConfig, datasets: &[DomainDataset]) -> Result<TrainingOutcome> {
    if !matches!(config.mode, Mode::FedSis | Mode::Festa) {
        return Err(LabError::config(
            "protocol.scheduling",
            format!("concurrent scheduling applies to split modes, not {}", config.mode.name()),
        ));
    }
    config.validate(datasets.len())?;
    let cfg = config.model;
    let k = datasets.len();
    let bundle = ModelBundle::init(cfg, config.mode.head_input(), &mut stream_rng(config.seed, STREAM_INIT))?;
    let sampler = BlockSampler::new(config.sampler_mode(), cfg.layers, stream_rng(config.seed, STREAM_SAMPLER))?;
    let mut transport = Transport::new();
    let initial: Vec<Tensor> = bundle.tokenizer.params.tensors().chain(bundle.head.params.tensors()).cloned().collect();
    let mut clients = Vec::with_capacity(k);
    for (id, d) in datasets.iter().enumerate() {
        let mut c = Client::new(
            id,
            cfg,
            bundle.tokenizer.clone(),
            bundle.head.clone(),
            config.adam,
            Arc::new(d.clone()),
            config.batch_size(id),
            stream_rng(config.seed, STREAM_BATCH + id as u64),
        );
        let msg = transport.relay(Message {
            kind: MessageKind::ParamBroadcast,
            round: 0,
            client: id,
            request: None,
            payload: initial.clone(),
        });
        c.apply_broadcast(&msg, false)?;
        clients.push(c);
    }
    let sizes: Vec<usize> = datasets.iter().map(DomainDataset::len).collect();
    let weights = match config.weighting {
        Weighting::Samples => sample_weights(&sizes)?,
        Weighting::Uniform => vec![1.0 / k as Real; k],
    };
    let mut server = Server::new(cfg, bundle.head_input, bundle.encoder, bundle.adapter, config.adam, sampler, config.divisor);
    let reset = config.reset_moments_on_unify;

    std::thread::scope(|scope| {
        let (up_tx, up_rx) = channel::<ToServer>();
        let mut down = Vec::with_capacity(k);
        let mut handles = Vec::with_capacity(k);
        for c in clients {
            let (tx, rx) = channel();
            let up = up_tx.clone();
            down.push(tx);
            handles.push(scope.spawn(move || client_loop(c, rx, up, reset)));
        }
        drop(up_tx);
        let send = |id: usize, cmd: ToClient| {
            down[id].send(cmd).map_err(|_| Error::Protocol(format!("client {id} disconnected")))
        };

        let mut drive = || -> std::result::Result<Vec<RoundRecord>, Error> {
            let mut log = Vec::with_capacity(config.rounds as usize * k);
            for round in 1..=config.rounds {
                server.begin_round(round, 0..k)?;
                let mut tally: BTreeMap<usize, RoundTally> = BTreeMap::new();
                for id in 0..k {
                    send(id, ToClient::Train(round))?;
                }
                let mut done = 0;
                let mut records = Vec::with_capacity(k);
                while done < k {
                    match up_rx.recv().map_err(|_| Error::Protocol("all clients disconnected".into()))? {
                        ToServer::Msg(msg) => {
                            let msg = transport.relay(msg);
                            let id = msg.client;
                            let reply = match msg.kind {
                                MessageKind::TokenBatch => server.server_forward(&msg),
                                MessageKind::PseudoClassGrad => server.server_backward(&msg),
                                other => Err(Error::Protocol(format!("unexpected {other:?} during a round"))),
                            }
                            .map_err(|e| e.in_round(round, id))?;
                            let reply = transport.relay(reply);
                            let t = tally.entry(id).or_insert(RoundTally { depth: 0, fwd: 0, bwd: 0 });
                            if msg.kind == MessageKind::TokenBatch {
                                t.depth = server.depth_for(id).unwrap_or(0);
                                t.fwd += msg.payload_bytes() + reply.payload_bytes();
                            } else {
                                t.bwd += msg.payload_bytes() + reply.payload_bytes();
                            }
                            send(id, ToClient::Reply(reply))?;
                        }
                        ToServer::Done { client, loss } => {
                            let t = &tally[&client];
                            records.push(RoundRecord {
                                round,
                                client,
                                depth: t.depth,
                                loss,
                                fwd_bytes: t.fwd,
                                bwd_bytes: t.bwd,
                                unify_bytes: 0,
                            });
                            done += 1;
                        }
                        ToServer::Failed(e) => return Err(e),
                    }
                }
                server.end_round_encoder_update().map_err(|e| e.in_round(round, k))?;
                records.sort_by_key(|r| r.client);
                if config.is_unify_round(round) {
                    for id in 0..k {
                        send(id, ToClient::Upload(round))?;
                    }
                    let mut uploads = Vec::with_capacity(k);
                    while uploads.len() < k {
                        match up_rx.recv().map_err(|_| Error::Protocol("all clients disconnected".into()))? {
                            ToServer::Msg(m) if m.kind == MessageKind::ParamUpload => uploads.push(transport.relay(m)),
                            ToServer::Failed(e) => return Err(e),
                            _ => return Err(Error::Protocol("expected a parameter upload".into())),
                        }
                    }
                    uploads.sort_by_key(|m| m.client);
                    let broadcasts = aggregate_uploads(&uploads, &weights)?;
                    for ((up, msg), rec) in uploads.iter().zip(broadcasts).zip(&mut records) {
                        let msg = transport.relay(msg);
                        rec.unify_bytes = up.payload_bytes() + msg.payload_bytes();
                        send(up.client, ToClient::Broadcast(msg))?;
                    }
                }
                log.extend(records);
            }
            Ok(log)
        };
        let outcome = drive();
        for tx in &down {
            let _ = tx.send(ToClient::Stop);
        }
        drop(down);
        let finished: Vec<Option<Client>> = handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect();
        let log = outcome?;
        let lead = finished
            .into_iter()
            .next()
            .flatten()
            .ok_or_else(|| Error::Protocol("client 0 did not finish".into()))?;
        let total_bytes = transport.total_bytes();
        Ok(TrainingOutcome {
            bundle: ModelBundle {
                config: cfg,
                head_input: config.mode.head_input(),
                tokenizer: lead.tokenizer,
                encoder: server.encoder,
                adapter: server.adapter,
                head: lead.head,
            },
            log,
            transfers: transport.into_log(),
            total_bytes,
        })
    })
}
