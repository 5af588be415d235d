use super::*;
use crate::model::ImageShape;
use crate::param::ParamSet;
use crate::real::BYTES_PER_ELEM;
use crate::synth::{domain_specs, generate, ClassCounts};
use alloc::vec;

fn datasets(k: u16) -> Vec<DomainDataset> {
    let image = ImageShape {
        height: 16,
        width: 16,
        channels: 3,
    };
    let counts = ClassCounts {
        bonafide: 6,
        print: 3,
        replay: 3,
    };
    domain_specs(k, image, counts, 1.0, 0.05, 9, 2)
        .iter()
        .map(|s| generate(s, 0.5, 4).unwrap())
        .collect()
}

fn config(mode: Mode, rounds: u32) -> TrainingConfig {
    TrainingConfig {
        rounds,
        unify_every: 2,
        batch_sizes: vec![4],
        seed: 3,
        ..TrainingConfig::new(mode, ModelConfig::tiny())
    }
}

struct Rig {
    server: Server,
    clients: Vec<Client>,
}

fn rig(k: u16, sampler: SamplerMode, head_input: HeadInput, adam: AdamConfig) -> Rig {
    let cfg = ModelConfig::tiny();
    let bundle = ModelBundle::init(cfg, head_input, &mut stream_rng(0, STREAM_INIT)).unwrap();
    let clients = datasets(k)
        .into_iter()
        .enumerate()
        .map(|(id, d)| {
            Client::new(
                id,
                cfg,
                bundle.tokenizer.clone(),
                bundle.head.clone(),
                adam,
                Arc::new(d),
                4,
                stream_rng(0, STREAM_BATCH + id as u64),
            )
        })
        .collect();
    let sampler = BlockSampler::seeded(sampler, cfg.layers, 1).unwrap();
    let server = Server::new(cfg, head_input, bundle.encoder, bundle.adapter, adam, sampler, EncoderDivisor::Contributors);
    Rig { server, clients }
}

fn default_rig(k: u16) -> Rig {
    rig(k, SamplerMode::full(4), HeadInput::PseudoClass, AdamConfig::default())
}

#[test]
fn token_batch_bytes_follow_the_shape() {
    let mut r = default_rig(1);
    let msg = r.clients[0].forward_next(1).unwrap();
    let cfg = ModelConfig::tiny();
    assert_eq!(msg.payload[0].shape(), &[4, cfg.tokens(), cfg.dim]);
    assert_eq!(msg.payload_bytes(), (4 * 16 * 16 * BYTES_PER_ELEM) as u64);
}

#[test]
fn same_batch_same_tokenizer_same_payload() {
    let mut r = default_rig(1);
    let (images, labels) = r.clients[0].next_batch().unwrap();
    let a = r.clients[0].client_forward(1, &images, labels.clone()).unwrap();
    let mut r2 = default_rig(1);
    let b = r2.clients[0].client_forward(1, &images, labels).unwrap();
    assert_eq!(a.payload, b.payload);
}

#[test]
fn a_second_forward_while_pending_is_rejected() {
    let mut r = default_rig(1);
    r.clients[0].forward_next(1).unwrap();
    assert!(matches!(r.clients[0].forward_next(1), Err(Error::Protocol(_))));
}

#[test]
fn full_exchange_and_state_machine() {
    let mut r = default_rig(2);
    r.server.begin_round(1, 0..2).unwrap();
    let tb = r.clients[0].forward_next(1).unwrap();
    let req = tb.request.unwrap();
    assert!(!r.server.is_cached(req));
    let pc = r.server.server_forward(&tb).unwrap();
    assert!(r.server.is_cached(req));
    // Replaying the same token batch is a duplicate request.
    assert!(matches!(r.server.server_forward(&tb), Err(Error::Protocol(_))));
    // The encoder may not step while a client is mid-exchange.
    assert!(matches!(r.server.end_round_encoder_update(), Err(Error::Protocol(_))));
    let (grad, loss) = r.clients[0].client_loss_and_backward(&pc).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(grad.payload_bytes(), pc.payload_bytes());
    let tg = r.server.server_backward(&grad).unwrap();
    assert!(!r.server.is_cached(req));
    assert_eq!(tg.payload[0].shape(), tb.payload[0].shape());
    assert_eq!(tg.payload_bytes(), tb.payload_bytes());
    assert!(matches!(r.server.server_backward(&grad), Err(Error::Protocol(_))));
    r.clients[0].client_backward(&tg).unwrap();
    assert!(!r.clients[0].has_pending());
    // Client 1 has not run yet.
    assert!(matches!(r.server.end_round_encoder_update(), Err(Error::Protocol(_))));
    let tb = r.clients[1].forward_next(1).unwrap();
    let pc = r.server.server_forward(&tb).unwrap();
    let (grad, _) = r.clients[1].client_loss_and_backward(&pc).unwrap();
    let tg = r.server.server_backward(&grad).unwrap();
    r.clients[1].client_backward(&tg).unwrap();
    r.server.end_round_encoder_update().unwrap();
    assert!(matches!(r.server.end_round_encoder_update(), Err(Error::Protocol(_))));
    // The next forward may be issued.
    r.clients[0].forward_next(2).unwrap();
}

#[test]
fn mismatched_replies_are_rejected() {
    let mut r = default_rig(2);
    r.server.begin_round(1, 0..2).unwrap();
    let tb0 = r.clients[0].forward_next(1).unwrap();
    let tb1 = r.clients[1].forward_next(1).unwrap();
    let pc0 = r.server.server_forward(&tb0).unwrap();
    let pc1 = r.server.server_forward(&tb1).unwrap();
    assert!(matches!(r.clients[0].client_loss_and_backward(&pc1), Err(Error::Protocol(_))));
    let (grad0, _) = r.clients[0].client_loss_and_backward(&pc0).unwrap();
    let tg0 = r.server.server_backward(&grad0).unwrap();
    assert!(matches!(r.clients[1].client_backward(&tg0), Err(Error::Protocol(_))));
    // A head-input batch with the wrong row count is a label mismatch.
    let mut bad = pc1.clone();
    bad.payload[0] = Tensor::zeros(&[3, 16]);
    assert!(matches!(r.clients[1].client_loss_and_backward(&bad), Err(Error::Data(_))));
    // Messages for another round are refused.
    let mut late = tb0.clone();
    late.round = 7;
    assert!(matches!(r.server.server_forward(&late), Err(Error::Protocol(_))));
}

#[test]
fn unsampled_blocks_receive_nothing() {
    let mut r = rig(1, SamplerMode::Fixed(2), HeadInput::PseudoClass, AdamConfig::default());
    let before = r.server.encoder.clone();
    r.server.begin_round(1, 0..1).unwrap();
    let tb = r.clients[0].forward_next(1).unwrap();
    let pc = r.server.server_forward(&tb).unwrap();
    let (grad, _) = r.clients[0].client_loss_and_backward(&pc).unwrap();
    r.server.server_backward(&grad).unwrap();
    assert_eq!(r.server.accumulator().unwrap().contributors(), &[1, 1, 1, 0, 0]);
    assert!(r.server.accumulator().unwrap().sum(3).is_none());
    let tg = r.server.server_backward(&grad);
    assert!(tg.is_err());
    r.server.end_round_encoder_update().unwrap();
    assert_ne!(r.server.encoder.groups[1], before.groups[1]);
    assert_eq!(r.server.encoder.groups[3], before.groups[3]);
    assert_eq!(r.server.encoder.groups[4], before.groups[4]);
    assert_eq!(r.server.encoder_optimizers()[3].moments()[0].t, 0);
    assert_eq!(r.server.encoder_optimizers()[2].moments()[0].t, 1);
}

#[test]
fn uniform_logits_give_ln2_and_saturated_logits_give_no_gradient() {
    let mut r = default_rig(1);
    for p in r.clients[0].head.params.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    r.server.begin_round(1, 0..1).unwrap();
    let tb = r.clients[0].forward_next(1).unwrap();
    let pc = r.server.server_forward(&tb).unwrap();
    let (_, loss) = r.clients[0].client_loss_and_backward(&pc).unwrap();
    assert!((loss - libm::log(2.0) as Real).abs() < 1e-12);

    // A head whose bias puts a huge margin on the right class everywhere.
    let mut r = default_rig(1);
    let (images, labels) = r.clients[0].next_batch().unwrap();
    let all_bona: Vec<usize> = vec![1; labels.len()];
    r.clients[0].head.params.get_mut(0).data_mut().iter_mut().for_each(|v| *v = 0.0);
    r.clients[0].head.params.get_mut(1).data_mut().copy_from_slice(&[-50.0, 50.0]);
    r.server.begin_round(1, 0..1).unwrap();
    let tb = r.clients[0].client_forward(1, &images, all_bona).unwrap();
    let pc = r.server.server_forward(&tb).unwrap();
    let (grad, loss) = r.clients[0].client_loss_and_backward(&pc).unwrap();
    assert!(loss < 1e-12);
    assert!(grad.payload[0].data().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn zero_token_gradient_without_decay_leaves_the_tokenizer() {
    let adam = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut r = rig(1, SamplerMode::full(4), HeadInput::PseudoClass, adam);
    let before = r.clients[0].tokenizer.clone();
    r.server.begin_round(1, 0..1).unwrap();
    let tb = r.clients[0].forward_next(1).unwrap();
    let pc = r.server.server_forward(&tb).unwrap();
    let (grad, _) = r.clients[0].client_loss_and_backward(&pc).unwrap();
    let mut tg = r.server.server_backward(&grad).unwrap();
    tg.payload[0] = Tensor::zeros(tg.payload[0].shape());
    r.clients[0].client_backward(&tg).unwrap();
    assert_eq!(r.clients[0].tokenizer, before);
}

#[test]
fn cls_mode_bypasses_the_adapter() {
    let mut r = rig(1, SamplerMode::full(4), HeadInput::ClsToken, AdamConfig::default());
    let adapter = r.server.adapter.clone();
    r.server.begin_round(1, 0..1).unwrap();
    let tb = r.clients[0].forward_next(1).unwrap();
    let pc = r.server.server_forward(&tb).unwrap();
    assert_eq!(r.server.depth_for(0), Some(4));
    let (grad, _) = r.clients[0].client_loss_and_backward(&pc).unwrap();
    r.server.server_backward(&grad).unwrap();
    assert_eq!(r.server.accumulator().unwrap().contributors(), &[1, 1, 1, 1, 1]);
    r.server.end_round_encoder_update().unwrap();
    assert_eq!(r.server.adapter, adapter);
}

fn upload(client: usize, v: Real) -> Message {
    Message {
        kind: MessageKind::ParamUpload,
        round: 1,
        client,
        request: None,
        payload: vec![Tensor::scalar(v)],
    }
}

#[test]
fn unify_weighted_means() {
    let ups = [upload(0, 2.0), upload(1, 4.0)];
    let eq = aggregate_uploads(&ups, &sample_weights(&[10, 10]).unwrap()).unwrap();
    assert_eq!(eq[0].payload[0].item(), 3.0);
    let w = sample_weights(&[30, 10]).unwrap();
    let out = aggregate_uploads(&ups, &w).unwrap();
    assert!((out[0].payload[0].item() - 2.5).abs() < 1e-12);
    assert_eq!(out[0].payload, out[1].payload);
    assert!(aggregate_uploads(&ups, &[0.5, 0.6]).is_err());
    let same = [upload(0, 1.5), upload(1, 1.5)];
    assert_eq!(aggregate_uploads(&same, &w).unwrap()[0].payload[0].item(), 1.5);
}

#[test]
fn unify_twice_equals_once() {
    let mut r = default_rig(3);
    let w = sample_weights(&[12, 12, 12]).unwrap();
    // Make the clients differ first.
    r.server.begin_round(1, 0..3).unwrap();
    for c in &mut r.clients {
        let tb = c.forward_next(1).unwrap();
        let pc = r.server.server_forward(&tb).unwrap();
        let (grad, _) = c.client_loss_and_backward(&pc).unwrap();
        let tg = r.server.server_backward(&grad).unwrap();
        c.client_backward(&tg).unwrap();
    }
    r.server.end_round_encoder_update().unwrap();
    let apply = |r: &mut Rig| {
        let ups: Vec<Message> = r.clients.iter().map(|c| c.upload(1)).collect();
        for (c, b) in r.clients.iter_mut().zip(aggregate_uploads(&ups, &w).unwrap()) {
            c.apply_broadcast(&b, false).unwrap();
        }
    };
    assert_ne!(r.clients[0].tokenizer, r.clients[1].tokenizer);
    apply(&mut r);
    let once: Vec<ParamSet> = r.clients.iter().map(|c| c.tokenizer.params.clone()).collect();
    assert_eq!(once[0], once[1]);
    apply(&mut r);
    for (c, o) in r.clients.iter().zip(&once) {
        for (a, b) in c.tokenizer.params.tensors().zip(o.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }
}

#[test]
fn zero_rounds_return_the_initialization() {
    let cfg = config(Mode::FedSis, 0);
    let out = run_training(&cfg, &datasets(3)).unwrap();
    let init = ModelBundle::init(cfg.model, HeadInput::PseudoClass, &mut stream_rng(cfg.seed, STREAM_INIT)).unwrap();
    assert_eq!(out.bundle, init);
    assert!(out.log.is_empty());
    // Only the initial broadcast was sent, sized by the client-side modules.
    let per_client = ((init.tokenizer.params.numel() + init.head.params.numel()) * BYTES_PER_ELEM) as u64;
    assert_eq!(out.transfers.len(), 3);
    assert!(out.transfers.iter().all(|t| t.kind == MessageKind::ParamBroadcast && t.bytes == per_client));
}

#[test]
fn runs_are_deterministic_and_log_every_client() {
    let cfg = config(Mode::FedSis, 3);
    let a = run_training(&cfg, &datasets(3)).unwrap();
    let b = run_training(&cfg, &datasets(3)).unwrap();
    assert_eq!(a.bundle, b.bundle);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 9);
    // Rounds 2 and 3 unify (every 2 and the terminal round).
    let unified: Vec<u32> = a.log.iter().filter(|r| r.unify_bytes > 0).map(|r| r.round).collect();
    assert_eq!(unified, vec![2, 2, 2, 3, 3, 3]);
    assert!(a.log.iter().all(|r| r.fwd_bytes == r.bwd_bytes && (1..=4).contains(&r.depth)));
}

#[test]
fn every_mode_runs() {
    for mode in Mode::ALL {
        let out = run_training(&config(mode, 2), &datasets(2)).unwrap();
        assert_eq!(out.bundle.head_input, mode.head_input());
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }
}

#[test]
fn shuffled_visits_are_permutations() {
    let mut cfg = config(Mode::FedSis, 4);
    cfg.visit_order = VisitOrder::Shuffled;
    let out = run_training(&cfg, &datasets(3)).unwrap();
    for round in out.log.chunks(3) {
        let mut ids: Vec<usize> = round.iter().map(|r| r.client).collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
    }
}

#[test]
fn config_validation() {
    let d = datasets(2);
    let mut cfg = config(Mode::FedSis, 1);
    cfg.unify_every = 0;
    assert!(run_training(&cfg, &d).is_err());
    let mut cfg = config(Mode::FedSis, 1);
    cfg.batch_sizes = vec![2, 2, 2];
    assert!(run_training(&cfg, &d).is_err());
    let mut cfg = config(Mode::FedSis, 1);
    cfg.sampler = SamplerMode::Uniform { min: 2, max: 9 };
    assert!(run_training(&cfg, &d).is_err());
    let mut cfg = config(Mode::FedSis, 1);
    cfg.precision = if Precision::compiled() == Precision::F64 { Precision::F32 } else { Precision::F64 };
    assert!(run_training(&cfg, &d).is_err());
    assert!(run_training(&config(Mode::FedSis, 1), &[]).is_err());
    assert_eq!(Mode::parse("centralized_is").unwrap(), Mode::CentralizedIs);
    assert!(Mode::parse("fedprox").is_err());
}

#[test]
fn errors_carry_round_and_client() {
    let mut d = datasets(2);
    // Corrupt one image of client 1 so its batch fails validation later.
    d[1].samples.iter_mut().for_each(|s| s.image.truncate(3));
    let err = run_training(&config(Mode::FedSis, 1), &d).unwrap_err();
    assert!(matches!(err, Error::InRound { round: 1, client: 1, .. }), "{err}");
}

#[test]
fn inference_policies() {
    let out = run_training(&config(Mode::FedSis, 2), &datasets(2)).unwrap();
    let d = &datasets(1)[0];
    let (images, _) = d.batch(&[0, 1, 2, 3, 4, 5]).unwrap();
    let fixed = infer(&out.bundle, &images, InferencePolicy::Fixed(2)).unwrap();
    assert_eq!(fixed, infer(&out.bundle, &images, InferencePolicy::Fixed(2)).unwrap());
    assert!(fixed.iter().all(|s| (0.0..=1.0).contains(s)));
    let sampled = InferencePolicy::Sampled {
        range: SamplerMode::full(4),
        seed: 5,
        per_sample: true,
    };
    assert_eq!(infer(&out.bundle, &images, sampled).unwrap(), infer(&out.bundle, &images, sampled).unwrap());
    let set = score_dataset(&out.bundle, d, InferencePolicy::Fixed(3), 5).unwrap();
    assert_eq!(set.len(), d.len());
    let direct = infer(&out.bundle, &d.batch(&(0..d.len()).collect::<Vec<_>>()).unwrap().0, InferencePolicy::Fixed(3)).unwrap();
    for (a, b) in set.scores().iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
}
