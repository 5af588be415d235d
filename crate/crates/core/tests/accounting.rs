//! Message sizes and payload contents of a split run.

use std::collections::BTreeMap;

use fedsis_core::model::ModelConfig;
use fedsis_core::protocol::{run_training, MessageKind, Mode, TrainingConfig};
use fedsis_core::real::BYTES_PER_ELEM;
use fedsis_core::synth::{domain_specs, generate, ClassCounts};

fn outcome(mode: Mode) -> (TrainingConfig, fedsis_core::protocol::TrainingOutcome) {
    let cfg = ModelConfig::tiny();
    let counts = ClassCounts {
        bonafide: 6,
        print: 3,
        replay: 3,
    };
    let data: Vec<_> = domain_specs(3, cfg.image, counts, 1.0, 0.05, 5, 2).iter().map(|s| generate(s, 0.5, 2).unwrap()).collect();
    let config = TrainingConfig {
        rounds: 4,
        unify_every: 2,
        batch_sizes: vec![5],
        ..TrainingConfig::new(mode, cfg)
    };
    let out = run_training(&config, &data).unwrap();
    (config, out)
}

#[test]
fn token_batches_have_exact_size_and_gradients_mirror_them() {
    let (config, out) = outcome(Mode::FedSis);
    let m = config.model;
    let token_bytes = (5 * m.tokens() * m.dim * BYTES_PER_ELEM) as u64;
    let head_bytes = (5 * m.dim * BYTES_PER_ELEM) as u64;
    let mut per_request: BTreeMap<_, BTreeMap<MessageKind, u64>> = BTreeMap::new();
    for t in &out.transfers {
        if let Some(req) = t.request {
            per_request.entry(req).or_default().insert(t.kind, t.bytes);
        }
    }
    assert_eq!(per_request.len(), 4 * 3);
    for kinds in per_request.values() {
        assert_eq!(kinds[&MessageKind::TokenBatch], token_bytes);
        assert_eq!(kinds[&MessageKind::TokenGrad], token_bytes);
        assert_eq!(kinds[&MessageKind::PseudoClassBatch], head_bytes);
        assert_eq!(kinds[&MessageKind::PseudoClassGrad], head_bytes);
    }
    for r in &out.log {
        assert_eq!(r.fwd_bytes, r.bwd_bytes);
        assert_eq!(r.fwd_bytes, token_bytes + head_bytes);
    }
    let logged: u64 = out.transfers.iter().map(|t| t.bytes).sum();
    assert_eq!(logged, out.total_bytes);
}

#[test]
fn unifying_rounds_move_client_modules_only() {
    let (config, out) = outcome(Mode::FedSis);
    let b = &out.bundle;
    let client_side = ((b.tokenizer.params.numel() + b.head.params.numel()) * BYTES_PER_ELEM) as u64;
    let uploads: Vec<_> = out.transfers.iter().filter(|t| t.kind == MessageKind::ParamUpload).collect();
    // Rounds 2 and 4 unify, three clients each.
    assert_eq!(uploads.len(), 6);
    assert!(uploads.iter().all(|t| t.bytes == client_side && t.round % config.unify_every == 0));
    let broadcasts = out.transfers.iter().filter(|t| t.kind == MessageKind::ParamBroadcast).count();
    assert_eq!(broadcasts, 3 + 6, "initial broadcast plus one per unify");
    let unify: u64 = out.log.iter().map(|r| r.unify_bytes).sum();
    assert_eq!(unify, 12 * client_side);
}

#[test]
fn no_payload_has_the_shape_of_images() {
    let (config, out) = outcome(Mode::Festa);
    let img = config.model.image;
    // Only sizes are logged; the largest activation is still smaller than a
    // batch of images would be, and no transfer matches that size.
    let image_bytes = (5 * img.numel() * BYTES_PER_ELEM) as u64;
    assert!(out.transfers.iter().all(|t| t.bytes != image_bytes));
}
