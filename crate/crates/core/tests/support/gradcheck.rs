//! Central finite-difference checks, independent of the tape's backward rules.

#![allow(dead_code)]

use fedsis_core::autodiff::{BatchNormMode, Graph, NodeId};
use fedsis_core::model::{HeadInput, ModelBundle, ModelConfig, NormMode, RunningStats};
use fedsis_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: Real = 1e-5;
pub const GRAD_TOL: Real = 1e-6;

pub type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;

pub struct OpCase {
    pub name: &'static str,
    pub build: Builder,
    pub inputs: Vec<Tensor>,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for piecewise-linear operators.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: Real = rng.random_range(1e-2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ out ⊙ r` for a fixed random `r`.
fn projected(g: &mut Graph, out: NodeId) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = g.constant(random(g.value(out).shape(), &mut rng));
    let prod = g.mul(out, r).unwrap();
    g.sum(prod)
}

fn eval(build: &Builder, inputs: &[Tensor]) -> Real {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &ids);
    let loss = projected(&mut g, out);
    g.value(loss).item()
}

/// Largest per-input normwise relative error between the tape gradient and
/// central differences.
pub fn op_error(case: &OpCase) -> Real {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &ids);
    let loss = projected(&mut g, out);
    g.backward(loss).unwrap();
    let mut worst: Real = 0.0;
    for (k, input) in case.inputs.iter().enumerate() {
        let analytic = g.grad(ids[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = Tensor::zeros(input.shape());
        for i in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric.data_mut()[i] = (eval(&case.build, &plus) - eval(&case.build, &minus)) / (2.0 * FD_STEP);
        }
        let scale = numeric.data().iter().fold(0.0 as Real, |m, v| m.max(v.abs())).max(1e-8);
        worst = worst.max(analytic.max_abs_diff(&numeric) / scale);
    }
    worst
}

/// One case per operator on the tape.
pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut case = |name: &'static str, build: Builder, shapes: &[&[usize]]| OpCase {
        name,
        build,
        inputs: shapes.iter().map(|s| random(s, &mut rng)).collect(),
    };
    let mut cases = vec![
        case("matmul", Box::new(|g, x| g.matmul(x[0], x[1]).unwrap()), &[&[2, 3, 4], &[4, 5]]),
        case("batch_matmul", Box::new(|g, x| g.batch_matmul(x[0], x[1]).unwrap()), &[&[2, 2, 3, 4], &[2, 2, 4, 3]]),
        case("add", Box::new(|g, x| g.add(x[0], x[1]).unwrap()), &[&[3, 4], &[3, 4]]),
        case("add_broadcast", Box::new(|g, x| g.add_broadcast(x[0], x[1]).unwrap()), &[&[2, 3, 4], &[3, 4]]),
        case("bias", Box::new(|g, x| g.add_broadcast(x[0], x[1]).unwrap()), &[&[2, 3, 4], &[4]]),
        case("mul", Box::new(|g, x| g.mul(x[0], x[1]).unwrap()), &[&[3, 4], &[3, 4]]),
        case("scale", Box::new(|g, x| g.scale(x[0], -1.7)), &[&[3, 4]]),
        case("reshape", Box::new(|g, x| g.reshape(x[0], &[6, 4]).unwrap()), &[&[2, 3, 4]]),
        case("permute", Box::new(|g, x| g.permute(x[0], &[0, 2, 1, 3]).unwrap()), &[&[2, 3, 4, 2]]),
        case("concat", Box::new(|g, x| g.concat(x[0], x[1], 1).unwrap()), &[&[2, 1, 3], &[2, 4, 3]]),
        case("slice", Box::new(|g, x| g.slice(x[0], 1, 1, 3).unwrap()), &[&[2, 5, 3]]),
        case("slice_last", Box::new(|g, x| g.slice(x[0], 2, 2, 2).unwrap()), &[&[2, 3, 6]]),
        case("expand", Box::new(|g, x| g.expand(x[0], 3).unwrap()), &[&[1, 4]]),
        case("sum", Box::new(|g, x| g.sum(x[0])), &[&[3, 4]]),
        case("conv2d s2 p1", Box::new(|g, x| g.conv2d(x[0], x[1], 2, 1).unwrap()), &[&[2, 6, 6, 3], &[4, 3, 3, 3]]),
        case("conv2d s1 p1", Box::new(|g, x| g.conv2d(x[0], x[1], 1, 1).unwrap()), &[&[2, 4, 4, 3], &[3, 3, 3, 3]]),
        case("conv2d s4 p0", Box::new(|g, x| g.conv2d(x[0], x[1], 4, 0).unwrap()), &[&[1, 8, 8, 2], &[2, 4, 4, 2]]),
        case(
            "batch_norm_train",
            Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train, 1e-5).unwrap().0),
            &[&[3, 2, 2, 4], &[4], &[4]],
        ),
        case(
            "batch_norm_eval",
            Box::new(|g, x| {
                let (mean, var) = ([0.2, -0.1, 0.0, 0.4], [0.7, 1.3, 0.2, 1.0]);
                g.batch_norm(x[0], x[1], x[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5)
                    .unwrap()
                    .0
            }),
            &[&[3, 2, 2, 4], &[4], &[4]],
        ),
        case("layer_norm", Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-6).unwrap()), &[&[2, 3, 5], &[5], &[5]]),
        case("softmax", Box::new(|g, x| g.softmax(x[0])), &[&[2, 3, 5]]),
        case("gelu", Box::new(|g, x| g.gelu(x[0])), &[&[4, 6]]),
        case("global_avg_pool", Box::new(|g, x| g.global_avg_pool(x[0]).unwrap()), &[&[2, 3, 3, 4]]),
        case("cross_entropy", Box::new(|g, x| g.cross_entropy(x[0], &[1, 0, 1]).unwrap()), &[&[3, 2]]),
        case("cross_entropy 4-way", Box::new(|g, x| g.cross_entropy(x[0], &[3, 0]).unwrap()), &[&[2, 4]]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    cases.push(OpCase {
        name: "relu",
        build: Box::new(|g, x| g.relu(x[0])),
        inputs: vec![away_from_zero(&[4, 6], &mut rng)],
    });
    cases
}

/// A model with non-trivial adapter running statistics, so evaluation-mode
/// normalization is not the identity.
pub fn composition_fixture(cfg: ModelConfig, seed: u64) -> (ModelBundle, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = ModelBundle::init(cfg, HeadInput::PseudoClass, &mut rng).unwrap();
    for stats in bundle.adapter.running.iter_mut() {
        *stats = RunningStats {
            mean: (0..cfg.dim).map(|_| rng.random_range(-0.1..0.1)).collect(),
            var: (0..cfg.dim).map(|_| rng.random_range(0.5..1.5)).collect(),
        };
    }
    // Larger head weights make the loss sensitive to every component.
    for v in bundle.head.params.get_mut(0).data_mut() {
        *v *= 20.0;
    }
    let s = cfg.image;
    let images = Tensor::from_fn(&[2, s.height, s.width, s.channels], |_| rng.random_range(0.0..1.0));
    (bundle, images, vec![0, 1])
}

/// Builds `tokenizer → blocks 1..depth → adapter (eval) → head → loss` with
/// every parameter as a leaf. Returns the graph, the loss node and the leaves
/// in bundle order.
fn composed(bundle: &ModelBundle, images: &Tensor, labels: &[usize], depth: usize, trainable: bool) -> (Graph, NodeId, Vec<NodeId>) {
    let cfg = bundle.config;
    let mut g = Graph::new();
    let bind = |g: &mut Graph, set: &fedsis_core::param::ParamSet| {
        if trainable {
            g.params(set)
        } else {
            g.constants(set)
        }
    };
    let tp = bind(&mut g, &bundle.tokenizer.params);
    let groups: Vec<Vec<NodeId>> = bundle.encoder.groups[..=depth].iter().map(|s| bind(&mut g, s)).collect();
    let ap = bind(&mut g, &bundle.adapter.params);
    let hp = bind(&mut g, &bundle.head.params);
    let x = g.constant(images.clone());
    let tokens = bundle.tokenizer.forward(&cfg, &mut g, &tp, x).unwrap();
    let prefix = bundle.encoder.forward_prefix(&cfg, &mut g, &groups, tokens, depth).unwrap();
    let (z, _) = bundle.adapter.forward(&cfg, &mut g, &ap, prefix.tokens, NormMode::Eval).unwrap();
    let logits = bundle.head.forward(&mut g, &hp, z).unwrap();
    let loss = g.cross_entropy(logits, labels).unwrap();
    let mut leaves = tp;
    groups.into_iter().for_each(|gr| leaves.extend(gr));
    leaves.extend(ap);
    leaves.extend(hp);
    (g, loss, leaves)
}

fn with_value(bundle: &ModelBundle, tensor: usize, index: usize, delta: Real) -> ModelBundle {
    let mut b = bundle.clone();
    let mut k = tensor;
    let mut sets: Vec<&mut fedsis_core::param::ParamSet> = vec![&mut b.tokenizer.params];
    sets.extend(b.encoder.groups.iter_mut());
    sets.push(&mut b.adapter.params);
    sets.push(&mut b.head.params);
    for set in sets {
        if k < set.len() {
            set.get_mut(k).data_mut()[index] += delta;
            break;
        }
        k -= set.len();
    }
    b
}

/// Result of the composed check at one depth.
pub struct CompositionReport {
    pub depth: usize,
    pub worst: Real,
    pub worst_tensor: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Central differences on `coords` random coordinates of every tensor on the
/// path. Coordinates whose probes change any ReLU's linear piece are skipped
/// and replaced by another draw. The error of a tensor is the largest
/// coordinate difference relative to the largest entry of that tensor's
/// analytic gradient.
pub fn composition_error(bundle: &ModelBundle, images: &Tensor, labels: &[usize], depth: usize, coords: usize, seed: u64) -> CompositionReport {
    let (mut g, loss, leaves) = composed(bundle, images, labels, depth, true);
    let pattern = g.relu_pattern();
    g.backward(loss).unwrap();
    let names: Vec<String> = {
        let mut n: Vec<String> = bundle.tokenizer.params.iter().map(|p| p.name.clone()).collect();
        for gr in &bundle.encoder.groups[..=depth] {
            n.extend(gr.iter().map(|p| p.name.clone()));
        }
        n.extend(bundle.adapter.params.iter().map(|p| p.name.clone()));
        n.extend(bundle.head.params.iter().map(|p| p.name.clone()));
        n
    };
    // Tensor positions inside the full bundle ordering (blocks past `depth`
    // are not on the path).
    let skipped_blocks: usize = bundle.encoder.groups[depth + 1..].iter().map(|s| s.len()).sum();
    let before_adapter = bundle.tokenizer.params.len() + bundle.encoder.groups[..=depth].iter().map(|s| s.len()).sum::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CompositionReport {
        depth,
        worst: 0.0,
        worst_tensor: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    for (t, &leaf) in leaves.iter().enumerate() {
        let bundle_index = if t < before_adapter { t } else { t + skipped_blocks };
        let analytic = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(g.value(leaf).shape()));
        let n = analytic.numel();
        let mut diffs: Real = 0.0;
        let scale = analytic.data().iter().fold(0.0 as Real, |m, v| m.max(v.abs())).max(1e-8);
        let mut done = 0;
        let mut attempts = 0;
        while done < coords.min(n) && attempts < 20 * coords {
            attempts += 1;
            let i = rng.random_range(0..n);
            let probe = |delta: Real| {
                let b = with_value(bundle, bundle_index, i, delta);
                let (g, loss, _) = composed(&b, images, labels, depth, false);
                (g.value(loss).item(), g.relu_pattern())
            };
            let (lp, pp) = probe(FD_STEP);
            let (lm, pm) = probe(-FD_STEP);
            if pp != pattern || pm != pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            diffs = diffs.max((analytic.data()[i] - numeric).abs());
            done += 1;
        }
        report.checked += done;
        let err = diffs / scale;
        if err > report.worst {
            report.worst = err;
            report.worst_tensor = names[t].clone();
        }
    }
    report
}
