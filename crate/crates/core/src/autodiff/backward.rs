use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::ops::{axis_split, gelu_grad, permute_tensor};
use super::{accumulate, Graph, NodeId, Op};
use crate::real::Real;
use crate::tensor::Tensor;

/// Pushes the gradient `g` of a node (with forward `value`) into its inputs.
pub(super) fn propagate(op: &Op, value: &Tensor, g: &Tensor, graph: &Graph, grads: &mut [Option<Tensor>]) {
    let wants = |id: NodeId| graph.requires_grad(id);
    let shaped = |like: NodeId, data: Vec<Real>| Tensor::new(graph.value(like).shape(), data).expect("shape of an existing node");
    let gd = g.data();
    match op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (ta, tb) = (graph.value(a), graph.value(b));
            let (k, n) = (tb.shape()[0], tb.shape()[1]);
            let m = ta.numel() / k;
            if wants(a) {
                let mut da = vec![0.0; m * k];
                kernels::mm_nt(gd, tb.data(), m, n, k, &mut da);
                accumulate(grads, a, shaped(a, da));
            }
            if wants(b) {
                let mut db = vec![0.0; k * n];
                kernels::mm_tn(ta.data(), gd, m, k, n, &mut db);
                accumulate(grads, b, shaped(b, db));
            }
        }
        &Op::BatchMatMul(a, b) => {
            let (ta, tb) = (graph.value(a), graph.value(b));
            let r = ta.rank();
            let (m, k, n) = (ta.shape()[r - 2], ta.shape()[r - 1], tb.shape()[r - 1]);
            let batches = ta.numel() / (m * k);
            if wants(a) {
                let mut da = vec![0.0; ta.numel()];
                for p in 0..batches {
                    kernels::mm_nt(
                        &gd[p * m * n..(p + 1) * m * n],
                        &tb.data()[p * k * n..(p + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[p * m * k..(p + 1) * m * k],
                    );
                }
                accumulate(grads, a, shaped(a, da));
            }
            if wants(b) {
                let mut db = vec![0.0; tb.numel()];
                for p in 0..batches {
                    kernels::mm_tn(
                        &ta.data()[p * m * k..(p + 1) * m * k],
                        &gd[p * m * n..(p + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[p * k * n..(p + 1) * k * n],
                    );
                }
                accumulate(grads, b, shaped(b, db));
            }
        }
        &Op::Add(a, b) => {
            for id in [a, b] {
                if wants(id) {
                    accumulate(grads, id, g.clone());
                }
            }
        }
        &Op::AddBroadcast(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.clone());
            }
            if wants(b) {
                let block = graph.value(b).numel();
                let mut db = vec![0.0; block];
                for chunk in gd.chunks_exact(block) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += *v);
                }
                accumulate(grads, b, shaped(b, db));
            }
        }
        &Op::Mul(a, b) => {
            let (ta, tb) = (graph.value(a), graph.value(b));
            if wants(a) {
                let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, a, shaped(a, da));
            }
            if wants(b) {
                let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, b, shaped(b, db));
            }
        }
        &Op::Scale(a, factor) => {
            let da = gd.iter().map(|g| g * factor).collect();
            accumulate(grads, a, shaped(a, da));
        }
        &Op::Reshape(a) => accumulate(grads, a, shaped(a, gd.to_vec())),
        Op::Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            accumulate(grads, *a, permute_tensor(g, &inverse));
        }
        &Op::Conv2d { x, w, geom } => {
            if wants(x) {
                let mut dx = vec![0.0; graph.value(x).numel()];
                geom.backward_input(gd, graph.value(w).data(), &mut dx);
                accumulate(grads, x, shaped(x, dx));
            }
            if wants(w) {
                let mut dw = vec![0.0; graph.value(w).numel()];
                geom.backward_weight(gd, graph.value(x).data(), &mut dw);
                accumulate(grads, w, shaped(w, dw));
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let c = inv_std.len();
            let rows = (gd.len() / c) as Real;
            let gam = graph.value(*gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for j in 0..c {
                    sum_g[j] += grow[j];
                    sum_gx[j] += grow[j] * hrow[j];
                }
            }
            if wants(*x) {
                let mut dx = vec![0.0; gd.len()];
                for ((drow, grow), hrow) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        drow[j] = if *train {
                            gam[j] * inv_std[j] * (grow[j] - sum_g[j] / rows - hrow[j] * sum_gx[j] / rows)
                        } else {
                            gam[j] * inv_std[j] * grow[j]
                        };
                    }
                }
                accumulate(grads, *x, shaped(*x, dx));
            }
            if wants(*gamma) {
                accumulate(grads, *gamma, shaped(*gamma, sum_gx));
            }
            if wants(*beta) {
                accumulate(grads, *beta, shaped(*beta, sum_g));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = graph.value(*gamma).numel();
            let gam = graph.value(*gamma).data();
            if wants(*x) {
                let mut dx = vec![0.0; gd.len()];
                for (r, ((drow, grow), hrow)) in dx
                    .chunks_exact_mut(d)
                    .zip(gd.chunks_exact(d))
                    .zip(xhat.chunks_exact(d))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dhx = 0.0;
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        mean_dh += dh;
                        mean_dhx += dh * hrow[j];
                    }
                    mean_dh /= d as Real;
                    mean_dhx /= d as Real;
                    for j in 0..d {
                        drow[j] = inv_std[r] * (grow[j] * gam[j] - mean_dh - hrow[j] * mean_dhx);
                    }
                }
                accumulate(grads, *x, shaped(*x, dx));
            }
            if wants(*gamma) || wants(*beta) {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] += grow[j] * hrow[j];
                        db[j] += grow[j];
                    }
                }
                if wants(*gamma) {
                    accumulate(grads, *gamma, shaped(*gamma, dg));
                }
                if wants(*beta) {
                    accumulate(grads, *beta, shaped(*beta, db));
                }
            }
        }
        &Op::Softmax(a) => {
            let d = *value.shape().last().unwrap();
            let mut da = vec![0.0; gd.len()];
            for ((drow, grow), yrow) in da.chunks_exact_mut(d).zip(gd.chunks_exact(d)).zip(value.data().chunks_exact(d)) {
                let inner = kernels::dot(grow, yrow);
                for j in 0..d {
                    drow[j] = yrow[j] * (grow[j] - inner);
                }
            }
            accumulate(grads, a, shaped(a, da));
        }
        &Op::Gelu(a) => {
            let da = gd.iter().zip(graph.value(a).data()).map(|(g, &x)| g * gelu_grad(x)).collect();
            accumulate(grads, a, shaped(a, da));
        }
        &Op::Relu(a) => {
            let da = gd
                .iter()
                .zip(graph.value(a).data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            accumulate(grads, a, shaped(a, da));
        }
        &Op::GlobalAvgPool(x) => {
            let tx = graph.value(x);
            let (b, c) = (value.shape()[0], value.shape()[1]);
            let spatial = tx.numel() / (b * c);
            let mut dx = vec![0.0; tx.numel()];
            for (i, sample) in dx.chunks_exact_mut(spatial * c).enumerate() {
                let grow = &gd[i * c..(i + 1) * c];
                for px in sample.chunks_exact_mut(c) {
                    px.iter_mut().zip(grow).for_each(|(d, g)| *d = g / spatial as Real);
                }
            }
            accumulate(grads, x, shaped(x, dx));
        }
        &Op::Concat { a, b, axis } => {
            let (outer, ea, inner) = axis_split(graph.value(a).shape(), axis);
            let eb = graph.value(b).shape()[axis];
            let (mut da, mut db) = (Vec::with_capacity(outer * ea * inner), Vec::with_capacity(outer * eb * inner));
            for o in 0..outer {
                let base = o * (ea + eb) * inner;
                da.extend_from_slice(&gd[base..base + ea * inner]);
                db.extend_from_slice(&gd[base + ea * inner..base + (ea + eb) * inner]);
            }
            if wants(a) {
                accumulate(grads, a, shaped(a, da));
            }
            if wants(b) {
                accumulate(grads, b, shaped(b, db));
            }
        }
        &Op::Slice { x, axis, start } => {
            let (outer, extent, inner) = axis_split(graph.value(x).shape(), axis);
            let len = value.shape()[axis];
            let mut dx = vec![0.0; graph.value(x).numel()];
            for o in 0..outer {
                let base = o * extent * inner + start * inner;
                dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, x, shaped(x, dx));
        }
        &Op::Expand(a) => {
            let block = graph.value(a).numel();
            let mut da = vec![0.0; block];
            for chunk in gd.chunks_exact(block) {
                da.iter_mut().zip(chunk).for_each(|(d, v)| *d += *v);
            }
            accumulate(grads, a, shaped(a, da));
        }
        &Op::Sum(a) => {
            let da = vec![gd[0]; graph.value(a).numel()];
            accumulate(grads, a, shaped(a, da));
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = graph.value(*logits).shape()[1];
            let scale = gd[0] / labels.len() as Real;
            let mut dl = probs.clone();
            for (row, &y) in dl.chunks_exact_mut(c).zip(labels) {
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            accumulate(grads, *logits, shaped(*logits, dl));
        }
    }
}
