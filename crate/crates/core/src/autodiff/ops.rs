use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeometry};
use super::{BatchNormMode, BatchStats, Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::real::{self, Real};
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + real::erf(x * core::f64::consts::FRAC_1_SQRT_2 as Real))
}

pub(crate) fn gelu_grad(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + real::erf(x * core::f64::consts::FRAC_1_SQRT_2 as Real));
    let pdf = real::exp(-0.5 * x * x) * (0.5 * core::f64::consts::FRAC_2_SQRT_PI * core::f64::consts::FRAC_1_SQRT_2) as Real;
    cdf + x * pdf
}

impl Graph {
    /// `a[.., m, k] · b[k, n]`: a shared weight applied along the last axis.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[p.., m, k] · b[p.., k, n]` with identical leading axes.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batches: usize = sa[..r - 2].iter().product();
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let mut out = vec![0.0; batches * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for p in 0..batches {
            kernels::mm_nn(
                &ad[p * m * k..(p + 1) * m * k],
                &bd[p * k * n..(p + 1) * k * n],
                m,
                k,
                n,
                &mut out[p * m * n..(p + 1) * m * n],
            );
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix of
    /// `a`'s. Covers bias vectors and positional embeddings alike.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let block = tb.numel();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_exact_mut(block) {
            chunk.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += *y);
        }
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: Real) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_in_place(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let value = permute_tensor(t, perm);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// NHWC convolution. `w` is `[out_c, kh, kw, in_c]`; no bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if stride == 0 || sx[1] + 2 * pad < sw[1] || sx[2] + 2 * pad < sw[2] {
            return Err(Error::invalid("conv2d", format!("kernel {sw:?} with stride {stride} and pad {pad} does not fit input {sx:?}")));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            in_c: sx[3],
            out_c: sw[0],
            kernel_h: sw[1],
            kernel_w: sw[2],
            stride,
            pad,
        };
        let shape = [geom.batch, geom.out_h(), geom.out_w(), geom.out_c];
        let mut out = vec![0.0; shape.iter().product()];
        geom.forward(self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Per-channel normalization over every axis but the last.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_>,
        eps: Real,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batch_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let rows = tx.numel() / c;
        let xd = tx.data();
        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                if rows < 2 {
                    return Err(Error::invalid("batch_norm", "training mode needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += *v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as Real);
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let unbiased = var.iter().map(|s| s / (rows - 1) as Real).collect();
                var.iter_mut().for_each(|s| *s /= rows as Real);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / real::sqrt(v + eps)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ((row, hrow), orow) in xd.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                hrow[j] = (row[j] - mean[j]) * inv_std[j];
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: Real) -> Result<NodeId> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("layer_norm", tx.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in tx.data().chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let is = 1.0 / real::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| gelu(x)).collect()).expect("same shape");
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|&x| x.max(0.0)).collect()).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    /// `[B, .., C] → [B, C]`, averaging every middle axis.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 3 {
            return Err(Error::invalid("global_avg_pool", format!("need rank >= 3, got {s:?}")));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let spatial = t.numel() / (b * c);
        let mut out = vec![0.0; b * c];
        for (i, sample) in t.data().chunks_exact(spatial * c).enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for px in sample.chunks_exact(c) {
                orow.iter_mut().zip(px).for_each(|(o, v)| *o += *v);
            }
            orow.iter_mut().for_each(|o| *o /= spatial as Real);
        }
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Joins `a` and `b` along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::shape("concat", sa, sb));
        }
        let (outer, ea, inner) = axis_split(sa, axis);
        let eb = sb[axis];
        let mut shape = sa.to_vec();
        shape[axis] = ea + eb;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * ea * inner..(o + 1) * ea * inner]);
            out.extend_from_slice(&bd[o * eb * inner..(o + 1) * eb * inner]);
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { a, b, axis }, &[a, b]))
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid("slice", format!("range {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let (outer, extent, inner) = axis_split(s, axis);
        let mut shape = s.to_vec();
        shape[axis] = len;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn expand(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        if n == 0 {
            return Err(Error::invalid("expand", "count must be positive"));
        }
        let t = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut out = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Expand(a), &[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean softmax cross-entropy of `logits[B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + real::ln(row.iter().map(|v| real::exp(v - max)).sum::<Real>());
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= labels.len() as Real;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy loss over logits {s:?}")));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = real::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let d = t.data();
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(d[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves size")
}
