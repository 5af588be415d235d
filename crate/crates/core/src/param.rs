//! Named parameter collections and the FedAvg weighted mean over them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies. Off for biases, norm affines, positional
    /// embeddings and the cls token.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> core::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    /// Copies values from `other`, which must share this layout.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Config(String::from("parameter layouts differ")));
        }
        for (dst, src) in self.params.iter_mut().zip(other.iter()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Tolerance on `Σ weights == 1`.
#[cfg(not(feature = "f32"))]
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;
/// Tolerance on `Σ weights == 1`, loosened to the single-precision rounding of each weight.
#[cfg(feature = "f32")]
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// FedAvg weights `ρ_k = N_k / N`.
pub fn sample_weights(counts: &[usize]) -> Result<Vec<Real>> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || total == 0 || counts.contains(&0) {
        return Err(Error::Config(format!("client sample counts must be positive, got {counts:?}")));
    }
    Ok(counts.iter().map(|&n| (n as f64 / total as f64) as Real).collect())
}

/// `Σ_k ρ_k Ω_k` over parameter sets with a shared layout.
pub fn weighted_mean(sets: &[&ParamSet], weights: &[Real]) -> Result<ParamSet> {
    check_weights(sets.len(), weights)?;
    let first = sets[0];
    if let Some(bad) = sets.iter().position(|s| !s.same_layout(first)) {
        return Err(Error::Config(format!("parameter set {bad} does not match the layout of set 0")));
    }
    let lists: Vec<Vec<Tensor>> = sets.iter().map(|s| s.tensors().cloned().collect()).collect();
    let refs: Vec<&[Tensor]> = lists.iter().map(|l| l.as_slice()).collect();
    let mean = weighted_mean_tensors(&refs, weights)?;
    let mut out = first.clone();
    for (p, t) in out.params.iter_mut().zip(mean) {
        p.value = t;
    }
    Ok(out)
}

/// Element-wise `Σ_k ρ_k t_k` over tensor lists with matching shapes.
pub fn weighted_mean_tensors(lists: &[&[Tensor]], weights: &[Real]) -> Result<Vec<Tensor>> {
    check_weights(lists.len(), weights)?;
    let first = lists[0];
    for (k, list) in lists.iter().enumerate() {
        let same = list.len() == first.len() && list.iter().zip(first).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Config(format!("tensor list {k} does not match the layout of list 0")));
        }
    }
    let mut out: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (i, dst) in out.iter_mut().enumerate() {
        let dst = dst.data_mut();
        for (list, &w) in lists.iter().zip(weights) {
            for (d, s) in dst.iter_mut().zip(list[i].data()) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

fn check_weights(sets: usize, weights: &[Real]) -> Result<()> {
    if sets == 0 || sets != weights.len() {
        return Err(Error::Config(format!("{sets} parameter sets but {} weights", weights.len())));
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(format!("aggregation weights must be nonnegative and sum to 1, got {weights:?}")));
    }
    Ok(())
}
