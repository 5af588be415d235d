use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::{self, Real};
use crate::tensor::Tensor;

/// Normal(0, std²) truncated at ±2 std by rejection.
pub fn trunc_normal(shape: &[usize], std: Real, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z as Real * std;
        }
    })
}

/// He-normal for a conv weight `[out, kh, kw, in]`.
pub fn conv_weight(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as Real;
    let std = real::sqrt(2.0 / fan_in);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z as Real * std
    })
}

pub const LINEAR_STD: Real = 0.02;
