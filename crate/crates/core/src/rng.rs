//! Seeded random streams. Every stochastic routine takes an explicit
//! generator; independent jobs derive their own stream from `(seed, index)`.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        S::from_f(v)
    })
}

pub fn uniform<S: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f(rng.random_range(lo..hi)))
}
