//! Seed derivation.
//!
//! Every random stream is a ChaCha8 generator keyed by a base seed and a path
//! of integers (step, video index, purpose, ...). Streams never depend on
//! scheduling order, so any computation can be replayed from its coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numcore::Tensor;

pub type StreamRng = ChaCha8Rng;

/// Stream tags used across the crate.
pub mod purpose {
    pub const SYNTH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const EMBED: u64 = 6;
    pub const MIXTURE: u64 = 7;
    pub const INFERENCE: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream at `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Tensor of i.i.d. `N(0, std^2)` draws.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = normal_vec(rng, n).into_iter().map(|v| v * std).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Uniformly random unit vector in `dim` dimensions.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
