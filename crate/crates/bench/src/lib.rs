//! Fixtures shared by the benchmarks.

use mirrorseg::{seed, BranchConfig, Dims, LabelMap, MirrorConfig, Modality, Tensor, Volume};
use rand::Rng;

/// The desk-scale network: three levels, eight base channels.
pub fn desk_network() -> MirrorConfig {
    let branch = |out| BranchConfig { levels: 3, base_channels: 8, in_channels: 1, out_channels: out };
    MirrorConfig { ct: branch(4), pet: branch(1), ..MirrorConfig::default() }
}

pub fn uniform_tensor(dims: Dims, seed_: u64) -> Tensor {
    let mut rng = seed::rng(seed_);
    Tensor::from_fn(dims, |_| rng.random_range(-1.0f32..1.0))
}

pub fn uniform_volume(shape: [usize; 3], modality: Modality, seed_: u64) -> Volume {
    let mut rng = seed::rng(seed_);
    let n = shape.iter().product();
    Volume::new(shape, [2.0; 3], modality, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .expect("valid geometry")
}

/// Bernoulli mask; densities near 0.3 give many mid-sized components.
pub fn random_mask(shape: [usize; 3], density: f64, seed_: u64) -> LabelMap {
    let mut rng = seed::rng(seed_);
    let on: Vec<bool> = (0..shape.iter().product()).map(|_| rng.random_bool(density)).collect();
    LabelMap::binary_from_fn(shape, [2.0; 3], |i| on[i]).expect("valid geometry")
}
