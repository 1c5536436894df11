//! Fixtures shared by the benchmarks.

use segadapt::data::{DomainConfig, Scene};
use segadapt::model::{ModelConfig, Network};
use segadapt::rng::Seeds;
use segadapt::Tensor;

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn ramp(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let v = (i as u64).wrapping_mul(2_654_435_761).wrapping_add(salt) % 1000;
        v as f32 / 500.0 - 1.0
    })
}

/// A freshly initialized network whose running statistics are marked tracked.
pub fn network(transformer: bool) -> Network {
    let cfg = if transformer {
        ModelConfig::default()
    } else {
        ModelConfig::without_transformer()
    };
    let mut net = Network::new(cfg, &Seeds::new(0)).expect("default config is valid");
    for r in &mut net.running {
        r.tracked = true;
    }
    net
}

pub fn target_scenes(n: usize) -> Vec<Scene> {
    let cfg = DomainConfig::target();
    (0..n as u64)
        .map(|i| segadapt::data::scene_at(&cfg, Seeds::new(3), i))
        .collect()
}
