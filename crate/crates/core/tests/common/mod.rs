#![allow(dead_code)]

use segadapt::config::{RunConfig, TrainConfig};
use segadapt::data::{Scene, Split};
use segadapt::engine::Trainer;
use segadapt::model::{ModelConfig, Network};
use segadapt::rng::Seeds;

pub fn scenes(split: Split, n: usize, seed: u64) -> Vec<Scene> {
    let mut run = RunConfig::default();
    run.data.n_source = n;
    run.data.n_source_val = n;
    run.data.n_target = n;
    run.data.synthesize(split, seed).unwrap().scenes
}

pub fn short_schedule() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

/// Briefly pretrained network; enough for running statistics and a
/// non-trivial transfer head.
pub fn quick_model(transformer: bool) -> Network {
    let cfg = if transformer {
        ModelConfig::default()
    } else {
        ModelConfig::without_transformer()
    };
    let seeds = Seeds::new(11);
    let net = Network::new(cfg, &seeds).unwrap();
    let mut t = Trainer::new(net, short_schedule(), seeds).unwrap();
    t.run(&scenes(Split::SourceTrain, 16, 11), &mut |_| {}).unwrap();
    t.net
}
