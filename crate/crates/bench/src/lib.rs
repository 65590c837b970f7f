//! Shared fixtures for the benchmarks.

use csds::data::{generate_sample, Sample, SynthConfig};
use csds::harness::RunConfig;
use csds::segnet::SegNetConfig;
use csds::{Rng, Tensor};

/// Uniform `[b, c, h, w]` tensor in `[0, 1)`.
pub fn uniform(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(0.0, 1.0) as f32).collect()).expect("shape matches data")
}

pub fn synth(size: usize, count: u64) -> Vec<Sample> {
    let cfg = SynthConfig { size, ..Default::default() };
    (0..count).map(|i| generate_sample(&cfg, i).expect("default generator settings")).collect()
}

/// The desk-scale training configuration at 64×64.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = SegNetConfig { base_width: 8, depth: 3, ..Default::default() };
    cfg.train.optimizer.lr = 1e-3;
    cfg.train.schedule.batch_size = 4;
    cfg
}
