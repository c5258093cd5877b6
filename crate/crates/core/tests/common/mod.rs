#![allow(dead_code)]

use lbw_core::diffusion::TrainSample;
use lbw_core::model::{init_expert, ModelConfig, ACTION_FEATURES};
use lbw_core::params::ParamStore;
use lbw_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        frame_height: 8,
        frame_width: 8,
        patch: 4,
        chunk_len: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        time_dim: 4,
        vocab: 16,
        boundary: 0.5,
        skip_sigma: 0.1,
    }
}

/// Every parameter drawn at random, including the zero-initialized heads.
pub fn random_expert(cfg: &ModelConfig, seed: u64, std: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_expert::<f64, _>(cfg, &mut rng);
    let mut p = ParamStore::new();
    for (k, v) in base.iter() {
        p.insert(k.clone(), Tensor::randn(v.rows(), v.cols(), std, &mut rng));
    }
    p
}

pub fn random_teacher(cfg: &ModelConfig, seed: u64, std: f64) -> ParamStore<f64> {
    let mut p = random_expert(cfg, seed, std).with_prefix("high.");
    p.extend(random_expert(cfg, seed + 1, std).with_prefix("low."));
    p
}

pub fn randomize(store: &ParamStore<f64>, seed: u64, std: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (k, v) in store.iter() {
        p.insert(k.clone(), Tensor::randn(v.rows(), v.cols(), std, &mut rng));
    }
    p
}

pub fn random_sample(cfg: &ModelConfig, frames: usize, seed: u64) -> TrainSample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.tokens_per_frame();
    TrainSample {
        latents: Tensor::randn(frames * n, cfg.channels(), 0.5, &mut rng),
        frames,
        tokens_per_frame: n,
        actions: Tensor::randn(frames, ACTION_FEATURES, 1.0, &mut rng),
        text: vec![vec![1, 4]; frames],
        seed,
    }
}
