//! Shared fixtures for the benchmarks.

use msb_core::auction::{random_market, MarketInstance};
use msb_core::diffusion::{DiffusionActor, NoiseSchedule};
use msb_core::env::OBSERVATION_DIM;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `count` random markets with their `rho`.
pub fn markets(count: usize, seed: u64) -> Vec<(MarketInstance, f64)> {
    let mut r = rng(seed);
    (0..count).map(|_| random_market(&mut r, 8)).collect()
}

/// Actor with the default trainer shape: 20 actions, 5 steps, [64, 64].
pub fn default_actor(seed: u64) -> DiffusionActor {
    let schedule = NoiseSchedule::linear(5, 1e-4, 2e-2).expect("valid schedule");
    DiffusionActor::new(OBSERVATION_DIM, 20, &[64, 64], schedule, &mut rng(seed)).expect("valid actor")
}
