//! Training and baseline agents for choosing the price scaling factor.
//!
//! [`dmsb`] holds the diffusion actor-critic trainer, [`ppo`] the
//! clipped-surrogate baseline and [`baselines`] the greedy and random
//! agents. All agents implement [`Agent`].

pub mod baselines;
pub mod buffer;
pub mod dmsb;
pub mod ppo;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::MarketState;
use crate::error::{Error, Result};

pub use baselines::{GreedyAgent, RandomAgent};
pub use buffer::ReplayBuffer;
pub use dmsb::{actor_update, bellman_targets, train, DmsbAgent, TrainingRun, TwinCritics};
pub use ppo::{train_ppo, PpoAgent, PpoConfig};

/// Chooses an action index for the current round.
pub trait Agent {
    fn name(&self) -> &'static str;
    fn act(&mut self, state: &MarketState) -> Result<usize>;
}

/// Diffusion actor-critic hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Episodes `E`.
    pub episodes: usize,
    /// Rounds per episode `kappa`; overrides the scenario's episode length.
    pub iterations_per_episode: usize,
    /// Denoising steps `K`.
    pub diffusion_steps: usize,
    pub eta_start: f64,
    pub eta_end: f64,
    /// Target update rate.
    pub soft_update: f64,
    pub discount: f64,
    pub batch_size: usize,
    /// Entropy temperature.
    pub temperature: f64,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    /// Transitions collected before the first update. Observation and
    /// reward statistics are frozen at this point.
    pub warmup: usize,
    pub hidden: Vec<usize>,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
    /// Clamp on the denoised logits `x_0`; `0` disables it.
    pub output_bound: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            iterations_per_episode: 100,
            diffusion_steps: 5,
            eta_start: 1e-4,
            eta_end: 2e-2,
            soft_update: 0.005,
            discount: 0.5,
            batch_size: 128,
            temperature: 0.05,
            learning_rate: 1e-4,
            buffer_capacity: 100_000,
            warmup: 1000,
            hidden: vec![64, 64],
            max_grad_norm: 0.0,
            output_bound: 1.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.soft_update > 0.0 && self.soft_update <= 1.0) {
            return bad("soft_update must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if self.episodes == 0
            || self.iterations_per_episode == 0
            || self.diffusion_steps == 0
            || self.batch_size == 0
            || self.buffer_capacity == 0
        {
            return bad("episode, iteration, step, batch and buffer counts must be >= 1");
        }
        if self.batch_size > self.buffer_capacity {
            return bad("batch_size exceeds buffer_capacity");
        }
        if !(self.temperature >= 0.0) || !(self.learning_rate > 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("temperature, learning_rate and max_grad_norm must be non-negative (learning_rate positive)");
        }
        if !(self.output_bound >= 0.0) {
            return bad("output_bound must be non-negative");
        }
        if !(self.eta_start > 0.0 && self.eta_end < 1.0 && self.eta_start <= self.eta_end) {
            return bad("noise schedule must satisfy 0 < eta_start <= eta_end < 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.episodes * self.iterations_per_episode
    }

    /// Sets `episodes` so that at least `steps` rounds are played.
    pub fn with_total_steps(mut self, steps: usize) -> Self {
        self.episodes = steps.div_ceil(self.iterations_per_episode).max(1);
        self
    }
}

/// One row of a training log. Loss fields are empty before updates start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub reward: f64,
    pub actor_loss: Option<f64>,
    pub critic1_loss: Option<f64>,
    pub critic2_loss: Option<f64>,
    pub entropy: f64,
    pub rho: f64,
}

pub const TRAIN_LOG_SCHEMA: &str = "train-log v1";

/// Writes a training log as CSV with a leading `#` schema line.
pub fn write_train_log<W: Write>(rows: &[TrainLogRow], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# {TRAIN_LOG_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
