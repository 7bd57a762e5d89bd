//! Clipped-surrogate policy gradient with GAE over the same auction MDP.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dmsb::encode_batch;
use super::{Agent, TrainLogRow};
use crate::diffusion::{action_distribution, entropy, sample_action, softmax_rows, SampleMode};
use crate::env::{action_to_rho, AuctionEnv, MarketState, ObservationEncoder, ScenarioConfig, OBSERVATION_DIM};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Transitions per policy update.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub entropy_coef: f64,
    pub hidden: Vec<usize>,
    /// Transitions used to fit observation and reward statistics.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            rollout_len: 1000,
            epochs: 4,
            minibatch: 125,
            learning_rate: 3e-4,
            clip: 0.2,
            gae_lambda: 0.95,
            discount: 0.95,
            entropy_coef: 0.01,
            hidden: vec![64, 64],
            warmup: 1000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_len == 0 || self.epochs == 0 || self.minibatch == 0 || self.minibatch > self.rollout_len {
            return Err(Error::Config("PPO rollout, epoch and minibatch sizes must be positive and consistent".into()));
        }
        if !(self.clip > 0.0) || !(self.learning_rate > 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("PPO clip and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("PPO lambda must lie in [0, 1] and discount in [0, 1)".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("PPO hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax policy and state-value network.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub policy: Mlp,
    pub value: Mlp,
    pub encoder: ObservationEncoder,
    pub mode: SampleMode,
    rng: ChaCha8Rng,
}

impl PpoAgent {
    pub fn new(actions: usize, config: &PpoConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sizes = vec![OBSERVATION_DIM];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(actions);
        let mut policy = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng)?;
        policy.scale_output_layer(0.01);
        *sizes.last_mut().expect("non-empty") = 1;
        let value = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng)?;
        Ok(Self {
            policy,
            value,
            encoder: ObservationEncoder::new(),
            mode: SampleMode::Stochastic,
            rng,
        })
    }

    pub fn distribution(&self, state: &MarketState) -> Result<Vec<f64>> {
        Ok(action_distribution(&self.policy.forward(&self.encoder.encode(state))?))
    }
}

impl Agent for PpoAgent {
    fn name(&self) -> &'static str {
        "ppo"
    }

    fn act(&mut self, state: &MarketState) -> Result<usize> {
        let p = self.distribution(state)?;
        Ok(sample_action(&p, &mut self.rng, self.mode))
    }
}

/// One clipped-surrogate step on the policy network. `advantages` are used
/// as given. Returns the surrogate loss before the step.
#[allow(clippy::too_many_arguments)]
pub fn ppo_policy_step(
    policy: &mut Mlp,
    optimiser: &mut Adam,
    obs: ArrayView2<f64>,
    actions: &[usize],
    old_log_prob: &[f64],
    advantages: &[f64],
    clip: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let (logits, mut tape) = policy.forward_tape(obs)?;
    let p = softmax_rows(&logits);
    let n = actions.len() as f64;
    let mut grad = Array2::zeros(p.raw_dim());
    let mut loss = 0.0;
    for (b, (mut g, pr)) in grad.outer_iter_mut().zip(p.outer_iter()).enumerate() {
        let a = actions[b];
        let log_p = pr[a].max(f64::MIN_POSITIVE).ln();
        let ratio = (log_p - old_log_prob[b]).exp();
        let adv = advantages[b];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        let h = entropy(&pr.to_vec());
        loss += -unclipped.min(clipped) - entropy_coef * h;
        // d(-ratio * adv)/d log_p, zero where the clipped branch is active.
        let d_log_p = if unclipped <= clipped { -ratio * adv / n } else { 0.0 };
        for j in 0..g.len() {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let ln = pr[j].max(f64::MIN_POSITIVE).ln();
            g[j] = d_log_p * (onehot - pr[j]) + entropy_coef * pr[j] * (ln + h) / n;
        }
    }
    let (grads, _) = policy.backward(&mut tape, grad.view())?;
    optimiser.step(policy, &grads)?;
    Ok(loss / n)
}

fn value_step(value: &mut Mlp, optimiser: &mut Adam, obs: ArrayView2<f64>, returns: &[f64]) -> Result<f64> {
    let (v, mut tape) = value.forward_tape(obs)?;
    let n = returns.len() as f64;
    let mut grad = Array2::zeros(v.raw_dim());
    let mut loss = 0.0;
    for (b, &r) in returns.iter().enumerate() {
        let err = v[[b, 0]] - r;
        loss += err * err;
        grad[[b, 0]] = 2.0 * err / n;
    }
    let (grads, _) = value.backward(&mut tape, grad.view())?;
    optimiser.step(value, &grads)?;
    Ok(loss / n)
}

/// Generalised advantage estimates; episode ends are truncations, so every
/// step bootstraps from the next state's value.
pub fn gae(rewards: &[f64], values: &[f64], next_values: &[f64], discount: f64, lambda: f64) -> Vec<f64> {
    let mut adv = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + discount * next_values[t] - values[t];
        running = delta + discount * lambda * running;
        adv[t] = running;
    }
    adv
}

struct Rollout {
    states: Vec<MarketState>,
    next_states: Vec<MarketState>,
    actions: Vec<usize>,
    log_prob: Vec<f64>,
    rewards: Vec<f64>,
}

/// Trains a PPO agent for `steps` environment rounds.
pub fn train_ppo(scenario: &ScenarioConfig, config: &PpoConfig, steps: usize) -> Result<(PpoAgent, Vec<TrainLogRow>)> {
    config.validate()?;
    let mut env = AuctionEnv::new(scenario.clone())?;
    let actions = scenario.action_space_size;
    let mut agent = PpoAgent::new(actions, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let mut policy_opt = Adam::new(&agent.policy, config.learning_rate).with_max_grad_norm(0.5);
    let mut value_opt = Adam::new(&agent.value, config.learning_rate).with_max_grad_norm(0.5);
    let mut log = Vec::with_capacity(steps);
    let mut reward_scale = 1.0;
    let mut abs_reward = 0.0;
    let mut rollout = Rollout {
        states: Vec::new(),
        next_states: Vec::new(),
        actions: Vec::new(),
        log_prob: Vec::new(),
        rewards: Vec::new(),
    };

    for step in 0..steps {
        if step == config.warmup {
            agent.encoder.freeze();
            if step > 0 && abs_reward > 0.0 {
                reward_scale = abs_reward / step as f64;
            }
        }
        let state = env.state().clone();
        agent.encoder.observe(&state);
        let p = agent.distribution(&state)?;
        let action = sample_action(&p, &mut rng, SampleMode::Stochastic);
        let outcome = env.step(action)?;
        abs_reward += outcome.reward.abs();
        log.push(TrainLogRow {
            step,
            reward: outcome.reward,
            actor_loss: None,
            critic1_loss: None,
            critic2_loss: None,
            entropy: entropy(&p),
            rho: action_to_rho(action, actions)?,
        });
        if !agent.encoder.is_frozen() {
            // Statistics are still moving; nothing to learn from yet.
            continue;
        }
        rollout.states.push(state);
        rollout.next_states.push(outcome.next_state);
        rollout.actions.push(action);
        rollout.log_prob.push(p[action].max(f64::MIN_POSITIVE).ln());
        rollout.rewards.push(outcome.reward / reward_scale);

        if rollout.states.len() == config.rollout_len {
            let (pl, vl) = update(&mut agent, &mut policy_opt, &mut value_opt, &rollout, config, &mut rng)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("step {step}: {m}")),
                    other => other,
                })?;
            let last = log.last_mut().expect("logged this step");
            last.actor_loss = Some(pl);
            last.critic1_loss = Some(vl);
            rollout.states.clear();
            rollout.next_states.clear();
            rollout.actions.clear();
            rollout.log_prob.clear();
            rollout.rewards.clear();
        }
    }
    agent.mode = SampleMode::Greedy;
    Ok((agent, log))
}

fn update(
    agent: &mut PpoAgent,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    rollout: &Rollout,
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let n = rollout.states.len();
    let obs = encode_batch(&agent.encoder, rollout.states.iter(), n);
    let next_obs = encode_batch(&agent.encoder, rollout.next_states.iter(), n);
    let values: Vec<f64> = agent.value.forward_batch(obs.view())?.column(0).to_vec();
    let next_values: Vec<f64> = agent.value.forward_batch(next_obs.view())?.column(0).to_vec();
    let adv = gae(&rollout.rewards, &values, &next_values, config.discount, config.gae_lambda);
    let returns: Vec<f64> = adv.iter().zip(&values).map(|(a, v)| a + v).collect();
    let mean = adv.iter().sum::<f64>() / n as f64;
    let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let norm_adv: Vec<f64> = adv.iter().map(|a| (a - mean) / (sd + 1e-8)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    let (mut policy_loss, mut value_loss) = (0.0, 0.0);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            let mb_obs = obs.select(Axis(0), chunk);
            let acts: Vec<usize> = chunk.iter().map(|&i| rollout.actions[i]).collect();
            let old: Vec<f64> = chunk.iter().map(|&i| rollout.log_prob[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| norm_adv[i]).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
            policy_loss = ppo_policy_step(
                &mut agent.policy,
                policy_opt,
                mb_obs.view(),
                &acts,
                &old,
                &a,
                config.clip,
                config.entropy_coef,
            )?;
            value_loss = value_step(&mut agent.value, value_opt, mb_obs.view(), &r)?;
            if !policy_loss.is_finite() || !value_loss.is_finite() {
                return Err(Error::Diverged(format!("PPO losses {policy_loss} / {value_loss}")));
            }
        }
    }
    Ok((policy_loss, value_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let cfg = PpoConfig::default();
        let mut agent = PpoAgent::new(20, &cfg).unwrap();
        let before = agent.policy.clone();
        let mut opt = Adam::new(&agent.policy, 1e-2);
        let obs = Array2::from_shape_fn((8, OBSERVATION_DIM), |(i, j)| ((i * j) % 5) as f64 * 0.1);
        let logits = agent.policy.forward_batch(obs.view()).unwrap();
        let p = softmax_rows(&logits);
        let acts: Vec<usize> = (0..8).map(|i| i % 20).collect();
        let old: Vec<f64> = acts.iter().enumerate().map(|(b, &a)| p[[b, a]].ln()).collect();
        ppo_policy_step(&mut agent.policy, &mut opt, obs.view(), &acts, &old, &[0.0; 8], 0.2, 0.0).unwrap();
        assert_eq!(agent.policy, before);
    }

    #[test]
    fn positive_advantage_raises_action_probability() {
        let cfg = PpoConfig::default();
        let mut agent = PpoAgent::new(4, &cfg).unwrap();
        let obs = Array2::from_elem((1, OBSERVATION_DIM), 0.2);
        let before = softmax_rows(&agent.policy.forward_batch(obs.view()).unwrap())[[0, 2]];
        let mut opt = Adam::new(&agent.policy, 1e-3);
        ppo_policy_step(&mut agent.policy, &mut opt, obs.view(), &[2], &[before.ln()], &[1.0], 0.2, 0.0).unwrap();
        let after = softmax_rows(&agent.policy.forward_batch(obs.view()).unwrap())[[0, 2]];
        assert!(after > before);
    }

    #[test]
    fn gae_reduces_to_td_error_at_zero_lambda() {
        let adv = gae(&[1.0, 2.0], &[0.5, 0.5], &[1.0, 2.0], 0.9, 0.0);
        assert_relative_eq!(adv[0], 1.0 + 0.9 - 0.5);
        assert_relative_eq!(adv[1], 2.0 + 1.8 - 0.5);
        let adv = gae(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], 0.5, 1.0);
        assert_relative_eq!(adv[0], 1.5);
    }

    #[test]
    fn short_run_is_reproducible() {
        let cfg = PpoConfig {
            rollout_len: 50,
            minibatch: 25,
            warmup: 50,
            hidden: vec![16],
            ..Default::default()
        };
        let (a, la) = train_ppo(&ScenarioConfig::default(), &cfg, 200).unwrap();
        let (b, lb) = train_ppo(&ScenarioConfig::default(), &cfg, 200).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.policy, b.policy);
        assert_eq!(la.iter().filter(|r| r.actor_loss.is_some()).count(), 3);
    }
}
