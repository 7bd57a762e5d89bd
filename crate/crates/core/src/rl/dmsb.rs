//! Diffusion actor-critic: the actor samples a price-scaling distribution by
//! reverse diffusion; twin critics score every action of a state at once.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Agent, ReplayBuffer, TrainLogRow, TrainerConfig};
use crate::diffusion::{
    action_distribution, entropy, sample_action, softmax_rows, DiffusionActor, NoiseSchedule, SampleMode,
};
use crate::env::{action_to_rho, AuctionEnv, MarketState, ObservationEncoder, ScenarioConfig, Transition, OBSERVATION_DIM};
use crate::error::{Error, Result};
use crate::nn::{soft_update, Activation, Adam, Checkpoint, Mlp};

fn adam(net: &Mlp, lr: f64, clip: f64) -> Adam {
    let opt = Adam::new(net, lr);
    if clip > 0.0 {
        opt.with_max_grad_norm(clip)
    } else {
        opt
    }
}

/// Two state-to-action-value networks with target copies. Each network maps
/// a state to the vector `Q(s, a)` over all actions.
#[derive(Debug, Clone)]
pub struct TwinCritics {
    pub online: [Mlp; 2],
    pub target: [Mlp; 2],
    optimisers: [Adam; 2],
}

impl TwinCritics {
    pub fn new<R: rand::Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        learning_rate: f64,
        max_grad_norm: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let q1 = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
        let q2 = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self::from_networks(q1, q2, learning_rate, max_grad_norm))
    }

    pub fn from_networks(q1: Mlp, q2: Mlp, learning_rate: f64, max_grad_norm: f64) -> Self {
        let optimisers = [adam(&q1, learning_rate, max_grad_norm), adam(&q2, learning_rate, max_grad_norm)];
        Self {
            target: [q1.clone(), q2.clone()],
            online: [q1, q2],
            optimisers,
        }
    }

    /// Elementwise `min(Q_1, Q_2)` of the online networks.
    pub fn min_q(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let a = self.online[0].forward_batch(obs)?;
        let b = self.online[1].forward_batch(obs)?;
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|x, y| x.min(*y)))
    }

    pub fn target_values(&self, obs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((self.target[0].forward_batch(obs)?, self.target[1].forward_batch(obs)?))
    }

    /// One gradient step on the mean squared Bellman error of each critic.
    /// Returns the losses before the step.
    pub fn update(&mut self, obs: ArrayView2<f64>, actions: &[usize], targets: &[f64]) -> Result<[f64; 2]> {
        let batch = actions.len();
        if batch == 0 || obs.nrows() != batch || targets.len() != batch {
            return Err(crate::error::domain("critic batch dimensions disagree"));
        }
        let mut losses = [0.0; 2];
        for i in 0..2 {
            let (q, mut tape) = self.online[i].forward_tape(obs)?;
            let mut upstream = Array2::zeros(q.raw_dim());
            let mut loss = 0.0;
            for (b, (&a, &y)) in actions.iter().zip(targets).enumerate() {
                let err = q[[b, a]] - y;
                loss += err * err;
                upstream[[b, a]] = 2.0 * err / batch as f64;
            }
            losses[i] = loss / batch as f64;
            if !losses[i].is_finite() {
                return Err(Error::Diverged(format!("critic {} loss is {}", i + 1, losses[i])));
            }
            let (grads, _) = self.online[i].backward(&mut tape, upstream.view())?;
            self.optimisers[i].step(&mut self.online[i], &grads)?;
        }
        Ok(losses)
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        for i in 0..2 {
            soft_update(&mut self.target[i], &self.online[i], tau)?;
        }
        Ok(())
    }
}

/// `y = r + gamma * sum_a pi'(a|s') * min_i Q'_i(s', a)` per transition.
pub fn bellman_targets(
    rewards: &[f64],
    next_q1: &Array2<f64>,
    next_q2: &Array2<f64>,
    next_policy: &Array2<f64>,
    discount: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .enumerate()
        .map(|(b, r)| {
            let v: f64 = next_policy
                .row(b)
                .iter()
                .zip(next_q1.row(b).iter().zip(next_q2.row(b)))
                .map(|(p, (q1, q2))| p * q1.min(*q2))
                .sum();
            r + discount * v
        })
        .collect()
}

/// Result of one actor step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStats {
    /// Batch mean of `sum_a pi(a|s) (-min Q(s, a)) - temperature * H`.
    pub objective: f64,
    pub entropy: f64,
}

/// Gradient of the batch-mean objective
/// `sum_a pi_a * cost_a - temperature * H(pi)` with respect to the logits.
pub fn policy_logit_gradient(policy: &Array2<f64>, cost: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let batch = policy.nrows() as f64;
    let mut grad = Array2::zeros(policy.raw_dim());
    for ((p, c), mut g) in policy.outer_iter().zip(cost.outer_iter()).zip(grad.outer_iter_mut()) {
        // d/dpi_a of the objective, then through the softmax Jacobian.
        let d: Array1<f64> = ndarray::Zip::from(&p)
            .and(&c)
            .map_collect(|&p, &c| c + temperature * (p.max(f64::MIN_POSITIVE).ln() + 1.0));
        let mean = p.dot(&d);
        ndarray::Zip::from(&mut g)
            .and(&p)
            .and(&d)
            .for_each(|g, &p, &d| *g = p * (d - mean) / batch);
    }
    grad
}

/// One gradient step on the entropy-regularised actor objective, with the
/// action expectation taken exactly over the discrete action set.
pub fn actor_update<R: rand::Rng + ?Sized>(
    actor: &mut DiffusionActor,
    optimiser: &mut Adam,
    critics: &TwinCritics,
    obs: ArrayView2<f64>,
    temperature: f64,
    rng: &mut R,
) -> Result<ActorStats> {
    let (x0, trace) = actor.denoise_batch(obs, rng, true)?;
    let policy = softmax_rows(&x0);
    let cost = -critics.min_q(obs)?;
    let batch = obs.nrows() as f64;
    let mut ent = 0.0;
    let mut expected = 0.0;
    for (p, c) in policy.outer_iter().zip(cost.outer_iter()) {
        ent += entropy(p.as_slice().unwrap_or(&p.to_vec()));
        expected += p.dot(&c);
    }
    let stats = ActorStats {
        objective: (expected - temperature * ent) / batch,
        entropy: ent / batch,
    };
    if !stats.objective.is_finite() {
        return Err(Error::Diverged(format!("actor objective is {}", stats.objective)));
    }
    let grad = policy_logit_gradient(&policy, &cost, temperature);
    let mut trace = trace.expect("recorded");
    let grads = actor.backward(&mut trace, grad.view())?;
    optimiser.step(&mut actor.denoiser, &grads)?;
    Ok(stats)
}

/// Frozen diffusion policy with its observation encoder.
#[derive(Debug, Clone)]
pub struct DmsbAgent {
    pub actor: DiffusionActor,
    pub encoder: ObservationEncoder,
    pub mode: SampleMode,
    rng: ChaCha8Rng,
}

impl DmsbAgent {
    pub fn new(actor: DiffusionActor, encoder: ObservationEncoder, mode: SampleMode, seed: u64) -> Self {
        Self {
            actor,
            encoder,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn policy(&mut self, state: &MarketState) -> Result<Vec<f64>> {
        let obs = self.encoder.encode(state);
        self.actor.policy(&obs, &mut self.rng)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut vectors = self.encoder.to_vectors();
        vectors.push(("schedule_eta".into(), (1..=self.actor.schedule().steps()).map(|k| self.actor.schedule().eta(k)).collect()));
        vectors.push(("output_bound".into(), self.actor.output_bound().into_iter().collect()));
        Checkpoint {
            networks: vec![("denoiser".into(), self.actor.denoiser.clone())],
            vectors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, mode: SampleMode, seed: u64) -> Result<Self> {
        let denoiser = ckpt.network("denoiser")?.clone();
        let schedule = NoiseSchedule::new(ckpt.vector("schedule_eta")?.to_vec())?;
        let encoder = ObservationEncoder::from_vectors(ckpt)?;
        let action_dim = denoiser.output_dim();
        let obs_dim = denoiser
            .input_dim()
            .checked_sub(action_dim + DiffusionActor::EMBED_DIM)
            .ok_or_else(|| Error::Checkpoint("denoiser input too small".into()))?;
        let bound = ckpt.vector("output_bound").ok().and_then(|v| v.first().copied());
        let actor = DiffusionActor::from_denoiser(denoiser, schedule, obs_dim, action_dim)?.with_output_bound(bound)?;
        Ok(Self::new(actor, encoder, mode, seed))
    }
}

impl Agent for DmsbAgent {
    fn name(&self) -> &'static str {
        "diffusion"
    }

    fn act(&mut self, state: &MarketState) -> Result<usize> {
        let p = self.policy(state)?;
        Ok(sample_action(&p, &mut self.rng, self.mode))
    }
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub agent: DmsbAgent,
    pub critics: TwinCritics,
    pub log: Vec<TrainLogRow>,
    /// Parameter updates performed.
    pub updates: usize,
    /// Rewards are divided by this before entering the critics.
    pub reward_scale: f64,
}

pub(crate) fn encode_batch<'a>(
    encoder: &ObservationEncoder,
    states: impl Iterator<Item = &'a MarketState>,
    rows: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((rows, OBSERVATION_DIM));
    for (mut row, s) in out.axis_iter_mut(Axis(0)).zip(states) {
        row.assign(&Array1::from(encoder.encode(s)));
    }
    out
}

/// Runs the diffusion actor-critic loop for `episodes * iterations` rounds:
/// act by reverse diffusion, store the transition, then (once warm) update
/// the actor, the twin critics and both target networks every round.
pub fn train(scenario: &ScenarioConfig, config: &TrainerConfig) -> Result<TrainingRun> {
    config.validate()?;
    let scenario = ScenarioConfig {
        episode_length: config.iterations_per_episode,
        ..scenario.clone()
    };
    let mut env = AuctionEnv::new(scenario.clone())?;
    let actions = scenario.action_space_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let schedule = NoiseSchedule::linear(config.diffusion_steps, config.eta_start, config.eta_end)?;
    let bound = (config.output_bound > 0.0).then_some(config.output_bound);
    let mut actor =
        DiffusionActor::new(OBSERVATION_DIM, actions, &config.hidden, schedule, &mut rng)?.with_output_bound(bound)?;
    let mut target_actor = actor.clone();
    let mut actor_opt = adam(&actor.denoiser, config.learning_rate, config.max_grad_norm);
    let mut critics = TwinCritics::new(
        OBSERVATION_DIM,
        actions,
        &config.hidden,
        config.learning_rate,
        config.max_grad_norm,
        &mut rng,
    )?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    // Encoded (state, next state) per buffer slot, once statistics are frozen.
    let mut cache: Vec<Option<[Vec<f64>; 2]>> = Vec::new();
    let mut encoder = ObservationEncoder::new();
    let mut reward_scale = 1.0;
    let mut abs_reward = 0.0;
    let mut updates = 0;
    let mut log = Vec::with_capacity(config.total_steps());

    for step in 0..config.total_steps() {
        if step == config.warmup {
            encoder.freeze();
            if step > 0 && abs_reward > 0.0 {
                reward_scale = abs_reward / step as f64;
            }
        }
        let state = env.state().clone();
        encoder.observe(&state);
        let obs = encoder.encode(&state);
        let p = action_distribution(&actor.reverse_denoise(&obs, &mut rng)?);
        let action = sample_action(&p, &mut rng, SampleMode::Stochastic);
        let rho = action_to_rho(action, actions)?;
        let outcome = env.step(action)?;
        abs_reward += outcome.reward.abs();
        let encoded = encoder.is_frozen().then(|| [obs, encoder.encode(&outcome.next_state)]);
        let slot = buffer.push(Transition {
            state,
            action,
            next_state: outcome.next_state,
            reward: outcome.reward,
        });
        if slot == cache.len() {
            cache.push(encoded);
        } else {
            cache[slot] = encoded;
        }

        let mut row = TrainLogRow {
            step,
            reward: outcome.reward,
            actor_loss: None,
            critic1_loss: None,
            critic2_loss: None,
            entropy: entropy(&p),
            rho,
        };
        if encoder.is_frozen() && buffer.len() >= config.batch_size {
            let slots = buffer.sample_indices(config.batch_size, &mut rng)?;
            let n = slots.len();
            let mut obs = Array2::zeros((n, OBSERVATION_DIM));
            let mut next_obs = Array2::zeros((n, OBSERVATION_DIM));
            let mut acts = Vec::with_capacity(n);
            let mut rewards = Vec::with_capacity(n);
            for (row, &slot) in slots.iter().enumerate() {
                let t = buffer.get(slot).expect("sampled slot is filled");
                // Transitions stored before the statistics froze are encoded on first use.
                let pair = cache[slot].get_or_insert_with(|| [encoder.encode(&t.state), encoder.encode(&t.next_state)]);
                obs.row_mut(row).assign(&ArrayView1::from(&pair[0]));
                next_obs.row_mut(row).assign(&ArrayView1::from(&pair[1]));
                acts.push(t.action);
                rewards.push(t.reward / reward_scale);
            }

            let stats = actor_update(&mut actor, &mut actor_opt, &critics, obs.view(), config.temperature, &mut rng)
                .map_err(|e| diverged(step, e))?;

            let (next_x0, _) = target_actor.denoise_batch(next_obs.view(), &mut rng, false)?;
            let next_policy = softmax_rows(&next_x0);
            let (q1, q2) = critics.target_values(next_obs.view())?;
            let targets = bellman_targets(&rewards, &q1, &q2, &next_policy, config.discount);
            let losses = critics.update(obs.view(), &acts, &targets).map_err(|e| diverged(step, e))?;

            soft_update(&mut target_actor.denoiser, &actor.denoiser, config.soft_update)?;
            critics.soft_update(config.soft_update)?;
            updates += 1;
            row.actor_loss = Some(stats.objective);
            row.critic1_loss = Some(losses[0]);
            row.critic2_loss = Some(losses[1]);
        }
        log.push(row);
    }

    Ok(TrainingRun {
        agent: DmsbAgent::new(actor, encoder, SampleMode::Greedy, config.seed ^ 0x5eed),
        critics,
        log,
        updates,
        reward_scale,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::Diverged(msg) => Error::Diverged(format!("step {step}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn constant_net(inputs: usize, values: &[f64]) -> Mlp {
        Mlp::from_parameters(
            vec![Array2::zeros((inputs, values.len()))],
            vec![Array1::from(values.to_vec())],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn bellman_examples() {
        let q = Array2::from_elem((2, 3), 3.0);
        let pi = Array2::from_elem((2, 3), 1.0 / 3.0);
        let y = bellman_targets(&[1.0, 2.0], &q, &q, &pi, 0.5);
        assert_relative_eq!(y[0], 2.5, epsilon = 1e-15);
        assert_relative_eq!(y[1], 3.5, epsilon = 1e-15);
        assert_eq!(bellman_targets(&[1.0, 2.0], &q, &q, &pi, 0.0), vec![1.0, 2.0]);
        // The smaller critic is used per action.
        let q2 = array![[1.0, 5.0, 3.0], [3.0, 3.0, 3.0]];
        let y = bellman_targets(&[0.0, 0.0], &q, &q2, &pi, 1.0);
        assert_relative_eq!(y[0], 7.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn critic_at_target_does_not_move() {
        let q = constant_net(3, &[2.0, 4.0]);
        let mut critics = TwinCritics::from_networks(q.clone(), q.clone(), 1e-2, 0.0);
        let obs = Array2::from_elem((2, 3), 0.5);
        let losses = critics.update(obs.view(), &[0, 1], &[2.0, 4.0]).unwrap();
        assert_eq!(losses, [0.0, 0.0]);
        assert_eq!(critics.online[0], q);
        assert_eq!(critics.online[1], q);
    }

    #[test]
    fn critic_descends_on_a_quadratic() {
        let q = Mlp::from_parameters(
            vec![array![[0.5, -0.2], [0.1, 0.3]]],
            vec![array![0.0, 0.0]],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        let mut critics = TwinCritics::from_networks(q.clone(), q, 1e-4, 0.0);
        let obs = array![[1.0, 2.0]];
        let first = critics.update(obs.view(), &[0], &[3.0]).unwrap()[0];
        assert_relative_eq!(first, (0.7f64 - 3.0).powi(2), epsilon = 1e-12);
        let mut last = first;
        for _ in 0..100 {
            let loss = critics.update(obs.view(), &[0], &[3.0]).unwrap();
            assert!(loss[0] >= 0.0 && loss[0] <= last);
            last = loss[0];
        }
        assert!(last < first);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let logits = array![[0.3, -0.2, 1.1], [0.0, 0.5, -0.7]];
        let cost = array![[1.0, -2.0, 0.5], [0.2, 0.1, -0.3]];
        let temperature = 0.3;
        let objective = |x: &Array2<f64>| {
            let p = softmax_rows(x);
            let mut total = 0.0;
            for (p, c) in p.outer_iter().zip(cost.outer_iter()) {
                total += p.dot(&c) - temperature * entropy(&p.to_vec());
            }
            total / 2.0
        };
        let g = policy_logit_gradient(&softmax_rows(&logits), &cost, temperature);
        for i in 0..2 {
            for j in 0..3 {
                let mut up = logits.clone();
                up[[i, j]] += 1e-6;
                let mut down = logits.clone();
                down[[i, j]] -= 1e-6;
                assert_relative_eq!(g[[i, j]], (objective(&up) - objective(&down)) / 2e-6, epsilon = 1e-8);
            }
        }
    }

    fn tiny_actor(action_dim: usize, seed: u64) -> DiffusionActor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DiffusionActor::new(2, action_dim, &[8], NoiseSchedule::linear(2, 1e-3, 1e-2).unwrap(), &mut r).unwrap()
    }

    fn mean_policy(actor: &DiffusionActor, obs: &Array2<f64>, seed: u64) -> Array1<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (x0, _) = actor.denoise_batch(obs.view(), &mut r, false).unwrap();
        softmax_rows(&x0).mean_axis(Axis(0)).unwrap()
    }

    #[test]
    fn actor_moves_towards_better_action() {
        let mut actor = tiny_actor(2, 1);
        let critics = TwinCritics::from_networks(constant_net(2, &[1.0, 0.0]), constant_net(2, &[1.0, 0.0]), 1e-3, 0.0);
        let obs = Array2::from_elem((64, 2), 0.3);
        let before = mean_policy(&actor, &obs, 9)[0];
        let mut opt = Adam::new(&actor.denoiser, 1e-3);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            actor_update(&mut actor, &mut opt, &critics, obs.view(), 0.0, &mut r).unwrap();
        }
        assert!(mean_policy(&actor, &obs, 9)[0] > before);
    }

    #[test]
    fn flat_critics_raise_entropy() {
        let mut actor = tiny_actor(5, 3);
        // Push the actor away from uniform first.
        actor.denoiser.biases_mut()[1][0] += 2.0;
        let critics = TwinCritics::from_networks(constant_net(2, &[1.0; 5]), constant_net(2, &[1.0; 5]), 1e-3, 0.0);
        let obs = Array2::from_elem((64, 2), -0.1);
        let h = |a: &DiffusionActor| entropy(&mean_policy(a, &obs, 4).to_vec());
        let before = h(&actor);
        let mut opt = Adam::new(&actor.denoiser, 1e-3);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            actor_update(&mut actor, &mut opt, &critics, obs.view(), 1.0, &mut r).unwrap();
        }
        assert!(h(&actor) > before);
    }

    #[test]
    fn single_step_run_makes_no_update() {
        let cfg = TrainerConfig {
            episodes: 1,
            iterations_per_episode: 1,
            warmup: 0,
            ..Default::default()
        };
        let run = train(&ScenarioConfig::default(), &cfg).unwrap();
        assert_eq!(run.log.len(), 1);
        assert_eq!(run.updates, 0);
        assert!(run.log[0].actor_loss.is_none());
    }

    #[test]
    fn short_training_is_reproducible() {
        let cfg = TrainerConfig {
            episodes: 3,
            iterations_per_episode: 40,
            warmup: 40,
            batch_size: 16,
            hidden: vec![16],
            seed: 3,
            ..Default::default()
        };
        let a = train(&ScenarioConfig::default(), &cfg).unwrap();
        let b = train(&ScenarioConfig::default(), &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.updates, 80);
        assert_eq!(a.agent.actor, b.agent.actor);
        assert!(a.log.iter().all(|r| r.entropy >= 0.0 && r.entropy <= 20f64.ln() + 1e-12));
    }

    #[test]
    fn checkpoint_restores_policy() {
        let cfg = TrainerConfig {
            episodes: 1,
            iterations_per_episode: 30,
            warmup: 20,
            batch_size: 8,
            hidden: vec![8],
            ..Default::default()
        };
        let run = train(&ScenarioConfig::default(), &cfg).unwrap();
        let mut bytes = Vec::new();
        run.agent.checkpoint().write_to(&mut bytes).unwrap();
        let ckpt = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut restored = DmsbAgent::from_checkpoint(&ckpt, SampleMode::Greedy, 1).unwrap();
        let mut original = run.agent.clone();
        original.reseed(1);
        let env = AuctionEnv::new(ScenarioConfig::default()).unwrap();
        assert_eq!(original.policy(env.state()).unwrap(), restored.policy(env.state()).unwrap());
    }
}
