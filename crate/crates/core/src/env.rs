//! Auction environment: scenario sampling, per-provider histories, state
//! encoding and the step function that clears one MSB round per action.
//!
//! Market dynamics never depend on the chosen action, so two environments
//! built from the same config and seed see the same sequence of rounds no
//! matter which mechanism clears them. Experiments rely on this to compare
//! mechanisms on common random numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{
    bid_grid, msb, uav_contracted_bid, validate_weights, AuctionOutcome, BidVector, ContractedBid,
    Mechanism, SurplusWeights,
};
use crate::error::{domain, ensure_positive, Error, Result};
use crate::nn::Checkpoint;
use crate::market::{
    common_value, matching_value, sample_accuracy, total_latency, ProviderHistory, ResourceProvider, ValuationParams, VtTask,
};

/// Largest supported number of ground base stations.
pub const MAX_BS: usize = 9;
/// Provider slots in an encoded state (UAV plus [`MAX_BS`]).
pub const MAX_PROVIDERS: usize = MAX_BS + 1;
/// Encoded quantities per provider slot.
pub const FEATURES_PER_PROVIDER: usize = 8;
/// Length of [`MarketState::market_features`].
pub const MARKET_FEATURE_DIM: usize = MAX_PROVIDERS * FEATURES_PER_PROVIDER + 1;
/// Bid summaries appended by the encoder: log of the top base-station bid,
/// of its best competing bid, their difference, and the log ratio of the
/// UAV's estimated value to the top bid.
pub const BID_SUMMARY_DIM: usize = 4;
/// Encoded quantities that are normalised (everything except the mask).
const SCALED_DIM: usize = MARKET_FEATURE_DIM + MAX_PROVIDERS + BID_SUMMARY_DIM;
/// Length of the vector produced by [`ObservationEncoder::encode`].
pub const OBSERVATION_DIM: usize = SCALED_DIM + MAX_PROVIDERS;

const BITS_PER_MB: f64 = 8.0e6;
const HZ_PER_MHZ: f64 = 1.0e6;

/// Scenario parameters. Serialised as a TOML table; every field has a
/// default, see `configs/defaults.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Ground base stations per round (`1..=9`).
    pub num_bs: usize,
    /// Task input size range in megabytes (`1 MB = 8e6 bits`).
    pub task_size_mb: [f64; 2],
    /// Uplink and downlink bandwidth range in MHz.
    pub bandwidth_mhz: [f64; 2],
    /// GPU and CPU efficiency are drawn from
    /// `[min_compute_units, max_compute_units]`.
    pub max_compute_units: f64,
    pub min_compute_units: f64,
    /// Cycles per second in one compute unit.
    pub compute_unit_hz: f64,
    /// GPU cycles needed per input bit.
    pub gpu_per_bit: f64,
    /// Transmit power range for providers and vehicles.
    pub power_range: [f64; 2],
    /// Noise power at receivers.
    pub noise_power: f64,
    /// Channel gain range, redrawn per provider each episode.
    pub channel_gain_range: [f64; 2],
    /// Range of the per-episode mean accuracy of each base station.
    pub bs_accuracy_range: [f64; 2],
    /// Range of the per-episode mean accuracy of the UAV.
    pub uav_accuracy_range: [f64; 2],
    /// Beta concentration of per-task accuracy around its mean.
    pub accuracy_concentration: f64,
    pub pixel_count: usize,
    pub omega1: f64,
    pub omega2: f64,
    /// Accuracy sensitivity exponent.
    pub beta: f64,
    /// Rounds the valuation expectations average over.
    pub history_window: usize,
    /// Weight on the UAV's surplus in the reward.
    pub zeta: f64,
    /// Past rounds used to set the UAV's contracted bid.
    pub contract_window: usize,
    /// Grid resolution of the contracted-bid search.
    pub contract_grid_points: usize,
    /// Rounds per episode.
    pub episode_length: usize,
    /// Number of discrete price scaling factors.
    pub action_space_size: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_bs: 5,
            task_size_mb: [20.0, 40.0],
            bandwidth_mhz: [20.0, 60.0],
            max_compute_units: 2.0,
            min_compute_units: 0.5,
            compute_unit_hz: 1.0e9,
            gpu_per_bit: 0.5,
            power_range: [1.0, 10.0],
            noise_power: 1.0,
            channel_gain_range: [0.5, 1.0],
            bs_accuracy_range: [0.6, 0.9],
            uav_accuracy_range: [0.6, 0.9],
            accuracy_concentration: 20.0,
            pixel_count: 1024,
            omega1: 1.0,
            omega2: 1.0,
            beta: 2.0,
            history_window: 10,
            zeta: 1.0,
            contract_window: 100,
            contract_grid_points: 1000,
            episode_length: 100,
            action_space_size: 20,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    ensure_positive(name, r[0])?;
    ensure_positive(name, r[1])?;
    if r[0] > r[1] {
        return Err(Error::Config(format!("{name}: min {} exceeds max {}", r[0], r[1])));
    }
    Ok(())
}

fn check_unit_range(name: &str, r: [f64; 2]) -> Result<()> {
    check_range(name, r)?;
    if r[1] >= 1.0 {
        return Err(Error::Config(format!("{name} must stay below 1")));
    }
    Ok(())
}

/// Natural log for positive inputs, zero otherwise (padding slots).
fn log_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        0.0
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // Still draw so the stream does not depend on whether ranges collapse.
        let _: f64 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BS).contains(&self.num_bs) {
            return Err(Error::Config(format!("num_bs must be in 1..={MAX_BS}, got {}", self.num_bs)));
        }
        check_range("task_size_mb", self.task_size_mb)?;
        check_range("bandwidth_mhz", self.bandwidth_mhz)?;
        check_range("compute units", [self.min_compute_units, self.max_compute_units])?;
        ensure_positive("compute_unit_hz", self.compute_unit_hz)?;
        ensure_positive("gpu_per_bit", self.gpu_per_bit)?;
        check_range("power_range", self.power_range)?;
        ensure_positive("noise_power", self.noise_power)?;
        check_range("channel_gain_range", self.channel_gain_range)?;
        check_unit_range("bs_accuracy_range", self.bs_accuracy_range)?;
        check_unit_range("uav_accuracy_range", self.uav_accuracy_range)?;
        ensure_positive("accuracy_concentration", self.accuracy_concentration)?;
        if self.pixel_count == 0 {
            return Err(Error::Config("pixel_count must be >= 1".into()));
        }
        self.valuation_params().validate()?;
        validate_weights(&self.weights())?;
        if self.contract_window == 0 || self.contract_grid_points < 2 {
            return Err(Error::Config("contract window and grid must be non-trivial".into()));
        }
        if self.episode_length == 0 || self.action_space_size == 0 {
            return Err(Error::Config("episode_length and action_space_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn valuation_params(&self) -> ValuationParams {
        ValuationParams {
            omega1: self.omega1,
            omega2: self.omega2,
            beta: self.beta,
            history_window: self.history_window,
        }
    }

    pub fn weights(&self) -> SurplusWeights {
        SurplusWeights { zeta: self.zeta }
    }

    pub fn num_providers(&self) -> usize {
        self.num_bs + 1
    }
}

/// `rho = 10^(a / |A|)`, in `[1, 10)`.
pub fn action_to_rho(action: usize, action_space_size: usize) -> Result<f64> {
    if action >= action_space_size {
        return Err(domain(format!(
            "action {action} outside 0..{action_space_size}"
        )));
    }
    Ok(10f64.powf(action as f64 / action_space_size as f64))
}

/// Per-provider quantities carried in the encoded state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProviderFeatures {
    pub uplink_bandwidth: f64,
    pub downlink_bandwidth: f64,
    pub gpu_efficiency: f64,
    pub cpu_efficiency: f64,
    pub mean_latency: f64,
    pub mean_accuracy: f64,
    /// Windowed common value `mean(omega1 / T)`.
    pub common_value: f64,
    /// Windowed matching value `mean(omega2 / (1 - R)^beta)`.
    pub matching_value: f64,
}

/// Decoded market conditions of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketFeatures {
    pub providers: Vec<ProviderFeatures>,
    /// Task input size in bits.
    pub task_size: f64,
}

impl MarketFeatures {
    pub fn encode(&self) -> Result<Vec<f64>> {
        if self.providers.is_empty() || self.providers.len() > MAX_PROVIDERS {
            return Err(domain(format!("{} providers do not fit the state", self.providers.len())));
        }
        let mut out = vec![0.0; MARKET_FEATURE_DIM];
        for (slot, p) in self.providers.iter().enumerate() {
            let base = slot * FEATURES_PER_PROVIDER;
            out[base..base + FEATURES_PER_PROVIDER].copy_from_slice(&[
                p.uplink_bandwidth,
                p.downlink_bandwidth,
                p.gpu_efficiency,
                p.cpu_efficiency,
                p.mean_latency,
                p.mean_accuracy,
                p.common_value,
                p.matching_value,
            ]);
        }
        out[MARKET_FEATURE_DIM - 1] = self.task_size;
        Ok(out)
    }

    pub fn decode(features: &[f64], providers: usize) -> Result<Self> {
        if features.len() != MARKET_FEATURE_DIM || providers == 0 || providers > MAX_PROVIDERS {
            return Err(domain("malformed market feature vector"));
        }
        let providers = (0..providers)
            .map(|slot| {
                let f = &features[slot * FEATURES_PER_PROVIDER..(slot + 1) * FEATURES_PER_PROVIDER];
                ProviderFeatures {
                    uplink_bandwidth: f[0],
                    downlink_bandwidth: f[1],
                    gpu_efficiency: f[2],
                    cpu_efficiency: f[3],
                    mean_latency: f[4],
                    mean_accuracy: f[5],
                    common_value: f[6],
                    matching_value: f[7],
                }
            })
            .collect();
        Ok(Self {
            providers,
            task_size: features[MARKET_FEATURE_DIM - 1],
        })
    }
}

/// MDP observation: market conditions plus the bid vector, padded to
/// [`MAX_PROVIDERS`] slots. Slot 0 is the UAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub market_features: Vec<f64>,
    pub bids: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MarketState {
    pub fn num_providers(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn features(&self) -> Result<MarketFeatures> {
        MarketFeatures::decode(&self.market_features, self.num_providers())
    }

    /// The unpadded bid vector.
    pub fn bid_vector(&self) -> Result<BidVector> {
        let n = self.num_providers();
        if n < 2 {
            return Err(domain("state carries fewer than two providers"));
        }
        BidVector::new(self.bids[0], self.bids[1..n].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: MarketState,
    pub action: usize,
    pub next_state: MarketState,
    pub reward: f64,
}

/// One sampled auction round.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub providers: Vec<ResourceProvider>,
    pub task: VtTask,
    /// This round's latency of every provider, seconds.
    pub latencies: Vec<f64>,
    /// This round's sampled accuracy of every provider.
    pub accuracies: Vec<f64>,
    /// Valuation `v_n` of every provider.
    pub valuations: Vec<f64>,
    pub bids: BidVector,
    pub contracted: ContractedBid,
    pub state: MarketState,
}

/// Quantities fixed for one episode.
#[derive(Debug, Clone, PartialEq)]
struct EpisodeParams {
    channel_gain: Vec<f64>,
    accuracy_mean: Vec<f64>,
}

/// Per-episode market memory: provider histories and the UAV's record of
/// past `(v_max, v_0)` pairs.
#[derive(Debug, Clone)]
struct Market {
    config: ScenarioConfig,
    params: EpisodeParams,
    histories: Vec<ProviderHistory>,
    contract_vmax: Vec<f64>,
    contract_v0: Vec<f64>,
}

impl Market {
    fn new<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Self> {
        let n = config.num_providers();
        let channel_gain = (0..n).map(|_| uniform(rng, config.channel_gain_range)).collect();
        let accuracy_mean = (0..n)
            .map(|id| {
                let range = if id == 0 { config.uav_accuracy_range } else { config.bs_accuracy_range };
                uniform(rng, range)
            })
            .collect();
        let mut market = Self {
            config: config.clone(),
            params: EpisodeParams {
                channel_gain,
                accuracy_mean,
            },
            histories: (0..n).map(|_| ProviderHistory::new(config.history_window)).collect(),
            contract_vmax: Vec::new(),
            contract_v0: Vec::new(),
        };
        // Bootstrap round: seeds every history and the UAV's contract record.
        let (_, _, latencies, accuracies) = market.sample_conditions(rng)?;
        let valuations = market.observe(&latencies, &accuracies)?;
        market.record_contract(&valuations);
        Ok(market)
    }

    fn sample_conditions<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<(Vec<ResourceProvider>, VtTask, Vec<f64>, Vec<f64>)> {
        let cfg = &self.config;
        let n = cfg.num_providers();
        let size = uniform(rng, cfg.task_size_mb) * BITS_PER_MB;
        let task = VtTask {
            input_size: size,
            output_size: size,
            pixel_count: cfg.pixel_count,
            user_tx_power: uniform(rng, cfg.power_range),
            user_noise: cfg.noise_power,
            channel_gain: self.params.channel_gain.clone(),
        };
        let compute = [cfg.min_compute_units, cfg.max_compute_units];
        let mut providers = Vec::with_capacity(n);
        let mut latencies = Vec::with_capacity(n);
        let mut accuracies = Vec::with_capacity(n);
        for id in 0..n {
            let p = ResourceProvider {
                id,
                uplink_bandwidth: uniform(rng, cfg.bandwidth_mhz) * HZ_PER_MHZ,
                downlink_bandwidth: uniform(rng, cfg.bandwidth_mhz) * HZ_PER_MHZ,
                gpu_efficiency: uniform(rng, compute) * cfg.compute_unit_hz,
                cpu_efficiency: uniform(rng, compute) * cfg.compute_unit_hz,
                tx_power: uniform(rng, cfg.power_range),
                noise_power: cfg.noise_power,
                accuracy_mean: self.params.accuracy_mean[id],
            };
            p.validate()?;
            let latency = total_latency(&task, &p, cfg.gpu_per_bit)?
                .seconds()
                .ok_or_else(|| domain(format!("provider {id} is unreachable")))?;
            latencies.push(latency);
            accuracies.push(sample_accuracy(p.accuracy_mean, cfg.accuracy_concentration, rng)?);
            providers.push(p);
        }
        task.validate()?;
        Ok((providers, task, latencies, accuracies))
    }

    fn observe(&mut self, latencies: &[f64], accuracies: &[f64]) -> Result<Vec<f64>> {
        let params = self.config.valuation_params();
        self.histories
            .iter_mut()
            .zip(latencies.iter().zip(accuracies))
            .map(|(h, (&t, &r))| {
                h.push(t, r)?;
                h.valuation(&params)
            })
            .collect()
    }

    fn record_contract(&mut self, valuations: &[f64]) {
        let vmax = valuations[1..].iter().copied().fold(0.0, f64::max);
        self.contract_vmax.push(vmax);
        self.contract_v0.push(valuations[0]);
        let window = self.config.contract_window;
        if self.contract_vmax.len() > window {
            let drop = self.contract_vmax.len() - window;
            self.contract_vmax.drain(..drop);
            self.contract_v0.drain(..drop);
        }
    }

    fn contracted_bid(&self) -> Result<ContractedBid> {
        let top = self.contract_vmax.iter().copied().fold(0.0, f64::max);
        let grid = bid_grid(top, self.config.contract_grid_points);
        uav_contracted_bid(&self.contract_vmax, &self.contract_v0, &grid)
    }

    fn next_round<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Round> {
        let contracted = self.contracted_bid()?;
        let (providers, task, latencies, accuracies) = self.sample_conditions(rng)?;
        let valuations = self.observe(&latencies, &accuracies)?;
        self.record_contract(&valuations);
        let bids = BidVector::new(contracted.bid, valuations[1..].to_vec())?;
        let state = self.encode_state(&providers, &task, &bids)?;
        Ok(Round {
            providers,
            task,
            latencies,
            accuracies,
            valuations,
            bids,
            contracted,
            state,
        })
    }

    fn encode_state(&self, providers: &[ResourceProvider], task: &VtTask, bids: &BidVector) -> Result<MarketState> {
        let params = self.config.valuation_params();
        let features = MarketFeatures {
            providers: providers
                .iter()
                .zip(&self.histories)
                .map(|(p, h)| {
                    Ok(ProviderFeatures {
                        uplink_bandwidth: p.uplink_bandwidth,
                        downlink_bandwidth: p.downlink_bandwidth,
                        gpu_efficiency: p.gpu_efficiency,
                        cpu_efficiency: p.cpu_efficiency,
                        mean_latency: h.mean_latency(),
                        mean_accuracy: h.mean_accuracy(),
                        common_value: common_value(&h.latencies(), &params)?,
                        matching_value: matching_value(&h.accuracies(), &params)?,
                    })
                })
                .collect::<Result<_>>()?,
            task_size: task.input_size,
        };
        let mut padded = bids.to_vec();
        let n = padded.len();
        padded.resize(MAX_PROVIDERS, 0.0);
        Ok(MarketState {
            market_features: features.encode()?,
            bids: padded,
            mask: (0..MAX_PROVIDERS).map(|i| i < n).collect(),
        })
    }
}

/// Samples a fresh market (one bootstrap round) and returns its first
/// auction round.
pub fn generate_round<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Round> {
    config.validate()?;
    Market::new(config, rng)?.next_round(rng)
}

/// Result of clearing one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub rho: Option<f64>,
    pub outcome: AuctionOutcome,
    pub reward: f64,
    /// Latency of the task on the winning provider, seconds.
    pub latency: f64,
    pub next_state: MarketState,
    /// The round just cleared ended its episode.
    pub episode_end: bool,
}

/// The auction MDP. Single-threaded; construct one per worker.
#[derive(Debug, Clone)]
pub struct AuctionEnv {
    config: ScenarioConfig,
    rng: ChaCha8Rng,
    market: Market,
    round: Round,
    round_in_episode: usize,
    episodes: usize,
}

impl AuctionEnv {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut market = Market::new(&config, &mut rng)?;
        let round = market.next_round(&mut rng)?;
        Ok(Self {
            config,
            rng,
            market,
            round,
            round_in_episode: 0,
            episodes: 0,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn state(&self) -> &MarketState {
        &self.round.state
    }

    pub fn round(&self) -> &Round {
        &self.round
    }

    pub fn episodes_completed(&self) -> usize {
        self.episodes
    }

    /// Starts a new episode: new channel gains and accuracy profiles, fresh
    /// histories.
    pub fn reset(&mut self) -> Result<&MarketState> {
        self.market = Market::new(&self.config, &mut self.rng)?;
        self.round = self.market.next_round(&mut self.rng)?;
        self.round_in_episode = 0;
        Ok(&self.round.state)
    }

    /// Clears the current round with MSB at `rho = 10^(a/|A|)`.
    pub fn step(&mut self, action: usize) -> Result<Step> {
        let rho = action_to_rho(action, self.config.action_space_size)?;
        self.step_with(Mechanism::Msb { rho })
    }

    /// Clears the current round with an arbitrary mechanism and advances.
    pub fn step_with(&mut self, mechanism: Mechanism) -> Result<Step> {
        let outcome = mechanism
            .run(&self.round.bids)?
            .with_surplus(&self.round.valuations, self.config.weights())?;
        outcome.check_feasible()?;
        let reward = outcome.total_surplus();
        if !reward.is_finite() {
            return Err(domain(format!("non-finite reward {reward}")));
        }
        let latency = self.round.latencies[outcome.winner];
        let rho = match mechanism {
            Mechanism::Msb { rho } => Some(rho),
            Mechanism::Spa => None,
        };

        self.round_in_episode += 1;
        let episode_end = self.round_in_episode == self.config.episode_length;
        if episode_end {
            self.episodes += 1;
            self.reset()?;
        } else {
            self.round = self.market.next_round(&mut self.rng)?;
        }
        Ok(Step {
            rho,
            outcome,
            reward,
            latency,
            next_state: self.round.state.clone(),
            episode_end,
        })
    }

    /// Realised surplus of MSB at `rho` on the current round, without
    /// advancing.
    pub fn preview_msb(&self, rho: f64) -> Result<AuctionOutcome> {
        msb(&self.round.bids, rho)?.with_surplus(&self.round.valuations, self.config.weights())
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self, i: usize) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2[i] / (self.count - 1.0)).sqrt()
        }
    }
}

/// Turns a [`MarketState`] into a network input: log-scaled positive
/// quantities, standardised with running statistics, plus the slot mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEncoder {
    stats: RunningStats,
    frozen: bool,
}

impl Default for ObservationEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ObservationEncoder {
    pub fn new() -> Self {
        Self {
            stats: RunningStats::new(SCALED_DIM),
            frozen: false,
        }
    }

    fn transform(state: &MarketState) -> Vec<f64> {
        let mut raw = Vec::with_capacity(SCALED_DIM);
        for (i, &x) in state.market_features.iter().enumerate() {
            let is_accuracy = i < MARKET_FEATURE_DIM - 1 && i % FEATURES_PER_PROVIDER == 5;
            raw.push(if is_accuracy { x } else { log_or_zero(x) });
        }
        raw.extend(state.bids.iter().map(|&b| log_or_zero(b)));

        let (mut top, mut second) = (0.0f64, 0.0f64);
        for (&b, _) in state.bids.iter().zip(&state.mask).skip(1).filter(|(_, &m)| m) {
            if b > top {
                second = top;
                top = b;
            } else if b > second {
                second = b;
            }
        }
        let top = log_or_zero(top);
        let rival = log_or_zero(second.max(state.bids[0]));
        let uav_value = log_or_zero(state.market_features[6] * state.market_features[7]);
        raw.extend([top, rival, top - rival, uav_value - top]);
        raw
    }

    /// Folds `state` into the running statistics unless frozen.
    pub fn observe(&mut self, state: &MarketState) {
        if !self.frozen {
            self.stats.update(&Self::transform(state));
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Named vectors for a [`Checkpoint`].
    pub fn to_vectors(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("encoder_count".into(), vec![self.stats.count, if self.frozen { 1.0 } else { 0.0 }]),
            ("encoder_mean".into(), self.stats.mean.clone()),
            ("encoder_m2".into(), self.stats.m2.clone()),
        ]
    }

    pub fn from_vectors(ckpt: &Checkpoint) -> Result<Self> {
        let header = ckpt.vector("encoder_count")?;
        let mean = ckpt.vector("encoder_mean")?.to_vec();
        let m2 = ckpt.vector("encoder_m2")?.to_vec();
        let dim = SCALED_DIM;
        if header.len() != 2 || mean.len() != dim || m2.len() != dim {
            return Err(Error::Checkpoint("malformed encoder statistics".into()));
        }
        Ok(Self {
            stats: RunningStats {
                count: header[0],
                mean,
                m2,
            },
            frozen: header[1] != 0.0,
        })
    }

    pub fn encode(&self, state: &MarketState) -> Vec<f64> {
        let raw = Self::transform(state);
        let mut out: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let std = self.stats.std(i);
                let z = if std > 1e-8 { (x - self.stats.mean()[i]) / std } else { 0.0 };
                z.clamp(-10.0, 10.0)
            })
            .collect();
        out.extend(state.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        out
    }
}
