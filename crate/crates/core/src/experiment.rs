//! Convergence runs, parameter sweeps and evaluation, with CSV output.
//!
//! Every run is a pure function of its [`ExperimentSpec`]: repetition `r`
//! uses seed `spec.seed + r` for training and a disjoint seed stream for
//! evaluation, so re-running a spec reproduces its CSV byte for byte.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auction::{myopic_rho, BidHistory, Mechanism};
use crate::env::{AuctionEnv, ScenarioConfig};
use crate::error::{Error, Result};
use crate::rl::{train, train_ppo, Agent, DmsbAgent, GreedyAgent, PpoAgent, PpoConfig, RandomAgent, TrainLogRow, TrainerConfig};

pub const RESULTS_SCHEMA: &str = "msb-results v1";
pub const CONVERGENCE_SCHEMA: &str = "msb-convergence v1";

/// Offset between training and evaluation seeds.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    #[serde(rename = "DMSB")]
    Dmsb,
    #[serde(rename = "SPA")]
    Spa,
    #[serde(rename = "MyopicMSB")]
    MyopicMsb,
    #[serde(rename = "OptimalMSB")]
    OptimalMsb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Diffusion,
    Ppo,
    Greedy,
    Random,
}

/// Anything that clears rounds in an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Mechanism(MechanismKind),
    Agent(AgentKind),
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Mechanism(MechanismKind::Dmsb) => "DMSB",
            Method::Mechanism(MechanismKind::Spa) => "SPA",
            Method::Mechanism(MechanismKind::MyopicMsb) => "MyopicMSB",
            Method::Mechanism(MechanismKind::OptimalMsb) => "OptimalMSB",
            Method::Agent(AgentKind::Diffusion) => "diffusion",
            Method::Agent(AgentKind::Ppo) => "ppo",
            Method::Agent(AgentKind::Greedy) => "greedy",
            Method::Agent(AgentKind::Random) => "random",
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let all = [
            Method::Mechanism(MechanismKind::Dmsb),
            Method::Mechanism(MechanismKind::Spa),
            Method::Mechanism(MechanismKind::MyopicMsb),
            Method::Mechanism(MechanismKind::OptimalMsb),
            Method::Agent(AgentKind::Diffusion),
            Method::Agent(AgentKind::Ppo),
            Method::Agent(AgentKind::Greedy),
            Method::Agent(AgentKind::Random),
        ];
        all.into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(label))
            .ok_or_else(|| Error::Config(format!("unknown mechanism or agent '{label}'")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Uplink and downlink bandwidth of every provider, MHz.
    Bandwidth,
    /// Number of ground base stations.
    NumBs,
    /// Task size, MB.
    TaskSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

impl Sweep {
    /// The scenario at one sweep point. Range parameters collapse to the
    /// point value so every round sees exactly that value.
    pub fn apply(&self, base: &ScenarioConfig, value: f64) -> Result<ScenarioConfig> {
        let mut s = base.clone();
        match self.variable {
            SweepVariable::Bandwidth => s.bandwidth_mhz = [value, value],
            SweepVariable::TaskSize => s.task_size_mb = [value, value],
            SweepVariable::NumBs => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("num_bs sweep value {value} is not a positive integer")));
                }
                s.num_bs = value as usize;
            }
        }
        s.validate()?;
        Ok(s)
    }
}

/// A complete experiment description, read from TOML. See
/// `configs/defaults.toml` for a commented example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub mechanisms: Vec<MechanismKind>,
    pub agents: Vec<AgentKind>,
    /// Seeds `seed, seed + 1, ...`.
    pub repetitions: usize,
    pub seed: u64,
    /// Training rounds per learning agent and seed.
    pub train_steps: usize,
    /// Evaluation rounds per sweep point, method and seed.
    pub eval_rounds: usize,
    /// Trailing window for convergence curves.
    pub smoothing_window: usize,
    /// Spacing of rows in the convergence CSV.
    pub log_every: usize,
    pub out_dir: PathBuf,
    pub sweep: Option<Sweep>,
    pub scenario: ScenarioConfig,
    pub trainer: TrainerConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "default".into(),
            mechanisms: vec![MechanismKind::Dmsb, MechanismKind::Spa, MechanismKind::MyopicMsb, MechanismKind::OptimalMsb],
            agents: vec![AgentKind::Diffusion, AgentKind::Ppo, AgentKind::Greedy, AgentKind::Random],
            repetitions: 5,
            seed: 0,
            train_steps: 50_000,
            eval_rounds: 1_000,
            smoothing_window: 1_000,
            log_every: 100,
            out_dir: PathBuf::from("results"),
            sweep: None,
            scenario: ScenarioConfig::default(),
            trainer: TrainerConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty() && self.agents.is_empty() {
            return Err(Error::Config("experiment compares no mechanisms or agents".into()));
        }
        if self.repetitions == 0 || self.eval_rounds == 0 || self.smoothing_window == 0 || self.log_every == 0 {
            return Err(Error::Config("repetitions, eval_rounds, smoothing_window and log_every must be >= 1".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("experiment name must be a plain file stem".into()));
        }
        self.scenario.validate()?;
        self.trainer.validate()?;
        self.ppo.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::Config("sweep has no values".into()));
            }
            for &v in &sweep.values {
                sweep.apply(&self.scenario, v)?;
            }
        }
        Ok(())
    }

    /// Mechanisms followed by agents, without duplicates.
    pub fn methods(&self) -> Vec<Method> {
        let mut seen = BTreeSet::new();
        self.mechanisms
            .iter()
            .map(|&m| Method::Mechanism(m))
            .chain(self.agents.iter().map(|&a| Method::Agent(a)))
            .filter(|m| seen.insert(*m))
            .collect()
    }

    fn needs_diffusion(&self) -> bool {
        self.mechanisms.contains(&MechanismKind::Dmsb) || self.agents.contains(&AgentKind::Diffusion)
    }

    fn needs_ppo(&self) -> bool {
        self.agents.contains(&AgentKind::Ppo)
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repetitions as u64).map(move |r| self.seed + r)
    }

    fn training_scenario(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            ..self.scenario.clone()
        }
    }
}

/// One evaluated (sweep point, method, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub sweep_variable: String,
    pub sweep_value: f64,
    pub method: String,
    pub seed: u64,
    pub total_surplus: f64,
    pub uav_surplus: f64,
    pub bs_surplus: f64,
    pub surplus_std: f64,
    /// Mean latency of the task on the winning provider, seconds.
    pub latency: f64,
    pub latency_std: f64,
    pub steps: usize,
}

impl ResultRow {
    pub fn validate(&self) -> Result<()> {
        let parts = self.uav_surplus + self.bs_surplus;
        if (parts - self.total_surplus).abs() > 1e-9 * self.total_surplus.abs().max(1.0) {
            return Err(Error::Domain(format!(
                "surplus shares {parts} do not add up to total {}",
                self.total_surplus
            )));
        }
        let values = [self.total_surplus, self.uav_surplus, self.bs_surplus, self.surplus_std, self.latency, self.latency_std];
        if values.iter().any(|v| !v.is_finite()) || self.steps == 0 {
            return Err(Error::Domain("result row holds non-finite values or zero steps".into()));
        }
        Ok(())
    }
}

/// One smoothed point of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub experiment: String,
    pub agent: String,
    pub seed: u64,
    pub step: usize,
    pub smoothed_surplus: f64,
}

/// Agents trained for one seed.
#[derive(Debug, Clone)]
pub struct TrainedAgents {
    pub seed: u64,
    pub diffusion: Option<DmsbAgent>,
    pub ppo: Option<PpoAgent>,
    pub diffusion_log: Vec<TrainLogRow>,
    pub ppo_log: Vec<TrainLogRow>,
}

/// Trains the learning agents the experiment lists, on the base scenario.
pub fn train_agents(spec: &ExperimentSpec, seed: u64) -> Result<TrainedAgents> {
    let scenario = spec.training_scenario(seed);
    let mut out = TrainedAgents {
        seed,
        diffusion: None,
        ppo: None,
        diffusion_log: Vec::new(),
        ppo_log: Vec::new(),
    };
    if spec.needs_diffusion() {
        let cfg = TrainerConfig {
            seed: spec.trainer.seed.wrapping_add(seed),
            ..spec.trainer.clone()
        }
        .with_total_steps(spec.train_steps);
        let run = train(&scenario, &cfg)?;
        out.diffusion = Some(run.agent);
        out.diffusion_log = run.log;
    }
    if spec.needs_ppo() {
        let cfg = PpoConfig {
            seed: spec.ppo.seed.wrapping_add(seed),
            ..spec.ppo.clone()
        };
        let (agent, log) = train_ppo(&scenario, &cfg, spec.train_steps)?;
        out.ppo = Some(agent);
        out.ppo_log = log;
    }
    Ok(out)
}

/// Per-round statistics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub total_surplus: f64,
    pub uav_surplus: f64,
    pub bs_surplus: f64,
    pub surplus_std: f64,
    pub latency: f64,
    pub latency_std: f64,
    pub rounds: usize,
}

enum Clearing<'a> {
    Agent(&'a mut dyn Agent, usize),
    Spa,
    Myopic,
    Optimal(BidHistory),
}

impl Clearing<'_> {
    fn mechanism(&mut self, env: &AuctionEnv) -> Result<Mechanism> {
        Ok(match self {
            Clearing::Agent(agent, actions) => {
                let a = agent.act(env.state())?;
                Mechanism::Msb {
                    rho: crate::env::action_to_rho(a, *actions)?,
                }
            }
            Clearing::Spa => Mechanism::Spa,
            Clearing::Myopic => Mechanism::Msb {
                rho: myopic_rho(&env.round().bids.to_vec())?,
            },
            Clearing::Optimal(history) => {
                let rho = history.optimal_rho();
                history.record(&env.round().bids)?;
                Mechanism::Msb { rho }
            }
        })
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_rounds(scenario: &ScenarioConfig, rounds: usize, clearing: &mut Clearing<'_>) -> Result<EvalSummary> {
    let mut env = AuctionEnv::new(scenario.clone())?;
    let mut totals = Vec::with_capacity(rounds);
    let mut latencies = Vec::with_capacity(rounds);
    let (mut uav, mut bs) = (0.0, 0.0);
    for _ in 0..rounds {
        let mechanism = clearing.mechanism(&env)?;
        let step = env.step_with(mechanism)?;
        totals.push(step.reward);
        latencies.push(step.latency);
        uav += step.outcome.uav_surplus;
        bs += step.outcome.bs_surplus;
    }
    let (total, surplus_std) = mean_std(&totals);
    let (latency, latency_std) = mean_std(&latencies);
    let n = rounds as f64;
    let (uav, bs) = (uav / n, bs / n);
    Ok(EvalSummary {
        total_surplus: total,
        uav_surplus: uav,
        bs_surplus: bs,
        surplus_std,
        latency,
        latency_std,
        rounds,
    })
}

/// Evaluates one method for `rounds` rounds on `scenario`.
pub fn evaluate(method: Method, scenario: &ScenarioConfig, rounds: usize, trained: &mut TrainedAgents) -> Result<EvalSummary> {
    if rounds == 0 {
        return Err(Error::Config("evaluation needs at least one round".into()));
    }
    let actions = scenario.action_space_size;
    let eval_seed = scenario.seed;
    let missing = |what: &str| Error::Usage(format!("{what} agent was not trained"));
    match method {
        Method::Mechanism(MechanismKind::Spa) => run_rounds(scenario, rounds, &mut Clearing::Spa),
        Method::Mechanism(MechanismKind::MyopicMsb) => run_rounds(scenario, rounds, &mut Clearing::Myopic),
        Method::Mechanism(MechanismKind::OptimalMsb) => {
            run_rounds(scenario, rounds, &mut Clearing::Optimal(BidHistory::default()))
        }
        Method::Mechanism(MechanismKind::Dmsb) | Method::Agent(AgentKind::Diffusion) => {
            let agent = trained.diffusion.as_mut().ok_or_else(|| missing("diffusion"))?;
            agent.reseed(eval_seed);
            run_rounds(scenario, rounds, &mut Clearing::Agent(agent, actions))
        }
        Method::Agent(AgentKind::Ppo) => {
            let agent = trained.ppo.as_mut().ok_or_else(|| missing("ppo"))?;
            run_rounds(scenario, rounds, &mut Clearing::Agent(agent, actions))
        }
        Method::Agent(AgentKind::Greedy) => {
            let mut agent = GreedyAgent::new(actions);
            run_rounds(scenario, rounds, &mut Clearing::Agent(&mut agent, actions))
        }
        Method::Agent(AgentKind::Random) => {
            let mut agent = RandomAgent::new(actions, eval_seed);
            run_rounds(scenario, rounds, &mut Clearing::Agent(&mut agent, actions))
        }
    }
}

/// Evaluates every method at every sweep point (or once at the base
/// scenario without a sweep) using already trained agents, one entry of
/// `trained` per seed.
pub fn sweep_with(spec: &ExperimentSpec, trained: &mut [TrainedAgents]) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let points: Vec<(String, f64, ScenarioConfig)> = match &spec.sweep {
        Some(sweep) => sweep
            .values
            .iter()
            .map(|&v| Ok((variable_name(sweep.variable).to_string(), v, sweep.apply(&spec.scenario, v)?)))
            .collect::<Result<_>>()?,
        None => vec![("none".to_string(), 0.0, spec.scenario.clone())],
    };
    let mut rows = Vec::new();
    for (variable, value, scenario) in &points {
        for method in spec.methods() {
            for agents in trained.iter_mut() {
                let eval = ScenarioConfig {
                    seed: agents.seed.wrapping_add(EVAL_SEED_OFFSET),
                    ..scenario.clone()
                };
                let s = evaluate(method, &eval, spec.eval_rounds, agents)?;
                let row = ResultRow {
                    experiment: spec.name.clone(),
                    sweep_variable: variable.clone(),
                    sweep_value: *value,
                    method: method.label().to_string(),
                    seed: agents.seed,
                    total_surplus: s.total_surplus,
                    uav_surplus: s.uav_surplus,
                    bs_surplus: s.bs_surplus,
                    surplus_std: s.surplus_std,
                    latency: s.latency,
                    latency_std: s.latency_std,
                    steps: s.rounds,
                };
                row.validate()?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn variable_name(v: SweepVariable) -> &'static str {
    match v {
        SweepVariable::Bandwidth => "bandwidth_mhz",
        SweepVariable::NumBs => "num_bs",
        SweepVariable::TaskSize => "task_size_mb",
    }
}

/// Trains agents for every seed and evaluates the sweep.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<(Vec<ResultRow>, Vec<TrainedAgents>)> {
    spec.validate()?;
    let mut trained = spec.seeds().map(|seed| train_agents(spec, seed)).collect::<Result<Vec<_>>>()?;
    let rows = sweep_with(spec, &mut trained)?;
    Ok((rows, trained))
}

/// Trailing-window mean of `xs` at every index.
pub fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for (i, x) in xs.iter().enumerate() {
        sum += x;
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Plays `steps` rounds with a non-learning agent and returns the rewards.
fn play(agent: &mut dyn Agent, scenario: &ScenarioConfig, steps: usize) -> Result<Vec<f64>> {
    let mut env = AuctionEnv::new(scenario.clone())?;
    let actions = scenario.action_space_size;
    (0..steps)
        .map(|_| {
            let a = agent.act(env.state())?;
            Ok(env.step(a.min(actions - 1))?.reward)
        })
        .collect()
}

/// Training curves of every agent on identical seeded environments.
pub fn convergence_rows(spec: &ExperimentSpec, trained: &[TrainedAgents]) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::new();
    for &agent in &spec.agents {
        for t in trained {
            let scenario = spec.training_scenario(t.seed);
            let rewards: Vec<f64> = match agent {
                AgentKind::Diffusion => t.diffusion_log.iter().map(|r| r.reward).collect(),
                AgentKind::Ppo => t.ppo_log.iter().map(|r| r.reward).collect(),
                AgentKind::Greedy => play(&mut GreedyAgent::new(scenario.action_space_size), &scenario, spec.train_steps)?,
                AgentKind::Random => play(
                    &mut RandomAgent::new(scenario.action_space_size, t.seed),
                    &scenario,
                    spec.train_steps,
                )?,
            };
            let smooth = trailing_mean(&rewards, spec.smoothing_window);
            for (step, value) in smooth.iter().enumerate() {
                if (step + 1) % spec.log_every == 0 || step + 1 == smooth.len() {
                    rows.push(ConvergenceRow {
                        experiment: spec.name.clone(),
                        agent: Method::Agent(agent).label().to_string(),
                        seed: t.seed,
                        step: step + 1,
                        smoothed_surplus: *value,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Trains every agent and returns smoothed curves.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<(Vec<ConvergenceRow>, Vec<TrainedAgents>)> {
    spec.validate()?;
    let trained = spec.seeds().map(|seed| train_agents(spec, seed)).collect::<Result<Vec<_>>>()?;
    Ok((convergence_rows(spec, &trained)?, trained))
}

fn write_csv<W: Write, T: Serialize>(header: &str, rows: &[T], mut out: W) -> Result<()> {
    writeln!(out, "# {header}")?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    write_csv(RESULTS_SCHEMA, rows, out)
}

pub fn write_convergence<W: Write>(rows: &[ConvergenceRow], window: usize, out: W) -> Result<()> {
    write_csv(&format!("{CONVERGENCE_SCHEMA} smoothing_window={window}"), rows, out)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
    for row in &rows {
        row.validate()?;
    }
    Ok(rows)
}

/// Writes `rows` to `dir/name`, creating `dir`.
pub fn save<F>(dir: &Path, name: &str, write: F) -> Result<PathBuf>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write(&mut buf)?;
    let path = dir.join(name);
    fs::write(&path, buf)?;
    Ok(path)
}

/// Seed-averaged value per (method, sweep value), in sweep order.
pub fn seed_means(rows: &[ResultRow], method: &str, value: impl Fn(&ResultRow) -> f64) -> Vec<(f64, f64)> {
    let mut points: Vec<f64> = Vec::new();
    for r in rows.iter().filter(|r| r.method == method) {
        if !points.contains(&r.sweep_value) {
            points.push(r.sweep_value);
        }
    }
    points
        .into_iter()
        .map(|x| {
            let ys: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.sweep_value == x)
                .map(&value)
                .collect();
            (x, ys.iter().sum::<f64>() / ys.len() as f64)
        })
        .collect()
}
