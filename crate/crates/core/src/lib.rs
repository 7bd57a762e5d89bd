//! Auction-based allocation of computing and communication resources between
//! one UAV and a set of ground base stations serving vehicle-twin tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`market`]: transmission rates, three-stage latency, pixel accuracy and
//!   the provider valuation built from them.
//! - [`auction`]: the modified second-bid (MSB) auction, its baselines and the
//!   strategy-proofness oracles.
//! - [`env`]: the auction round generator and the MDP wrapper around it.
//! - [`nn`]: a small batched feed-forward network with hand-written backprop.
//! - [`diffusion`]: the denoising actor producing a distribution over price
//!   scaling factors.
//! - [`rl`]: replay buffer, twin critics, the diffusion actor-critic trainer and
//!   the PPO / greedy / random baselines.
//! - [`experiment`] and [`chart`]: convergence and sweep harness, CSV output
//!   and SVG rendering.

pub mod auction;
pub mod chart;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod experiment;
pub mod market;
pub mod nn;
pub mod rl;

pub use auction::{
    AuctionOutcome, BidVector, Mechanism, ProviderId, SurplusWeights, UAV_ID,
};
pub use diffusion::{DiffusionActor, NoiseSchedule};
pub use env::{action_to_rho, AuctionEnv, MarketState, ScenarioConfig, Transition};
pub use error::{Error, Result};
pub use market::{ResourceProvider, ValuationParams, VtTask};
pub use nn::Mlp;
pub use rl::TrainerConfig;
