use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Agent;
use crate::auction::msb_allocate;
use crate::env::{action_to_rho, MarketState};
use crate::error::Result;

/// Uniform over the action set.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    actions: usize,
    rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(actions: usize, seed: u64) -> Self {
        Self {
            actions,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn name(&self) -> &'static str {
        "random"
    }

    fn act(&mut self, _state: &MarketState) -> Result<usize> {
        Ok(self.rng.random_range(0..self.actions))
    }
}

/// One-step lookahead on the observed bids: for every action, clears the
/// round and scores the winner by its bid, which stands in for the winner's
/// value. Picks the best score, lowest index on ties.
#[derive(Debug, Clone)]
pub struct GreedyAgent {
    actions: usize,
}

impl GreedyAgent {
    pub fn new(actions: usize) -> Self {
        Self { actions }
    }

    /// Bid-proxy surplus of every action on this round.
    pub fn scores(&self, state: &MarketState) -> Result<Vec<f64>> {
        let bids = state.bid_vector()?;
        (0..self.actions)
            .map(|a| {
                let outcome = msb_allocate(&bids, action_to_rho(a, self.actions)?)?;
                Ok(bids.bid(outcome.winner))
            })
            .collect()
    }
}

impl Agent for GreedyAgent {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn act(&mut self, state: &MarketState) -> Result<usize> {
        let scores = self.scores(state)?;
        let mut best = 0;
        for (a, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = a;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MARKET_FEATURE_DIM, MAX_PROVIDERS};

    fn state(bids: &[f64]) -> MarketState {
        let mut padded = bids.to_vec();
        padded.resize(MAX_PROVIDERS, 0.0);
        MarketState {
            market_features: vec![1.0; MARKET_FEATURE_DIM],
            bids: padded,
            mask: (0..MAX_PROVIDERS).map(|i| i < bids.len()).collect(),
        }
    }

    #[test]
    fn random_histogram_is_uniform() {
        let mut agent = RandomAgent::new(20, 5);
        let s = state(&[1.0, 2.0]);
        let n = 100_000;
        let mut counts = [0usize; 20];
        for _ in 0..n {
            counts[agent.act(&s).unwrap()] += 1;
        }
        let p = 1.0 / 20.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - n as f64 * p).abs() < 3.0 * sd), "{counts:?}");
    }

    #[test]
    fn greedy_lets_a_dominant_uav_win() {
        let s = state(&[9.0, 4.0, 3.0, 2.0]);
        let a = GreedyAgent::new(20).act(&s).unwrap();
        let rho = action_to_rho(a, 20).unwrap();
        let outcome = msb_allocate(&s.bid_vector().unwrap(), rho).unwrap();
        assert!(outcome.uav_won());
        // Every action already hands the round to the UAV.
        assert_eq!(a, 0);
    }

    #[test]
    fn greedy_keeps_a_strong_base_station() {
        let s = state(&[1.0, 8.0, 3.0]);
        let mut agent = GreedyAgent::new(20);
        let a = agent.act(&s).unwrap();
        let outcome = msb_allocate(&s.bid_vector().unwrap(), action_to_rho(a, 20).unwrap()).unwrap();
        assert_eq!(outcome.winner, 1);
        let scores = agent.scores(&s).unwrap();
        // rho above 8/3 hands the round to the UAV.
        assert_eq!(scores[0], 8.0);
        assert_eq!(scores[19], 1.0);
    }
}
