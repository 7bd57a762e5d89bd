use rand::Rng;

use crate::env::Transition;
use crate::error::{domain, Result};

/// Fixed-capacity ring of transitions; the oldest entry is overwritten once
/// full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(domain("replay buffer capacity must be >= 1"));
        }
        Ok(Self {
            items: Vec::new(),
            capacity,
            cursor: 0,
        })
    }

    /// Stores `t` and returns the slot it occupies.
    pub fn push(&mut self, t: Transition) -> usize {
        let slot = self.cursor;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[slot] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        slot
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.items.get(slot)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch == 0 || self.items.len() < batch {
            return Err(domain(format!(
                "cannot sample {batch} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::MarketState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(reward: f64) -> Transition {
        let s = MarketState {
            market_features: vec![],
            bids: vec![],
            mask: vec![],
        };
        Transition {
            state: s.clone(),
            action: 0,
            next_state: s,
            reward,
        }
    }

    #[test]
    fn overwrites_oldest_first() {
        let mut b = ReplayBuffer::new(5).unwrap();
        for i in 0..8 {
            b.push(transition(i as f64));
        }
        assert_eq!(b.len(), 5);
        let rewards: Vec<f64> = b.iter_oldest_first().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn sampling_is_gated_on_fill() {
        let mut b = ReplayBuffer::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.push(transition(1.0));
        assert!(b.sample(2, &mut rng).is_err());
        b.push(transition(2.0));
        let idx = b.sample_indices(64, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(idx.is_err());
        assert!(b.sample_indices(2, &mut rng).unwrap().iter().all(|&i| i < 2));
        assert!(ReplayBuffer::new(0).is_err());
    }
}
