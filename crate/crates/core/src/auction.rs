//! Single-item auctions between the UAV (brand bidder, id 0) and the ground
//! base stations (performance bidders, ids `1..=N`).
//!
//! The modified second-bid (MSB) rule lets a base station win only when its
//! bid is strictly above `rho` times the best competing bid, including the
//! UAV's contracted bid; the winner pays exactly that threshold. When no base
//! station clears its threshold the UAV wins and pays its contracted bid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_positive, Result};

pub type ProviderId = usize;

pub const UAV_ID: ProviderId = 0;

/// Bids of one round: `uav_bid` is the UAV's contracted payment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidVector {
    pub uav_bid: f64,
    pub bs_bids: Vec<f64>,
}

fn check_bid(name: &str, b: f64) -> Result<()> {
    if b.is_finite() && b >= 0.0 {
        Ok(())
    } else {
        Err(domain(format!("{name} must be finite and >= 0, got {b}")))
    }
}

impl BidVector {
    pub fn new(uav_bid: f64, bs_bids: Vec<f64>) -> Result<Self> {
        let bids = Self { uav_bid, bs_bids };
        bids.validate()?;
        Ok(bids)
    }

    pub fn validate(&self) -> Result<()> {
        check_bid("uav bid", self.uav_bid)?;
        if self.bs_bids.is_empty() {
            return Err(domain("at least one ground BS bid is required"));
        }
        for (i, &b) in self.bs_bids.iter().enumerate() {
            check_bid(&format!("bid of BS {}", i + 1), b)?;
        }
        Ok(())
    }

    /// Number of providers, UAV included.
    pub fn len(&self) -> usize {
        self.bs_bids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_bs(&self) -> usize {
        self.bs_bids.len()
    }

    pub fn bid(&self, id: ProviderId) -> f64 {
        if id == UAV_ID {
            self.uav_bid
        } else {
            self.bs_bids[id - 1]
        }
    }

    /// All bids indexed by provider id.
    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.uav_bid)
            .chain(self.bs_bids.iter().copied())
            .collect()
    }

    /// `max{b_-n}`: best bid among every provider other than `id`.
    pub fn max_excluding(&self, id: ProviderId) -> f64 {
        (0..self.len())
            .filter(|&j| j != id)
            .map(|j| self.bid(j))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            uav_bid: self.uav_bid * factor,
            bs_bids: self.bs_bids.iter().map(|b| b * factor).collect(),
        }
    }
}

/// Winner, indicator vector, payments and the realised surplus split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub winner: ProviderId,
    pub allocation: Vec<bool>,
    pub payments: Vec<f64>,
    /// `zeta * v_0` if the UAV won, else 0.
    pub uav_surplus: f64,
    /// `v_n` of the winning base station, else 0.
    pub bs_surplus: f64,
}

impl AuctionOutcome {
    fn awarded(winner: ProviderId, providers: usize) -> Self {
        let mut allocation = vec![false; providers];
        allocation[winner] = true;
        Self {
            winner,
            allocation,
            payments: vec![0.0; providers],
            uav_surplus: 0.0,
            bs_surplus: 0.0,
        }
    }

    pub fn uav_won(&self) -> bool {
        self.winner == UAV_ID
    }

    pub fn total_surplus(&self) -> f64 {
        self.uav_surplus + self.bs_surplus
    }

    /// Exactly one indicator set, at `winner`; losers pay nothing and the
    /// winner's payment is non-negative.
    pub fn check_feasible(&self) -> Result<()> {
        let winners = self.allocation.iter().filter(|&&x| x).count();
        if winners != 1 || !self.allocation.get(self.winner).copied().unwrap_or(false) {
            return Err(domain(format!(
                "infeasible allocation {:?} for winner {}",
                self.allocation, self.winner
            )));
        }
        if self.payments.len() != self.allocation.len() {
            return Err(domain("payment and allocation vectors differ in length"));
        }
        for (id, &p) in self.payments.iter().enumerate() {
            if id != self.winner && p != 0.0 {
                return Err(domain(format!("loser {id} charged {p}")));
            }
        }
        if !(self.payments[self.winner] >= 0.0) {
            return Err(domain("winner payment is negative"));
        }
        Ok(())
    }

    /// Fills the surplus split from per-provider valuations.
    pub fn with_surplus(mut self, valuations: &[f64], weights: SurplusWeights) -> Result<Self> {
        let (uav, bs) = surplus_split(&self, valuations, weights)?;
        self.uav_surplus = uav;
        self.bs_surplus = bs;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurplusWeights {
    /// Weight on the UAV's surplus.
    pub zeta: f64,
}

impl Default for SurplusWeights {
    fn default() -> Self {
        Self { zeta: 1.0 }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 1.0 {
        Ok(())
    } else {
        Err(domain(format!("price scaling factor must be finite and >= 1, got {rho}")))
    }
}

/// MSB allocation. Payments are left at zero; see [`msb_price`].
pub fn msb_allocate(bids: &BidVector, rho: f64) -> Result<AuctionOutcome> {
    check_rho(rho)?;
    bids.validate()?;
    let winner = (1..bids.len())
        .find(|&n| bids.bid(n) > rho * bids.max_excluding(n))
        .unwrap_or(UAV_ID);
    Ok(AuctionOutcome::awarded(winner, bids.len()))
}

/// MSB payments for an allocation produced by [`msb_allocate`] on the same
/// bids and `rho`.
pub fn msb_price(bids: &BidVector, rho: f64, outcome: &AuctionOutcome) -> Result<Vec<f64>> {
    let expected = msb_allocate(bids, rho)?;
    if expected.allocation != outcome.allocation || expected.winner != outcome.winner {
        return Err(domain(format!(
            "outcome (winner {}) does not match these bids and rho (winner {})",
            outcome.winner, expected.winner
        )));
    }
    let mut payments = vec![0.0; bids.len()];
    payments[outcome.winner] = if outcome.winner == UAV_ID {
        bids.uav_bid
    } else {
        rho * bids.max_excluding(outcome.winner)
    };
    Ok(payments)
}

/// Allocation and payments of one MSB auction.
pub fn msb(bids: &BidVector, rho: f64) -> Result<AuctionOutcome> {
    let mut outcome = msb_allocate(bids, rho)?;
    outcome.payments = msb_price(bids, rho, &outcome)?;
    Ok(outcome)
}

/// `psi(b_-n; rho) = rho * max{b_-n}`, the smallest bid that still loses.
pub fn critical_payment(other_bids: &[f64], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if other_bids.is_empty() {
        return Err(domain("critical payment needs at least one competing bid"));
    }
    for &b in other_bids {
        check_bid("competing bid", b)?;
    }
    Ok(rho * other_bids.iter().copied().fold(0.0, f64::max))
}

/// Second-price auction over all providers; ties go to the lowest id.
pub fn spa(bids: &BidVector) -> Result<AuctionOutcome> {
    bids.validate()?;
    let all = bids.to_vec();
    let mut winner = 0;
    for (id, &b) in all.iter().enumerate() {
        if b > all[winner] {
            winner = id;
        }
    }
    let mut outcome = AuctionOutcome::awarded(winner, all.len());
    outcome.payments[winner] = bids.max_excluding(winner);
    Ok(outcome)
}

/// `zeta * v_0 * X_uav` and `sum v_n * X_n`.
pub fn surplus_split(
    outcome: &AuctionOutcome,
    valuations: &[f64],
    weights: SurplusWeights,
) -> Result<(f64, f64)> {
    outcome.check_feasible()?;
    if valuations.len() != outcome.allocation.len() {
        return Err(domain(format!(
            "{} valuations for {} providers",
            valuations.len(),
            outcome.allocation.len()
        )));
    }
    let v = valuations[outcome.winner];
    if outcome.winner == UAV_ID {
        Ok((weights.zeta * v, 0.0))
    } else {
        Ok((0.0, v))
    }
}

/// Weighted total surplus `zeta * S_uav + S_bs`.
pub fn surplus(outcome: &AuctionOutcome, valuations: &[f64], weights: SurplusWeights) -> Result<f64> {
    let (uav, bs) = surplus_split(outcome, valuations, weights)?;
    Ok(uav + bs)
}

/// Highest and second-highest entries (the two may be equal).
pub fn top_two(bids: &[f64]) -> Result<(f64, f64)> {
    if bids.len() < 2 {
        return Err(domain("need at least two bids"));
    }
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &b in bids {
        if b > first {
            second = first;
            first = b;
        } else if b > second {
            second = b;
        }
    }
    Ok((first, second))
}

fn ratio_or_one(high: f64, second: f64) -> f64 {
    // A zero runner-up gives no finite threshold; fall back to a plain
    // second-bid auction.
    if second > 0.0 {
        (high / second).max(1.0)
    } else {
        1.0
    }
}

/// `max(1, u_0 / u_(2))` from the current round's bids.
pub fn myopic_rho(bids: &[f64]) -> Result<f64> {
    let (high, second) = top_two(bids)?;
    Ok(ratio_or_one(high, second))
}

/// `max(1, E[u_0] / E[u_(2)])` over recorded `(highest, second)` pairs.
pub fn optimal_rho(history: &[(f64, f64)]) -> Result<f64> {
    if history.is_empty() {
        return Err(domain("bid history is empty"));
    }
    let n = history.len() as f64;
    let high = history.iter().map(|h| h.0).sum::<f64>() / n;
    let second = history.iter().map(|h| h.1).sum::<f64>() / n;
    Ok(ratio_or_one(high, second))
}

/// All-time record of the two highest bids per round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BidHistory {
    rounds: Vec<(f64, f64)>,
}

impl BidHistory {
    pub fn record(&mut self, bids: &BidVector) -> Result<()> {
        self.rounds.push(top_two(&bids.to_vec())?);
        Ok(())
    }

    pub fn rounds(&self) -> &[(f64, f64)] {
        &self.rounds
    }

    /// Falls back to `rho = 1` before any round has been recorded.
    pub fn optimal_rho(&self) -> f64 {
        optimal_rho(&self.rounds).unwrap_or(1.0)
    }
}

/// `count` evenly spaced points on `[0, max]`.
pub fn bid_grid(max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count)
            .map(|i| max * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractedBid {
    pub index: usize,
    pub bid: f64,
    pub expected_profit: f64,
}

/// The UAV's contracted payment: the grid point maximising the empirical
/// mean of `(v_0 - v_max) * 1(v_max <= b)`. Ties go to the smallest bid.
///
/// `grid` must be non-decreasing.
pub fn uav_contracted_bid(vmax_samples: &[f64], v0_samples: &[f64], grid: &[f64]) -> Result<ContractedBid> {
    if vmax_samples.is_empty() || vmax_samples.len() != v0_samples.len() {
        return Err(domain(format!(
            "need equally many non-empty v_max ({}) and v_0 ({}) samples",
            vmax_samples.len(),
            v0_samples.len()
        )));
    }
    if grid.is_empty() || grid.iter().any(|g| !g.is_finite()) {
        return Err(domain("bid grid must be non-empty and finite"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(domain("bid grid must be non-decreasing"));
    }
    let mut samples: Vec<(f64, f64)> = vmax_samples
        .iter()
        .zip(v0_samples)
        .map(|(&vm, &v0)| (vm, v0 - vm))
        .collect();
    if samples.iter().any(|(vm, gain)| !vm.is_finite() || !gain.is_finite()) {
        return Err(domain("valuation samples must be finite"));
    }
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = samples.len() as f64;
    let mut next = 0;
    let mut cumulative = 0.0;
    let mut best: Option<ContractedBid> = None;
    for (index, &bid) in grid.iter().enumerate() {
        while next < samples.len() && samples[next].0 <= bid {
            cumulative += samples[next].1;
            next += 1;
        }
        let profit = cumulative / n;
        if best.is_none_or(|b| profit > b.expected_profit) {
            best = Some(ContractedBid {
                index,
                bid,
                expected_profit: profit,
            });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Auction rule used to clear one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    Msb { rho: f64 },
    Spa,
}

impl Mechanism {
    pub fn run(&self, bids: &BidVector) -> Result<AuctionOutcome> {
        match *self {
            Mechanism::Msb { rho } => msb(bids, rho),
            Mechanism::Spa => spa(bids),
        }
    }
}

/// True valuations of the base stations plus the UAV's contracted bid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    pub uav_bid: f64,
    pub bs_values: Vec<f64>,
}

impl MarketInstance {
    pub fn truthful_bids(&self) -> Result<BidVector> {
        BidVector::new(self.uav_bid, self.bs_values.clone())
    }

    /// `count` deviations spanning `[0, 2 * rho * max bid]`.
    pub fn deviation_grid(&self, rho: f64, count: usize) -> Vec<f64> {
        let top = self
            .bs_values
            .iter()
            .copied()
            .fold(self.uav_bid, f64::max);
        bid_grid(2.0 * rho * top.max(f64::MIN_POSITIVE), count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub bidder: ProviderId,
    pub deviation: f64,
    pub truthful_utility: f64,
    pub deviated_utility: f64,
}

fn bs_utility(instance: &MarketInstance, bidder: ProviderId, bid: f64, rho: f64) -> Result<f64> {
    let mut bids = instance.truthful_bids()?;
    bids.bs_bids[bidder - 1] = bid;
    let outcome = msb(&bids, rho)?;
    outcome.check_feasible()?;
    if outcome.winner == bidder {
        Ok(instance.bs_values[bidder - 1] - outcome.payments[bidder])
    } else {
        Ok(0.0)
    }
}

/// Searches for a base station that gains by misreporting while every other
/// provider bids truthfully. Returns the first violation, or `None`.
pub fn check_truthfulness(
    instance: &MarketInstance,
    rho: f64,
    deviations: &[f64],
) -> Result<Option<Counterexample>> {
    check_rho(rho)?;
    for bidder in 1..=instance.bs_values.len() {
        let truthful = bs_utility(instance, bidder, instance.bs_values[bidder - 1], rho)?;
        for &deviation in deviations {
            check_bid("deviation", deviation)?;
            let deviated = bs_utility(instance, bidder, deviation, rho)?;
            if deviated > truthful {
                return Ok(Some(Counterexample {
                    bidder,
                    deviation,
                    truthful_utility: truthful,
                    deviated_utility: deviated,
                }));
            }
        }
    }
    Ok(None)
}

/// A random market: 1..=`max_bs` base stations, values and the UAV bid
/// uniform on `[0, 10)`, and `rho` uniform on `[1, 10]`.
pub fn random_market<R: Rng + ?Sized>(rng: &mut R, max_bs: usize) -> (MarketInstance, f64) {
    let n = rng.random_range(1..=max_bs.max(1));
    let instance = MarketInstance {
        uav_bid: rng.random_range(0.0..10.0),
        bs_values: (0..n).map(|_| rng.random_range(0.0..10.0)).collect(),
    };
    (instance, rng.random_range(1.0..=10.0))
}

/// Outcome of [`property_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyReport {
    pub markets: usize,
    pub counterexamples: Vec<(MarketInstance, f64, Counterexample)>,
    /// Largest relative error of `psi(theta * b) = theta * psi(b)`.
    pub homogeneity_error: f64,
    /// Markets whose winner changed after scaling every bid.
    pub winner_changes: usize,
}

impl PropertyReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.counterexamples.is_empty() && self.winner_changes == 0 && self.homogeneity_error <= tolerance
    }
}

/// Truthfulness, homogeneity and scale invariance over `markets` random
/// markets with up to 8 base stations.
pub fn property_check(markets: usize, grid_points: usize, seed: u64) -> Result<PropertyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PropertyReport {
        markets,
        counterexamples: Vec::new(),
        homogeneity_error: 0.0,
        winner_changes: 0,
    };
    for _ in 0..markets {
        let (instance, rho) = random_market(&mut rng, 8);
        let grid = instance.deviation_grid(rho, grid_points);
        if let Some(c) = check_truthfulness(&instance, rho, &grid)? {
            report.counterexamples.push((instance.clone(), rho, c));
        }
        let theta: f64 = 100.0 * (1.0 - rng.random::<f64>());
        let bids = instance.truthful_bids()?;
        let scaled = BidVector::new(theta * bids.uav_bid, bids.bs_bids.iter().map(|b| theta * b).collect())?;
        // Competing bids faced by base station 1.
        let others = |b: &BidVector| -> Vec<f64> { std::iter::once(b.uav_bid).chain(b.bs_bids[1..].iter().copied()).collect() };
        let psi = critical_payment(&others(&bids), rho)?;
        let scaled_psi = critical_payment(&others(&scaled), rho)?;
        if psi > 0.0 {
            let err = ((scaled_psi - theta * psi) / (theta * psi)).abs();
            report.homogeneity_error = report.homogeneity_error.max(err);
        }
        if msb_allocate(&bids, rho)?.winner != msb_allocate(&scaled, rho)?.winner {
            report.winner_changes += 1;
        }
    }
    Ok(report)
}

/// Runs `ensure_positive` on a surplus weight; exposed for config checks.
pub(crate) fn validate_weights(weights: &SurplusWeights) -> Result<()> {
    ensure_positive("zeta", weights.zeta)
}
