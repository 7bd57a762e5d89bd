//! Physical system model: Shannon-rate links, the three-stage task latency,
//! pixel-match accuracy and the latency/accuracy valuation of a provider.
//!
//! Every function here is pure. Provider `0` is the UAV; `1..=N` are ground
//! base stations.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_positive, Result};

/// Sampled accuracies are clamped into this range; `R = 1` would make the
/// matching value infinite.
pub const ACCURACY_FLOOR: f64 = 0.05;
pub const ACCURACY_CEIL: f64 = 0.99;

/// A bidder offering bandwidth and compute: the UAV (`id == 0`) or a ground BS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProvider {
    pub id: usize,
    /// Hz
    pub uplink_bandwidth: f64,
    /// Hz
    pub downlink_bandwidth: f64,
    /// GPU cycles per second.
    pub gpu_efficiency: f64,
    /// CPU cycles per second.
    pub cpu_efficiency: f64,
    /// Downlink transmit power of the provider.
    pub tx_power: f64,
    /// Receiver noise power at the provider (uplink).
    pub noise_power: f64,
    /// Mean of the sampled task accuracy, in (0, 1).
    pub accuracy_mean: f64,
}

impl ResourceProvider {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("uplink_bandwidth", self.uplink_bandwidth)?;
        ensure_positive("downlink_bandwidth", self.downlink_bandwidth)?;
        ensure_positive("gpu_efficiency", self.gpu_efficiency)?;
        ensure_positive("cpu_efficiency", self.cpu_efficiency)?;
        ensure_positive("tx_power", self.tx_power)?;
        ensure_positive("noise_power", self.noise_power)?;
        if !(self.accuracy_mean > 0.0 && self.accuracy_mean < 1.0) {
            return Err(domain(format!(
                "accuracy_mean must lie in (0, 1), got {}",
                self.accuracy_mean
            )));
        }
        Ok(())
    }

    pub fn is_uav(&self) -> bool {
        self.id == 0
    }
}

/// One vehicle-twin task request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtTask {
    /// Input size in bits.
    pub input_size: f64,
    /// Size of the generated result in bits; equal to `input_size` in every
    /// generated scenario.
    pub output_size: f64,
    pub pixel_count: usize,
    /// Transmit power of the vehicular user.
    pub user_tx_power: f64,
    /// Noise power at the vehicular user (downlink).
    pub user_noise: f64,
    /// Channel power gain towards each provider, indexed by provider id.
    pub channel_gain: Vec<f64>,
}

impl VtTask {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("input_size", self.input_size)?;
        ensure_positive("output_size", self.output_size)?;
        ensure_positive("user_tx_power", self.user_tx_power)?;
        ensure_positive("user_noise", self.user_noise)?;
        if self.pixel_count == 0 {
            return Err(domain("pixel_count must be >= 1"));
        }
        for (id, g) in self.channel_gain.iter().enumerate() {
            ensure_positive(&format!("channel_gain[{id}]"), *g)?;
        }
        Ok(())
    }

    pub fn gain(&self, provider: usize) -> Result<f64> {
        let g = self
            .channel_gain
            .get(provider)
            .copied()
            .ok_or_else(|| domain(format!("no channel gain for provider {provider}")))?;
        if !g.is_finite() || g < 0.0 {
            return Err(domain(format!("channel gain for provider {provider} is {g}")));
        }
        Ok(g)
    }
}

/// `bandwidth * log2(1 + snr)`.
///
/// A zero SNR is accepted and yields a zero rate; callers turn that into an
/// unreachable latency.
pub fn shannon_rate(bandwidth: f64, snr: f64) -> Result<f64> {
    ensure_positive("bandwidth", bandwidth)?;
    if !snr.is_finite() || snr < 0.0 {
        return Err(domain(format!("snr must be finite and >= 0, got {snr}")));
    }
    Ok(bandwidth * snr.ln_1p() / std::f64::consts::LN_2)
}

/// Vehicle-to-provider rate in bits/s.
pub fn uplink_rate(task: &VtTask, provider: &ResourceProvider) -> Result<f64> {
    ensure_positive("user_tx_power", task.user_tx_power)?;
    ensure_positive("noise_power", provider.noise_power)?;
    let snr = task.gain(provider.id)? * task.user_tx_power / provider.noise_power;
    shannon_rate(provider.uplink_bandwidth, snr)
}

/// Provider-to-vehicle rate in bits/s.
pub fn downlink_rate(task: &VtTask, provider: &ResourceProvider) -> Result<f64> {
    ensure_positive("tx_power", provider.tx_power)?;
    ensure_positive("user_noise", task.user_noise)?;
    let snr = task.gain(provider.id)? * provider.tx_power / task.user_noise;
    shannon_rate(provider.downlink_bandwidth, snr)
}

/// GPU plus CPU processing time for `bits` of input.
pub fn processing_latency(bits: f64, gpu_per_bit: f64, gpu: f64, cpu: f64) -> Result<f64> {
    ensure_positive("gpu_efficiency", gpu)?;
    ensure_positive("cpu_efficiency", cpu)?;
    if !(bits >= 0.0 && gpu_per_bit >= 0.0) {
        return Err(domain("bits and gpu_per_bit must be >= 0"));
    }
    Ok(bits * gpu_per_bit / gpu + bits / cpu)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBreakdown {
    pub uplink: f64,
    pub processing: f64,
    pub downlink: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.uplink + self.processing + self.downlink
    }
}

/// Task latency. A link with zero rate never delivers, which is kept apart
/// from numeric latencies so it cannot leak into a valuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Latency {
    Finite(LatencyBreakdown),
    Unreachable,
}

impl Latency {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            Latency::Finite(b) => Some(b.total()),
            Latency::Unreachable => None,
        }
    }

    pub fn is_unreachable(&self) -> bool {
        matches!(self, Latency::Unreachable)
    }
}

/// Uplink transfer, processing and downlink transfer time of `task` on
/// `provider`.
pub fn total_latency(task: &VtTask, provider: &ResourceProvider, gpu_per_bit: f64) -> Result<Latency> {
    ensure_positive("input_size", task.input_size)?;
    if !(task.output_size >= 0.0) {
        return Err(domain("output_size must be >= 0"));
    }
    let up = uplink_rate(task, provider)?;
    let down = downlink_rate(task, provider)?;
    if up <= 0.0 || down <= 0.0 {
        return Ok(Latency::Unreachable);
    }
    let processing = processing_latency(
        task.input_size,
        gpu_per_bit,
        provider.gpu_efficiency,
        provider.cpu_efficiency,
    )?;
    Ok(Latency::Finite(LatencyBreakdown {
        uplink: task.input_size / up,
        processing,
        downlink: task.output_size / down,
    }))
}

/// Ground-truth and processed pixel labels of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSets {
    pub ground_truth: Vec<u32>,
    pub processed: Vec<u32>,
}

impl PixelSets {
    pub fn new(ground_truth: Vec<u32>, processed: Vec<u32>) -> Result<Self> {
        let sets = Self {
            ground_truth,
            processed,
        };
        sets.check_lengths()?;
        Ok(sets)
    }

    fn check_lengths(&self) -> Result<()> {
        if self.ground_truth.len() != self.processed.len() {
            return Err(domain(format!(
                "pixel sets differ in length: {} vs {}",
                self.ground_truth.len(),
                self.processed.len()
            )));
        }
        Ok(())
    }
}

/// Number of positions where the processed label equals the ground truth.
pub fn pixel_match_count(pixels: &PixelSets) -> Result<usize> {
    pixels.check_lengths()?;
    Ok(pixels
        .ground_truth
        .iter()
        .zip(&pixels.processed)
        .filter(|(w, c)| w == c)
        .count())
}

/// Fraction of matched pixels.
pub fn task_accuracy(pixels: &PixelSets) -> Result<f64> {
    let matched = pixel_match_count(pixels)?;
    let k = pixels.ground_truth.len();
    if k == 0 {
        return Err(domain("accuracy of an empty pixel set is undefined"));
    }
    Ok(matched as f64 / k as f64)
}

/// Draws a per-task accuracy from a Beta distribution with mean
/// `mean` and the given concentration, clamped into
/// [`ACCURACY_FLOOR`, `ACCURACY_CEIL`].
pub fn sample_accuracy<R: Rng + ?Sized>(mean: f64, concentration: f64, rng: &mut R) -> Result<f64> {
    if !(mean > 0.0 && mean < 1.0) {
        return Err(domain(format!("accuracy mean must lie in (0, 1), got {mean}")));
    }
    ensure_positive("accuracy concentration", concentration)?;
    let beta = Beta::new(mean * concentration, (1.0 - mean) * concentration)
        .map_err(|e| domain(format!("beta distribution: {e}")))?;
    Ok(beta.sample(rng).clamp(ACCURACY_FLOOR, ACCURACY_CEIL))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValuationParams {
    /// Latency-related value factor.
    pub omega1: f64,
    /// Accuracy-related value factor.
    pub omega2: f64,
    /// Accuracy sensitivity exponent.
    pub beta: f64,
    /// Number of past rounds the expectations average over.
    pub history_window: usize,
}

impl Default for ValuationParams {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 1.0,
            beta: 2.0,
            history_window: 10,
        }
    }
}

impl ValuationParams {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("omega1", self.omega1)?;
        ensure_positive("omega2", self.omega2)?;
        ensure_positive("beta", self.beta)?;
        if self.history_window == 0 {
            return Err(domain("history_window must be >= 1"));
        }
        Ok(())
    }
}

fn windowed(history: &[f64], window: usize) -> &[f64] {
    &history[history.len().saturating_sub(window)..]
}

/// Mean of `omega1 / T` over the most recent `history_window` latencies.
pub fn common_value(latency_history: &[f64], params: &ValuationParams) -> Result<f64> {
    params.validate()?;
    let window = windowed(latency_history, params.history_window);
    if window.is_empty() {
        return Err(domain("latency history is empty"));
    }
    let mut sum = 0.0;
    for &t in window {
        ensure_positive("latency", t)?;
        sum += params.omega1 / t;
    }
    Ok(sum / window.len() as f64)
}

/// Mean of `omega2 / (1 - R)^beta` over the most recent `history_window`
/// accuracies.
pub fn matching_value(accuracy_history: &[f64], params: &ValuationParams) -> Result<f64> {
    params.validate()?;
    let window = windowed(accuracy_history, params.history_window);
    if window.is_empty() {
        return Err(domain("accuracy history is empty"));
    }
    let mut sum = 0.0;
    for &r in window {
        if !(0.0..1.0).contains(&r) {
            return Err(domain(format!("accuracy must lie in [0, 1), got {r}")));
        }
        sum += params.omega2 / (1.0 - r).powf(params.beta);
    }
    Ok(sum / window.len() as f64)
}

pub fn valuation(common: f64, matching: f64) -> Result<f64> {
    ensure_positive("common value", common)?;
    ensure_positive("matching value", matching)?;
    Ok(common * matching)
}

/// Rolling latency and accuracy observations of one provider.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderHistory {
    window: usize,
    latencies: VecDeque<f64>,
    accuracies: VecDeque<f64>,
}

impl ProviderHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            latencies: VecDeque::with_capacity(window),
            accuracies: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, latency: f64, accuracy: f64) -> Result<()> {
        ensure_positive("latency", latency)?;
        if !(0.0..1.0).contains(&accuracy) {
            return Err(domain(format!("accuracy must lie in [0, 1), got {accuracy}")));
        }
        if self.latencies.len() == self.window {
            self.latencies.pop_front();
            self.accuracies.pop_front();
        }
        self.latencies.push_back(latency);
        self.accuracies.push_back(accuracy);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.latencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latencies.is_empty()
    }

    pub fn latencies(&self) -> Vec<f64> {
        self.latencies.iter().copied().collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.accuracies.iter().copied().collect()
    }

    pub fn mean_latency(&self) -> f64 {
        mean(self.latencies.iter().copied())
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean(self.accuracies.iter().copied())
    }

    pub fn valuation(&self, params: &ValuationParams) -> Result<f64> {
        let c = common_value(&self.latencies(), params)?;
        let m = matching_value(&self.accuracies(), params)?;
        valuation(c, m)
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}
