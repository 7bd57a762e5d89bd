//! Denoising diffusion actor over action logits.
//!
//! The actor starts from `x_K ~ N(0, I)` in logit space and applies `K`
//! learned reverse steps `x_{k-1} ~ N(mean_theta(x_k, k, s), sigma_k^2 I)`.
//! A softmax over `x_0` gives the distribution over price scaling factors.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{domain, ensure_positive, Error, Result};
use crate::nn::{Activation, Gradients, GradientTape, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    eta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(domain("noise schedule needs at least one step"));
        }
        if let Some(bad) = eta.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(domain(format!("noise variance {bad} outside (0, 1)")));
        }
        let alpha_bar = eta
            .iter()
            .scan(1.0, |acc, e| {
                *acc *= 1.0 - e;
                Some(*acc)
            })
            .collect();
        Ok(Self { eta, alpha_bar })
    }

    /// `steps` variances spaced evenly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(domain("noise schedule needs at least one step"));
        }
        if steps == 1 {
            return Self::new(vec![start]);
        }
        let delta = (end - start) / (steps - 1) as f64;
        Self::new((0..steps).map(|i| start + delta * i as f64).collect())
    }

    pub fn steps(&self) -> usize {
        self.eta.len()
    }

    /// `eta_k` for `1 <= k <= K`.
    pub fn eta(&self, k: usize) -> f64 {
        self.eta[k - 1]
    }

    /// `prod_{i <= k} (1 - eta_i)`; 1 at `k = 0`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    /// Variance of `x_k` given `x_0 = 0`.
    pub fn marginal_variance(&self, k: usize) -> f64 {
        1.0 - self.alpha_bar(k)
    }

    /// `eta_k (1 - alpha_bar_{k-1}) / (1 - alpha_bar_k)`; zero at `k = 1`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.eta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(domain(format!("step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Applies `k` single-step transitions
    /// `x_j = sqrt(1 - eta_j) x_{j-1} + sqrt(eta_j) eps`.
    pub fn forward_noise<R: Rng + ?Sized>(&self, x0: &[f64], k: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_step(k)?;
        let mut x = x0.to_vec();
        for j in 1..=k {
            let keep = (1.0 - self.eta(j)).sqrt();
            let noise = self.eta(j).sqrt();
            for v in &mut x {
                let eps: f64 = rng.sample(StandardNormal);
                *v = keep * *v + noise * eps;
            }
        }
        Ok(x)
    }

    /// Samples `x_k` directly: `sqrt(alpha_bar_k) x_0 + sqrt(1 - alpha_bar_k) eps`.
    pub fn forward_noise_closed<R: Rng + ?Sized>(&self, x0: &[f64], k: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_step(k)?;
        let keep = self.alpha_bar(k).sqrt();
        let noise = (1.0 - self.alpha_bar(k)).sqrt();
        Ok(x0
            .iter()
            .map(|v| {
                let eps: f64 = rng.sample(StandardNormal);
                keep * v + noise * eps
            })
            .collect())
    }
}

/// Softmax with max subtraction.
pub fn action_distribution(x0: &[f64]) -> Vec<f64> {
    let max = x0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = x0.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Row-wise softmax of a batch of logits.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    /// Argmax, lowest index on ties.
    Greedy,
}

pub fn sample_action<R: Rng + ?Sized>(p: &[f64], rng: &mut R, mode: SampleMode) -> usize {
    match mode {
        SampleMode::Greedy => {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Stochastic => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &v) in p.iter().enumerate() {
                acc += v;
                if u < acc {
                    return i;
                }
            }
            // Rounding left `u` above the total; fall back to the last
            // action with mass.
            p.iter().rposition(|&v| v > 0.0).unwrap_or(0)
        }
    }
}

/// Sinusoidal features of the step index.
pub fn step_embedding(k: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(100f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.push((k as f64 * freq).sin());
        out.push((k as f64 * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}

/// Recorded reverse chain for backpropagation.
#[derive(Debug)]
pub struct DenoiseTrace {
    /// Tapes for steps `K, K-1, ..., 1`.
    tapes: Vec<GradientTape>,
    /// `x_k` fed to each of those steps.
    inputs: Vec<Array2<f64>>,
    obs: Array2<f64>,
    /// Entries of `x_0` pinned by the output bound; they pass no gradient.
    clipped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionActor {
    pub denoiser: Mlp,
    schedule: NoiseSchedule,
    /// `sigma_k^2` for `k = 1..=K`.
    variances: Vec<f64>,
    action_dim: usize,
    embed_dim: usize,
    obs_dim: usize,
    output_bound: Option<f64>,
}

impl DiffusionActor {
    pub const EMBED_DIM: usize = 8;

    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![action_dim + Self::EMBED_DIM + obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut denoiser = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
        denoiser.scale_output_layer(0.1);
        Self::from_denoiser(denoiser, schedule, obs_dim, action_dim)
    }

    pub fn from_denoiser(denoiser: Mlp, schedule: NoiseSchedule, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if action_dim == 0 {
            return Err(domain("empty action space"));
        }
        if denoiser.input_dim() != action_dim + Self::EMBED_DIM + obs_dim || denoiser.output_dim() != action_dim {
            return Err(domain(format!(
                "denoiser shape {:?} does not fit obs {obs_dim}, actions {action_dim}",
                denoiser.layer_sizes()
            )));
        }
        let variances = (1..=schedule.steps()).map(|k| schedule.posterior_variance(k)).collect();
        Ok(Self {
            denoiser,
            schedule,
            variances,
            action_dim,
            embed_dim: Self::EMBED_DIM,
            obs_dim,
            output_bound: None,
        })
    }

    /// Replaces the reverse-step variances `sigma_k^2`.
    pub fn with_variances(mut self, variances: Vec<f64>) -> Result<Self> {
        if variances.len() != self.schedule.steps() || variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(domain("reverse variances must be K non-negative values"));
        }
        self.variances = variances;
        Ok(self)
    }

    /// Clamps every entry of the final sample `x_0` to `[-bound, bound]`.
    pub fn with_output_bound(mut self, bound: Option<f64>) -> Result<Self> {
        if let Some(b) = bound {
            ensure_positive("output bound", b)?;
        }
        self.output_bound = bound;
        Ok(self)
    }

    pub fn output_bound(&self) -> Option<f64> {
        self.output_bound
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Rows of the first denoiser layer fed by `x_k`, the step embedding
    /// and the observation. The observation part is the same at every
    /// step, so it is projected once per chain.
    fn first_layer_blocks(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let w = &self.denoiser.weights()[0];
        let (a, e) = (self.action_dim, self.embed_dim);
        (w.slice(s![..a, ..]), w.slice(s![a..a + e, ..]), w.slice(s![a + e.., ..]))
    }

    /// Runs the reverse chain from `x_K ~ N(0, I)` for every row of `obs`.
    pub fn denoise_batch<R: Rng + ?Sized>(
        &self,
        obs: ArrayView2<f64>,
        rng: &mut R,
        record: bool,
    ) -> Result<(Array2<f64>, Option<DenoiseTrace>)> {
        let x_k = Array2::from_shape_simple_fn((obs.nrows(), self.action_dim), || rng.sample(StandardNormal));
        self.denoise_from(x_k, obs, rng, record)
    }

    /// Reverse chain from a given `x_K`.
    pub fn denoise_from<R: Rng + ?Sized>(
        &self,
        mut x: Array2<f64>,
        obs: ArrayView2<f64>,
        rng: &mut R,
        record: bool,
    ) -> Result<(Array2<f64>, Option<DenoiseTrace>)> {
        if obs.ncols() != self.obs_dim || x.dim() != (obs.nrows(), self.action_dim) {
            return Err(domain(format!(
                "observation width {} / noise shape {:?} do not fit actor",
                obs.ncols(),
                x.dim()
            )));
        }
        let (w_x, w_emb, w_obs) = self.first_layer_blocks();
        let mut obs_part = obs.dot(&w_obs);
        obs_part += &self.denoiser.biases()[0];
        let mut tapes = Vec::new();
        let mut inputs = Vec::new();
        for k in (1..=self.schedule.steps()).rev() {
            let emb = Array1::from(step_embedding(k, self.embed_dim));
            let mut z0 = x.dot(&w_x) + &obs_part;
            z0 += &emb.dot(&w_emb);
            let mean = if record {
                let (mean, tape) = self.denoiser.forward_tape_from_pre(z0)?;
                tapes.push(tape);
                mean
            } else {
                self.denoiser.forward_from_pre(z0)?
            };
            if record {
                inputs.push(std::mem::replace(&mut x, mean));
            } else {
                x = mean;
            }
            let sigma = self.variances[k - 1].sqrt();
            if sigma > 0.0 {
                x.mapv_inplace(|m| m + sigma * rng.sample::<f64, _>(StandardNormal));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite value at denoising step {k}")));
            }
        }
        let mut clipped = Vec::new();
        if let Some(b) = self.output_bound {
            if record {
                clipped = x.iter().map(|v| v.abs() > b).collect();
            }
            x.mapv_inplace(|v| v.clamp(-b, b));
        }
        let trace = record.then(|| DenoiseTrace {
            tapes,
            inputs,
            obs: obs.to_owned(),
            clipped,
        });
        Ok((x, trace))
    }

    /// Backpropagates `dL/dx_0` through the recorded chain (noise held
    /// fixed) and returns the denoiser parameter gradients.
    pub fn backward(&self, trace: &mut DenoiseTrace, grad_x0: ArrayView2<f64>) -> Result<Gradients> {
        if trace.tapes.len() != self.schedule.steps() {
            return Err(Error::Usage("denoising trace already consumed or incomplete".into()));
        }
        let mut total = Gradients::zeros_like(&self.denoiser);
        let mut upstream = grad_x0.to_owned();
        for (g, &c) in upstream.iter_mut().zip(&trace.clipped) {
            if c {
                *g = 0.0;
            }
        }
        let (w_x, _, _) = self.first_layer_blocks();
        let (a, e) = (self.action_dim, self.embed_dim);
        let hidden = w_x.ncols();
        let mut dz0_sum = Array2::<f64>::zeros((upstream.nrows(), hidden));
        let mut grad_w0 = Array2::<f64>::zeros(self.denoiser.weights()[0].dim());
        // Tapes were pushed for k = K..1; walk them back from k = 1.
        let mut k = 1;
        while let (Some(mut tape), Some(x_k)) = (trace.tapes.pop(), trace.inputs.pop()) {
            let (g, dz0) = self.denoiser.backward_to_pre(&mut tape, upstream.view())?;
            total.add_assign(&g);
            let col_sum = dz0.sum_axis(Axis(0));
            grad_w0.slice_mut(s![..a, ..]).scaled_add(1.0, &x_k.t().dot(&dz0));
            let emb = Array1::from(step_embedding(k, e));
            for (j, &v) in emb.iter().enumerate() {
                grad_w0.row_mut(a + j).scaled_add(v, &col_sum);
            }
            total.biases[0] += &col_sum;
            dz0_sum += &dz0;
            upstream = dz0.dot(&w_x.t());
            k += 1;
        }
        grad_w0.slice_mut(s![a + e.., ..]).assign(&trace.obs.t().dot(&dz0_sum));
        total.weights[0] += &grad_w0;
        Ok(total)
    }

    pub fn reverse_denoise<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let obs = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| domain(e.to_string()))?;
        let (x0, _) = self.denoise_batch(obs, rng, false)?;
        Ok(x0.into_raw_vec_and_offset().0)
    }

    /// `pi_theta(s)`.
    pub fn policy<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(action_distribution(&self.reverse_denoise(obs, rng)?))
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R, mode: SampleMode) -> Result<usize> {
        let p = self.policy(obs, rng)?;
        Ok(sample_action(&p, rng, mode))
    }
}
