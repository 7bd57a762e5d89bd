//! Small feed-forward networks with batched forward passes and hand-written
//! reverse-mode gradients.
//!
//! Inputs are row-major batches (`batch x features`). Weights are stored as
//! `in x out` so a layer is `X W + b`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// `x * tanh(softplus(x))`
    Mish,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Mish => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Mish,
            _ => return Err(Error::Checkpoint(format!("unknown activation code {code}"))),
        })
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Mish => z * softplus(z).tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Mish => {
                let t = softplus(z).tanh();
                let sigmoid = 1.0 / (1.0 + (-z).exp());
                t + z * (1.0 - t * t) * sigmoid
            }
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Feed-forward network: affine layers with a shared hidden activation and a
/// separate output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden: Activation,
    output: Activation,
}

/// Intermediate values of one batched forward pass, consumed by
/// [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// Input to every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Array2<f64>>,
    consumed: bool,
}

impl GradientTape {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// Parameter-shaped buffer: gradients, optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    /// All entries, in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(domain(format!("invalid layer sizes {layer_sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.random_range(-limit..limit)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Builds a network from explicit `in x out` weight matrices.
    pub fn from_parameters(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(domain("weights and biases must be non-empty and paired"));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(domain(format!("layer {i}: bias length {} vs {} outputs", b.len(), w.ncols())));
            }
            if i > 0 && weights[i - 1].ncols() != w.nrows() {
                return Err(domain(format!("layer {i}: input {} vs previous output {}", w.nrows(), weights[i - 1].ncols())));
            }
        }
        let net = Self {
            weights,
            biases,
            hidden,
            output,
        };
        if !net.is_finite() {
            return Err(domain("non-finite parameter"));
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.weights[0].nrows()];
        sizes.extend(self.weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Multiplies the last layer's weights by `factor`; used to start
    /// output heads near zero.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.weights.len() - 1;
        self.weights[last] *= factor;
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(domain(format!(
                "input dimension {cols} does not match network input {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| domain(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = x.dot(w);
            z += b;
            let act = self.activation(i);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, GradientTape)> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut x = input.to_owned();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = x.dot(w);
            z += b;
            let act = self.activation(i);
            let out = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            inputs.push(x);
            pre.push(z);
            x = out;
        }
        Ok((
            x,
            GradientTape {
                inputs,
                pre,
                consumed: false,
            },
        ))
    }

    /// Forward pass starting from the first layer's pre-activation
    /// `z0 = input . W_0 + b_0`, for callers that assemble `z0` piecewise.
    pub fn forward_from_pre(&self, z0: Array2<f64>) -> Result<Array2<f64>> {
        self.check_pre(&z0)?;
        let mut z = z0;
        for i in 0..self.weights.len() {
            if i > 0 {
                z = z.dot(&self.weights[i]) + &self.biases[i];
            }
            let act = self.activation(i);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
        }
        Ok(z)
    }

    /// [`Mlp::forward_from_pre`] with a tape for [`Mlp::backward_to_pre`].
    pub fn forward_tape_from_pre(&self, z0: Array2<f64>) -> Result<(Array2<f64>, GradientTape)> {
        self.check_pre(&z0)?;
        let n = self.weights.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut z = z0;
        for i in 0..n {
            let act = self.activation(i);
            let out = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            pre.push(z);
            if i + 1 < n {
                z = out.dot(&self.weights[i + 1]) + &self.biases[i + 1];
                inputs.push(out);
            } else {
                // The first layer's input never enters this tape.
                inputs.insert(0, Array2::zeros((0, 0)));
                return Ok((
                    out,
                    GradientTape {
                        inputs,
                        pre,
                        consumed: false,
                    },
                ));
            }
        }
        unreachable!("network has at least one layer")
    }

    fn check_pre(&self, z0: &Array2<f64>) -> Result<()> {
        if z0.ncols() != self.biases[0].len() {
            return Err(domain(format!(
                "first pre-activation has {} columns, layer has {}",
                z0.ncols(),
                self.biases[0].len()
            )));
        }
        Ok(())
    }

    /// Backpropagates `upstream` (dL/d output, same shape as the output
    /// batch). Returns parameter gradients summed over the batch and the
    /// gradient with respect to the input batch.
    pub fn backward(&self, tape: &mut GradientTape, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.backward_inner(tape, upstream, false)
    }

    /// Backward pass for a tape from [`Mlp::forward_tape_from_pre`]. The
    /// first layer's gradients are left at zero; the second value is
    /// dL/d`z0`, from which the caller finishes that layer.
    pub fn backward_to_pre(&self, tape: &mut GradientTape, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        self.backward_inner(tape, upstream, true)
    }

    fn backward_inner(
        &self,
        tape: &mut GradientTape,
        upstream: ArrayView2<f64>,
        stop_at_pre: bool,
    ) -> Result<(Gradients, Array2<f64>)> {
        if tape.consumed {
            return Err(Error::Usage("gradient tape already consumed".into()));
        }
        if tape.pre.len() != self.weights.len() {
            return Err(domain("tape was recorded on a different network"));
        }
        let last = &tape.pre[tape.pre.len() - 1];
        if upstream.dim() != last.dim() {
            return Err(domain(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.dim(),
                last.dim()
            )));
        }
        tape.consumed = true;
        let inputs = std::mem::take(&mut tape.inputs);
        let pre = std::mem::take(&mut tape.pre);

        let n = self.weights.len();
        let mut grad_w = Vec::with_capacity(n);
        let mut grad_b = Vec::with_capacity(n);
        let mut delta = upstream.to_owned();
        for (i, (x, mut z)) in inputs.into_iter().zip(pre).enumerate().rev() {
            let act = self.activation(i);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.derivative(v));
                delta *= &z;
            }
            if i == 0 && stop_at_pre {
                grad_w.push(Array2::zeros(self.weights[0].dim()));
                grad_b.push(Array1::zeros(self.biases[0].len()));
                break;
            }
            grad_w.push(x.t().dot(&delta));
            grad_b.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.weights[i].t());
        }
        grad_w.reverse();
        grad_b.reverse();
        Ok((
            Gradients {
                weights: grad_w,
                biases: grad_b,
            },
            delta,
        ))
    }

    /// Applies `params -= step * grads` elementwise.
    pub fn descend(&mut self, grads: &Gradients, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-step, g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-step, g);
        }
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    /// All parameters in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    /// Overwrites all parameters from a flat vector in checkpoint order.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(domain(format!("expected {} parameters, got {}", self.parameter_count(), values.len())));
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap_or(0.0));
            b.iter_mut().for_each(|x| *x = it.next().unwrap_or(0.0));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(&[self.hidden.code(), self.output.code()])?;
        let sizes = self.layer_sizes();
        out.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            out.write_all(&(*s as u32).to_le_bytes())?;
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            // Row-major: weights as stored (in x out), then bias.
            for x in w.iter().chain(b.iter()) {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut codes = [0u8; 2];
        input.read_exact(&mut codes)?;
        let hidden = Activation::from_code(codes[0])?;
        let output = Activation::from_code(codes[1])?;
        let count = read_u32(input)? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Checkpoint(format!("implausible layer count {count}")));
        }
        let sizes = (0..count).map(|_| read_u32(input).map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
            return Err(Error::Checkpoint(format!("implausible layer sizes {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let w = read_f64s(input, pair[0] * pair[1])?;
            let b = read_f64s(input, pair[1])?;
            weights.push(Array2::from_shape_vec((pair[0], pair[1]), w).map_err(|e| Error::Checkpoint(e.to_string()))?);
            biases.push(Array1::from_vec(b));
        }
        Self::from_parameters(weights, biases, hidden, output).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(domain(format!("soft update rate {tau} outside [0, 1]")));
    }
    if !target.same_shape(online) {
        return Err(domain("soft update between networks of different shape"));
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescales the gradient to this L2 norm when exceeded.
    pub max_grad_norm: Option<f64>,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: None,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    pub fn with_max_grad_norm(mut self, norm: f64) -> Self {
        self.max_grad_norm = Some(norm);
        self
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = grads.l2_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.learning_rate;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            let g = g * clip;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((p, m), v), g) in net
            .weights
            .iter_mut()
            .zip(self.m.weights.iter_mut())
            .zip(self.v.weights.iter_mut())
            .zip(&grads.weights)
        {
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| update(p, m, v, g));
        }
        for (((p, m), v), g) in net
            .biases
            .iter_mut()
            .zip(self.m.biases.iter_mut())
            .zip(self.v.biases.iter_mut())
            .zip(&grads.biases)
        {
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"MSBCKPT1";
const VERSION: u32 = 1;

/// Versioned checkpoint: named networks plus named auxiliary vectors.
///
/// Layout (little endian): magic `MSBCKPT1`, `u32` version, `u32` network
/// count, then per network a `u32`-length-prefixed UTF-8 name, two activation
/// codes, `u32` layer count, `u32` layer sizes and row-major `f64` parameter
/// blocks (weights `in x out`, then bias) per layer. After the networks: `u32`
/// vector count, then per vector a name, a `u32` length and the `f64` entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<(String, Mlp)>,
    pub vectors: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Result<&Mlp> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing network {name}")))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing vector {name}")))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.networks.len() as u32).to_le_bytes())?;
        for (name, net) in &self.networks {
            write_name(out, name)?;
            net.write_to(out)?;
        }
        out.write_all(&(self.vectors.len() as u32).to_le_bytes())?;
        for (name, v) in &self.vectors {
            write_name(out, name)?;
            out.write_all(&(v.len() as u32).to_le_bytes())?;
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = read_u32(input)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(input)?;
        let mut networks = Vec::new();
        for _ in 0..count {
            let name = read_name(input)?;
            networks.push((name, Mlp::read_from(input)?));
        }
        let count = read_u32(input)?;
        let mut vectors = Vec::new();
        for _ in 0..count {
            let name = read_name(input)?;
            let len = read_u32(input)? as usize;
            vectors.push((name, read_f64s(input, len)?));
        }
        Ok(Self { networks, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_name<W: Write>(out: &mut W, name: &str) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(input: &mut R) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1024 {
        return Err(Error::Checkpoint("implausible name length".into()));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight")))
        .collect())
}

/// Central-difference gradient of `loss` with respect to every parameter,
/// in checkpoint order.
pub fn finite_difference_gradient(net: &Mlp, h: f64, mut loss: impl FnMut(&Mlp) -> f64) -> Vec<f64> {
    let base = net.flatten();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + h;
        probe.set_flat(&params).expect("same length");
        let up = loss(&probe);
        params[i] = base[i] - h;
        probe.set_flat(&params).expect("same length");
        let down = loss(&probe);
        params[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::from_parameters(
            vec![Array2::zeros((3, 4)), Array2::zeros((4, 2))],
            vec![Array1::zeros(4), Array1::zeros(2)],
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = Mlp::from_parameters(
            vec![Array2::eye(3)],
            vec![Array1::zeros(3)],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_two_two_one() {
        // h = relu([1,1] W1 + b1) with W1 = [[1,-1],[2,0.5]], b1 = [0.5,-1]
        //   = relu([3.5, -1.5]) = [3.5, 0]; y = 3.5*2 + 0*(-3) + 0.25 = 7.25
        let net = Mlp::from_parameters(
            vec![array![[1.0, -1.0], [2.0, 0.5]], array![[2.0], [-3.0]]],
            vec![array![0.5, -1.0], array![0.25]],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), vec![7.25]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let net = Mlp::new(&[3, 4, 1], Activation::Relu, Activation::Identity, &mut rng()).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        assert!(Mlp::from_parameters(
            vec![Array2::zeros((2, 3)), Array2::zeros((4, 1))],
            vec![Array1::zeros(3), Array1::zeros(1)],
            Activation::Relu,
            Activation::Identity
        )
        .is_err());
    }

    #[test]
    fn linear_squared_loss_closed_form() {
        let net = Mlp::from_parameters(
            vec![array![[0.3], [-0.7]]],
            vec![array![0.1]],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        let x = array![[2.0, 1.5]];
        let target = 4.0;
        let (pred, mut tape) = net.forward_tape(x.view()).unwrap();
        let residual = pred[[0, 0]] - target;
        let (g, _) = net.backward(&mut tape, array![[2.0 * residual]].view()).unwrap();
        assert_relative_eq!(g.weights[0][[0, 0]], 2.0 * residual * 2.0);
        assert_relative_eq!(g.weights[0][[1, 0]], 2.0 * residual * 1.5);
        assert_relative_eq!(g.biases[0][0], 2.0 * residual);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let net = Mlp::new(&[4, 8, 3], Activation::Tanh, Activation::Identity, &mut rng()).unwrap();
        let x = Array2::from_elem((5, 4), 0.3);
        let (_, mut tape) = net.forward_tape(x.view()).unwrap();
        let (g, dx) = net.backward(&mut tape, Array2::zeros((5, 3)).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn consumed_tape_is_a_usage_error() {
        let net = Mlp::new(&[2, 3, 1], Activation::Mish, Activation::Identity, &mut rng()).unwrap();
        let (_, mut tape) = net.forward_tape(array![[1.0, 2.0]].view()).unwrap();
        net.backward(&mut tape, array![[1.0]].view()).unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(net.backward(&mut tape, array![[1.0]].view()), Err(Error::Usage(_))));
    }

    #[test]
    fn three_layer_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Mish] {
            let mut r = rng();
            let net = Mlp::new(&[3, 5, 4, 2], act, Activation::Identity, &mut r).unwrap();
            let x = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
            let c = Array2::from_shape_fn((4, 2), |_| r.random_range(-1.0..1.0));
            let loss = |n: &Mlp| (n.forward_batch(x.view()).unwrap() * &c).sum();
            let (_, mut tape) = net.forward_tape(x.view()).unwrap();
            let (g, _) = net.backward(&mut tape, c.view()).unwrap();
            let fd = finite_difference_gradient(&net, 1e-5, loss);
            for (a, n) in g.flatten().iter().zip(&fd) {
                assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng();
        let net = Mlp::new(&[3, 6, 2], Activation::Mish, Activation::Tanh, &mut r).unwrap();
        let x = array![[0.2, -0.4, 0.9]];
        let (_, mut tape) = net.forward_tape(x.view()).unwrap();
        let (_, dx) = net.backward(&mut tape, array![[1.0, -2.0]].view()).unwrap();
        let f = |x: &Array2<f64>| {
            let y = net.forward_batch(x.view()).unwrap();
            y[[0, 0]] - 2.0 * y[[0, 1]]
        };
        for j in 0..3 {
            let mut up = x.clone();
            up[[0, j]] += 1e-6;
            let mut down = x.clone();
            down[[0, j]] -= 1e-6;
            assert_relative_eq!(dx[[0, j]], (f(&up) - f(&down)) / 2e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn soft_update_examples() {
        let mut r = rng();
        let online = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let original = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut r).unwrap();

        let mut t = original.clone();
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);

        let mut t = original.clone();
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, original);

        let mut t = original.clone();
        t.set_flat(&vec![0.0; t.parameter_count()]).unwrap();
        let mut two = online.clone();
        two.set_flat(&vec![2.0; two.parameter_count()]).unwrap();
        soft_update(&mut t, &two, 0.5).unwrap();
        assert!(t.flatten().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn soft_update_contracts_by_exact_factor() {
        let mut r = rng();
        let online = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let mut target = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut r).unwrap();
        let before: Vec<f64> = target.flatten().iter().zip(online.flatten()).map(|(t, o)| t - o).collect();
        soft_update(&mut target, &online, 0.1).unwrap();
        let after: Vec<f64> = target.flatten().iter().zip(online.flatten()).map(|(t, o)| t - o).collect();
        for (b, a) in before.iter().zip(&after) {
            assert_relative_eq!(*a, 0.9 * b, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut net = Mlp::from_parameters(
            vec![array![[1.0]]],
            vec![array![0.0]],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap();
        let mut opt = Adam::new(&net, 0.05);
        let x = array![[1.0]];
        for _ in 0..200 {
            let (y, mut tape) = net.forward_tape(x.view()).unwrap();
            let (g, _) = net.backward(&mut tape, (2.0 * (y - 3.0)).view()).unwrap();
            opt.step(&mut net, &g).unwrap();
        }
        assert!((net.forward(&[1.0]).unwrap()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut r = rng();
        let ckpt = Checkpoint {
            networks: vec![
                ("actor".into(), Mlp::new(&[5, 7, 3], Activation::Mish, Activation::Identity, &mut r).unwrap()),
                ("critic".into(), Mlp::new(&[4, 2], Activation::Relu, Activation::Tanh, &mut r).unwrap()),
            ],
            vectors: vec![("stats".into(), vec![1.5, -2.0, f64::MIN_POSITIVE])],
        };
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], b"MSBCKPT1");
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);

        bytes[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bytes.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn forward_is_bit_stable() {
        let mut r = rng();
        let net = Mlp::new(&[6, 64, 64, 4], Activation::Mish, Activation::Identity, &mut r).unwrap();
        let x = Array2::from_shape_fn((32, 6), |_| r.random_range(-2.0..2.0));
        let a = net.forward_batch(x.view()).unwrap();
        let b = net.forward_batch(x.view()).unwrap();
        assert_eq!(a, b);
        // Batched rows agree with single-row evaluation.
        let row = net.forward(x.row(3).as_slice().unwrap()).unwrap();
        for (u, v) in row.iter().zip(a.row(3)) {
            assert_relative_eq!(*u, *v, max_relative = 1e-12);
        }
    }
}
