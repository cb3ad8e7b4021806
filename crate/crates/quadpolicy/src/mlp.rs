//! Dense feedforward networks with tanh hidden layers, exact forward
//! evaluation and exact parameter Jacobians.
//!
//! Both the policy (18 -> 4) and value (18 -> 1) networks are instances of
//! [`Mlp`]. There is no general autodiff here: the backward pass is written
//! out by hand for this fixed architecture family, which keeps single-state
//! inference cheap enough for control-rate use.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// Flat view of all network parameters.
///
/// Ordering is layer-major: for each layer, the weight matrix in row-major
/// order (rows = output units) followed by the bias vector. This ordering is
/// the column ordering of [`Mlp::output_jacobian`] and the on-disk ordering
/// of the serialization format.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Huber loss specification: quadratic inside `|r| <= delta`, linear outside.
#[derive(Debug, Clone, Copy)]
pub struct HuberSpec {
    pub delta: f64,
}

impl Default for HuberSpec {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

impl HuberSpec {
    /// Loss value for a single residual.
    pub fn value(&self, r: f64) -> f64 {
        let a = r.abs();
        if a <= self.delta {
            0.5 * r * r
        } else {
            self.delta * (a - 0.5 * self.delta)
        }
    }

    /// Derivative of the loss with respect to the residual.
    pub fn derivative(&self, r: f64) -> f64 {
        if r.abs() <= self.delta {
            r
        } else {
            self.delta * r.signum()
        }
    }
}

/// Feedforward network: tanh on hidden layers, affine output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// Per-layer weight matrices, row-major, shape (out x in).
    weights: Vec<Vec<f64>>,
    /// Per-layer bias vectors.
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// All-zero network with the given layer sizes.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::DimensionMismatch(format!(
                "layer_sizes must have >= 2 positive entries, got {layer_sizes:?}"
            )));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Random initialization: hidden weights uniform in `[-s, s]` with
    /// `s = 1/sqrt(fan_in)`, biases zero, output layer all zero so the
    /// fresh network emits exactly zero.
    pub fn init<R: Rng>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        let last = net.weights.len() - 1;
        for (l, w) in net.weights.iter_mut().enumerate() {
            if l == last {
                continue;
            }
            let s = 1.0 / (layer_sizes[l] as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-s..=s);
            }
        }
        Ok(net)
    }

    /// Randomize the output-layer weights uniform in `[-s, s]` with
    /// `s = scale/sqrt(fan_in)`. Undoes the zero output of [`Self::init`]
    /// so the fresh network emits non-trivial actions.
    pub fn randomize_output<R: Rng>(&mut self, scale: f64, rng: &mut R) {
        let last = self.weights.len() - 1;
        let fan_in = self.layer_sizes[last] as f64;
        let s = scale / fan_in.sqrt();
        for v in self.weights[last].iter_mut() {
            *v = rng.gen_range(-s..=s);
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total number of parameters: sum over layers of `in*out + out`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Copy all parameters into canonical flat ordering.
    pub fn flatten(&self) -> ParamVector {
        let mut v = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        ParamVector(v)
    }

    /// Overwrite all parameters from a flat vector in canonical ordering.
    pub fn unflatten(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wn = w.len();
            w.copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = b.len();
            b.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// In-place update `theta += scale * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) -> Result<()> {
        if direction.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                direction.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v += scale * direction[off];
                off += 1;
            }
            for v in b.iter_mut() {
                *v += scale * direction[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// Evaluate the network on a single input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "forward: input length {} != {}",
                input.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.weights.len();
        let mut a = input.to_vec();
        for l in 0..n_layers {
            a = self.layer_forward(l, &a, l < n_layers - 1);
        }
        Ok(a)
    }

    fn layer_forward(&self, l: usize, input: &[f64], tanh: bool) -> Vec<f64> {
        let n_in = self.layer_sizes[l];
        let n_out = self.layer_sizes[l + 1];
        let w = &self.weights[l];
        let b = &self.biases[l];
        let mut out = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let row = &w[r * n_in..(r + 1) * n_in];
            let mut z = b[r];
            for (wi, xi) in row.iter().zip(input) {
                z += wi * xi;
            }
            out.push(if tanh { z.tanh() } else { z });
        }
        out
    }

    /// Evaluate the network on a batch of row-vector inputs.
    ///
    /// Rows are independent; they are evaluated in parallel but each row
    /// uses the same accumulation order as [`Mlp::forward`], so the result
    /// is bitwise identical to a per-row loop.
    pub fn batch_forward(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for row in inputs {
            if row.len() != self.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "batch_forward: row length {} != {}",
                    row.len(),
                    self.input_dim()
                )));
            }
        }
        Ok(inputs
            .par_iter()
            .map(|row| self.forward(row).expect("shape checked above"))
            .collect())
    }

    /// Forward pass keeping every layer activation (`acts[0]` is the input,
    /// `acts[L]` the output).
    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.weights.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for l in 0..n_layers {
            let next = self.layer_forward(l, &acts[l], l < n_layers - 1);
            acts.push(next);
        }
        acts
    }

    /// Backpropagate an output-side delta to a flat parameter gradient,
    /// accumulated into `grad` with weight `scale`.
    fn backprop_into(&self, acts: &[Vec<f64>], out_delta: &[f64], scale: f64, grad: &mut [f64]) {
        let n_layers = self.weights.len();
        // Parameter offsets per layer in the flat ordering.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1];
        }
        let mut delta = out_delta.to_vec();
        for l in (0..n_layers).rev() {
            let n_in = self.layer_sizes[l];
            let n_out = self.layer_sizes[l + 1];
            let base = offsets[l];
            let a_in = &acts[l];
            for r in 0..n_out {
                let d = delta[r] * scale;
                let wrow = &mut grad[base + r * n_in..base + (r + 1) * n_in];
                for (g, x) in wrow.iter_mut().zip(a_in) {
                    *g += d * x;
                }
            }
            let bias_base = base + n_in * n_out;
            for r in 0..n_out {
                grad[bias_base + r] += delta[r] * scale;
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut prev = vec![0.0; n_in];
                for r in 0..n_out {
                    let d = delta[r];
                    let row = &w[r * n_in..(r + 1) * n_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += wi * d;
                    }
                }
                // tanh' expressed through the stored activation.
                for (p, a) in prev.iter_mut().zip(a_in) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }

    /// Exact Jacobian of the network output with respect to all parameters,
    /// shape (output dim) x (parameter count). Column ordering matches
    /// [`ParamVector`].
    pub fn output_jacobian(&self, input: &[f64]) -> Result<DMatrix<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "output_jacobian: input length {} != {}",
                input.len(),
                self.input_dim()
            )));
        }
        let acts = self.forward_cached(input);
        let n_out = self.output_dim();
        let n_params = self.param_count();
        let mut jac = DMatrix::zeros(n_out, n_params);
        let mut row = vec![0.0; n_params];
        let mut seed = vec![0.0; n_out];
        for i in 0..n_out {
            row.iter_mut().for_each(|v| *v = 0.0);
            seed.iter_mut().for_each(|v| *v = 0.0);
            seed[i] = 1.0;
            self.backprop_into(&acts, &seed, 1.0, &mut row);
            for (j, v) in row.iter().enumerate() {
                jac[(i, j)] = *v;
            }
        }
        Ok(jac)
    }

    /// Mean Huber loss of a scalar-output network over a batch.
    pub fn batch_loss(&self, inputs: &[Vec<f64>], targets: &[f64], loss: HuberSpec) -> Result<f64> {
        self.check_scalar_batch(inputs, targets)?;
        let n = inputs.len() as f64;
        let total: f64 = inputs
            .par_iter()
            .zip(targets)
            .map(|(x, t)| loss.value(self.forward(x).expect("shape checked")[0] - t))
            .sum();
        Ok(total / n)
    }

    /// Gradient of the mean Huber loss over a batch with respect to all
    /// parameters. Requires a scalar-output network.
    pub fn loss_gradient(
        &self,
        inputs: &[Vec<f64>],
        targets: &[f64],
        loss: HuberSpec,
    ) -> Result<ParamVector> {
        self.check_scalar_batch(inputs, targets)?;
        let n_params = self.param_count();
        let scale = 1.0 / inputs.len() as f64;
        // Shard over fixed chunks and sum shard gradients in index order so
        // the result does not depend on thread scheduling.
        let chunk = 256;
        let shards: Vec<Vec<f64>> = inputs
            .par_chunks(chunk)
            .zip(targets.par_chunks(chunk))
            .map(|(xs, ts)| {
                let mut g = vec![0.0; n_params];
                for (x, t) in xs.iter().zip(ts) {
                    let acts = self.forward_cached(x);
                    let residual = acts.last().unwrap()[0] - t;
                    let d = loss.derivative(residual) * scale;
                    self.backprop_into(&acts, &[1.0], d, &mut g);
                }
                g
            })
            .collect();
        let mut grad = vec![0.0; n_params];
        for shard in &shards {
            for (g, s) in grad.iter_mut().zip(shard) {
                *g += s;
            }
        }
        Ok(ParamVector(grad))
    }

    fn check_scalar_batch(&self, inputs: &[Vec<f64>], targets: &[f64]) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "scalar loss requires output dim 1, network has {}",
                self.output_dim()
            )));
        }
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "batch of {} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        for row in inputs {
            if row.len() != self.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "input length {} != {}",
                    row.len(),
                    self.input_dim()
                )));
            }
        }
        Ok(())
    }

    /// Write the network to a text file.
    ///
    /// Format (stable): header line `quadpolicy-net v1`, a line with the
    /// layer sizes, then one parameter per line in [`ParamVector`] ordering.
    /// Values are printed with Rust's shortest round-trip float formatting,
    /// so load(save(net)) is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "quadpolicy-net v1")?;
        let sizes: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "{}", sizes.join(" "))?;
        for (weights, biases) in self.weights.iter().zip(&self.biases) {
            for v in weights.iter().chain(biases) {
                writeln!(w, "{v}")?;
            }
        }
        Ok(())
    }

    /// Load a network written by [`Mlp::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty network file".into()))??;
        if header.trim() != "quadpolicy-net v1" {
            return Err(Error::Parse(format!("unknown network header {header:?}")));
        }
        let sizes_line = lines
            .next()
            .ok_or_else(|| Error::Parse("missing layer sizes".into()))??;
        let sizes: Vec<usize> = sizes_line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Parse(format!("bad layer size {t:?}")))
            })
            .collect::<Result<_>>()?;
        let mut net = Self::zeros(&sizes)?;
        let mut params = Vec::with_capacity(net.param_count());
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            params.push(
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter {t:?}")))?,
            );
        }
        net.unflatten(&params)?;
        Ok(net)
    }
}
