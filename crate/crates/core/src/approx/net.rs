//! Dense feed-forward networks over flat parameter vectors.
//!
//! Batches are row-major: `n` rows of `input_dim` values. Every layer stores
//! its weights as an `in × out` row-major block followed by `out` biases, so
//! the whole network is a single contiguous `Vec<f64>` that optimizers and
//! target-network updates can treat uniformly.
//!
//! Besides ordinary backpropagation the network exposes the gradient of a
//! scalar output with respect to its inputs, and the parameter gradient of a
//! loss defined on that input gradient (double backpropagation). The latter
//! is what a gradient penalty on `∇ₐQ` needs.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{matmul, matmul_a_bt, matmul_at_b};
use crate::error::{usage, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Swish,
    Tanh,
    Identity,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Swish => z * sigmoid(z),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Swish => {
                let s = sigmoid(z);
                s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    fn has_curvature(self) -> bool {
        matches!(self, Activation::Swish | Activation::Tanh)
    }
}

/// How the final affine layer is turned into the network output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    /// `low + (high - low) * (tanh(z) + 1) / 2`, per component.
    ScaledTanh { low: Vec<f64>, high: Vec<f64> },
    /// First half of the raw output is a mean, second half a log-variance
    /// softly clamped into `[logvar_min, logvar_max]`.
    Gaussian { logvar_min: f64, logvar_max: f64 },
}

/// Initialization of the final layer; hidden layers always use `±1/√fan_in`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinalInit {
    FanIn,
    Uniform(f64),
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    hidden: Activation,
    head: Head,
    params: Vec<f64>,
}

/// Forward activations kept for a backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pub n: usize,
    /// Input to each layer (`acts[0]` is the network input).
    acts: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// State of an input-gradient computation, reusable for double backprop.
#[derive(Clone, Debug)]
pub struct InputGradTape {
    fwd: Tape,
    /// Backward signal entering each layer's pre-activation.
    deltas: Vec<Vec<f64>>,
    /// Gradient with respect to each layer's input; `grads[0]` is `∂y/∂x`.
    grads: Vec<Vec<f64>>,
}

impl InputGradTape {
    pub fn input_gradient(&self) -> &[f64] {
        &self.grads[0]
    }

    pub fn output(&self) -> &[f64] {
        &self.fwd.output
    }
}

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        head: Head,
        final_init: FinalInit,
        rng: &mut R,
    ) -> Self {
        let raw_out = match head {
            Head::Gaussian { .. } => 2 * output,
            Head::ScaledTanh { ref low, ref high } => {
                assert_eq!(low.len(), output, "tanh head range length");
                assert_eq!(high.len(), output, "tanh head range length");
                output
            }
            Head::Identity => output,
        };
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(raw_out);
        let total: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = Vec::with_capacity(total);
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = if l + 1 == layers {
                match final_init {
                    FinalInit::FanIn => 1.0 / (fan_in as f64).sqrt(),
                    FinalInit::Uniform(b) => b,
                    FinalInit::Zero => 0.0,
                }
            } else {
                1.0 / (fan_in as f64).sqrt()
            };
            for _ in 0..(fan_in * fan_out + fan_out) {
                let u = if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                };
                params.push(u);
            }
        }
        Self {
            sizes,
            hidden: activation,
            head,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    /// Width of the value returned by `forward` (mean and log-variance for a
    /// Gaussian head).
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn activation(&self) -> Activation {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_range(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let mut off = 0;
        for k in 0..l {
            off += self.sizes[k] * self.sizes[k + 1] + self.sizes[k + 1];
        }
        let w = off..off + self.sizes[l] * self.sizes[l + 1];
        let b = w.end..w.end + self.sizes[l + 1];
        (w, b)
    }

    fn check_input(&self, x: &[f64], n: usize) -> Result<()> {
        if x.len() != n * self.input_dim() {
            return usage(format!(
                "input has {} values, expected {} rows of {}",
                x.len(),
                n,
                self.input_dim()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x, n)?.output)
    }

    pub fn forward_tape(&self, x: &[f64], n: usize) -> Result<Tape> {
        self.check_input(x, n)?;
        let layers = self.num_layers();
        let mut acts = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut cur = x.to_vec();
        for l in 0..layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_range(l);
            let bias = &self.params[br];
            let mut z = Vec::with_capacity(n * fo);
            for _ in 0..n {
                z.extend_from_slice(bias);
            }
            matmul(n, fi, fo, &cur, &self.params[wr], &mut z, 1.0);
            let next = if l + 1 < layers {
                z.iter().map(|&v| self.hidden.apply(v)).collect()
            } else {
                self.apply_head(&z, n)
            };
            acts.push(cur);
            pre.push(z);
            cur = next;
        }
        Ok(Tape {
            n,
            acts,
            pre,
            output: cur,
        })
    }

    fn apply_head(&self, z: &[f64], n: usize) -> Vec<f64> {
        let out = self.output_dim();
        match &self.head {
            Head::Identity => z.to_vec(),
            Head::ScaledTanh { low, high } => {
                let mut y = Vec::with_capacity(z.len());
                for r in 0..n {
                    for j in 0..out {
                        let t = z[r * out + j].tanh();
                        y.push(low[j] + (high[j] - low[j]) * 0.5 * (t + 1.0));
                    }
                }
                y
            }
            Head::Gaussian {
                logvar_min,
                logvar_max,
            } => {
                let d = out / 2;
                let mut y = z.to_vec();
                for r in 0..n {
                    for j in d..out {
                        let v = z[r * out + j];
                        let capped = logvar_max - softplus(logvar_max - v);
                        y[r * out + j] =
                            (logvar_min + softplus(capped - logvar_min)).clamp(*logvar_min, *logvar_max);
                    }
                }
                y
            }
        }
    }

    /// Derivative of the head output with respect to the final pre-activation.
    fn head_derivative(&self, z: &[f64], n: usize) -> Vec<f64> {
        let out = self.output_dim();
        match &self.head {
            Head::Identity => vec![1.0; z.len()],
            Head::ScaledTanh { low, high } => {
                let mut d = Vec::with_capacity(z.len());
                for r in 0..n {
                    for j in 0..out {
                        let t = z[r * out + j].tanh();
                        d.push((high[j] - low[j]) * 0.5 * (1.0 - t * t));
                    }
                }
                d
            }
            Head::Gaussian {
                logvar_min,
                logvar_max,
            } => {
                let half = out / 2;
                let mut d = vec![1.0; z.len()];
                for r in 0..n {
                    for j in half..out {
                        let v = z[r * out + j];
                        let capped = logvar_max - softplus(logvar_max - v);
                        let soft = logvar_min + softplus(capped - logvar_min);
                        d[r * out + j] = if soft > *logvar_max || soft < *logvar_min {
                            0.0
                        } else {
                            sigmoid(logvar_max - v) * sigmoid(capped - logvar_min)
                        };
                    }
                }
                d
            }
        }
    }

    /// Backpropagates `grad_out` (same shape as the output). Parameter
    /// gradients are *added* into `param_grad` when given; the input gradient
    /// is returned when `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: &[f64],
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let n = tape.n;
        let layers = self.num_layers();
        assert_eq!(grad_out.len(), n * self.output_dim(), "grad_out shape");
        if let Some(g) = param_grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "param_grad shape");
        }
        let hd = self.head_derivative(&tape.pre[layers - 1], n);
        let mut delta: Vec<f64> = grad_out.iter().zip(&hd).map(|(g, d)| g * d).collect();
        for l in (0..layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_range(l);
            if let Some(g) = param_grad.as_deref_mut() {
                matmul_at_b(fi, n, fo, &tape.acts[l], &delta, &mut g[wr.clone()], 1.0);
                let gb = &mut g[br];
                for r in 0..n {
                    for j in 0..fo {
                        gb[j] += delta[r * fo + j];
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let mut below = vec![0.0; n * fi];
            matmul_a_bt(n, fo, fi, &delta, &self.params[wr], &mut below, 0.0);
            if l == 0 {
                return Some(below);
            }
            let z = &tape.pre[l - 1];
            for (b, &zv) in below.iter_mut().zip(z) {
                *b *= self.hidden.derivative(zv);
            }
            delta = below;
        }
        None
    }

    /// Gradient of output component `output_index` with respect to the input
    /// components in `slice`, one row per batch element.
    pub fn input_gradient(
        &self,
        x: &[f64],
        n: usize,
        output_index: usize,
        slice: Range<usize>,
    ) -> Result<Vec<f64>> {
        if output_index >= self.output_dim() || slice.end > self.input_dim() {
            return usage("input_gradient: index out of range");
        }
        let tape = self.forward_tape(x, n)?;
        let out = self.output_dim();
        let mut seed = vec![0.0; n * out];
        for r in 0..n {
            seed[r * out + output_index] = 1.0;
        }
        let full = self.backward(&tape, &seed, None, true).unwrap();
        let d = self.input_dim();
        let mut g = Vec::with_capacity(n * slice.len());
        for r in 0..n {
            g.extend_from_slice(&full[r * d + slice.start..r * d + slice.end]);
        }
        Ok(g)
    }

    /// Computes `∂y/∂x` for a scalar-output identity-head network and keeps
    /// everything needed to differentiate a function of that gradient with
    /// respect to the parameters.
    pub fn input_grad_tape(&self, x: &[f64], n: usize) -> Result<InputGradTape> {
        if self.output_dim() != 1 || self.head != Head::Identity {
            return usage("double backprop requires a scalar identity-head network");
        }
        let fwd = self.forward_tape(x, n)?;
        let layers = self.num_layers();
        let mut deltas = vec![Vec::new(); layers];
        let mut grads = vec![Vec::new(); layers];
        deltas[layers - 1] = vec![1.0; n];
        for l in (0..layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, _) = self.layer_range(l);
            let mut g = vec![0.0; n * fi];
            matmul_a_bt(n, fo, fi, &deltas[l], &self.params[wr], &mut g, 0.0);
            if l > 0 {
                let z = &fwd.pre[l - 1];
                deltas[l - 1] = g
                    .iter()
                    .zip(z)
                    .map(|(gv, &zv)| gv * self.hidden.derivative(zv))
                    .collect();
            }
            grads[l] = g;
        }
        Ok(InputGradTape { fwd, deltas, grads })
    }

    /// Given `cotangent = ∂L/∂(∂y/∂x)` (shape `n × input_dim`), adds `∂L/∂θ`
    /// into `param_grad`.
    pub fn input_grad_param_grad(
        &self,
        tape: &InputGradTape,
        cotangent: &[f64],
        param_grad: &mut [f64],
    ) {
        let n = tape.fwd.n;
        let layers = self.num_layers();
        assert_eq!(cotangent.len(), n * self.input_dim(), "cotangent shape");
        assert_eq!(param_grad.len(), self.params.len(), "param_grad shape");
        let curved = self.hidden.has_curvature();
        // Adjoints of the pre-activations picked up through σ'(z); they are
        // backpropagated through the forward pass afterwards.
        let mut z_bar: Vec<Vec<f64>> = self
            .sizes
            .iter()
            .skip(1)
            .map(|&s| if curved { vec![0.0; n * s] } else { Vec::new() })
            .collect();

        let mut g_bar = cotangent.to_vec();
        for l in 0..layers {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, _) = self.layer_range(l);
            // g_l = δ_l · W_lᵀ
            matmul_at_b(
                fi,
                n,
                fo,
                &g_bar,
                &tape.deltas[l],
                &mut param_grad[wr.clone()],
                1.0,
            );
            if l + 1 == layers {
                break;
            }
            let mut d_bar = vec![0.0; n * fo];
            matmul(n, fi, fo, &g_bar, &self.params[wr], &mut d_bar, 0.0);
            // δ_l = g_{l+1} ⊙ σ'(z_l)
            let z = &tape.fwd.pre[l];
            let g_up = &tape.grads[l + 1];
            let mut next = Vec::with_capacity(n * fo);
            for i in 0..n * fo {
                next.push(d_bar[i] * self.hidden.derivative(z[i]));
                if curved {
                    z_bar[l][i] += d_bar[i] * g_up[i] * self.hidden.second_derivative(z[i]);
                }
            }
            g_bar = next;
        }

        if !curved {
            return;
        }
        // Push the σ'' contributions back through the forward computation.
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..layers - 1).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (wr, br) = self.layer_range(l);
            let mut zb = std::mem::take(&mut z_bar[l]);
            if let Some(c) = carry.take() {
                for (a, b) in zb.iter_mut().zip(c) {
                    *a += b;
                }
            }
            matmul_at_b(fi, n, fo, &tape.fwd.acts[l], &zb, &mut param_grad[wr.clone()], 1.0);
            {
                let gb = &mut param_grad[br];
                for r in 0..n {
                    for j in 0..fo {
                        gb[j] += zb[r * fo + j];
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut a_bar = vec![0.0; n * fi];
            matmul_a_bt(n, fo, fi, &zb, &self.params[wr], &mut a_bar, 0.0);
            let z = &tape.fwd.pre[l - 1];
            for (a, &zv) in a_bar.iter_mut().zip(z) {
                *a *= self.hidden.derivative(zv);
            }
            carry = Some(a_bar);
        }
    }

    /// `self ← (1 − τ)·self + τ·online`.
    pub fn soft_update(&mut self, online: &DenseNet, tau: f64) {
        assert_eq!(self.params.len(), online.params.len(), "soft_update shape");
        if tau == 1.0 {
            self.params.copy_from_slice(&online.params);
            return;
        }
        if tau == 0.0 {
            return;
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: DenseNet = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::Usage("network needs at least one layer".into()));
        }
        let total: usize = self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if total != self.params.len() {
            return Err(Error::Usage(format!(
                "shape manifest implies {} parameters, found {}",
                total,
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Parameter-vector distance, used to check that ensemble members diverge.
pub fn param_distance(a: &DenseNet, b: &DenseNet) -> f64 {
    a.params
        .iter()
        .zip(&b.params)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
