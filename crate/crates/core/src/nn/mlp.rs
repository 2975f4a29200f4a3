//! Dense feed-forward network with a single cached forward pass for backprop.
//!
//! Layer `i` computes `a_{i+1} = act(a_i · W_i + b_i)` where `W_i` has shape
//! `(dims[i], dims[i+1])`. Hidden layers share one activation; the last layer
//! uses the output activation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::math::{sigmoid, sqrt, tanh};
use crate::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => tanh(x),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

impl OutputActivation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => x,
            OutputActivation::Sigmoid => sigmoid(x),
        }
    }

    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// A named, shaped block of parameters; the unit of checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// `∂loss/∂input` for the cached batch.
    pub input: Matrix,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    output_activation: OutputActivation,
    /// Post-activation values `a_0 ..= a_L` of the last `forward` call.
    cache: Option<Vec<Matrix>>,
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(
        dims: &[usize],
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(config_err(format!("invalid layer dims {dims:?}")));
        }
        let weights = dims
            .windows(2)
            .map(|w| Matrix::zeros(w[0], w[1]))
            .collect();
        let biases = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
            output_activation,
            cache: None,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        output_activation: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, activation, output_activation)?;
        for w in &mut net.weights {
            let limit = sqrt(6.0 / (w.rows() + w.cols()) as f64);
            for v in w.data_mut() {
                *v = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    /// Parameter blocks in `W_0, b_0, W_1, b_1, …` order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    /// Reads one parameter by its index in [`Mlp::param_slices`] order.
    pub fn flat_param(&self, mut idx: usize) -> f64 {
        for s in self.param_slices() {
            if idx < s.len() {
                return s[idx];
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat_param(&mut self, mut idx: usize, value: f64) {
        for s in self.param_slices_mut() {
            if idx < s.len() {
                s[idx] = value;
                return;
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.dims[0] {
            return Err(config_err(format!(
                "network expects {} inputs, got {}",
                self.dims[0],
                input.cols()
            )));
        }
        Ok(())
    }

    fn layer(&self, l: usize, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul(&self.weights[l])?;
        let last = l + 1 == self.weights.len();
        let b = &self.biases[l];
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            if last {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v = self.output_activation.apply(*v + bj);
                }
            } else {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v = self.activation.apply(*v + bj);
                }
            }
        }
        Ok(z)
    }

    /// Pure evaluation; does not touch the gradient cache.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut a = self.layer(0, input)?;
        for l in 1..self.weights.len() {
            a = self.layer(l, &a)?;
        }
        Ok(a)
    }

    /// Evaluates and caches every layer's activations for [`Mlp::backward`].
    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(input.clone());
        for l in 0..self.weights.len() {
            let next = self.layer(l, &acts[l])?;
            acts.push(next);
        }
        let out = acts[acts.len() - 1].clone();
        self.cache = Some(acts);
        Ok(out)
    }

    /// Exact gradients for the cached forward pass. Consumes the cache.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<MlpGrads> {
        let acts = self
            .cache
            .take()
            .ok_or(Error::Usage("backward called without a preceding forward"))?;
        let out = &acts[acts.len() - 1];
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(config_err(format!(
                "upstream gradient is {}x{}, output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let n_layers = self.weights.len();
        let mut g = upstream.clone();
        for (gv, &y) in g.data_mut().iter_mut().zip(out.data()) {
            *gv *= self.output_activation.grad_from_output(y);
        }
        let mut weights = vec![Matrix::default(); n_layers];
        let mut biases = vec![Vec::new(); n_layers];
        let mut input = Matrix::default();
        for l in (0..n_layers).rev() {
            weights[l] = acts[l].t_matmul(&g)?;
            let mut db = vec![0.0; g.cols()];
            for i in 0..g.rows() {
                for (d, v) in db.iter_mut().zip(g.row(i)) {
                    *d += v;
                }
            }
            biases[l] = db;
            let mut gin = g.matmul_t(&self.weights[l])?;
            if l > 0 {
                for (gv, &y) in gin.data_mut().iter_mut().zip(acts[l].data()) {
                    *gv *= self.activation.grad_from_output(y);
                }
                g = gin;
            } else {
                input = gin;
            }
        }
        Ok(MlpGrads {
            weights,
            biases,
            input,
        })
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Parameters as named tensors `{prefix}.w{i}` / `{prefix}.b{i}`.
    pub fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push(Tensor {
                name: format!("{prefix}.w{i}"),
                shape: vec![w.rows(), w.cols()],
                values: w.data().to_vec(),
            });
            out.push(Tensor {
                name: format!("{prefix}.b{i}"),
                shape: vec![b.len()],
                values: b.clone(),
            });
        }
        out
    }

    /// Restores parameters written by [`Mlp::tensors`]; shapes must match.
    pub fn load_tensors(&mut self, prefix: &str, tensors: &[Tensor]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Load(format!("missing tensor {name}")))
        };
        for i in 0..self.weights.len() {
            let wt = find(&format!("{prefix}.w{i}"))?;
            let w = &mut self.weights[i];
            if wt.shape != [w.rows(), w.cols()] || wt.values.len() != w.data().len() {
                return Err(Error::Load(format!("shape mismatch for {}", wt.name)));
            }
            w.data_mut().copy_from_slice(&wt.values);
            let bt = find(&format!("{prefix}.b{i}"))?;
            let b = &mut self.biases[i];
            if bt.shape != [b.len()] || bt.values.len() != b.len() {
                return Err(Error::Load(format!("shape mismatch for {}", bt.name)));
            }
            b.copy_from_slice(&bt.values);
        }
        self.cache = None;
        Ok(())
    }
}
