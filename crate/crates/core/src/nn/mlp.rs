use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
        }
    }

    /// Derivative expressed through the activated value.
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl core::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown activation `{s}`"))),
        }
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        let a = libm::sqrt(6.0 / (inputs + outputs) as f64);
        for w in &mut layer.weights {
            *w = rng.random_range(-a..=a);
        }
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates weight gradients for upstream `d_out` at input `x` into `grads`
    /// and returns the gradient with respect to `x`.
    pub fn backward(&self, x: &[f64], d_out: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grads.weights[row + i] += g * x[i];
                dx[i] += g * self.weights[row + i];
            }
        }
        dx
    }

    pub(crate) fn for_each_slice(&self, f: &mut dyn FnMut(&[f64])) {
        f(&self.weights);
        f(&self.bias);
    }

    pub(crate) fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.weights);
        f(&mut self.bias);
    }
}

/// Stack of dense layers; hidden layers are activated, the last one is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    fn widths(inputs: usize, hidden: &[usize], outputs: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(inputs);
        w.extend_from_slice(hidden);
        w.push(outputs);
        w
    }

    pub fn zeros(inputs: usize, hidden: &[usize], outputs: usize, activation: Activation) -> Self {
        let w = Self::widths(inputs, hidden, outputs);
        let layers = w.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect();
        Self { layers, activation }
    }

    pub fn glorot<R: Rng>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = Self::widths(inputs, hidden, outputs);
        let layers = w.windows(2).map(|p| Dense::glorot(p[0], p[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Returns every layer's input plus the final output, in order.
    pub fn forward_cached(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.inputs() {
            return Err(Error::DimensionMismatch { expected: self.inputs(), found: x.len() });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&acts[i]);
            if i < last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            acts.push(z);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.pop().unwrap_or_default())
    }

    /// Backpropagates `d_out` through a cached forward pass, accumulating into
    /// `grads`; returns the gradient with respect to the network input.
    pub fn backward(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&acts[i], &delta, &mut grads.layers[i]);
            if i > 0 {
                delta = dx
                    .iter()
                    .zip(&acts[i])
                    .map(|(g, a)| g * self.activation.derivative_from_output(*a))
                    .collect();
            } else {
                delta = dx;
            }
        }
        delta
    }

    pub(crate) fn for_each_slice(&self, f: &mut dyn FnMut(&[f64])) {
        self.layers.iter().for_each(|l| l.for_each_slice(f));
    }

    pub(crate) fn for_each_slice_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.for_each_slice_mut(f));
    }
}
