//! Dense feed-forward networks on top of [`Graph`].

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Shape of a fully connected network. Hidden layers apply the activation;
/// the output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Identity skips around hidden layers whose input and output widths match.
    #[serde(default)]
    pub residual: bool,
}

/// Offsets of one layer's weight matrix (row-major, `fan_in x fan_out`) and
/// bias inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Tanh,
            residual: false,
        }
    }

    pub fn residual(mut self, on: bool) -> Self {
        self.residual = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Invalid(format!("network dims must be >= 1: {self:?}")));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Invalid("network needs at least one hidden layer".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_widths);
        dims.push(self.output_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = offset..offset + fan_in * fan_out;
                let bias = weight.end..weight.end + fan_out;
                offset = bias.end;
                LayerLayout { fan_in, fan_out, weight, bias }
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layout().last().map_or(0, |l| l.bias.end)
    }

    /// Width of the last hidden layer.
    pub fn last_hidden(&self) -> usize {
        *self.hidden_widths.last().unwrap_or(&self.input_dim)
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; spec.n_params()];
    for layer in spec.layout() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params[layer.weight] {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Records the network applied to the rows of `x` on `g`; `theta` is a
/// `1 x n_params` node.
pub fn forward_graph(spec: &NetworkSpec, g: &mut Graph, theta: Var, x: Var) -> Result<Var> {
    let xv = g.value(x);
    if xv.ncols() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "network input has {} columns, expected {}",
            xv.ncols(),
            spec.input_dim
        )));
    }
    if g.value(theta).ncols() != spec.n_params() {
        return Err(Error::Dimension(format!(
            "network has {} parameters, got {}",
            spec.n_params(),
            g.value(theta).ncols()
        )));
    }
    let layout = spec.layout();
    let n_layers = layout.len();
    let mut h = x;
    for (i, layer) in layout.iter().enumerate() {
        let w_flat = g.slice_cols(theta, layer.weight.start, layer.weight.end)?;
        let w = g.reshape(w_flat, layer.fan_in, layer.fan_out)?;
        let b = g.slice_cols(theta, layer.bias.start, layer.bias.end)?;
        let z = g.matmul(h, w)?;
        let z = g.add_row(z, b)?;
        if i + 1 == n_layers {
            h = z;
        } else {
            let a = match spec.activation {
                Activation::Tanh => g.tanh(z),
            };
            h = if spec.residual && layer.fan_in == layer.fan_out {
                g.add(a, h)?
            } else {
                a
            };
        }
    }
    Ok(h)
}

/// Batched evaluation: rows of `x` are inputs.
pub fn forward_batch(spec: &NetworkSpec, params: &[f64], x: &Mat) -> Result<Mat> {
    let mut g = Graph::new();
    let theta = g.row(params);
    let xv = g.leaf(x.clone());
    let out = forward_graph(spec, &mut g, theta, xv)?;
    Ok(g.value(out).clone())
}

pub fn forward(spec: &NetworkSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    let x = Mat::from_row_slice(1, input.len(), input);
    Ok(forward_batch(spec, params, &x)?.iter().copied().collect())
}
