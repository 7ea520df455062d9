//! Feedback policy `α_θ(t, x)`: a fully connected network on `(t, x)`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Eval, Graph, ParamGrads};
use crate::ensemble::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    /// Input (state dim + 1), hidden widths, output (action dim).
    sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array2<f64>>,
}

impl PolicyNetwork {
    /// Glorot-uniform weights, zero biases; the output layer is scaled by `output_scale`.
    pub fn new(
        state_dim: usize,
        hidden: &[usize],
        action_dim: usize,
        activation: Activation,
        output_scale: f64,
        stream: RngStream,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        if sizes.iter().any(|&s| s == 0) || state_dim == 0 {
            return Err(Error::Parameter(format!("layer sizes must be positive, got {sizes:?}")));
        }
        let mut rng = stream.rng();
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l + 1 == layers { output_scale } else { 1.0 };
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || scale * rng.random_range(-limit..limit));
            weights.push(w);
            biases.push(Array2::zeros((1, fan_out)));
        }
        Ok(Self { sizes, activation, weights, biases })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn state_dim(&self) -> usize {
        self.sizes[0] - 1
    }

    pub fn action_dim(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Array2::len).sum()
    }

    /// Parameters flattened as `w0, b0, w1, b1, ...`, each row-major.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), theta.len())));
        }
        let mut it = theta.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|p| *p = it.next().expect("length checked"));
        }
        Ok(())
    }

    /// Zeroes the output layer so the policy is identically zero.
    pub fn zero_output(&mut self) {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            w.fill(0.0);
            b.fill(0.0);
        }
    }

    /// Registers the parameters on a graph as indices `0..2L` (`2l` weight, `2l+1` bias).
    pub fn register<G: Graph>(&self, graph: &mut G) -> Vec<G::Var> {
        let mut vars = Vec::with_capacity(2 * self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            vars.push(graph.parameter(2 * l, w));
            vars.push(graph.parameter(2 * l + 1, b));
        }
        vars
    }

    /// Batched forward pass on `states` (`N x d`) at time `t`.
    pub fn forward_graph<G: Graph>(&self, graph: &mut G, params: &[G::Var], t: f64, states: &G::Var) -> G::Var {
        let n = graph.value(states).nrows();
        let time = graph.constant(Array2::from_elem((n, 1), t));
        let mut h = graph.concat(&[&time, states]);
        let layers = self.weights.len();
        for l in 0..layers {
            let z = graph.matmul(&h, &params[2 * l]);
            let z = graph.add_row(&z, &params[2 * l + 1]);
            h = if l + 1 == layers {
                z
            } else {
                match self.activation {
                    Activation::Tanh => graph.tanh(&z),
                }
            };
        }
        h
    }

    /// Controls for every row of `states` at time `t`.
    pub fn forward(&self, t: f64, states: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut g = Eval;
        let params = self.register(&mut g);
        let x = g.constant(states.to_owned());
        let out = self.forward_graph(&mut g, &params, t, &x);
        (*out).clone()
    }

    /// Flattens tape gradients in [`Self::flat_params`] order; absent entries are zero.
    pub fn flatten_grads(&self, grads: &ParamGrads) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            for (index, like) in [(2 * l, w), (2 * l + 1, b)] {
                match grads.get(index) {
                    Some(g) => out.extend(g.iter()),
                    None => out.extend(std::iter::repeat_n(0.0, like.len())),
                }
            }
        }
        out
    }
}

/// Versioned parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub config_hash: String,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn from_network(net: &PolicyNetwork, config_hash: &str) -> Self {
        Self {
            format_version: Self::FORMAT_VERSION,
            layer_sizes: net.sizes.clone(),
            activation: net.activation,
            params: net.flat_params(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_network(&self) -> Result<PolicyNetwork> {
        if self.format_version != Self::FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.format_version)));
        }
        if self.layer_sizes.len() < 2 {
            return Err(Error::Checkpoint("checkpoint needs at least two layer sizes".into()));
        }
        let n = self.layer_sizes.len();
        let mut net = PolicyNetwork::new(
            self.layer_sizes[0] - 1,
            &self.layer_sizes[1..n - 1],
            self.layer_sizes[n - 1],
            self.activation,
            1.0,
            RngStream::new(0, 0),
        )?;
        net.set_flat_params(&self.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
