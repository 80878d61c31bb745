//! Parameterised building blocks shared by every model component.

use std::fmt;
use std::str::FromStr;

use super::{Graph, NodeId, ParamId, ParamStore, SeededRng, Tensor};
use crate::error::{Error, Result};

/// Weight initialisation: truncated normal weights, zero biases, unit gains.
pub struct Init<'a> {
    pub rng: &'a mut SeededRng,
    pub std: f64,
}

impl Init<'_> {
    pub fn weight(&mut self, rows: usize, cols: usize) -> Tensor {
        let rng = &mut *self.rng;
        let std = self.std;
        Tensor::from_fn(&[rows, cols], |_| rng.truncated_normal(std))
    }
}

/// Nonlinearity between the two layers of an [`Mlp2`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            _ => s
                .strip_prefix("leaky_relu:")
                .and_then(|v| v.parse().ok())
                .map(Activation::LeakyRelu)
                .ok_or_else(|| Error::Invalid(format!("unknown activation `{s}`"))),
        }
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.weight(d_in, d_out))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.weight(d_in, d_out))?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[d]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(Self { gain, bias, eps: LN_EPS })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Affine, activation, affine.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        activation: Activation,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, init)?,
            second: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, init)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.first.forward(g, store, x)?;
        let h = self.activation.apply(g, h)?;
        self.second.forward(g, store, h)
    }
}
