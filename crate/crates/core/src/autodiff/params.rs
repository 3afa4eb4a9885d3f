use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Invalid(format!("duplicate parameter path {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count over parameters whose path starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Replaces values from `other`, matching by path and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Multi-layer perceptron with rectifier hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    output: OutputActivation,
}

impl Mlp {
    /// Registers layers `prefix.layer{k}.{weight,bias}` with Glorot-uniform
    /// weights and zero biases. `dims` lists every width from input to output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!(
                "mlp {prefix} needs at least two positive widths, got {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, win) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let weight = store.add(
                format!("{prefix}.layer{k}.weight"),
                Tensor::from_shape([fan_out, fan_in], w)?,
            )?;
            let bias = store.add(format!("{prefix}.layer{k}.bias"), Tensor::zeros(1, fan_out))?;
            layers.push(Dense {
                weight,
                bias,
                in_dim: fan_in,
                out_dim: fan_out,
            });
        }
        Ok(Self { layers, output })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    /// Sets the final layer's weights and bias to zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let last = self.layers[self.layers.len() - 1];
        store.get_mut(last.weight).data_mut().fill(0.0);
        store.get_mut(last.bias).data_mut().fill(0.0);
    }

    /// Affine map plus activation per layer, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape();
        if shape[1] != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                left: shape,
                right: store.get(self.layers[0].weight).shape(),
            });
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.weight);
            let b = tape.param(store, layer.bias);
            h = tape.linear(h, w, Some(b))?;
            h = if k < last {
                tape.relu(h)
            } else {
                match self.output {
                    OutputActivation::None => h,
                    OutputActivation::Sigmoid => tape.sigmoid(h),
                }
            };
        }
        Ok(h)
    }
}
