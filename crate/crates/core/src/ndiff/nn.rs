use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected network. `params` alternates `[in, out]` weights and
/// `[1, out]` biases, one pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<Tensor>,
}

impl DenseNet {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || activations.len() != layer_sizes.len() - 1 {
            return Err(Error::ShapeMismatch {
                op: "dense_net",
                lhs: layer_sizes.to_vec(),
                rhs: vec![activations.len()],
            });
        }
        let mut params = Vec::with_capacity(2 * activations.len());
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            params.push(Tensor::new(vec![fan_in, fan_out], weights)?.with_grad());
            params.push(Tensor::zeros(vec![1, fan_out]).with_grad());
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activations: activations.to_vec(),
            params,
        })
    }

    /// Hidden layers share `hidden_act`; the output layer is linear.
    pub fn mlp<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![hidden_act; hidden.len()];
        acts.push(Activation::Identity);
        Self::new(&sizes, &acts, rng)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }
    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }
    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }
    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Zeroes the last layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for t in &mut self.params[n - 2..] {
            t.value_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Zeroes output columns `cols` of the last layer (weights and bias).
    pub fn zero_output_columns(&mut self, cols: std::ops::Range<usize>) {
        let n = self.params.len();
        let out = self.output_width();
        for t in &mut self.params[n - 2..] {
            for (i, v) in t.value_mut().iter_mut().enumerate() {
                if cols.contains(&(i % out)) {
                    *v = 0.0;
                }
            }
        }
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|t| g.leaf(t)).collect()
    }

    /// Binds the parameters as constants (no gradient flows into them).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| g.constant(t.shape(), t.value().to_vec()).expect("shape already valid"))
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, bound: &[Var], x: Var) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                op: "dense_forward",
                lhs: vec![self.params.len()],
                rhs: vec![bound.len()],
            });
        }
        let rows = g.shape(x).first().copied().unwrap_or(1);
        let mut h = x;
        for (layer, act) in self.activations.iter().enumerate() {
            let z = g.matmul(h, bound[2 * layer])?;
            let b = g.repeat_rows(bound[2 * layer + 1], rows)?;
            let z = g.add(z, b)?;
            h = act.apply(g, z);
        }
        Ok(h)
    }

    /// Forward pass on plain values; `x` holds `rows` rows of input width.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let rows = x.len() / self.input_width().max(1);
        let xv = g.constant(&[rows, self.input_width()], x.to_vec())?;
        let bound = self.bind_frozen(&mut g);
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).to_vec())
    }

    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Var]) {
        for (t, &v) in self.params.iter_mut().zip(bound) {
            t.accumulate_from(g, v);
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Named parameter groups `l{i}.w` / `l{i}.b`.
    pub fn to_named(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let name = format!("l{}.{}", i / 2, if i % 2 == 0 { "w" } else { "b" });
                (name, t.value().to_vec())
            })
            .collect()
    }

    /// Loads values written by [`DenseNet::to_named`] into an identically
    /// shaped network.
    pub fn load_named(&mut self, named: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let expected = self.to_named();
        if expected.len() != named.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "expected {} parameter groups, got {}",
                expected.len(),
                named.len()
            )));
        }
        for (i, t) in self.params.iter_mut().enumerate() {
            let name = format!("l{}.{}", i / 2, if i % 2 == 0 { "w" } else { "b" });
            let values = named
                .get(&name)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing `{name}`")))?;
            if values.len() != t.len() {
                return Err(Error::MalformedCheckpoint(format!(
                    "`{name}` has {} values, expected {}",
                    values.len(),
                    t.len()
                )));
            }
            t.value_mut().copy_from_slice(values);
        }
        Ok(())
    }
}
