use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FlowError;
use crate::autodiff::{Graph, NodeId, Parameter, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId, FlowError> {
        Ok(match self {
            Self::Tanh => g.tanh(x)?,
            Self::Relu => g.relu(x)?,
            Self::Sigmoid => g.sigmoid(x)?,
            Self::Softplus => g.softplus(x)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// Feed-forward stack: hidden dense layers with a nonlinearity, then a linear
/// output layer. Output layers start at zero; hidden layers use
/// `N(0, 1/fan_in)` weights and zero biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    layers: Vec<Dense>,
    activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for (k, &width) in hidden.iter().enumerate() {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
            let w: Vec<f64> = (0..fan_in * width).map(|_| normal.sample(rng)).collect();
            layers.push(Dense {
                weight: Parameter::new(
                    format!("{prefix}.layer{k}.weight"),
                    Tensor::new(fan_in, width, w).expect("weight shape"),
                ),
                bias: Parameter::new(format!("{prefix}.layer{k}.bias"), Tensor::zeros(1, width)),
            });
            fan_in = width;
        }
        let k = hidden.len();
        layers.push(Dense {
            weight: Parameter::new(
                format!("{prefix}.layer{k}.weight"),
                Tensor::zeros(fan_in, output_dim),
            ),
            bias: Parameter::new(
                format!("{prefix}.layer{k}.bias"),
                Tensor::zeros(1, output_dim),
            ),
        });
        Self {
            input_dim,
            layers,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.tensor.cols())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Records the forward pass; `bind` maps each parameter to its graph leaf.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: NodeId,
        bind: &mut dyn FnMut(&mut Graph, &Parameter) -> NodeId,
    ) -> Result<NodeId, FlowError> {
        let cols = g.value(input).cols();
        if cols != self.input_dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.input_dim,
                got: cols,
            });
        }
        let mut h = input;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = bind(g, &layer.weight);
            let b = bind(g, &layer.bias);
            let xw = g.matmul(h, w)?;
            h = g.add_row_bias(xw, b)?;
            if k < last {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_ids_and_zero_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new("f2", 3, &[5, 4], 7, Activation::Tanh, &mut rng);
        assert_eq!(net.output_dim(), 7);
        let ids: Vec<_> = net.parameters().map(|p| p.id.clone()).collect();
        assert_eq!(
            ids,
            [
                "f2.layer0.weight",
                "f2.layer0.bias",
                "f2.layer1.weight",
                "f2.layer1.bias",
                "f2.layer2.weight",
                "f2.layer2.bias"
            ]
        );
        assert_eq!(net.layers()[0].weight.tensor.shape(), [3, 5]);
        assert!(net.layers()[2]
            .weight
            .tensor
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let out = net.forward(&mut g, x, &mut |g, p| g.parameter(p)).unwrap();
        assert_eq!(g.value(out).shape(), [2, 7]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_is_structural_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new("f1", 3, &[4], 2, Activation::Relu, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            net.forward(&mut g, x, &mut |g, p| g.parameter(p)),
            Err(FlowError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
    }
}
