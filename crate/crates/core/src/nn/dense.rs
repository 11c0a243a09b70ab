use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{sigmoid, softmax_in_place, Graph, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Linear,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Softmax,
            _ => return None,
        })
    }
}

/// A trainable array plus its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    value: Vec<f64>,
    grad: Vec<f64>,
    has_grad: bool,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            has_grad: false,
        }
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn accumulate(&mut self, delta: &[f64]) {
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
        self.has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.has_grad = false;
    }

    /// Splits into the value to update and the gradient driving the update.
    pub(crate) fn value_and_grad(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.value, &self.grad)
    }
}

/// Fully connected layer computing `act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) weight: Param,
    pub(crate) bias: Param,
    rows: usize,
    cols: usize,
    activation: Activation,
}

impl Layer {
    /// `weights` is row-major `rows × cols` (`rows` outputs, `cols` inputs).
    pub fn new(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::contract(format!(
                "layer {rows}x{cols} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            weight: Param::new(weights),
            bias: Param::new(bias),
            rows,
            cols,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Param::new(weights),
            bias: Param::new(vec![0.0; outputs]),
            rows: outputs,
            cols: inputs,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.cols
    }

    pub fn output_dim(&self) -> usize {
        self.rows
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        self.weight.value()
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.value()
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.weight.value_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.bias.value_mut()
    }
}

/// Parameter handles produced by [`DenseNet::forward`], used to pull
/// gradients back out of the graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub output: Var,
    params: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("a network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension {
                    layer: k + 1,
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[..last]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::contract("softmax is only allowed on the final layer"));
        }
        Ok(Self { layers })
    }

    /// Builds a network through the given widths, e.g. `[784, 256, 10]`.
    pub fn glorot(widths: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::contract("need at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                Layer::glorot(widths[k], widths[k + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    /// All-zero parameters with the given widths.
    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                Layer::new(
                    widths[k + 1],
                    widths[k],
                    vec![0.0; widths[k] * widths[k + 1]],
                    vec![0.0; widths[k + 1]],
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.value().iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim(),
                got: width,
            });
        }
        Ok(())
    }

    /// Records the full forward pass on `g`.
    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Bound> {
        self.forward_impl(g, input, true)
    }

    /// Records the forward pass but stops before the final activation.
    pub fn forward_logits(&self, g: &mut Graph, input: Var) -> Result<Bound> {
        self.forward_impl(g, input, false)
    }

    fn forward_impl(&self, g: &mut Graph, input: Var, final_activation: bool) -> Result<Bound> {
        self.check_input(g.value(input).cols())?;
        let mut x = input;
        let mut params = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = g.variable(Tensor::from_parts(
                vec![layer.rows, layer.cols],
                layer.weight.value().to_vec(),
            ));
            let b = g.variable(Tensor::from_parts(vec![layer.rows], layer.bias.value().to_vec()));
            params.push((w, b));
            let pre = g.matmul_nt(x, w)?;
            let pre = g.add_bias(pre, b)?;
            x = if k == last && !final_activation {
                pre
            } else {
                match layer.activation {
                    Activation::Linear => pre,
                    Activation::Relu => g.relu(pre),
                    Activation::Sigmoid => g.sigmoid(pre),
                    Activation::Softmax => g.softmax(pre),
                }
            };
        }
        Ok(Bound { output: x, params })
    }

    /// Adds the gradients recorded in `g` for a previous `forward` into the
    /// parameter buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (layer, (w, b)) in self.layers.iter_mut().zip(&bound.params) {
            if let Some(gw) = g.grad(*w) {
                layer.weight.accumulate(gw.data());
            }
            if let Some(gb) = g.grad(*b) {
                layer.bias.accumulate(gb.data());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    /// Graph-free batched inference.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.predict_impl(input, true)
    }

    /// Graph-free inference returning pre-activation outputs of the last layer.
    pub fn predict_logits(&self, input: &Tensor) -> Result<Tensor> {
        self.predict_impl(input, false)
    }

    fn predict_impl(&self, input: &Tensor, final_activation: bool) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let n = input.rows();
        let mut x = input.data().to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; n * layer.rows];
            gemm(false, true, n, layer.rows, layer.cols, &x, layer.weight.value(), 0.0, &mut out);
            for row in out.chunks_mut(layer.rows.max(1)) {
                for (o, b) in row.iter_mut().zip(layer.bias.value()) {
                    *o += b;
                }
                if k < last || final_activation {
                    apply_activation(layer.activation, row);
                }
            }
            x = out;
        }
        Tensor::matrix(n, self.output_dim(), x)
    }

    /// Forward-mode derivative: returns the output at `x` and, for each row
    /// `t` of `tangents` (`k × input_dim`), the directional derivative `J t`
    /// as a row of the returned `k × output_dim` tensor.
    pub fn jvp(&self, x: &[f64], tangents: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x.len())?;
        self.check_input(tangents.cols())?;
        let k = tangents.rows();
        let mut value = x.to_vec();
        let mut tan = tangents.data().to_vec();
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.rows];
            gemm(false, true, 1, layer.rows, layer.cols, &value, layer.weight.value(), 0.0, &mut pre);
            for (p, b) in pre.iter_mut().zip(layer.bias.value()) {
                *p += b;
            }
            let mut t_pre = vec![0.0; k * layer.rows];
            gemm(false, true, k, layer.rows, layer.cols, &tan, layer.weight.value(), 0.0, &mut t_pre);
            let mut out = pre.clone();
            apply_activation(layer.activation, &mut out);
            match layer.activation {
                Activation::Linear => {}
                Activation::Relu => {
                    for row in t_pre.chunks_mut(layer.rows.max(1)) {
                        for (t, p) in row.iter_mut().zip(&pre) {
                            if *p <= 0.0 {
                                *t = 0.0;
                            }
                        }
                    }
                }
                Activation::Sigmoid => {
                    for row in t_pre.chunks_mut(layer.rows.max(1)) {
                        for (t, s) in row.iter_mut().zip(&out) {
                            *t *= s * (1.0 - s);
                        }
                    }
                }
                Activation::Softmax => {
                    for row in t_pre.chunks_mut(layer.rows.max(1)) {
                        let s: f64 = row.iter().zip(&out).map(|(t, p)| t * p).sum();
                        for (t, p) in row.iter_mut().zip(&out) {
                            *t = p * (*t - s);
                        }
                    }
                }
            }
            value = out;
            tan = t_pre;
        }
        let width = self.output_dim();
        Ok((value, Tensor::matrix(k, width, tan)?))
    }
}

fn apply_activation(act: Activation, row: &mut [f64]) {
    match act {
        Activation::Linear => {}
        Activation::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => row.iter_mut().for_each(|v| *v = sigmoid(*v)),
        Activation::Softmax => softmax_in_place(row),
    }
}
