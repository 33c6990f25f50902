//! Dense feed-forward networks with hand-written reverse-mode gradients and
//! an Adam optimizer. Everything is `f64`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"VPMNET01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// `b · tanh(z / b)`: identity near zero, saturating at `±b`.
    SoftClip(f64),
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::SoftClip(b) => b * (z / b).tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::SoftClip(b) => 1.0 - (a / b) * (a / b),
        }
    }
}

/// Numerically stable `log(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `in x out`; rows of the input multiply from the left.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Activations recorded by [`DenseNetwork::forward`], needed for
/// [`DenseNetwork::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn zeros_for(net: &DenseNetwork, rows: usize) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            input: Array2::zeros((rows, net.input_dim())),
        }
    }

    /// Parameter gradients in the same order as [`DenseNetwork::params_flat`].
    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Adds another gradient's parameter part. Input gradients are left
    /// alone since they usually belong to different inputs.
    pub fn accumulate_params(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale_params(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn params_are_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&g| g == 0.0))
    }
}

impl DenseNetwork {
    /// He-uniform weights for rectifier stacks, Glorot-uniform otherwise;
    /// zero biases.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden_activation, output_activation)?;
        let n = net.layers.len();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = layer.weights.dim();
            let act = if i + 1 == n { output_activation } else { hidden_activation };
            let limit = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            layer.weights.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], hidden_activation: Activation, output_activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("a network needs at least an input and an output dim".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-width layer in {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    /// Single linear layer computing the identity map.
    pub fn identity(dim: usize) -> Self {
        let mut net = Self::zeros(&[dim, dim], Activation::Relu, Activation::Identity).expect("dim > 0");
        net.layers[0].weights = Array2::eye(dim);
        net
    }

    pub fn from_layers(
        layers: Vec<DenseLayer>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != l.bias.len() {
                return Err(Error::Shape(format!("layer {i}: bias length differs from output width")));
            }
            if i > 0 && layers[i - 1].weights.ncols() != l.weights.nrows() {
                return Err(Error::Shape(format!("layer {i}: input width does not match previous layer")));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.weights.ncols()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weights.ncols()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = x.dot(&layer.weights) + &layer.bias;
            let act = self.activation_for(i);
            let a = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre_activations.push(z);
            x = a;
        }
        Ok(ForwardCache {
            inputs,
            pre_activations,
            output: x,
        })
    }

    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(input)?.into_output())
    }

    /// Reverse accumulation of `grad_output` (dLoss/dOutput) through the
    /// cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<f64>) -> Result<Gradients> {
        if cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.ncols() != l.weights.nrows())
        {
            return Err(Error::State("forward cache does not belong to this network".into()));
        }
        if grad_output.dim() != cache.output.dim() {
            return Err(Error::Shape(format!(
                "output gradient is {:?}, output is {:?}",
                grad_output.dim(),
                cache.output.dim()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut grad = grad_output.to_owned();
        let mut out = cache.output.clone();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_for(i);
            let z = &cache.pre_activations[i];
            let mut dz = grad;
            ndarray::Zip::from(&mut dz)
                .and(z)
                .and(&out)
                .for_each(|g, &zv, &av| *g *= act.derivative(zv, av));
            let x = &cache.inputs[i];
            let dw = x.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            grad = dz.dot(&self.layers[i].weights.t());
            layers.push(LayerGradient { weights: dw, bias: db });
            if i > 0 {
                out = cache.inputs[i].clone();
            }
        }
        layers.reverse();
        Ok(Gradients { layers, input: grad })
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, network has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// One Adam update from `grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, optimizer: &mut Adam) -> Result<()> {
        let mut params = self.params_flat();
        optimizer.step(&mut params, &grads.params_flat())?;
        self.set_params_flat(&params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            layer_dims: self.layer_dims(),
            hidden_activation: self.hidden_activation,
            output_activation: self.output_activation,
        };
        let mut payload = Vec::with_capacity(self.param_count() * 8);
        blob::push_f64(&mut payload, self.params_flat());
        blob::encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, rest): (CheckpointHeader, _) = blob::decode(CHECKPOINT_MAGIC, bytes)?;
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "network checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                h.version
            )));
        }
        let mut net = Self::zeros(&h.layer_dims, h.hidden_activation, h.output_activation)?;
        let (params, rest) = blob::read_f64(rest, net.param_count())?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after network parameters".into()));
        }
        net.set_params_flat(&params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        blob::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&blob::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    layer_dims: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = vec![0.0; params.len()];
            self.second_moment = vec![0.0; params.len()];
        } else if self.first_moment.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of `logits` against integer labels, with the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::Shape(format!("label {bad} outside {} classes", logits.ncols())));
    }
    let m = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = (v - log_z).exp() / m;
        }
        grad[[i, labels[i]]] -= 1.0 / m;
    }
    Ok((loss / m, grad))
}

pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}
