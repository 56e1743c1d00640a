//! Small multilayer-perceptron engine: batched forward/backward passes, Adam,
//! running normalisation and a versioned JSON weight format.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

/// Floor applied to standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("forward cache does not belong to the current weights")]
    StaleCache,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("weight file version {found}, expected {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn mismatch(expected: impl ToString, got: impl ToString) -> NeuralError {
    NeuralError::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Linear,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Linear => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation, output_activation: Activation) -> Self {
        Self { layer_sizes, hidden_activation, output_activation }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.layer_sizes.len() < 2 {
            return Err(NeuralError::InvalidSpec("need at least an input and an output layer".into()));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(NeuralError::InvalidSpec("layer sizes must be positive".into()));
        }
        if !matches!(self.hidden_activation, Activation::Relu | Activation::Elu) {
            return Err(NeuralError::InvalidSpec("hidden activation must be relu or elu".into()));
        }
        if !matches!(self.output_activation, Activation::Linear | Activation::Sigmoid | Activation::Tanh) {
            return Err(NeuralError::InvalidSpec("output activation must be linear, sigmoid or tanh".into()));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.layer_sizes.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// One affine layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| Layer { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.iter().chain(l.bias.iter()).map(|g| g * g).sum::<f64>()).sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()]).collect()
    }
}

/// Activations saved by a batched forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Layer inputs followed by the network output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    generation: u64,
}

impl Mlp {
    /// He-style uniform initialisation, zero biases.
    pub fn new(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self, NeuralError> {
        spec.validate()?;
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Layer { weight: Array2::from_shape_fn((w[1], w[0]), |_| rng.random_range(-bound..bound)), bias: Array1::zeros(w[1]) }
            })
            .collect();
        Ok(Self { spec, layers, generation: 0 })
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self, NeuralError> {
        spec.validate()?;
        if layers.len() + 1 != spec.layer_sizes.len() {
            return Err(mismatch(format!("{} layers", spec.layer_sizes.len() - 1), layers.len()));
        }
        for (l, w) in layers.iter().zip(spec.layer_sizes.windows(2)) {
            if l.weight.dim() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(mismatch(format!("{}x{}", w[1], w[0]), format!("{:?}", l.weight.dim())));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFinite("layer weights".into()));
            }
        }
        Ok(Self { spec, layers, generation: 0 })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()]).collect()
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache), NeuralError> {
        if input.ncols() != self.spec.input_size() {
            return Err(mismatch(self.spec.input_size(), input.ncols()));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_owned());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = activations[k].dot(&layer.weight.t());
            z += &layer.bias;
            let act = self.spec.activation(k);
            let a = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { generation: self.generation, activations, pre_activations }))
    }

    /// Reverse-mode pass. Returns parameter gradients (summed over the batch)
    /// and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<'_, f64>) -> Result<(Gradients, Array2<f64>), NeuralError> {
        if cache.generation != self.generation {
            return Err(NeuralError::StaleCache);
        }
        let out = cache.activations.last().unwrap();
        if grad_output.dim() != out.dim() {
            return Err(mismatch(format!("{:?}", out.dim()), format!("{:?}", grad_output.dim())));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.to_owned();
        for k in (0..self.layers.len()).rev() {
            let act = self.spec.activation(k);
            let mut delta = upstream;
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre_activations[k])
                .and(&cache.activations[k + 1])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            let weight = delta.t().dot(&cache.activations[k]).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            upstream = delta.dot(&self.layers[k].weight);
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    /// Single-sample forward pass with plain loops; the result for a given
    /// input never depends on what else is being evaluated.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if input.len() != self.spec.input_size() {
            return Err(mismatch(self.spec.input_size(), input.len()));
        }
        let mut current = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.spec.activation(k);
            let next = layer
                .weight
                .outer_iter()
                .zip(layer.bias.iter())
                .map(|(row, &b)| {
                    let z = row.iter().zip(&current).fold(b, |acc, (w, x)| acc + w * x);
                    act.apply(z)
                })
                .collect();
            current = next;
        }
        Ok(current)
    }
}

/// Mean squared error over all entries and its gradient with respect to `prediction`.
pub fn mse(prediction: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let n = prediction.len() as f64;
    let diff = &prediction - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Accumulators shaped like `tensor_sizes`.
    pub fn new(tensor_sizes: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(mlp: &Mlp, lr: f64) -> Self {
        let sizes: Vec<usize> = mlp.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
        Self::new(&sizes, lr)
    }

    /// Bias-corrected Adam update over a list of parameter tensors.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<(), NeuralError> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(mismatch(self.first_moment.len(), params.len()));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[k].len() || g.len() != p.len() {
                return Err(mismatch(self.first_moment[k].len(), g.len()));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(NeuralError::NonFinite(format!("gradient tensor {k}, element {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, mlp: &mut Mlp, grads: &Gradients) -> Result<(), NeuralError> {
        let g = grads.tensors();
        self.step(mlp.tensors_mut(), &g)
    }
}

/// Running per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim], count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Merge a batch of rows into the running statistics.
    pub fn update<'a>(&mut self, batch: impl IntoIterator<Item = &'a [f64]>) {
        let dim = self.dim();
        let mut n = 0u64;
        let mut sum = vec![0.0; dim];
        let mut rows: Vec<&[f64]> = Vec::new();
        for row in batch {
            assert_eq!(row.len(), dim, "normalizer dimension mismatch");
            for (s, x) in sum.iter_mut().zip(row) {
                *s += x;
            }
            rows.push(row);
            n += 1;
        }
        if n == 0 {
            return;
        }
        let batch_mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut batch_m2 = vec![0.0; dim];
        for row in &rows {
            for i in 0..dim {
                let d = row[i] - batch_mean[i];
                batch_m2[i] += d * d;
            }
        }
        if self.count == 0 {
            self.mean = batch_mean;
            self.std = batch_m2.iter().map(|m2| (m2 / n as f64).sqrt()).collect();
            self.count = n;
            return;
        }
        let (na, nb) = (self.count as f64, n as f64);
        let total = na + nb;
        for i in 0..dim {
            let delta = batch_mean[i] - self.mean[i];
            let m2 = self.std[i] * self.std[i] * na + batch_m2[i] + delta * delta * na * nb / total;
            self.mean[i] += delta * nb / total;
            self.std[i] = (m2 / total).sqrt();
        }
        self.count += n;
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| (v - self.mean[i]) / self.std[i].max(STD_FLOOR)).collect()
    }

    pub fn normalize_in_place(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i].max(STD_FLOOR);
        }
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(i, v)| v * self.std[i].max(STD_FLOOR) + self.mean[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// On-disk network: spec, normalisers, free-form metadata and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub format_version: u32,
    pub spec: MlpSpec,
    #[serde(default)]
    pub normalizers: BTreeMap<String, Normalizer>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub layers: Vec<LayerWeights>,
}

impl WeightFile {
    pub fn from_mlp(mlp: &Mlp) -> Self {
        Self {
            format_version: WEIGHT_FORMAT_VERSION,
            spec: mlp.spec.clone(),
            normalizers: BTreeMap::new(),
            metadata: BTreeMap::new(),
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerWeights {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn with_normalizer(mut self, name: &str, norm: &Normalizer) -> Self {
        self.normalizers.insert(name.to_string(), norm.clone());
        self
    }

    pub fn with_metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }

    pub fn to_mlp(&self) -> Result<Mlp, NeuralError> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.rows, l.cols), l.weight.clone()).map_err(|e| NeuralError::Corrupt(e.to_string()))?;
                Ok(Layer { weight, bias: Array1::from(l.bias.clone()) })
            })
            .collect::<Result<Vec<_>, NeuralError>>()?;
        Mlp::from_layers(self.spec.clone(), layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weight file serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| NeuralError::Corrupt(e.to_string()))?;
        let found =
            value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| NeuralError::Corrupt("missing format_version".into()))?;
        if found != WEIGHT_FORMAT_VERSION as u64 {
            return Err(NeuralError::VersionMismatch { found, expected: WEIGHT_FORMAT_VERSION });
        }
        let file: Self = serde_json::from_value(value).map_err(|e| NeuralError::Corrupt(e.to_string()))?;
        file.to_mlp()?;
        Ok(file)
    }
}

pub fn save_weights(path: &Path, file: &WeightFile) -> Result<(), NeuralError> {
    std::fs::write(path, file.to_json())?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightFile, NeuralError> {
    WeightFile::from_json(&std::fs::read_to_string(path)?)
}
