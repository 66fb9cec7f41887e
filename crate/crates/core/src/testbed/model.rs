//! Dense toy models over a flat parameter vector.
//!
//! Layer `l` owns a row-major weight block `W_l` of shape
//! `[width[l+1], width[l]]` followed by its bias; hidden layers use tanh and
//! the output layer is linear. Regression tasks use the per-sample summed
//! squared error averaged over the batch; classification uses mean softmax
//! cross-entropy.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Targets};
use super::TrainError;
use crate::store::{Container, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_widths: Vec<usize>,
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.layer_widths.contains(&0) {
            return Err(TrainError::Config("layer widths must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearRegression if self.layer_widths.len() != 2 => Err(TrainError::Config(
                "linear_regression takes exactly [inputs, outputs] layer widths".into(),
            )),
            ModelKind::Mlp if self.layer_widths.len() < 3 => Err(TrainError::Config(
                "mlp needs at least one hidden layer".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    loss: LossKind,
    layers: Vec<LayerSlot>,
    num_params: usize,
}

/// Per-sample forward activations, reused across a batch.
struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(spec: ModelSpec, loss: LossKind) -> Result<Self, TrainError> {
        spec.validate()?;
        let mut offset = 0;
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                slot
            })
            .collect();
        Ok(Self { spec, loss, layers, num_params: offset })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Weights `N(0, 1/fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut params = vec![0.0; self.num_params];
        for layer in &self.layers {
            let scale = 1.0 / (layer.fan_in as f64).sqrt();
            for p in &mut params[layer.weight..layer.bias] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = scale * z;
            }
        }
        params
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            acts: self.spec.layer_widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: self.spec.layer_widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    fn forward(&self, params: &[f64], x: &[f64], s: &mut Scratch) {
        s.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = s.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            for (o, z) in out.iter_mut().enumerate() {
                let row = &params[layer.weight + o * layer.fan_in..layer.weight + (o + 1) * layer.fan_in];
                let pre = params[layer.bias + o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                *z = if l == last { pre } else { pre.tanh() };
            }
        }
    }

    /// Loss of one sample given its forward pass; fills the output delta
    /// scaled by `scale` when `want_delta`.
    fn sample_loss(&self, data: &Dataset, i: usize, s: &mut Scratch, scale: f64, want_delta: bool) -> f64 {
        let out = s.acts.last().expect("at least one layer");
        let delta = s.deltas.last_mut().expect("at least one layer");
        match (&data.targets, self.loss) {
            (Targets::Real { values, dim }, LossKind::SquaredError) => {
                let y = &values[i * dim..(i + 1) * dim];
                let mut loss = 0.0;
                for o in 0..*dim {
                    let r = out[o] - y[o];
                    loss += r * r;
                    if want_delta {
                        delta[o] = 2.0 * r * scale;
                    }
                }
                loss
            }
            (Targets::Classes { labels, .. }, LossKind::CrossEntropy) => {
                let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = out.iter().map(|z| (z - max).exp()).sum();
                let label = labels[i];
                if want_delta {
                    for (o, d) in delta.iter_mut().enumerate() {
                        let p = (out[o] - max).exp() / denom;
                        *d = (p - if o == label { 1.0 } else { 0.0 }) * scale;
                    }
                }
                denom.ln() + max - out[label]
            }
            _ => unreachable!("loss kind is derived from the task"),
        }
    }

    /// Mean loss over the given rows.
    pub fn loss(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> f64 {
        let mut s = self.scratch();
        let mut total = 0.0;
        for &i in rows {
            self.forward(params, data.input(i), &mut s);
            total += self.sample_loss(data, i, &mut s, 0.0, false);
        }
        total / rows.len() as f64
    }

    /// Mean loss over the whole dataset.
    pub fn dataset_loss(&self, params: &[f64], data: &Dataset) -> f64 {
        let rows: Vec<usize> = (0..data.len()).collect();
        self.loss(params, data, &rows)
    }

    /// Mean loss over `rows` and its exact gradient.
    pub fn loss_and_grad(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.num_params];
        let mut s = self.scratch();
        let scale = 1.0 / rows.len() as f64;
        let mut total = 0.0;
        for &i in rows {
            self.forward(params, data.input(i), &mut s);
            total += self.sample_loss(data, i, &mut s, scale, true);
            for (l, layer) in self.layers.iter().enumerate().rev() {
                let (dhead, dtail) = s.deltas.split_at_mut(l + 1);
                let delta = &dtail[0];
                let input = &s.acts[l];
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    grad[layer.bias + o] += d;
                    let g = &mut grad[layer.weight + o * layer.fan_in..layer.weight + (o + 1) * layer.fan_in];
                    for (gw, a) in g.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if l > 0 {
                    let back = &mut dhead[l];
                    for (k, b) in back.iter_mut().enumerate() {
                        let mut sum = 0.0;
                        for o in 0..layer.fan_out {
                            sum += params[layer.weight + o * layer.fan_in + k] * delta[o];
                        }
                        let a = input[k];
                        *b = sum * (1.0 - a * a);
                    }
                }
            }
        }
        (total * scale, grad)
    }

    fn tensor_names(l: usize) -> (String, String) {
        (format!("layers.{l}.weight"), format!("layers.{l}.bias"))
    }

    pub fn to_tensors(&self, params: &[f64]) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = Self::tensor_names(l);
            out.insert(
                w,
                Tensor::f64(vec![layer.fan_out, layer.fan_in], params[layer.weight..layer.bias].to_vec()),
            );
            out.insert(
                b,
                Tensor::f64(vec![layer.fan_out], params[layer.bias..layer.bias + layer.fan_out].to_vec()),
            );
        }
        out
    }

    /// Reassembles a flat parameter vector from a checkpoint.
    pub fn params_from_container(&self, c: &Container) -> Result<Vec<f64>, TrainError> {
        let mut params = vec![0.0; self.num_params];
        if c.tensors.len() != 2 * self.layers.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} holds {} tensors, model expects {}",
                c.path().display(),
                c.tensors.len(),
                2 * self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = Self::tensor_names(l);
            for (name, range, shape) in [
                (w, layer.weight..layer.bias, vec![layer.fan_out, layer.fan_in]),
                (b, layer.bias..layer.bias + layer.fan_out, vec![layer.fan_out]),
            ] {
                let rec = c.record(&name)?;
                if rec.shape != shape {
                    return Err(TrainError::Checkpoint(format!(
                        "tensor {name:?} has shape {:?}, model expects {shape:?}",
                        rec.shape
                    )));
                }
                params[range].copy_from_slice(&c.load_tensor(&name)?);
            }
        }
        Ok(params)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
