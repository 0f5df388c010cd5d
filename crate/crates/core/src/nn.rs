//! Fully-connected classifier: ReLU hidden layers, softmax output,
//! mean cross-entropy loss with analytic gradients, and plain SGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_at, matmul_bt, Matrix};

/// One affine layer `y = W x + b` with `W: out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch {
                op: "Layer::new",
                left: weight.shape(),
                right: (bias.len(), 1),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("Layer::new"));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn squared_norm(&self) -> f64 {
        let w: f64 = self.weight.as_slice().iter().map(|v| v * v).sum();
        let b: f64 = self.bias.iter().map(|v| v * v).sum();
        w + b
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }
}

/// Multi-layer perceptron. Consecutive layer dimensions chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::ShapeMismatch {
                    op: "Mlp::new",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                }
                .in_layer(i + 1));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform Glorot init on `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases. `dims` lists every width, input first.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-s..=s));
                Layer {
                    weight,
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Self::new(dims.windows(2).map(|d| Layer::zeros(d[1], d[0])).collect())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Euclidean norm over every parameter, biases included.
    pub fn param_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(Layer::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn max_abs_diff(&self, other: &Mlp) -> f64 {
        assert!(self.same_shape(other), "model shapes differ");
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Raw output scores, one row per input row.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward(inputs)?.pop().expect("at least one layer"))
    }

    /// Pre-activations of every layer.
    fn forward(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: inputs.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = inputs.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = matmul_bt(&act, &layer.weight)?;
            add_row_bias(&mut z, &layer.bias);
            if i < last {
                act = relu(&z);
            }
            pre.push(z);
        }
        Ok(pre)
    }

    /// `p <- p - eta * g` for every parameter.
    pub fn apply_sgd(&mut self, grads: &Gradients, eta: f64) -> Result<()> {
        if !self.same_shape_grads(grads) {
            return Err(Error::InvalidArgument(
                "gradient shapes do not match model".into(),
            ));
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.axpy(-eta, &g.weight)?;
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= eta * gb;
            }
        }
        let finite = self.layers.iter().all(|l| {
            l.weight.as_slice().iter().all(|v| v.is_finite())
                && l.bias.iter().all(|v| v.is_finite())
        });
        if !finite {
            return Err(Error::NonFinite("sgd_step"));
        }
        Ok(())
    }

    fn same_shape_grads(&self, grads: &Gradients) -> bool {
        self.layers.len() == grads.layers.len()
            && self
                .layers
                .iter()
                .zip(&grads.layers)
                .all(|(a, b)| a.same_shape(b))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "architecture needs >= 2 positive widths, got {dims:?}"
        )));
    }
    Ok(())
}

fn add_row_bias(z: &mut Matrix, bias: &[f64]) {
    let cols = z.cols();
    for row in z.as_mut_slice().chunks_mut(cols) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn relu(z: &Matrix) -> Matrix {
    let mut a = z.clone();
    a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    a
}

/// Gradient of the loss w.r.t. every model parameter; same layout as [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(Layer::squared_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Euclidean norm of `self - other`.
    pub fn distance(&self, other: &Gradients) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// A mini-batch: `inputs` is `b x d`, one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::ShapeMismatch {
                op: "Batch::new",
                left: inputs.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn forward_loss_grad(model: &Mlp, batch: &Batch) -> Result<(f64, Gradients)> {
    let classes = model.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: classes,
        });
    }
    let pre = model.forward(&batch.inputs)?;
    let b = batch.len();
    let logits = pre.last().expect("at least one layer");

    // Softmax with max subtraction; d loss / d logits = (p - onehot) / b.
    let mut loss = 0.0;
    let mut delta = logits.clone();
    for (r, (row, &label)) in delta
        .as_mut_slice()
        .chunks_mut(classes)
        .zip(&batch.labels)
        .enumerate()
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() + max - logits[(r, label)];
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v /= b as f64);
    }
    loss /= b as f64;

    let mut grads = Vec::with_capacity(model.layers.len());
    for i in (0..model.layers.len()).rev() {
        let input = if i == 0 {
            batch.inputs.clone()
        } else {
            relu(&pre[i - 1])
        };
        let dw = matmul_at(&delta, &input)?;
        let db = column_sums(&delta);
        if i > 0 {
            let mut back = matmul(&delta, &model.layers[i].weight)?;
            for (g, z) in back.as_mut_slice().iter_mut().zip(pre[i - 1].as_slice()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            delta = back;
        }
        grads.push(Layer {
            weight: dw,
            bias: db,
        });
    }
    grads.reverse();
    if !loss.is_finite() {
        return Err(Error::NonFinite("forward_loss_grad"));
    }
    Ok((loss, Gradients { layers: grads }))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        out.iter_mut().zip(m.row(i)).for_each(|(o, v)| *o += v);
    }
    out
}

/// Returns `model - eta * grads`.
pub fn sgd_step(model: &Mlp, grads: &Gradients, eta: f64) -> Result<Mlp> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be >= 0, got {eta}"
        )));
    }
    let mut next = model.clone();
    next.apply_sgd(grads, eta)?;
    Ok(next)
}

/// `eta_t = eta0 * decay_base^(t / decay_period)` with a real exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta0: f64,
    pub decay_base: f64,
    pub decay_period: u64,
}

impl Default for LrSchedule {
    /// `0.1 * 0.5^(t / 10000)`
    fn default() -> Self {
        Self {
            eta0: 0.1,
            decay_base: 0.5,
            decay_period: 10_000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0.is_finite() && self.eta0 >= 0.0) {
            return Err(Error::InvalidConfig {
                field: "eta0",
                reason: format!("must be finite and >= 0, got {}", self.eta0),
            });
        }
        if !(self.decay_base > 0.0 && self.decay_base <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "decay_base",
                reason: format!("must lie in (0, 1], got {}", self.decay_base),
            });
        }
        if self.decay_period == 0 {
            return Err(Error::InvalidConfig {
                field: "decay_period",
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        self.eta0 * self.decay_base.powf(t as f64 / self.decay_period as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy (argmax, ties to the lowest class index) and mean cross-entropy.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let logits = model.logits(data.features())?;
    let classes = model.num_classes();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, &label) in logits.as_slice().chunks(classes).zip(data.labels()) {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: classes,
            });
        }
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
        let max = row[best];
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}
