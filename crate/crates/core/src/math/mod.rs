//! Dense linear algebra shared by every learnable module: multilayer
//! perceptrons, numerically stable softmax / cross-entropy, the gradient
//! tape, and the Rectified Adam optimizer.

pub mod radam;
pub mod tape;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One affine layer: `y = W x + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// An MLP: affine layers with ReLU on hidden layers and identity output.
///
/// Consecutive layer dimensions chain, and all parameters are finite;
/// both are enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Builds from explicit layers, validating dimension chaining and finiteness.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "mlp layer chain",
                    format!("in = {}", pair[0].out_dim()),
                    format!("in = {}", pair[1].in_dim()),
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape(
                    "mlp bias",
                    format!("{}", l.out_dim()),
                    format!("{}", l.bias.len()),
                ));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite parameter in layer {i}")));
            }
        }
        Ok(Mlp { layers })
    }

    /// Glorot-uniform weights (`+-sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn glorot(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let batch = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok(batch.index_axis(Axis(0), 0).to_owned())
    }

    /// Forward pass for a batch (rows are samples).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_range(x, 0, self.layers.len())
    }

    /// Forward through layers `[from, to)`, ReLU after every layer except the
    /// final layer of the whole stack.
    pub fn forward_range(&self, x: ArrayView2<f64>, from: usize, to: usize) -> Result<Array2<f64>> {
        assert!(from <= to && to <= self.layers.len());
        if from == to {
            return Ok(x.to_owned());
        }
        if x.ncols() != self.layers[from].in_dim() {
            return Err(Error::shape(
                "mlp forward",
                format!("{}", self.layers[from].in_dim()),
                format!("{}", x.ncols()),
            ));
        }
        let mut h = x.to_owned();
        for (i, layer) in self.layers[from..to].iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let is_output = from + i == self.layers.len() - 1;
            if !is_output {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    /// Flat views over all parameter tensors, weights then bias per layer.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Numerically stabilized softmax of one score vector.
pub fn softmax_row(scores: ArrayView1<f64>) -> Result<Array1<f64>> {
    if scores.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = scores.mapv(|v| (v - max).exp());
    let sum: f64 = out.sum();
    out /= sum;
    Ok(out)
}

/// Row-wise softmax of a score matrix.
pub fn softmax_rows(scores: ArrayView2<f64>) -> Result<Array2<f64>> {
    if scores.ncols() == 0 {
        return Err(Error::Domain("softmax of empty rows".into()));
    }
    let mut out = scores.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// `-log softmax(logits)[label]`, computed without materializing the softmax.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(log_sum + max - logits[label])
}

/// Mean cross-entropy over a batch of logit rows.
pub fn cross_entropy_mean(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::shape(
            "cross entropy batch",
            format!("{}", logits.nrows()),
            format!("{}", labels.len()),
        ));
    }
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        total += cross_entropy(row, label)?;
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest logit; ties break to the lower index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
