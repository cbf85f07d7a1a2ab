//! Split classifier: a fully connected stack over flattened images with a
//! split index separating the on-device encoder from the decision decoder.
//! Pretrained on clean data, then frozen; later training stages never
//! receive a mutable reference to it.

use ndarray::{Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::radam::RAdam;
use crate::math::tape::Tape;
use crate::math::{argmax, Mlp};
use crate::scenario::{Dataset, Split};

/// Encoder widths for the default desk-scale stack; the feature dimension
/// at split s is `widths[s]`, and s ranges over `0..=5`.
pub fn default_layer_widths(input_dim: usize, classes: usize) -> Vec<usize> {
    vec![input_dim, 512, 256, 128, 64, classes]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    mlp: Mlp,
    split: usize,
    classes: usize,
}

impl SplitModel {
    pub fn new(widths: &[usize], split: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "need at least input and output widths".into(),
            ));
        }
        let mlp = Mlp::glorot(widths, rng);
        Self::from_parts(mlp, split, *widths.last().unwrap())
    }

    pub fn from_parts(mlp: Mlp, split: usize, classes: usize) -> Result<Self> {
        if split > mlp.n_layers() {
            return Err(Error::Config(format!(
                "split {split} exceeds layer count {}",
                mlp.n_layers()
            )));
        }
        if classes != mlp.out_dim() {
            return Err(Error::shape(
                "class count",
                format!("{}", mlp.out_dim()),
                format!("{classes}"),
            ));
        }
        Ok(SplitModel {
            mlp,
            split,
            classes,
        })
    }

    /// Same stack, different split point; no retraining involved.
    pub fn with_split(&self, split: usize) -> Result<Self> {
        Self::from_parts(self.mlp.clone(), split, self.classes)
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_layers(&self) -> usize {
        self.mlp.n_layers()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Widths by split index: `[input, layer1_out, ..., logits]`.
    pub fn width_table(&self) -> Vec<usize> {
        let mut t = vec![self.mlp.in_dim()];
        t.extend(self.mlp.layers().iter().map(|l| l.out_dim()));
        t
    }

    pub fn feature_dim(&self) -> usize {
        self.width_table()[self.split]
    }

    pub fn feature_dim_at(&self, split: usize) -> Result<usize> {
        let table = self.width_table();
        table
            .get(split)
            .copied()
            .ok_or_else(|| Error::Config(format!("split {split} exceeds layer count")))
    }

    /// Encoder output for a batch of flattened images (rows).
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.mlp.forward_range(x, 0, self.split)
    }

    /// Decoder logits for a batch of split-point features (rows).
    pub fn decode_batch(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.mlp
            .forward_range(features, self.split, self.mlp.n_layers())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.mlp.forward_batch(x)
    }

    /// Canonical byte image of all parameters, for freeze checks and
    /// checkpoint identity.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.mlp
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Required held-out clean accuracy; training fails below it.
    pub min_val_accuracy: f64,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        PretrainOpts {
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            min_val_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: f64,
}

/// Trains the full stack on clean data, then checks the accuracy floor.
/// The returned model is frozen by convention: nothing downstream mutates
/// it, and the freezing contract is verified bit-level in tests.
pub fn pretrain(
    widths: &[usize],
    split: usize,
    data: &Dataset,
    opts: &PretrainOpts,
    rng: &mut ChaCha8Rng,
) -> Result<(SplitModel, PretrainReport)> {
    let mut model = SplitModel::new(widths, split, rng)?;
    if data.train.x.ncols() != model.mlp.in_dim() {
        return Err(Error::shape(
            "pretrain data",
            format!("{}", model.mlp.in_dim()),
            format!("{}", data.train.x.ncols()),
        ));
    }
    let mut opt = RAdam::new(opts.lr);
    let n = data.train.len();
    let batch = opts.batch.max(1).min(n);
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let xb = data.train.x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.train.y[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(xb);
            let mut params = Vec::new();
            let mut h = x;
            let n_layers = model.mlp.n_layers();
            for (li, layer) in model.mlp.layers().iter().enumerate() {
                let w = tape.param(layer.weight.clone());
                let b = tape.param(layer.bias.clone().insert_axis(Axis(0)));
                params.push(w);
                params.push(b);
                h = tape.affine(h, w, Some(b))?;
                if li + 1 != n_layers {
                    h = tape.relu(h);
                }
            }
            let loss_node = tape.cross_entropy_mean(h, yb)?;
            let loss = tape.value(loss_node)[(0, 0)];
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite pretraining loss at epoch {epoch}"
                )));
            }
            epoch_loss += loss;
            batches += 1;
            let grads = tape.backward(loss_node)?;
            let grad_arrays: Vec<&Array2<f64>> = params
                .iter()
                .map(|id| {
                    grads
                        .get(*id)
                        .ok_or_else(|| Error::Training("parameter missing gradient".into()))
                })
                .collect::<Result<_>>()?;
            let grad_slices: Vec<&[f64]> = grad_arrays
                .iter()
                .map(|g| g.as_slice().expect("standard layout"))
                .collect();
            let mut param_slices = model.mlp.param_slices_mut();
            opt.step(&mut param_slices, &grad_slices)?;
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    let val_accuracy = clean_accuracy(&model, &data.val)?;
    if val_accuracy < opts.min_val_accuracy {
        return Err(Error::Training(format!(
            "pretraining reached val accuracy {val_accuracy:.4} < floor {:.4} \
             (epochs {}, lr {}, final loss {:.4})",
            opts.min_val_accuracy,
            opts.epochs,
            opts.lr,
            epoch_losses.last().copied().unwrap_or(f64::NAN)
        )));
    }
    Ok((
        model,
        PretrainReport {
            epoch_losses,
            val_accuracy,
        },
    ))
}

/// Fraction of samples the full model classifies correctly.
pub fn clean_accuracy(model: &SplitModel, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Domain("accuracy over an empty split".into()));
    }
    let logits = model.forward_batch(split.x.view())?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&split.y)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    Ok(correct as f64 / split.len() as f64)
}
