//! Semantic matching: query/key generation, scaled general attention
//! scores, the row-stochastic matching matrix, threshold pruning, and
//! weighted feature combination.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{softmax_rows, Mlp};

pub const QUERY_DIM: usize = 64;
pub const KEY_DIM: usize = 1024;
pub const HIDDEN: [usize; 2] = [256, 128];

/// The only parameters trained after the backbone freezes: the query
/// generator, the key generator, and the attention bilinear form.
#[derive(Debug, Clone, PartialEq)]
pub struct CommModules {
    pub phi_q: Mlp,
    pub phi_k: Mlp,
    /// `QUERY_DIM x KEY_DIM` bilinear weights.
    pub w_a: Array2<f64>,
}

impl CommModules {
    /// Glorot-initialized modules for a given split-point feature size.
    pub fn init(feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let phi_q = Mlp::glorot(&[feature_dim, HIDDEN[0], HIDDEN[1], QUERY_DIM], rng);
        let phi_k = Mlp::glorot(&[feature_dim, HIDDEN[0], HIDDEN[1], KEY_DIM], rng);
        let bound = (6.0 / (QUERY_DIM + KEY_DIM) as f64).sqrt();
        let w_a = Array2::from_shape_fn((QUERY_DIM, KEY_DIM), |_| {
            rand::Rng::gen_range(rng, -bound..bound)
        });
        CommModules { phi_q, phi_k, w_a }
    }

    pub fn from_parts(phi_q: Mlp, phi_k: Mlp, w_a: Array2<f64>) -> Result<Self> {
        if phi_q.in_dim() != phi_k.in_dim() {
            return Err(Error::shape(
                "generator input dims",
                format!("{}", phi_q.in_dim()),
                format!("{}", phi_k.in_dim()),
            ));
        }
        if w_a.dim() != (phi_q.out_dim(), phi_k.out_dim()) {
            return Err(Error::shape(
                "attention weights",
                format!("{} x {}", phi_q.out_dim(), phi_k.out_dim()),
                format!("{} x {}", w_a.nrows(), w_a.ncols()),
            ));
        }
        if w_a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite attention weight".into()));
        }
        Ok(CommModules { phi_q, phi_k, w_a })
    }

    pub fn feature_dim(&self) -> usize {
        self.phi_q.in_dim()
    }

    pub fn query_dim(&self) -> usize {
        self.phi_q.out_dim()
    }

    pub fn key_dim(&self) -> usize {
        self.phi_k.out_dim()
    }

    pub fn gen_query(&self, o: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.phi_q.forward(o)
    }

    pub fn gen_key(&self, o: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.phi_k.forward(o)
    }

    pub fn gen_queries(&self, o: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.phi_q.forward_batch(o)
    }

    pub fn gen_keys(&self, o: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.phi_k.forward_batch(o)
    }

    /// Flat parameter views in a stable order: query encoder layers, key
    /// encoder layers, score weights.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.phi_q.param_slices();
        v.extend(self.phi_k.param_slices());
        v.push(self.w_a.as_slice().expect("standard layout"));
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.phi_q.param_slices_mut();
        v.extend(self.phi_k.param_slices_mut());
        v.push(self.w_a.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Bilinear relevance of a received query `q_hat` against the local key:
/// `(q_hat^T Wa kappa) / sqrt(K)`.
pub fn match_score(
    kappa: ArrayView1<f64>,
    q_hat: ArrayView1<f64>,
    w_a: &Array2<f64>,
) -> Result<f64> {
    if w_a.nrows() != q_hat.len() || w_a.ncols() != kappa.len() {
        return Err(Error::shape(
            "match score",
            format!("{} x {}", q_hat.len(), kappa.len()),
            format!("{} x {}", w_a.nrows(), w_a.ncols()),
        ));
    }
    let projected = w_a.dot(&kappa);
    Ok(q_hat.dot(&projected) / (kappa.len() as f64).sqrt())
}

/// Raw scores plus their row-softmax normalization. Entry (i, j) scores
/// source j for destination i.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMatrix {
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

pub fn build_matrix(scores: &Array2<f64>) -> Result<MatchingMatrix> {
    if scores.nrows() != scores.ncols() || scores.is_empty() {
        return Err(Error::shape(
            "matching scores",
            "square, nonempty",
            format!("{} x {}", scores.nrows(), scores.ncols()),
        ));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite matching score".into()));
    }
    Ok(MatchingMatrix {
        raw: scores.clone(),
        normalized: softmax_rows(scores.view())?,
    })
}

/// Zeroes entries below `rho`; survivors keep their exact value (no
/// renormalization). Thresholds above 1 are legal and kill entire rows.
pub fn prune(normalized: &Array2<f64>, rho: f64) -> Result<Array2<f64>> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!(
            "pruning threshold {rho} must be finite and nonnegative"
        )));
    }
    Ok(normalized.mapv(|v| if v >= rho { v } else { 0.0 }))
}

/// Average surviving off-diagonal entries per device; self links are not
/// transmissions and never count.
pub fn count_connections(pruned: &Array2<f64>) -> f64 {
    let n = pruned.nrows();
    let surviving = pruned
        .indexed_iter()
        .filter(|&((i, j), &v)| i != j && v > 0.0)
        .count();
    surviving as f64 / n as f64
}

/// Weighted combination for one destination: `sum_j weights[j] * feats[j]`
/// where row i of `feats` must already hold the local feature.
pub fn combine(weights: ArrayView1<f64>, feats: ArrayView2<f64>) -> Result<Array1<f64>> {
    if weights.len() != feats.nrows() {
        return Err(Error::shape(
            "combine",
            format!("{}", feats.nrows()),
            format!("{}", weights.len()),
        ));
    }
    let mut out = Array1::zeros(feats.ncols());
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (a, o) in out.iter_mut().enumerate() {
            *o += w * feats[(j, a)];
        }
    }
    Ok(out)
}

/// All destinations at once: `out[i, :] = sum_j weights[i, j] *
/// feats[i, j, :]`. Loop order matches the training-graph combine exactly
/// so both paths produce bit-identical results.
pub fn combine_all(weights: &Array2<f64>, feats: &Array3<f64>) -> Result<Array2<f64>> {
    let n = weights.nrows();
    if weights.ncols() != n || feats.dim().0 != n || feats.dim().1 != n {
        return Err(Error::shape(
            "combine all",
            format!("{n} x {n} weights, {n} x {n} x F feats"),
            format!(
                "{} x {} weights, {:?} feats",
                weights.nrows(),
                weights.ncols(),
                feats.dim()
            ),
        ));
    }
    let f = feats.dim().2;
    let mut out = Array2::zeros((n, f));
    for i in 0..n {
        for j in 0..n {
            let w = weights[(i, j)];
            if w == 0.0 {
                continue;
            }
            for a in 0..f {
                out[(i, a)] += w * feats[(i, j, a)];
            }
        }
    }
    Ok(out)
}
