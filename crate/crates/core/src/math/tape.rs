//! Reverse-mode autodiff over batched `f64` tensors.
//!
//! The tape records tensor-level operations in creation order; reverse
//! iteration is therefore a topological order for backprop. Constants
//! (frozen encoder outputs, erasure masks, received features) live on the
//! tape without gradient slots, so backward touches only the paths that
//! reach trainable parameters.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `out = x w^T (+ b)`, `w: out_dim x in_dim`, `b: 1 x out_dim`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    RowSoftmax {
        x: NodeId,
    },
    /// `out = x .* [x >= threshold]`; backward is straight-through, the
    /// gate is treated as constant.
    PruneThreshold {
        x: NodeId,
        threshold: f64,
    },
    /// Pairwise masked dot products.
    ///
    /// `queries: N x Q` (row i: device i's query), `wmat: N x Q` (row j:
    /// source j's projected key), `masks: N x N x Q` of 0/1. Output is
    /// `N x N` with
    /// `out[i, j] = sum_a q_ij[a] * wmat[j, a]` where
    /// `q_ij[a] = queries[i, a]` if `masks[i, j, a] == 1`, else `fill`.
    MaskedPairDot {
        queries: NodeId,
        wmat: NodeId,
        masks: Array3<f64>,
        fill: f64,
    },
    /// `out[i, :] = sum_j weights[i, j] * feats[i, j, :]`; `feats` is a
    /// constant `N x N x F` block of received features.
    WeightedCombine {
        weights: NodeId,
        feats: Array3<f64>,
    },
    /// Mean of `-log softmax(logits[i])[labels[i]]`; output is `1 x 1`.
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if xv.ncols() != wv.ncols() {
            return Err(Error::shape(
                "affine",
                format!("x cols = {}", wv.ncols()),
                format!("{}", xv.ncols()),
            ));
        }
        let mut out = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            if bv.nrows() != 1 || bv.ncols() != wv.nrows() {
                return Err(Error::shape(
                    "affine bias",
                    format!("1 x {}", wv.nrows()),
                    format!("{} x {}", bv.nrows(), bv.ncols()),
                ));
            }
            out += &bv.row(0);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = &self.nodes[x.0].value * factor;
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = super::softmax_rows(self.nodes[x.0].value.view())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowSoftmax { x }, rg))
    }

    pub fn prune_threshold(&mut self, x: NodeId, threshold: f64) -> NodeId {
        let out = self.nodes[x.0]
            .value
            .mapv(|v| if v >= threshold { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::PruneThreshold { x, threshold }, rg)
    }

    pub fn masked_pair_dot(
        &mut self,
        queries: NodeId,
        wmat: NodeId,
        masks: Array3<f64>,
        fill: f64,
    ) -> Result<NodeId> {
        let qv = &self.nodes[queries.0].value;
        let wv = &self.nodes[wmat.0].value;
        let n = qv.nrows();
        let q = qv.ncols();
        if wv.nrows() != n || wv.ncols() != q {
            return Err(Error::shape(
                "pair dot",
                format!("{n} x {q}"),
                format!("{} x {}", wv.nrows(), wv.ncols()),
            ));
        }
        if masks.dim() != (n, n, q) {
            return Err(Error::shape(
                "pair dot masks",
                format!("{n} x {n} x {q}"),
                format!("{:?}", masks.dim()),
            ));
        }
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for a in 0..q {
                    let m = masks[(i, j, a)];
                    s += (m * qv[(i, a)] + (1.0 - m) * fill) * wv[(j, a)];
                }
                out[(i, j)] = s;
            }
        }
        let rg = self.rg(queries) || self.rg(wmat);
        Ok(self.push(
            out,
            Op::MaskedPairDot {
                queries,
                wmat,
                masks,
                fill,
            },
            rg,
        ))
    }

    pub fn weighted_combine(&mut self, weights: NodeId, feats: Array3<f64>) -> Result<NodeId> {
        let wv = &self.nodes[weights.0].value;
        let n = wv.nrows();
        if wv.ncols() != n || feats.dim().0 != n || feats.dim().1 != n {
            return Err(Error::shape(
                "weighted combine",
                format!("weights {n} x {n}, feats {n} x {n} x F"),
                format!(
                    "weights {} x {}, feats {:?}",
                    wv.nrows(),
                    wv.ncols(),
                    feats.dim()
                ),
            ));
        }
        let f = feats.dim().2;
        let mut out = Array2::zeros((n, f));
        for i in 0..n {
            for j in 0..n {
                let w = wv[(i, j)];
                if w == 0.0 {
                    continue;
                }
                for a in 0..f {
                    out[(i, a)] += w * feats[(i, j, a)];
                }
            }
        }
        let rg = self.rg(weights);
        Ok(self.push(out, Op::WeightedCombine { weights, feats }, rg))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let loss = super::cross_entropy_mean(lv.view(), &labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropyMean { logits, labels },
            rg,
        ))
    }

    /// Backprop from a scalar (`1 x 1`) root to every tracked node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.dim() != (1, 1) {
            return Err(Error::shape(
                "backward root",
                "1 x 1",
                format!("{} x {}", rv.nrows(), rv.ncols()),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    if self.rg(*x) {
                        let wv = &self.nodes[w.0].value;
                        add_grad(&mut grads[x.0], g.dot(wv));
                    }
                    if self.rg(*w) {
                        let xv = &self.nodes[x.0].value;
                        add_grad(&mut grads[w.0], g.t().dot(xv));
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let col = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                            add_grad(&mut grads[b.0], col);
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.rg(*x) {
                        let xv = &self.nodes[x.0].value;
                        let mut dx = g;
                        dx.zip_mut_with(xv, |d, &v| {
                            if v <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        add_grad(&mut grads[x.0], dx);
                    }
                }
                Op::Scale { x, factor } => {
                    if self.rg(*x) {
                        add_grad(&mut grads[x.0], g * *factor);
                    }
                }
                Op::RowSoftmax { x } => {
                    if self.rg(*x) {
                        let p = &self.nodes[idx].value;
                        let mut dx = &g * p;
                        for (mut drow, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.sum();
                            drow.zip_mut_with(&prow, |d, &pv| *d -= dot * pv);
                        }
                        add_grad(&mut grads[x.0], dx);
                    }
                }
                Op::PruneThreshold { x, threshold } => {
                    if self.rg(*x) {
                        let xv = &self.nodes[x.0].value;
                        let mut dx = g;
                        dx.zip_mut_with(xv, |d, &v| {
                            if v < *threshold {
                                *d = 0.0;
                            }
                        });
                        add_grad(&mut grads[x.0], dx);
                    }
                }
                Op::MaskedPairDot {
                    queries,
                    wmat,
                    masks,
                    fill,
                } => {
                    let n = masks.dim().0;
                    let q = masks.dim().2;
                    let qv = &self.nodes[queries.0].value;
                    let wv = &self.nodes[wmat.0].value;
                    if self.rg(*queries) {
                        let mut dq = Array2::zeros((n, q));
                        for i in 0..n {
                            for j in 0..n {
                                let gij = g[(i, j)];
                                if gij == 0.0 {
                                    continue;
                                }
                                for a in 0..q {
                                    dq[(i, a)] += gij * masks[(i, j, a)] * wv[(j, a)];
                                }
                            }
                        }
                        add_grad(&mut grads[queries.0], dq);
                    }
                    if self.rg(*wmat) {
                        let mut dw = Array2::zeros((n, q));
                        for i in 0..n {
                            for j in 0..n {
                                let gij = g[(i, j)];
                                if gij == 0.0 {
                                    continue;
                                }
                                for a in 0..q {
                                    let m = masks[(i, j, a)];
                                    dw[(j, a)] += gij * (m * qv[(i, a)] + (1.0 - m) * fill);
                                }
                            }
                        }
                        add_grad(&mut grads[wmat.0], dw);
                    }
                }
                Op::WeightedCombine { weights, feats } => {
                    if self.rg(*weights) {
                        let (n, _, f) = feats.dim();
                        let mut dw = Array2::zeros((n, n));
                        for i in 0..n {
                            for j in 0..n {
                                let mut s = 0.0;
                                for a in 0..f {
                                    s += g[(i, a)] * feats[(i, j, a)];
                                }
                                dw[(i, j)] = s;
                            }
                        }
                        add_grad(&mut grads[weights.0], dw);
                    }
                }
                Op::CrossEntropyMean { logits, labels } => {
                    if self.rg(*logits) {
                        let lv = &self.nodes[logits.0].value;
                        let scale = g[(0, 0)] / labels.len() as f64;
                        let mut dl = super::softmax_rows(lv.view())?;
                        for (mut row, &label) in dl.rows_mut().into_iter().zip(labels) {
                            row[label] -= 1.0;
                            row.mapv_inplace(|v| v * scale);
                        }
                        add_grad(&mut grads[logits.0], dl);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_grad(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}
