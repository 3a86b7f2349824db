//! Reverse-mode gradient tape over matrix-valued primitives.
//!
//! Each op stores whatever activations its vector-Jacobian product needs.
//! Nodes are appended in evaluation order, so walking the node list backwards
//! is a valid reverse topological order.

use super::params::{AttentionParams, EncoderBlockParams, LayerNormParams, Linear};
use super::{
    add_kernel, attention_scale, concat_cols, linear_rows_kernel, normalize_row, relu_kernel,
    softmax_rows, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::matrix::{l2_norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Linear {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    /// Output is the node value itself.
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRow(NodeId, usize),
    MeanRows(NodeId),
    /// Per-row L2 normalization; stores row norms.
    L2Normalize(NodeId, Vec<f64>),
    SquaredNorm(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Single-writer record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: breaks the layer-norm gradient rule so that gradient checks
    /// can be shown to catch a wrong backward pass.
    #[doc(hidden)]
    pub fn inject_fault(&mut self) {
        self.fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(Error::shape(format!(
                "matmul_t {:?} by transpose of {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).matmul_t(self.value(b));
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    /// Row-wise `x·Wᵀ + b`.
    pub fn linear(&mut self, x: NodeId, layer: &Linear<NodeId>) -> Result<NodeId> {
        let (wr, wc) = self.shape(layer.weight);
        if self.shape(x).1 != wc || self.shape(layer.bias) != (1, wr) {
            return Err(Error::shape(format!(
                "linear: x {:?}, W {:?}, b {:?}",
                self.shape(x),
                (wr, wc),
                self.shape(layer.bias)
            )));
        }
        let value = linear_rows_kernel(self.value(x), self.value(layer.weight), self.value(layer.bias));
        Ok(self.push(
            value,
            Op::Linear {
                x,
                weight: layer.weight,
                bias: layer.bias,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let value = add_kernel(self.value(a), self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let value = self.value(x).scaled(s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = relu_kernel(self.value(x));
        self.push(value, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, p: &LayerNormParams<NodeId>) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if self.shape(p.gamma) != (1, cols) || self.shape(p.beta) != (1, cols) {
            return Err(Error::shape(format!("layer_norm over {cols} features")));
        }
        let mut normalized = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        {
            let xv = self.value(x);
            let gamma = self.value(p.gamma).as_slice();
            let beta = self.value(p.beta).as_slice();
            for r in 0..rows {
                let (xh, is) = normalize_row(xv.row(r), LAYER_NORM_EPS);
                out.extend(xh.iter().zip(gamma.iter().zip(beta)).map(|(v, (g, b))| g * v + b));
                normalized.extend(xh);
                inv_std.push(is);
            }
        }
        Ok(self.push(
            Matrix::from_parts(rows, cols, out),
            Op::LayerNorm {
                x,
                gamma: p.gamma,
                beta: p.beta,
                normalized: Matrix::from_parts(rows, cols, normalized),
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::Softmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_cols(&mats);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::shape("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
            rows += self.shape(p).0;
        }
        Ok(self.push(Matrix::from_parts(rows, cols, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if row >= rows {
            return Err(Error::Index { index: row, len: rows });
        }
        let value = Matrix::from_parts(1, cols, self.value(x).row(row).to_vec());
        Ok(self.push(value, Op::SelectRow(x, row)))
    }

    /// Column-wise mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let value = mean_rows(self.value(x));
        self.push(value, Op::MeanRows(x))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let n = l2_norm(xv.row(r)).max(NORM_FLOOR);
            data.extend(xv.row(r).iter().map(|v| v / n));
            norms.push(n);
        }
        let value = Matrix::from_parts(xv.rows(), xv.cols(), data);
        self.push(value, Op::L2Normalize(x, norms))
    }

    /// Sum of squares of all entries as a `1 x 1` scalar.
    pub fn squared_norm(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).as_slice().iter().map(|v| v * v).sum();
        self.push(Matrix::from_parts(1, 1, vec![s]), Op::SquaredNorm(x))
    }

    pub fn multi_head(&mut self, x: NodeId, p: &AttentionParams<NodeId>) -> Result<NodeId> {
        let mut heads = Vec::with_capacity(p.w_q.len());
        for h in 0..p.w_q.len() {
            let q = self.matmul(x, p.w_q[h])?;
            let k = self.matmul(x, p.w_k[h])?;
            let v = self.matmul(x, p.w_v[h])?;
            let scores = self.matmul_t(q, k)?;
            let scaled = self.scale(scores, attention_scale(self.shape(q).1));
            let weights = self.softmax_rows(scaled);
            heads.push(self.matmul(weights, v)?);
        }
        let cat = self.concat_cols(&heads)?;
        self.matmul(cat, p.w_o)
    }

    pub fn encoder_block(&mut self, x: NodeId, p: &EncoderBlockParams<NodeId>) -> Result<NodeId> {
        let attended = self.multi_head(x, &p.attention)?;
        let res1 = self.add(attended, x)?;
        let z = self.layer_norm(res1, &p.norm1)?;
        let hidden = self.linear(z, &p.ff_in)?;
        let hidden = self.relu(hidden);
        let ff = self.linear(hidden, &p.ff_out)?;
        let res2 = self.add(ff, z)?;
        self.layer_norm(res2, &p.norm2)
    }

    /// Reverse pass from a scalar output, seeding `d output = seed`.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::TapeEmpty);
        }
        if self.shape(output) != (1, 1) {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.backward_from(vec![(output, Matrix::from_parts(1, 1, vec![seed]))])
    }

    /// Reverse pass with explicit output cotangents, accumulated if several
    /// seeds target the same node.
    pub fn backward_from(&self, seeds: Vec<(NodeId, Matrix)>) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::TapeEmpty);
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (id, g) in seeds {
            if g.shape() != self.shape(id) {
                return Err(Error::shape(format!(
                    "seed {:?} for node of shape {:?}",
                    g.shape(),
                    self.shape(id)
                )));
            }
            last = last.max(id.0);
            accumulate(&mut grads, id, g);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn vjp(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(self.value(*b)));
                accumulate(grads, *b, self.value(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                accumulate(grads, *a, g.matmul_unchecked(self.value(*b)));
                accumulate(grads, *b, g.t_matmul(self.value(*a)));
            }
            Op::Linear { x, weight, bias } => {
                accumulate(grads, *x, g.matmul_unchecked(self.value(*weight)));
                accumulate(grads, *weight, g.t_matmul(self.value(*x)));
                accumulate(grads, *bias, column_sums(g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.scaled(*s)),
            Op::Relu(x) => {
                let xv = self.value(*x).as_slice();
                let data = g
                    .as_slice()
                    .iter()
                    .zip(xv)
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Matrix::from_parts(g.rows(), g.cols(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).as_slice();
                let mut dgamma = vec![0.0; cols];
                let mut dx = Vec::with_capacity(rows * cols);
                for (r, &istd) in inv_std.iter().enumerate().take(rows) {
                    let gr = g.row(r);
                    let xh = normalized.row(r);
                    for c in 0..cols {
                        dgamma[c] += gr[c] * xh[c];
                    }
                    let dxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let n = cols as f64;
                    let mean_dxh = dxh.iter().sum::<f64>() / n;
                    let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        let mut v = dxh[c] - mean_dxh;
                        if !self.fault {
                            v -= xh[c] * mean_dxh_xh;
                        }
                        dx.push(istd * v);
                    }
                }
                accumulate(grads, *x, Matrix::from_parts(rows, cols, dx));
                accumulate(grads, *gamma, Matrix::from_parts(1, cols, dgamma));
                accumulate(grads, *beta, column_sums(g));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - inner)));
                }
                accumulate(grads, *x, Matrix::from_parts(y.rows(), y.cols(), dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, p, Matrix::from_parts(rows, cols, data));
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let data = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(grads, p, Matrix::from_parts(rows, cols, data));
                    offset += rows;
                }
            }
            Op::SelectRow(x, row) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Matrix::zeros(rows, cols);
                dx.row_mut(*row).copy_from_slice(g.as_slice());
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let inv = 1.0 / rows as f64;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    data.extend(g.as_slice().iter().map(|v| v * inv));
                }
                accumulate(grads, *x, Matrix::from_parts(rows, cols, data));
            }
            Op::L2Normalize(x, norms) => {
                let y = &node.value;
                let mut dx = Vec::with_capacity(y.len());
                for (r, &norm) in norms.iter().enumerate().take(y.rows()) {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * inner) / norm));
                }
                accumulate(grads, *x, Matrix::from_parts(y.rows(), y.cols(), dx));
            }
            Op::SquaredNorm(x) => {
                accumulate(grads, *x, self.value(*x).scaled(2.0 * g.as_slice()[0]));
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::from_parts(1, g.cols(), out)
}

pub(crate) fn mean_rows(x: &Matrix) -> Matrix {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let n = x.rows() as f64;
    Matrix::from_parts(1, x.cols(), out.into_iter().map(|v| v / n).collect())
}

/// Result of a reverse pass. Nodes the pass never reached report zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}
