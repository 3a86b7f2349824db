//! Numerical building blocks: linear layers, layer normalization, softmax,
//! scaled dot-product multi-head self-attention and the post-norm residual
//! encoder block.
//!
//! The free functions here are straight forward evaluations. Training goes
//! through [`Tape`], whose ops call into the same kernels so that tape values
//! and direct evaluation agree bit for bit.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{check_tape_fn, grad_check, relative_error, GradCheckReport};
pub(crate) use params::check_heads;
pub use params::{glorot, glorot_bound, AttentionParams, EncoderBlockParams, LayerNormParams, Linear, ParamTree};
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `W·x + b` for a single vector.
pub fn linear(x: &[f64], weight: &Matrix, bias: &[f64]) -> Result<Vec<f64>> {
    if weight.cols() != x.len() || weight.rows() != bias.len() {
        return Err(Error::shape(format!(
            "linear: x[{}], W[{}x{}], b[{}]",
            x.len(),
            weight.rows(),
            weight.cols(),
            bias.len()
        )));
    }
    Ok((0..weight.rows())
        .map(|i| dot(weight.row(i), x) + bias[i])
        .collect())
}

/// Applies `layer` to every row of `x`.
pub fn linear_rows(x: &Matrix, layer: &Linear) -> Result<Matrix> {
    if x.cols() != layer.in_dim() {
        return Err(Error::shape(format!(
            "linear_rows: x has {} cols, layer expects {}",
            x.cols(),
            layer.in_dim()
        )));
    }
    Ok(linear_rows_kernel(x, &layer.weight, &layer.bias))
}

pub(crate) fn linear_rows_kernel(x: &Matrix, weight: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = x.matmul_t(weight);
    let b = bias.as_slice();
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let (normalized, _) = normalize_row(x, eps);
    normalized
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(xh, (g, b))| g * xh + b)
        .collect()
}

/// Returns `(x̂, 1/sqrt(var + eps))`.
pub(crate) fn normalize_row(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn layer_norm_rows(x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    if x.cols() != p.gamma.cols() {
        return Err(Error::shape(format!(
            "layer_norm: x has {} cols, gamma has {}",
            x.cols(),
            p.gamma.cols()
        )));
    }
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        data.extend(layer_norm(x.row(r), p.gamma.as_slice(), p.beta.as_slice(), LAYER_NORM_EPS));
    }
    Ok(Matrix::from_parts(x.rows(), x.cols(), data))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        data.extend(softmax(x.row(r)));
    }
    Matrix::from_parts(x.rows(), x.cols(), data)
}

pub(crate) fn relu_kernel(x: &Matrix) -> Matrix {
    Matrix::from_parts(
        x.rows(),
        x.cols(),
        x.as_slice().iter().map(|v| v.max(0.0)).collect(),
    )
}

/// `softmax(Q·Kᵀ / sqrt(d_h)) · V`, softmax taken row-wise.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scores = q.matmul_t(k).scaled(attention_scale(q.cols()));
    Ok(softmax_rows(&scores).matmul_unchecked(v))
}

pub(crate) fn attention_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Multi-head self-attention with `Q = K = V = x`.
pub fn multi_head(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    if x.cols() != p.model_dim() {
        return Err(Error::shape(format!(
            "multi_head: x has {} cols, model_dim is {}",
            x.cols(),
            p.model_dim()
        )));
    }
    let mut heads = Vec::with_capacity(p.heads());
    for h in 0..p.heads() {
        let q = x.matmul_unchecked(&p.w_q[h]);
        let k = x.matmul_unchecked(&p.w_k[h]);
        let v = x.matmul_unchecked(&p.w_v[h]);
        heads.push(scaled_dot_attention(&q, &k, &v)?);
    }
    Ok(concat_cols(&heads.iter().collect::<Vec<_>>()).matmul_unchecked(&p.w_o))
}

pub(crate) fn concat_cols(parts: &[&Matrix]) -> Matrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|m| m.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for m in parts {
            data.extend_from_slice(m.row(r));
        }
    }
    Matrix::from_parts(rows, cols, data)
}

pub(crate) fn add_kernel(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// Position-wise `linear → ReLU → linear`.
pub fn feed_forward(x: &Matrix, ff_in: &Linear, ff_out: &Linear) -> Result<Matrix> {
    let hidden = relu_kernel(&linear_rows(x, ff_in)?);
    linear_rows(&hidden, ff_out)
}

/// `z = Norm(MultiHead(x) + x)`, `E = Norm(FF(z) + z)`.
pub fn encoder_block(x: &Matrix, p: &EncoderBlockParams) -> Result<Matrix> {
    let attended = multi_head(x, &p.attention)?;
    let z = layer_norm_rows(&add_kernel(&attended, x), &p.norm1)?;
    let ff = feed_forward(&z, &p.ff_in, &p.ff_out)?;
    layer_norm_rows(&add_kernel(&ff, &z), &p.norm2)
}
