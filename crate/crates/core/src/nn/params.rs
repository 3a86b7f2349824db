use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Parameter containers are generic over the leaf type so the same structure
/// holds concrete weights (`Matrix`), tape handles (`NodeId`) or gradients.
pub trait ParamTree<T> {
    /// Visits every tensor in a fixed order with a dotted name.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight is stored `out x in`; bias is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = Matrix> {
    pub weight: T,
    pub bias: T,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape(format!(
                "bias {:?} does not match weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weight, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(out_dim, in_dim, in_dim, out_dim, rng),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> ParamTree<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = Matrix> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, 1.0),
            beta: Matrix::zeros(1, dim),
        }
    }
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<T> ParamTree<T> for LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Per-head projections `W_q[h], W_k[h], W_v[h]` are `model_dim x head_dim`;
/// the output projection is `(heads * head_dim) x model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Matrix> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: T,
}

impl AttentionParams {
    pub fn init(model_dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(model_dim, heads)?;
        let head_dim = model_dim / heads;
        let proj = |rng: &mut _| -> Vec<Matrix> {
            (0..heads)
                .map(|_| glorot(model_dim, head_dim, model_dim, head_dim, rng))
                .collect()
        };
        let w_q = proj(rng);
        let w_k = proj(rng);
        let w_v = proj(rng);
        let w_o = glorot(model_dim, model_dim, model_dim, model_dim, rng);
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    /// Single head with identity projections: attention reduces to plain
    /// `softmax(XXᵀ/sqrt(d))·X`.
    pub fn identity(model_dim: usize) -> Self {
        Self {
            w_q: vec![Matrix::identity(model_dim)],
            w_k: vec![Matrix::identity(model_dim)],
            w_v: vec![Matrix::identity(model_dim)],
            w_o: Matrix::identity(model_dim),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn model_dim(&self) -> usize {
        self.w_o.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q[0].cols()
    }
}

pub(crate) fn check_heads(model_dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "heads ({heads}) must divide model_dim ({model_dim})"
        )));
    }
    Ok(())
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: self.w_q.iter().map(&mut *f).collect(),
            w_k: self.w_k.iter().map(&mut *f).collect(),
            w_v: self.w_v.iter().map(&mut *f).collect(),
            w_o: f(&self.w_o),
        }
    }
}

impl<T> ParamTree<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (name, list) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            for (h, m) in list.iter().enumerate() {
                f(join(prefix, &format!("{name}.{h}")), m);
            }
        }
        f(join(prefix, "w_o"), &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (name, list) in [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
        ] {
            for (h, m) in list.iter_mut().enumerate() {
                f(join(prefix, &format!("{name}.{h}")), m);
            }
        }
        f(join(prefix, "w_o"), &mut self.w_o);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams<T = Matrix> {
    pub attention: AttentionParams<T>,
    pub norm1: LayerNormParams<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub norm2: LayerNormParams<T>,
}

impl EncoderBlockParams {
    pub fn init(model_dim: usize, heads: usize, ff_hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if ff_hidden == 0 {
            return Err(Error::Config("ff_hidden must be positive".into()));
        }
        Ok(Self {
            attention: AttentionParams::init(model_dim, heads, rng)?,
            norm1: LayerNormParams::init(model_dim),
            ff_in: Linear::init(model_dim, ff_hidden, rng),
            ff_out: Linear::init(ff_hidden, model_dim, rng),
            norm2: LayerNormParams::init(model_dim),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.attention.model_dim()
    }
}

impl<T> EncoderBlockParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderBlockParams<U> {
        EncoderBlockParams {
            attention: self.attention.map(f),
            norm1: self.norm1.map(f),
            ff_in: self.ff_in.map(f),
            ff_out: self.ff_out.map(f),
            norm2: self.norm2.map(f),
        }
    }
}

impl<T> ParamTree<T> for EncoderBlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_parts(rows, cols, data)
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
