//! Dual-branch retrieval model.
//!
//! Text side: per-space `θ` = fully connected → ReLU → fully connected over a
//! pooled role vector. Video side: modality features are projected into
//! `model_dim` tokens, contextualized by one shared self-attention encoder
//! block, mean-pooled over tokens and mapped by per-space `δ` = two linear
//! layers. Every space output is L2-normalized; the joint representation is
//! the concatenation of the noun and verb embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{check_heads, EncoderBlockParams, Linear, NodeId, ParamTree, Tape};
use crate::text_roles::RoleVectors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

/// Which axis the video self-attention runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenAxis {
    /// One token per modality after temporal pooling.
    Modality,
    /// One token per (modality, segment); pooling happens after attention.
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the word vectors feeding `θ`.
    pub word_dim: usize,
    /// Width of each modality's feature vector.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Hidden width between the two fully connected layers of `θ`.
    pub text_hidden: usize,
    pub text_self_attention: bool,
    pub single_space: bool,
    pub pooling: Pooling,
    pub token_axis: TokenAxis,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            feature_dim: 32,
            embed_dim: 32,
            model_dim: 64,
            heads: 4,
            ff_hidden: 128,
            text_hidden: 64,
            text_self_attention: false,
            single_space: false,
            pooling: Pooling::Mean,
            token_axis: TokenAxis::Modality,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("feature_dim", self.feature_dim),
            ("model_dim", self.model_dim),
            ("ff_hidden", self.ff_hidden),
            ("text_hidden", self.text_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        check_heads(self.model_dim, self.heads)?;
        if self.text_self_attention && !self.word_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "text self-attention needs heads ({}) to divide word_dim ({})",
                self.heads, self.word_dim
            )));
        }
        Ok(())
    }

    pub fn spaces(&self) -> usize {
        if self.single_space {
            1
        } else {
            2
        }
    }

    /// Width of the joint representation: `e` in single-space mode, `2e` otherwise.
    pub fn joint_dim(&self) -> usize {
        self.embed_dim * self.spaces()
    }
}

/// `θ`: two fully connected layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBranch<T = Matrix> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// `δ` head: two linear layers, no nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBranch<T = Matrix> {
    pub lin1: Linear<T>,
    pub lin2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Matrix> {
    pub config: ModelConfig,
    /// Shared projection of every modality feature into `model_dim`.
    pub input_proj: Linear<T>,
    pub video_block: EncoderBlockParams<T>,
    /// Present only with `text_self_attention`.
    pub text_block: Option<EncoderBlockParams<T>>,
    /// One per space: `[noun, verb]`, or a single entry in single-space mode.
    pub text_branches: Vec<TextBranch<T>>,
    pub video_branches: Vec<VideoBranch<T>>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit/zero layer norms.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input_proj = Linear::init(config.feature_dim, config.model_dim, &mut rng);
        let video_block =
            EncoderBlockParams::init(config.model_dim, config.heads, config.ff_hidden, &mut rng)?;
        let text_block = if config.text_self_attention {
            Some(EncoderBlockParams::init(
                config.word_dim,
                config.heads,
                2 * config.word_dim,
                &mut rng,
            )?)
        } else {
            None
        };
        let text_in = if config.single_space {
            2 * config.word_dim
        } else {
            config.word_dim
        };
        let text_branches = (0..config.spaces())
            .map(|_| TextBranch {
                fc1: Linear::init(text_in, config.text_hidden, &mut rng),
                fc2: Linear::init(config.text_hidden, config.embed_dim, &mut rng),
            })
            .collect();
        let video_branches = (0..config.spaces())
            .map(|_| VideoBranch {
                lin1: Linear::init(config.model_dim, config.model_dim, &mut rng),
                lin2: Linear::init(config.model_dim, config.embed_dim, &mut rng),
            })
            .collect();
        Ok(Self {
            config: *config,
            input_proj,
            video_block,
            text_block,
            text_branches,
            video_branches,
        })
    }

    /// Copies every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<NodeId> {
        self.map(&mut |m| tape.leaf(m.clone()))
    }

    pub fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, m| ok &= m.is_finite());
        ok
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            input_proj: self.input_proj.map(f),
            video_block: self.video_block.map(f),
            text_block: self.text_block.as_ref().map(|b| b.map(f)),
            text_branches: self
                .text_branches
                .iter()
                .map(|b| TextBranch {
                    fc1: b.fc1.map(f),
                    fc2: b.fc2.map(f),
                })
                .collect(),
            video_branches: self
                .video_branches
                .iter()
                .map(|b| VideoBranch {
                    lin1: b.lin1.map(f),
                    lin2: b.lin2.map(f),
                })
                .collect(),
        }
    }
}

const SPACE_NAMES: [&str; 2] = ["noun", "verb"];

fn branch_name(single: bool, i: usize) -> &'static str {
    if single {
        "joint"
    } else {
        SPACE_NAMES[i]
    }
}

impl<T> ParamTree<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        let single = self.config.single_space;
        self.input_proj.visit(&p("input_proj"), f);
        self.video_block.visit(&p("video_block"), f);
        if let Some(b) = &self.text_block {
            b.visit(&p("text_block"), f);
        }
        for (i, b) in self.text_branches.iter().enumerate() {
            let name = branch_name(single, i);
            b.fc1.visit(&p(&format!("theta.{name}.fc1")), f);
            b.fc2.visit(&p(&format!("theta.{name}.fc2")), f);
        }
        for (i, b) in self.video_branches.iter().enumerate() {
            let name = branch_name(single, i);
            b.lin1.visit(&p(&format!("delta.{name}.lin1")), f);
            b.lin2.visit(&p(&format!("delta.{name}.lin2")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        let single = self.config.single_space;
        self.input_proj.visit_mut(&p("input_proj"), f);
        self.video_block.visit_mut(&p("video_block"), f);
        if let Some(b) = &mut self.text_block {
            b.visit_mut(&p("text_block"), f);
        }
        for (i, b) in self.text_branches.iter_mut().enumerate() {
            let name = branch_name(single, i);
            b.fc1.visit_mut(&p(&format!("theta.{name}.fc1")), f);
            b.fc2.visit_mut(&p(&format!("theta.{name}.fc2")), f);
        }
        for (i, b) in self.video_branches.iter_mut().enumerate() {
            let name = branch_name(single, i);
            b.lin1.visit_mut(&p(&format!("delta.{name}.lin1")), f);
            b.lin2.visit_mut(&p(&format!("delta.{name}.lin2")), f);
        }
    }
}

/// Per-space embeddings of one item. In single-space mode all three fields
/// hold the same vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub noun: Vec<f64>,
    pub verb: Vec<f64>,
    pub joint: Vec<f64>,
}

/// Tape handles of an encoded item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodedNodes {
    pub noun: NodeId,
    pub verb: NodeId,
    pub joint: NodeId,
}

impl EncodedNodes {
    pub fn values(&self, tape: &Tape) -> EmbeddingSet {
        EmbeddingSet {
            noun: tape.value(self.noun).as_slice().to_vec(),
            verb: tape.value(self.verb).as_slice().to_vec(),
            joint: tape.value(self.joint).as_slice().to_vec(),
        }
    }
}

fn join_spaces(tape: &mut Tape, outs: &[NodeId]) -> Result<EncodedNodes> {
    match outs {
        [single] => Ok(EncodedNodes {
            noun: *single,
            verb: *single,
            joint: *single,
        }),
        [noun, verb] => Ok(EncodedNodes {
            noun: *noun,
            verb: *verb,
            joint: tape.concat_cols(&[*noun, *verb])?,
        }),
        _ => Err(Error::shape(format!("{} branch outputs", outs.len()))),
    }
}

/// Text encoder on a tape.
///
/// The caller is expected to drop captions with a missing role beforehand.
pub fn encode_text_on(
    tape: &mut Tape,
    p: &ModelParams<NodeId>,
    roles: &RoleVectors,
) -> Result<EncodedNodes> {
    let dim = p.config.word_dim;
    if roles.noun.len() != dim || roles.verb.len() != dim {
        return Err(Error::shape(format!(
            "role vectors have width {}/{}, model expects {dim}",
            roles.noun.len(),
            roles.verb.len()
        )));
    }
    let mut noun = tape.leaf(Matrix::row_vector(&roles.noun)?);
    let mut verb = tape.leaf(Matrix::row_vector(&roles.verb)?);
    if let Some(block) = &p.text_block {
        let tokens = tape.concat_rows(&[noun, verb])?;
        let ctx = tape.encoder_block(tokens, block)?;
        noun = tape.select_row(ctx, 0)?;
        verb = tape.select_row(ctx, 1)?;
    }
    let inputs = if p.config.single_space {
        vec![tape.concat_cols(&[noun, verb])?]
    } else {
        vec![noun, verb]
    };
    let mut outs = Vec::with_capacity(inputs.len());
    for (x, branch) in inputs.into_iter().zip(&p.text_branches) {
        let h = tape.linear(x, &branch.fc1)?;
        let h = tape.relu(h);
        let y = tape.linear(h, &branch.fc2)?;
        outs.push(tape.l2_normalize(y));
    }
    join_spaces(tape, &outs)
}

/// Video encoder on a tape. `tokens` holds one matrix per modality whose rows
/// are that modality's tokens (a single pooled row in modality mode).
pub fn encode_video_on(
    tape: &mut Tape,
    p: &ModelParams<NodeId>,
    tokens: &[Matrix],
) -> Result<EncodedNodes> {
    if tokens.is_empty() {
        return Err(Error::shape("video clip has no modalities"));
    }
    if let Some(m) = tokens.iter().find(|m| m.cols() != p.config.feature_dim) {
        return Err(Error::shape(format!(
            "modality feature width {} does not match feature_dim {}",
            m.cols(),
            p.config.feature_dim
        )));
    }
    let leaves: Vec<NodeId> = tokens.iter().map(|m| tape.leaf(m.clone())).collect();
    let raw = tape.concat_rows(&leaves)?;
    let projected = tape.linear(raw, &p.input_proj)?;
    let ctx = tape.encoder_block(projected, &p.video_block)?;
    let pooled = tape.mean_rows(ctx);
    let mut outs = Vec::with_capacity(p.video_branches.len());
    for branch in &p.video_branches {
        let h = tape.linear(pooled, &branch.lin1)?;
        let y = tape.linear(h, &branch.lin2)?;
        outs.push(tape.l2_normalize(y));
    }
    join_spaces(tape, &outs)
}

/// Inference helper that binds parameters once and reuses the tape prefix.
pub struct Encoder {
    tape: Tape,
    bound: ModelParams<NodeId>,
    base: usize,
}

impl Encoder {
    pub fn new(params: &ModelParams) -> Self {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let base = tape.len();
        Self { tape, bound, base }
    }

    pub fn text(&mut self, roles: &RoleVectors) -> Result<EmbeddingSet> {
        let out = encode_text_on(&mut self.tape, &self.bound, roles);
        let res = out.map(|n| n.values(&self.tape));
        self.tape.truncate(self.base);
        res
    }

    pub fn video(&mut self, tokens: &[Matrix]) -> Result<EmbeddingSet> {
        let out = encode_video_on(&mut self.tape, &self.bound, tokens);
        let res = out.map(|n| n.values(&self.tape));
        self.tape.truncate(self.base);
        res
    }
}

pub fn encode_text(params: &ModelParams, roles: &RoleVectors) -> Result<EmbeddingSet> {
    Encoder::new(params).text(roles)
}

pub fn encode_video(params: &ModelParams, tokens: &[Matrix]) -> Result<EmbeddingSet> {
    Encoder::new(params).video(tokens)
}
