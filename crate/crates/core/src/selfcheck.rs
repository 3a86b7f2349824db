//! Finite-difference gradient suite covering every differentiable piece of
//! the model and the training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{synth_dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::loss::{distance, distance_grad, triplet_term, triplet_term_grad, DistanceKind, SpaceRelevance};
use crate::matrix::Matrix;
use crate::model::{encode_text_on, encode_video_on, ModelConfig, ModelParams};
use crate::nn::{
    check_heads, check_tape_fn, grad_check, AttentionParams, EncoderBlockParams, GradCheckReport,
    LayerNormParams, Linear, NodeId, ParamTree, Tape,
};
use crate::text_roles::{Caption, RoleVectors};
use crate::train::{batch_gradients_on, prepare_items, Item, TrainConfig};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;

/// Sizes used by the suite. Small on purpose: every coordinate is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckDims {
    pub model_dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub word_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub batch: usize,
}

impl Default for CheckDims {
    fn default() -> Self {
        Self {
            model_dim: 8,
            heads: 2,
            tokens: 3,
            word_dim: 6,
            feature_dim: 5,
            embed_dim: 4,
            batch: 4,
        }
    }
}

impl CheckDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("word_dim", self.word_dim),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be >= 2".into()));
        }
        check_heads(self.model_dim, self.heads)
    }

    fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            word_dim: self.word_dim,
            feature_dim: self.feature_dim,
            embed_dim: self.embed_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            ff_hidden: 2 * self.model_dim,
            text_hidden: self.word_dim,
            seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
    /// Name of the input tensor holding the worst coordinate.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub components: Vec<ComponentCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.report.max_rel_error < self.tolerance)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn failures(&self) -> impl Iterator<Item = &ComponentCheck> {
        self.components
            .iter()
            .filter(|c| !(c.report.max_rel_error < self.tolerance))
    }
}

/// Σ (y + r)² with a fixed random `r`: a scalar head whose gradient reaches
/// every output coordinate with a different weight.
fn project(tape: &mut Tape, y: NodeId, rng_seed: u64) -> Result<NodeId> {
    let (rows, cols) = tape.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = tape.leaf(Matrix::random(rows, cols, 1.0, &mut rng));
    let shifted = tape.add(y, r)?;
    Ok(tape.squared_norm(shifted))
}

/// Flattened inputs and their names, so a worst index can be reported by tensor.
struct Inputs {
    tensors: Vec<Matrix>,
    names: Vec<String>,
}

impl Inputs {
    fn new() -> Self {
        Self { tensors: Vec::new(), names: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.names.push(name.into());
        self.tensors.push(m);
    }

    fn push_tree<P: ParamTree<Matrix>>(&mut self, prefix: &str, p: &P) {
        p.visit(prefix, &mut |n, m| self.push(n, m.clone()));
    }

    fn locate(&self, mut index: usize) -> String {
        for (n, m) in self.names.iter().zip(&self.tensors) {
            if index < m.len() {
                return format!("{n}[{index}]");
            }
            index -= m.len();
        }
        format!("#{index}")
    }
}

/// Rebinds a parameter tree onto consecutive leaves starting at `offset`.
fn rebind<P>(template: &P, leaves: &[NodeId], offset: &mut usize) -> P::Bound
where
    P: Rebind,
{
    template.rebind(leaves, offset)
}

trait Rebind {
    type Bound;
    fn rebind(&self, leaves: &[NodeId], offset: &mut usize) -> Self::Bound;
}

macro_rules! impl_rebind {
    ($($t:ident),*) => {$(
        impl Rebind for $t {
            type Bound = $t<NodeId>;
            fn rebind(&self, leaves: &[NodeId], offset: &mut usize) -> $t<NodeId> {
                self.map(&mut |_| {
                    let id = leaves[*offset];
                    *offset += 1;
                    id
                })
            }
        }
    )*};
}
impl_rebind!(Linear, LayerNormParams, AttentionParams, EncoderBlockParams, ModelParams);

fn perturbed_norm(dim: usize, rng: &mut ChaCha8Rng) -> LayerNormParams {
    LayerNormParams {
        gamma: Matrix::new(1, dim, (0..dim).map(|_| rng.random_range(0.5..1.5)).collect())
            .expect("finite"),
        beta: Matrix::random(1, dim, 0.5, rng),
    }
}

/// Moves layer-norm gains/offsets and biases off their initial constants so
/// checks run at a generic point rather than a symmetric one.
fn perturb_offsets<P: ParamTree<Matrix>>(p: &mut P, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, m| {
        if name.ends_with("gamma") {
            for v in m.as_mut_slice() {
                *v = rng.random_range(0.5..1.5);
            }
        } else if name.ends_with("beta") || name.ends_with("bias") {
            for v in m.as_mut_slice() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    });
}

fn tape_component(
    name: &'static str,
    inputs: Inputs,
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    fault: bool,
) -> Result<ComponentCheck> {
    let report = check_tape_fn(&inputs.tensors, build, STEP, fault)?;
    Ok(ComponentCheck {
        name,
        worst: inputs.locate(report.worst_index),
        report,
    })
}

/// Runs every check. `fault` arms the tape's broken layer-norm backward rule
/// for the analytic passes, which the suite must then report as failing.
pub fn run_suite(seed: u64, dims: &CheckDims, fault: bool) -> Result<SuiteReport> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.model_dim;
    let x = Matrix::random(dims.tokens, d, 1.0, &mut rng);
    let mut out = Vec::new();

    // linear
    let lin = Linear::init(d, dims.embed_dim, &mut rng);
    let lin = Linear { bias: Matrix::random(1, dims.embed_dim, 0.5, &mut rng), ..lin };
    let mut inputs = Inputs::new();
    inputs.push("x", x.clone());
    inputs.push_tree("linear", &lin);
    out.push(tape_component(
        "linear",
        inputs,
        |t, l| {
            let bound = rebind(&lin, l, &mut 1);
            let y = t.linear(l[0], &bound)?;
            project(t, y, seed ^ 1)
        },
        fault,
    )?);

    // layer_norm
    let norm = perturbed_norm(d, &mut rng);
    let mut inputs = Inputs::new();
    inputs.push("x", x.clone());
    inputs.push_tree("norm", &norm);
    out.push(tape_component(
        "layer_norm",
        inputs,
        |t, l| {
            let bound = rebind(&norm, l, &mut 1);
            let y = t.layer_norm(l[0], &bound)?;
            project(t, y, seed ^ 2)
        },
        fault,
    )?);

    // softmax composed with a matrix product, as inside attention
    let v = Matrix::random(d, 3, 1.0, &mut rng);
    let mut inputs = Inputs::new();
    inputs.push("x", x.clone());
    inputs.push("v", v);
    out.push(tape_component(
        "softmax",
        inputs,
        |t, l| {
            let s = t.softmax_rows(l[0]);
            let y = t.matmul(s, l[1])?;
            project(t, y, seed ^ 3)
        },
        fault,
    )?);

    // attention
    let attn = AttentionParams::init(d, dims.heads, &mut rng)?;
    let mut inputs = Inputs::new();
    inputs.push("x", x.clone());
    inputs.push_tree("attention", &attn);
    out.push(tape_component(
        "attention",
        inputs,
        |t, l| {
            let bound = rebind(&attn, l, &mut 1);
            let y = t.multi_head(l[0], &bound)?;
            project(t, y, seed ^ 4)
        },
        fault,
    )?);

    // encoder block
    let mut block = EncoderBlockParams::init(d, dims.heads, 2 * d, &mut rng)?;
    perturb_offsets(&mut block, &mut rng);
    let mut inputs = Inputs::new();
    inputs.push("x", x.clone());
    inputs.push_tree("block", &block);
    out.push(tape_component(
        "encoder_block",
        inputs,
        |t, l| {
            let bound = rebind(&block, l, &mut 1);
            let y = t.encoder_block(l[0], &bound)?;
            project(t, y, seed ^ 5)
        },
        fault,
    )?);

    // θ and δ: the full text and video encoders over their own parameters
    let cfg = dims.model_config(seed);
    let mut params = ModelParams::init(&cfg)?;
    perturb_offsets(&mut params, &mut rng);
    let roles = RoleVectors {
        noun: (0..dims.word_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        verb: (0..dims.word_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        missing_noun: false,
        missing_verb: false,
    };
    let mut inputs = Inputs::new();
    inputs.push_tree("", &params);
    out.push(tape_component(
        "theta",
        inputs,
        |t, l| {
            let bound = rebind(&params, l, &mut 0);
            let e = encode_text_on(t, &bound, &roles)?;
            project(t, e.joint, seed ^ 6)
        },
        fault,
    )?);
    let tokens: Vec<Matrix> = (0..3)
        .map(|_| Matrix::random(dims.tokens, dims.feature_dim, 1.0, &mut rng))
        .collect();
    let mut inputs = Inputs::new();
    inputs.push_tree("", &params);
    out.push(tape_component(
        "delta",
        inputs,
        |t, l| {
            let bound = rebind(&params, l, &mut 0);
            let e = encode_video_on(t, &bound, &tokens)?;
            project(t, e.joint, seed ^ 7)
        },
        fault,
    )?);

    // distances
    let a: Vec<f64> = (0..dims.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..dims.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = a.len();
    let mut worst: Option<(GradCheckReport, String)> = None;
    for kind in [DistanceKind::Euclidean, DistanceKind::SqEuclidean, DistanceKind::Cosine] {
        let point: Vec<f64> = a.iter().chain(&b).copied().collect();
        let analytic: Vec<f64> = distance_grad(&a, &b, kind)
            .into_iter()
            .chain(distance_grad(&b, &a, kind))
            .collect();
        let f = |p: &[f64]| distance(&p[..n], &p[n..], kind).unwrap_or(f64::NAN);
        let rep = grad_check(f, &point, &analytic, STEP);
        if worst.as_ref().is_none_or(|(w, _)| rep.max_rel_error > w.max_rel_error) {
            let at = rep.worst_index;
            worst = Some((rep, format!("{kind:?}[{at}]")));
        }
    }
    let (report, worst) = worst.expect("three kinds checked");
    out.push(ComponentCheck { name: "distance", report, worst });

    // triplet hinge, kept on its active side well away from the kink
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kind = DistanceKind::Euclidean;
    let gap = distance(&a, &p, kind)? - distance(&a, &neg, kind)?;
    let margin = 0.5 - gap.min(0.0);
    let point: Vec<f64> = a.iter().chain(&p).chain(&neg).copied().collect();
    let analytic: Vec<f64> = triplet_term_grad(&a, &p, &neg, margin, kind)?.concat();
    let f = |x: &[f64]| triplet_term(&x[..n], &x[n..2 * n], &x[2 * n..], margin, kind).unwrap_or(f64::NAN);
    let report = grad_check(f, &point, &analytic, STEP);
    out.push(ComponentCheck {
        name: "triplet_hinge",
        worst: format!("[{}]", report.worst_index),
        report,
    });

    out.push(end_to_end(seed, dims, fault)?);
    Ok(SuiteReport {
        tolerance: DEFAULT_TOLERANCE,
        components: out,
    })
}

/// Training loss of one mined batch against every model parameter.
fn end_to_end(seed: u64, dims: &CheckDims, fault: bool) -> Result<ComponentCheck> {
    let spec = SynthSpec {
        n_verb_classes: 2,
        n_noun_classes: 2,
        n_items: dims.batch,
        feature_dim: dims.feature_dim,
        segments: dims.tokens,
        word_dim: dims.word_dim,
        seed,
        ..SynthSpec::default()
    };
    let dataset = synth_dataset(&spec)?;
    let config = TrainConfig {
        batch_size: dims.batch,
        model: dims.model_config(seed),
        ..TrainConfig::default()
    };
    let (items, _) = prepare_items(&dataset, &config.model)?;
    let batch: Vec<&Item> = items.iter().collect();
    let captions: Vec<Caption> = items.iter().map(|i| i.caption.clone()).collect();
    let relevance = SpaceRelevance::from_captions(&captions)?;
    let mut params = ModelParams::init(&config.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_offsets(&mut params, &mut rng);

    let loss_of = |p: &ModelParams, fault: bool| -> Result<(f64, ModelParams)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 8);
        let mut tape = Tape::new();
        if fault {
            tape.inject_fault();
        }
        let (loss, grads) = batch_gradients_on(tape, p, &batch, &config, &relevance, &mut rng)?;
        Ok((loss.total, grads))
    };
    let (_, grads) = loss_of(&params, fault)?;
    let mut names = Vec::new();
    let mut analytic = Vec::new();
    let mut point = Vec::new();
    grads.visit("", &mut |n, g| {
        analytic.extend_from_slice(g.as_slice());
        names.push((n, g.len()));
    });
    params.visit("", &mut |_, m| point.extend_from_slice(m.as_slice()));
    let mut scratch = params.clone();
    let f = |x: &[f64]| {
        let mut off = 0;
        scratch.visit_mut("", &mut |_, m| {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&x[off..off + len]);
            off += len;
        });
        loss_of(&scratch, false).map_or(f64::NAN, |(l, _)| l)
    };
    let report = grad_check(f, &point, &analytic, STEP);
    let mut idx = report.worst_index;
    let mut worst = String::new();
    for (n, len) in names {
        if idx < len {
            worst = format!("{n}[{idx}]");
            break;
        }
        idx -= len;
    }
    Ok(ComponentCheck {
        name: "end_to_end_loss",
        report,
        worst,
    })
}
