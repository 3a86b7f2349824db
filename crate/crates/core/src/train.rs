//! Mini-batch SGD training.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{clip_tokens, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::loss::{batch_loss_with_grad, mine_triplets, DistanceKind, LossBreakdown, LossWeights, Space, SpaceRelevance};
use crate::matrix::Matrix;
use crate::model::{encode_text_on, encode_video_on, EmbeddingSet, Encoder, ModelConfig, ModelParams};
use crate::nn::{ParamTree, Tape};
use crate::text_roles::{caption_roles, Caption, RoleVectors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Triplets sampled per (space, anchor, direction).
    pub per_anchor: usize,
    /// Seeds batch shuffling and triplet mining. Weight init uses `model.seed`.
    pub seed: u64,
    pub weights: LossWeights,
    pub distance: DistanceKind,
    pub model: ModelConfig,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.01,
            epochs: 30,
            per_anchor: 4,
            seed: 42,
            weights: LossWeights::default(),
            distance: DistanceKind::Euclidean,
            model: ModelConfig::default(),
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.per_anchor == 0 {
            return Err(Error::Config("per_anchor must be >= 1".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Spaces the loss is applied in.
    pub fn spaces(&self) -> &'static [Space] {
        if self.model.single_space {
            &[Space::Joint]
        } else {
            &Space::ALL
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,loss_vt,loss_tv,loss_vv,loss_tt,seconds";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let l = &r.loss;
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?},{:.3}\n",
                r.epoch, l.total, l.vt, l.tv, l.vv, l.tt, r.seconds
            ));
        }
        out
    }

    /// The log without wall times, which is what reproducibility is judged on.
    pub fn losses(&self) -> Vec<(usize, LossBreakdown)> {
        self.records.iter().map(|r| (r.epoch, r.loss)).collect()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// One training/evaluation pair: a caption with both roles and its clip's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub caption: Caption,
    pub roles: RoleVectors,
    pub tokens: Vec<Matrix>,
}

/// Pairs every caption with its clip. Captions missing a noun or verb role are
/// dropped; the count of dropped captions is returned alongside.
pub fn prepare_items(dataset: &Dataset, config: &ModelConfig) -> Result<(Vec<Item>, usize)> {
    dataset.check_links()?;
    if dataset.table.dim() != config.word_dim {
        return Err(Error::shape(format!(
            "word vectors have dim {}, model expects {}",
            dataset.table.dim(),
            config.word_dim
        )));
    }
    let mut items = Vec::with_capacity(dataset.captions.len());
    let mut dropped = 0;
    for c in &dataset.captions {
        let roles = caption_roles(&c.text, &dataset.lexicon, &dataset.table)?;
        if !roles.complete() || c.noun_classes.is_empty() {
            dropped += 1;
            continue;
        }
        let clip = dataset.features.get(&c.video_id).expect("links checked");
        items.push(Item {
            caption: c.clone(),
            roles,
            tokens: clip_tokens(clip, config)?,
        });
    }
    Ok((items, dropped))
}

/// `p ← p − lr·g` for every tensor. Gradients are checked before anything is
/// written, so on error `params` is untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    let mut bad = None;
    let mut grad_list = Vec::new();
    grads.visit("", &mut |name, g| {
        if !g.is_finite() && bad.is_none() {
            bad = Some(name.clone());
        }
        grad_list.push((name, g));
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    let mut shapes = Vec::new();
    params.visit("", &mut |name, p| shapes.push((name, p.shape())));
    if shapes.len() != grad_list.len()
        || shapes.iter().zip(&grad_list).any(|((n, s), (gn, g))| n != gn || *s != g.shape())
    {
        return Err(Error::shape("gradient tree does not match parameters"));
    }
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        let g = grad_list[i].1;
        for (v, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *v -= lr * d;
        }
        i += 1;
    });
    Ok(())
}

/// Loss and parameter gradients for one batch of items.
pub fn batch_gradients(
    params: &ModelParams,
    items: &[&Item],
    config: &TrainConfig,
    relevance: &SpaceRelevance,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, ModelParams)> {
    batch_gradients_on(Tape::new(), params, items, config, relevance, rng)
}

pub(crate) fn batch_gradients_on(
    mut tape: Tape,
    params: &ModelParams,
    items: &[&Item],
    config: &TrainConfig,
    relevance: &SpaceRelevance,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, ModelParams)> {
    let bound = params.bind(&mut tape);
    let mut text_nodes = Vec::with_capacity(items.len());
    let mut video_nodes = Vec::with_capacity(items.len());
    for item in items {
        text_nodes.push(encode_text_on(&mut tape, &bound, &item.roles)?);
        video_nodes.push(encode_video_on(&mut tape, &bound, &item.tokens)?);
    }
    let text: Vec<EmbeddingSet> = text_nodes.iter().map(|n| n.values(&tape)).collect();
    let video: Vec<EmbeddingSet> = video_nodes.iter().map(|n| n.values(&tape)).collect();
    let positions: Vec<usize> = (0..items.len()).collect();
    let triplets = mine_triplets(&positions, relevance, config.spaces(), config.per_anchor, rng);
    let (loss, grads) = batch_loss_with_grad(&text, &video, &triplets, &config.weights, config.distance)?;

    let mut seeds = Vec::new();
    for (nodes, g) in text_nodes.iter().zip(&grads.text).chain(video_nodes.iter().zip(&grads.video)) {
        for (id, v) in [(nodes.noun, &g.noun), (nodes.verb, &g.verb), (nodes.joint, &g.joint)] {
            if v.iter().any(|x| *x != 0.0) {
                seeds.push((id, Matrix::new(1, v.len(), v.clone())?));
            }
        }
    }
    let param_grads = if seeds.is_empty() {
        params.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    } else {
        let g = tape.backward_from(seeds)?;
        bound.map(&mut |id| g.wrt(*id))
    };
    Ok((loss, param_grads))
}

fn mean_breakdown(sum: &LossBreakdown, n: usize) -> LossBreakdown {
    let n = n as f64;
    LossBreakdown {
        total: sum.total / n,
        vt: sum.vt / n,
        tv: sum.tv / n,
        vv: sum.vv / n,
        tt: sum.tt / n,
    }
}

/// Trains from a fresh `ModelParams::init(&config.model)`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let (items, _) = prepare_items(dataset, &config.model)?;
    train_items(&items, config)
}

/// Training on already prepared items.
///
/// Each epoch shuffles item indices with a generator seeded once from
/// `config.seed`; every batch is sorted before encoding. Triplet mining for
/// the k-th batch of an epoch uses a generator seeded from `(seed, k)`, so a
/// run whose batch covers the whole dataset sees the same triplets every epoch.
pub fn train_items(items: &[Item], config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if items.len() < config.batch_size {
        return Err(Error::DatasetTooSmall {
            need: config.batch_size,
            have: items.len(),
        });
    }
    let mut params = ModelParams::init(&config.model)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let batch_items: Vec<&Item> = batch.iter().map(|&i| &items[i]).collect();
            let captions: Vec<Caption> = batch_items.iter().map(|it| it.caption.clone()).collect();
            let relevance = SpaceRelevance::from_captions(&captions)?;
            let mut mine_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (loss, grads) = batch_gradients(&params, &batch_items, config, &relevance, &mut mine_rng)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("{loss:?}"),
                });
            }
            sgd_step(&mut params, &grads, config.learning_rate)?;
            sum.total += loss.total;
            sum.vt += loss.vt;
            sum.tv += loss.tv;
            sum.vv += loss.vv;
            sum.tt += loss.tt;
            steps += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            loss: mean_breakdown(&sum, steps),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(path) = &config.checkpoint {
        crate::data_io::save_checkpoint(&params, path)?;
    }
    if let Some(path) = &config.log {
        std::fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok((params, log))
}

/// Embeds every item on both sides.
pub fn embed_items(params: &ModelParams, items: &[Item]) -> Result<(Vec<EmbeddingSet>, Vec<EmbeddingSet>)> {
    let mut enc = Encoder::new(params);
    let mut text = Vec::with_capacity(items.len());
    let mut video = Vec::with_capacity(items.len());
    for it in items {
        text.push(enc.text(&it.roles)?);
        video.push(enc.video(&it.tokens)?);
    }
    Ok((text, video))
}

/// Retrieval metrics with each item's caption as a query and its clip in the gallery.
pub fn evaluate_items(params: &ModelParams, items: &[Item]) -> Result<MetricsReport> {
    let (text, video) = embed_items(params, items)?;
    let captions: Vec<Caption> = items.iter().map(|it| it.caption.clone()).collect();
    evaluate(&text, &video, &captions)
}
