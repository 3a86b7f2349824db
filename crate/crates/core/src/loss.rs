//! Four-direction triplet objective over noun, verb and joint spaces.
//!
//! For each space and direction the hinge `max(0, d(a,p) − d(a,n) + m)` is
//! averaged over that (space, direction)'s triplets; the per-direction term
//! is the sum of those means over spaces, and the total weights the four
//! direction terms by their λ.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{binary_relevant, noun_overlap};
use crate::matrix::{dot, l2_norm};
use crate::model::EmbeddingSet;
use crate::text_roles::Caption;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SqEuclidean,
    Cosine,
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    check_len(a, b)?;
    Ok(distance_unchecked(a, b, kind))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distance_unchecked(a: &[f64], b: &[f64], kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::Euclidean => sq_dist(a, b).sqrt(),
        DistanceKind::SqEuclidean => sq_dist(a, b),
        DistanceKind::Cosine => {
            let denom = l2_norm(a) * l2_norm(b);
            if denom == 0.0 {
                1.0
            } else {
                1.0 - dot(a, b) / denom
            }
        }
    }
}

/// Below this, a Euclidean distance or a cosine operand norm counts as zero.
/// The direction `(a − b)/d` is pure rounding noise there, so the zero
/// subgradient is used instead.
const DEGENERATE: f64 = 1e-12;

/// `∂d(a, b)/∂a`; swap the arguments for `∂d/∂b`. Zero where `d` is not differentiable.
pub fn distance_grad(a: &[f64], b: &[f64], kind: DistanceKind) -> Vec<f64> {
    match kind {
        DistanceKind::Euclidean => {
            let d = sq_dist(a, b).sqrt();
            if d < DEGENERATE {
                return vec![0.0; a.len()];
            }
            a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
        }
        DistanceKind::SqEuclidean => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
        DistanceKind::Cosine => {
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na < DEGENERATE || nb < DEGENERATE {
                return vec![0.0; a.len()];
            }
            let ab = dot(a, b);
            a.iter()
                .zip(b)
                .map(|(x, y)| -(y / (na * nb) - ab * x / (na * na * na * nb)))
                .collect()
        }
    }
}

/// `max(0, d(a,p) − d(a,n) + margin)`
pub fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64, kind: DistanceKind) -> Result<f64> {
    check_len(a, p)?;
    check_len(a, n)?;
    Ok(hinge(a, p, n, margin, kind))
}

fn hinge(a: &[f64], p: &[f64], n: &[f64], margin: f64, kind: DistanceKind) -> f64 {
    (distance_unchecked(a, p, kind) - distance_unchecked(a, n, kind) + margin).max(0.0)
}

/// Gradients of the triplet hinge w.r.t. `(a, p, n)`. Zero on the flat side
/// and at the kink itself.
pub fn triplet_term_grad(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    margin: f64,
    kind: DistanceKind,
) -> Result<[Vec<f64>; 3]> {
    check_len(a, p)?;
    check_len(a, n)?;
    if hinge(a, p, n, margin, kind) <= 0.0 {
        let z = vec![0.0; a.len()];
        return Ok([z.clone(), z.clone(), z]);
    }
    let dap_a = distance_grad(a, p, kind);
    let dap_p = distance_grad(p, a, kind);
    let dan_a = distance_grad(a, n, kind);
    let dan_n = distance_grad(n, a, kind);
    let ga = dap_a.iter().zip(&dan_a).map(|(x, y)| x - y).collect();
    let gn = dan_n.iter().map(|v| -v).collect();
    Ok([ga, dap_p, gn])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Noun,
    Verb,
    Joint,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Noun, Space::Verb, Space::Joint];

    pub fn select<'a>(&self, e: &'a EmbeddingSet) -> &'a [f64] {
        match self {
            Space::Noun => &e.noun,
            Space::Verb => &e.verb,
            Space::Joint => &e.joint,
        }
    }
}

/// Which modality anchors the triplet and which one supplies positive and
/// negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    VideoText,
    TextVideo,
    VideoVideo,
    TextText,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::VideoText,
        Direction::TextVideo,
        Direction::VideoVideo,
        Direction::TextText,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    /// `(anchor is video, candidates are video)`
    pub(crate) fn modalities(self) -> (bool, bool) {
        match self {
            Direction::VideoText => (true, false),
            Direction::TextVideo => (false, true),
            Direction::VideoVideo => (true, true),
            Direction::TextText => (false, false),
        }
    }
}

/// Indices are positions in the batch the triplet was mined from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub space: Space,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vt: f64,
    pub lambda_tv: f64,
    pub lambda_vv: f64,
    pub lambda_tt: f64,
    pub margin_vt: f64,
    pub margin_tv: f64,
    pub margin_vv: f64,
    pub margin_tt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_vt: 1.0,
            lambda_tv: 2.0,
            lambda_vv: 1.0,
            lambda_tt: 1.0,
            margin_vt: 1.0,
            margin_tv: 1.0,
            margin_vv: 1.0,
            margin_tt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn with_margin(mut self, m: f64) -> Self {
        self.margin_vt = m;
        self.margin_tv = m;
        self.margin_vv = m;
        self.margin_tt = m;
        self
    }

    pub fn lambda(&self, d: Direction) -> f64 {
        match d {
            Direction::VideoText => self.lambda_vt,
            Direction::TextVideo => self.lambda_tv,
            Direction::VideoVideo => self.lambda_vv,
            Direction::TextText => self.lambda_tt,
        }
    }

    pub fn margin(&self, d: Direction) -> f64 {
        match d {
            Direction::VideoText => self.margin_vt,
            Direction::TextVideo => self.margin_tv,
            Direction::VideoVideo => self.margin_vv,
            Direction::TextText => self.margin_tt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_vt, self.lambda_tv, self.lambda_vv, self.lambda_tt];
        let margins = [self.margin_vt, self.margin_tv, self.margin_vv, self.margin_tt];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if margins.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(Error::Config("margins must be finite and positive".into()));
        }
        Ok(())
    }
}

/// Unweighted per-direction terms and the λ-weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub vt: f64,
    pub tv: f64,
    pub vv: f64,
    pub tt: f64,
}

impl LossBreakdown {
    pub fn term(&self, d: Direction) -> f64 {
        match d {
            Direction::VideoText => self.vt,
            Direction::TextVideo => self.tv,
            Direction::VideoVideo => self.vv,
            Direction::TextText => self.tt,
        }
    }
}

/// Gradients of the loss w.r.t. every embedding in the batch, per space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub text: Vec<EmbeddingSet>,
    pub video: Vec<EmbeddingSet>,
}

fn zero_like(e: &EmbeddingSet) -> EmbeddingSet {
    EmbeddingSet {
        noun: vec![0.0; e.noun.len()],
        verb: vec![0.0; e.verb.len()],
        joint: vec![0.0; e.joint.len()],
    }
}

fn select_mut(space: Space, e: &mut EmbeddingSet) -> &mut Vec<f64> {
    match space {
        Space::Noun => &mut e.noun,
        Space::Verb => &mut e.verb,
        Space::Joint => &mut e.joint,
    }
}

/// Counts of triplets per (space, direction), which set the averaging weights.
fn group_counts(triplets: &[Triplet]) -> [[usize; 4]; 3] {
    let mut counts = [[0usize; 4]; 3];
    for t in triplets {
        counts[t.space as usize][t.direction.slot()] += 1;
    }
    counts
}

fn check_indices(t: &Triplet, n_text: usize, n_video: usize) -> Result<()> {
    let (anchor_video, cand_video) = t.direction.modalities();
    let anchor_len = if anchor_video { n_video } else { n_text };
    let cand_len = if cand_video { n_video } else { n_text };
    if t.anchor >= anchor_len {
        return Err(Error::Index { index: t.anchor, len: anchor_len });
    }
    for idx in [t.positive, t.negative] {
        if idx >= cand_len {
            return Err(Error::Index { index: idx, len: cand_len });
        }
    }
    Ok(())
}

pub fn batch_loss(
    text: &[EmbeddingSet],
    video: &[EmbeddingSet],
    triplets: &[Triplet],
    w: &LossWeights,
    kind: DistanceKind,
) -> Result<LossBreakdown> {
    run_batch_loss(text, video, triplets, w, kind, None)
}

/// Loss plus its gradient w.r.t. every text and video embedding.
pub fn batch_loss_with_grad(
    text: &[EmbeddingSet],
    video: &[EmbeddingSet],
    triplets: &[Triplet],
    w: &LossWeights,
    kind: DistanceKind,
) -> Result<(LossBreakdown, EmbeddingGrads)> {
    let mut grads = EmbeddingGrads {
        text: text.iter().map(zero_like).collect(),
        video: video.iter().map(zero_like).collect(),
    };
    let loss = run_batch_loss(text, video, triplets, w, kind, Some(&mut grads))?;
    Ok((loss, grads))
}

fn run_batch_loss(
    text: &[EmbeddingSet],
    video: &[EmbeddingSet],
    triplets: &[Triplet],
    w: &LossWeights,
    kind: DistanceKind,
    mut grads: Option<&mut EmbeddingGrads>,
) -> Result<LossBreakdown> {
    let counts = group_counts(triplets);
    // Sum per (space, direction) first, then divide once, so the result does
    // not depend on triplet order beyond floating-point summation order.
    let mut sums = [[0.0f64; 4]; 3];
    for t in triplets {
        check_indices(t, text.len(), video.len())?;
        let (anchor_video, cand_video) = t.direction.modalities();
        let pick = |is_video: bool, i: usize| -> &[f64] {
            t.space.select(if is_video { &video[i] } else { &text[i] })
        };
        let a = pick(anchor_video, t.anchor);
        let p = pick(cand_video, t.positive);
        let n = pick(cand_video, t.negative);
        let m = w.margin(t.direction);
        sums[t.space as usize][t.direction.slot()] += triplet_term(a, p, n, m, kind)?;

        if let Some(g) = grads.as_deref_mut() {
            let lambda = w.lambda(t.direction);
            if lambda == 0.0 {
                continue;
            }
            let scale = lambda / counts[t.space as usize][t.direction.slot()] as f64;
            let [ga, gp, gn] = triplet_term_grad(a, p, n, m, kind)?;
            for (is_video, idx, gv) in [
                (anchor_video, t.anchor, ga),
                (cand_video, t.positive, gp),
                (cand_video, t.negative, gn),
            ] {
                let target = if is_video { &mut g.video[idx] } else { &mut g.text[idx] };
                for (acc, v) in select_mut(t.space, target).iter_mut().zip(gv) {
                    *acc += scale * v;
                }
            }
        }
    }
    let mut terms = [0.0f64; 4];
    for (space, row) in sums.iter().enumerate() {
        for (dir, s) in row.iter().enumerate() {
            if counts[space][dir] > 0 {
                terms[dir] += s / counts[space][dir] as f64;
            }
        }
    }
    let total = Direction::ALL
        .iter()
        .map(|d| w.lambda(*d) * terms[d.slot()])
        .sum();
    Ok(LossBreakdown {
        total,
        vt: terms[0],
        tv: terms[1],
        vv: terms[2],
        tt: terms[3],
    })
}

/// Pairwise relevance masks for the three spaces:
/// noun → noun-class IoU > 0, verb → equal verb class, joint → both.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceRelevance {
    n: usize,
    noun: Vec<bool>,
    verb: Vec<bool>,
    joint: Vec<bool>,
}

impl SpaceRelevance {
    pub fn from_captions(captions: &[Caption]) -> Result<Self> {
        let n = captions.len();
        let mut noun = Vec::with_capacity(n * n);
        let mut verb = Vec::with_capacity(n * n);
        let mut joint = Vec::with_capacity(n * n);
        for a in captions {
            for b in captions {
                noun.push(noun_overlap(a, b)? > 0.0);
                verb.push(a.verb_class == b.verb_class);
                joint.push(binary_relevant(a, b)?);
            }
        }
        Ok(Self { n, noun, verb, joint })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn relevant(&self, space: Space, i: usize, j: usize) -> bool {
        let k = i * self.n + j;
        match space {
            Space::Noun => self.noun[k],
            Space::Verb => self.verb[k],
            Space::Joint => self.joint[k],
        }
    }
}

/// Samples up to `per_anchor` triplets per (space, anchor, direction) without
/// replacement from all valid `(positive, negative)` pairs.
///
/// `batch` maps batch positions to rows of `relevance`; returned indices are
/// batch positions. Positives exclude the anchor itself. Iteration order is
/// space, anchor, direction, and the generator is advanced only when a group
/// has at least one valid pair.
pub fn mine_triplets(
    batch: &[usize],
    relevance: &SpaceRelevance,
    spaces: &[Space],
    per_anchor: usize,
    rng: &mut impl Rng,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &space in spaces {
        for (a, &ga) in batch.iter().enumerate() {
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (b, &gb) in batch.iter().enumerate() {
                if relevance.relevant(space, ga, gb) {
                    if b != a {
                        positives.push(b);
                    }
                } else {
                    negatives.push(b);
                }
            }
            let total = positives.len() * negatives.len();
            if total == 0 {
                continue;
            }
            let take = per_anchor.min(total);
            for direction in Direction::ALL {
                for pair in index::sample(rng, total, take) {
                    out.push(Triplet {
                        anchor: a,
                        positive: positives[pair / negatives.len()],
                        negative: negatives[pair % negatives.len()],
                        space,
                        direction,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
