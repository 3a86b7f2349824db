//! Multi-instance retrieval metrics: graded semantic relevance, mAP over
//! binary relevance and nDCG over graded relevance, in both directions.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::loss::{distance, DistanceKind};
use crate::matrix::Matrix;
use crate::model::EmbeddingSet;
use crate::text_roles::Caption;

fn noun_iou(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_annotated(c: &Caption) -> Result<()> {
    if c.noun_classes.is_empty() {
        return Err(Error::MissingAnnotation(c.id.clone()));
    }
    Ok(())
}

/// Noun-class intersection over union.
pub fn noun_overlap(a: &Caption, b: &Caption) -> Result<f64> {
    check_annotated(a)?;
    check_annotated(b)?;
    Ok(noun_iou(&a.noun_classes, &b.noun_classes))
}

/// `0.5·[same verb] + 0.5·IoU(nouns)`.
pub fn semantic_similarity(a: &Caption, b: &Caption) -> Result<f64> {
    let iou = noun_overlap(a, b)?;
    let verb = if a.verb_class == b.verb_class { 1.0 } else { 0.0 };
    Ok(0.5 * verb + 0.5 * iou)
}

/// Same verb class and at least one shared noun class.
pub fn binary_relevant(a: &Caption, b: &Caption) -> Result<bool> {
    Ok(a.verb_class == b.verb_class && noun_overlap(a, b)? > 0.0)
}

/// Pluggable relevance definition used to build [`RelevanceMatrix`].
pub trait RelevanceRule {
    fn graded(&self, a: &Caption, b: &Caption) -> Result<f64>;
    fn binary(&self, a: &Caption, b: &Caption) -> Result<bool>;
}

/// Verb equality plus noun-class overlap.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassOverlap;

impl RelevanceRule for ClassOverlap {
    fn graded(&self, a: &Caption, b: &Caption) -> Result<f64> {
        semantic_similarity(a, b)
    }

    fn binary(&self, a: &Caption, b: &Caption) -> Result<bool> {
        binary_relevant(a, b)
    }
}

/// Query × gallery graded similarity with the derived binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    graded: Matrix,
    binary: Vec<bool>,
}

impl RelevanceMatrix {
    pub fn build(queries: &[Caption], gallery: &[Caption], rule: &dyn RelevanceRule) -> Result<Self> {
        if queries.is_empty() || gallery.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut graded = Vec::with_capacity(queries.len() * gallery.len());
        let mut binary = Vec::with_capacity(queries.len() * gallery.len());
        for q in queries {
            for g in gallery {
                let v = rule.graded(q, g)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("graded relevance {v} outside [0, 1]")));
                }
                graded.push(v);
                binary.push(rule.binary(q, g)?);
            }
        }
        Ok(Self {
            query_ids: queries.iter().map(|c| c.id.clone()).collect(),
            gallery_ids: gallery.iter().map(|c| c.id.clone()).collect(),
            graded: Matrix::from_parts(queries.len(), gallery.len(), graded),
            binary,
        })
    }

    pub fn n_query(&self) -> usize {
        self.graded.rows()
    }

    pub fn n_gallery(&self) -> usize {
        self.graded.cols()
    }

    pub fn graded(&self, q: usize, g: usize) -> f64 {
        self.graded.get(q, g)
    }

    pub fn binary(&self, q: usize, g: usize) -> bool {
        self.binary[q * self.n_gallery() + g]
    }

    pub fn graded_row(&self, q: usize) -> &[f64] {
        self.graded.row(q)
    }

    pub fn binary_row(&self, q: usize) -> &[bool] {
        let n = self.n_gallery();
        &self.binary[q * n..(q + 1) * n]
    }

    pub fn transpose(&self) -> Self {
        let (nq, ng) = (self.n_query(), self.n_gallery());
        let mut binary = Vec::with_capacity(nq * ng);
        for g in 0..ng {
            for q in 0..nq {
                binary.push(self.binary(q, g));
            }
        }
        Self {
            query_ids: self.gallery_ids.clone(),
            gallery_ids: self.query_ids.clone(),
            graded: self.graded.transpose(),
            binary,
        }
    }
}

/// Gallery indices by descending score, ties by ascending index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Mean over relevant items of the precision at that item's rank.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), relevant.len(), "scores/relevance length mismatch");
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::NoRelevantItems);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &g) in rank_order(scores).iter().enumerate() {
        if relevant[g] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

fn dcg(gains_in_rank_order: impl Iterator<Item = f64>) -> f64 {
    gains_in_rank_order
        .enumerate()
        .map(|(rank, g)| g / ((rank + 2) as f64).log2())
        .sum()
}

/// `DCG / IDCG` with a `log2(rank + 1)` discount.
pub fn ndcg_row(scores: &[f64], gains: &[f64]) -> Result<f64> {
    assert_eq!(scores.len(), gains.len(), "scores/gains length mismatch");
    if !gains.iter().any(|&g| g > 0.0) {
        return Err(Error::AllZeroGains);
    }
    let actual = dcg(rank_order(scores).into_iter().map(|i| gains[i]));
    let mut ideal = gains.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    Ok(actual / dcg(ideal.into_iter()))
}

/// Per-direction metric with the number of queries left out of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionMetrics {
    pub map: f64,
    pub ndcg: f64,
    pub map_skipped: usize,
    pub ndcg_skipped: usize,
}

/// Scores rows = queries, columns = gallery, aligned with `relevance`.
pub fn direction_metrics(scores: &Matrix, relevance: &RelevanceMatrix) -> DirectionMetrics {
    assert_eq!(scores.shape(), (relevance.n_query(), relevance.n_gallery()));
    let (mut ap_sum, mut ap_n, mut nd_sum, mut nd_n) = (0.0, 0usize, 0.0, 0usize);
    for q in 0..scores.rows() {
        if let Ok(ap) = average_precision(scores.row(q), relevance.binary_row(q)) {
            ap_sum += ap;
            ap_n += 1;
        }
        if let Ok(nd) = ndcg_row(scores.row(q), relevance.graded_row(q)) {
            nd_sum += nd;
            nd_n += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    DirectionMetrics {
        map: mean(ap_sum, ap_n),
        ndcg: mean(nd_sum, nd_n),
        map_skipped: scores.rows() - ap_n,
        ndcg_skipped: scores.rows() - nd_n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub map_t2v: f64,
    pub map_v2t: f64,
    pub map_avg: f64,
    pub ndcg_t2v: f64,
    pub ndcg_v2t: f64,
    pub ndcg_avg: f64,
    pub t2v: DirectionMetrics,
    pub v2t: DirectionMetrics,
}

impl MetricsReport {
    pub fn from_directions(t2v: DirectionMetrics, v2t: DirectionMetrics) -> Self {
        Self {
            map_t2v: t2v.map,
            map_v2t: v2t.map,
            map_avg: (t2v.map + v2t.map) / 2.0,
            ndcg_t2v: t2v.ndcg,
            ndcg_v2t: v2t.ndcg,
            ndcg_avg: (t2v.ndcg + v2t.ndcg) / 2.0,
            t2v,
            v2t,
        }
    }

    /// `metric,t2v,v2t,avg` rows for mAP and nDCG.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,t2v,v2t,avg\nmAP,{:?},{:?},{:?}\nnDCG,{:?},{:?},{:?}\n",
            self.map_t2v, self.map_v2t, self.map_avg, self.ndcg_t2v, self.ndcg_v2t, self.ndcg_avg
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        writeln!(f, "+-------------------------+-------------------------+")?;
        writeln!(f, "| mAP                     | nDCG                    |")?;
        writeln!(f, "| Average    T2V    V2T   | Average    T2V    V2T   |")?;
        writeln!(f, "+-------------------------+-------------------------+")?;
        writeln!(
            f,
            "| {}   {} {}  | {}   {} {}  |",
            pct(self.map_avg),
            pct(self.map_t2v),
            pct(self.map_v2t),
            pct(self.ndcg_avg),
            pct(self.ndcg_t2v),
            pct(self.ndcg_v2t)
        )?;
        write!(f, "+-------------------------+-------------------------+")?;
        let skipped = self.t2v.map_skipped + self.v2t.map_skipped;
        if skipped > 0 {
            write!(f, "\n({skipped} queries without a relevant item excluded from mAP)")?;
        }
        Ok(())
    }
}

/// Evaluates an explicit text×video score matrix (higher = closer).
pub fn evaluate_scores(t2v_scores: &Matrix, relevance: &RelevanceMatrix) -> MetricsReport {
    let t2v = direction_metrics(t2v_scores, relevance);
    let v2t = direction_metrics(&t2v_scores.transpose(), &relevance.transpose());
    MetricsReport::from_directions(t2v, v2t)
}

/// Negative joint-space Euclidean distance for every (text, video) pair.
pub fn score_matrix(text: &[EmbeddingSet], video: &[EmbeddingSet]) -> Result<Matrix> {
    if text.is_empty() || video.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut data = Vec::with_capacity(text.len() * video.len());
    for t in text {
        for v in video {
            data.push(-distance(&t.joint, &v.joint, DistanceKind::Euclidean)?);
        }
    }
    Ok(Matrix::from_parts(text.len(), video.len(), data))
}

/// Item `i` of `text`, `video` and `captions` must describe the same pair.
pub fn evaluate(
    text: &[EmbeddingSet],
    video: &[EmbeddingSet],
    captions: &[Caption],
) -> Result<MetricsReport> {
    evaluate_with(text, video, captions, &ClassOverlap)
}

pub fn evaluate_with(
    text: &[EmbeddingSet],
    video: &[EmbeddingSet],
    captions: &[Caption],
    rule: &dyn RelevanceRule,
) -> Result<MetricsReport> {
    if captions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if text.len() != captions.len() || video.len() != captions.len() {
        return Err(Error::shape(format!(
            "{} texts, {} videos, {} captions",
            text.len(),
            video.len(),
            captions.len()
        )));
    }
    let relevance = RelevanceMatrix::build(captions, captions, rule)?;
    Ok(evaluate_scores(&score_matrix(text, video)?, &relevance))
}
