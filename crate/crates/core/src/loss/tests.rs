use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::grad_check;

fn caption(i: usize, verb: u32, nouns: &[u32]) -> Caption {
    Caption {
        id: format!("c{i}"),
        video_id: format!("v{i}"),
        text: "x".into(),
        verb_class: verb,
        noun_classes: nouns.iter().copied().collect(),
    }
}

fn emb(noun: Vec<f64>, verb: Vec<f64>) -> EmbeddingSet {
    let joint = [noun.clone(), verb.clone()].concat();
    EmbeddingSet { noun, verb, joint }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn random_sets(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<EmbeddingSet> {
    (0..n).map(|_| emb(random_unit(rng, d), random_unit(rng, d))).collect()
}

fn random_triplets(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<Triplet> {
    (0..count)
        .map(|_| {
            let positive = rng.random_range(0..n);
            let mut negative = rng.random_range(0..n);
            while negative == positive {
                negative = rng.random_range(0..n);
            }
            Triplet {
                anchor: rng.random_range(0..n),
                positive,
                negative,
                space: Space::ALL[rng.random_range(0..3)],
                direction: Direction::ALL[rng.random_range(0..4)],
            }
        })
        .collect()
}

/// Term-by-term evaluation written directly from the objective: for each of
/// the four rows, the mean hinge per space summed over spaces, weighted by λ.
fn oracle_loss(text: &[EmbeddingSet], video: &[EmbeddingSet], triplets: &[Triplet], w: &LossWeights) -> f64 {
    let euclid = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).powi(2);
        }
        s.sqrt()
    };
    let rows = [
        (Direction::VideoText, w.lambda_vt, w.margin_vt),
        (Direction::TextVideo, w.lambda_tv, w.margin_tv),
        (Direction::VideoVideo, w.lambda_vv, w.margin_vv),
        (Direction::TextText, w.lambda_tt, w.margin_tt),
    ];
    let mut total = 0.0;
    for (dir, lambda, m) in rows {
        let mut row = 0.0;
        for space in Space::ALL {
            let group: Vec<&Triplet> = triplets
                .iter()
                .filter(|t| t.direction == dir && t.space == space)
                .collect();
            if group.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for t in &group {
                let (a, p, n) = match dir {
                    Direction::VideoText => (&video[t.anchor], &text[t.positive], &text[t.negative]),
                    Direction::TextVideo => (&text[t.anchor], &video[t.positive], &video[t.negative]),
                    Direction::VideoVideo => (&video[t.anchor], &video[t.positive], &video[t.negative]),
                    Direction::TextText => (&text[t.anchor], &text[t.positive], &text[t.negative]),
                };
                let (a, p, n) = (space.select(a), space.select(p), space.select(n));
                s += f64::max(0.0, euclid(a, p) - euclid(a, n) + m);
            }
            row += s / group.len() as f64;
        }
        total += lambda * row;
    }
    total
}

#[test]
fn distance_examples() {
    assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::Euclidean).unwrap(), 5.0);
    assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::SqEuclidean).unwrap(), 25.0);
    assert_eq!(distance(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::Cosine).unwrap(), 1.0);
    for kind in [DistanceKind::Euclidean, DistanceKind::SqEuclidean, DistanceKind::Cosine] {
        let x = [0.3, -2.0, 1.1];
        assert!(distance(&x, &x, kind).unwrap().abs() < 1e-15);
    }
    assert!(matches!(distance(&[1.0], &[1.0, 2.0], DistanceKind::Euclidean), Err(Error::Shape(_))));
}

#[test]
fn triplet_term_examples() {
    let k = DistanceKind::Euclidean;
    assert_eq!(triplet_term(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], 1.0, k).unwrap(), 0.0);
    assert_eq!(triplet_term(&[0.0, 0.0], &[1.0, 0.0], &[0.5, 0.0], 1.0, k).unwrap(), 1.5);
    let a = [0.4, 0.1];
    assert_eq!(triplet_term(&a, &a, &a, 0.7, k).unwrap(), 0.7);
    assert!(triplet_term(&a, &a, &[1.0], 0.7, k).is_err());
}

#[test]
fn empty_directions_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random_sets(&mut rng, 3, 2);
    let l = batch_loss(&e, &e, &[], &LossWeights::default(), DistanceKind::Euclidean).unwrap();
    assert_eq!(l, LossBreakdown::default());
}

#[test]
fn single_weighted_term() {
    let w = LossWeights {
        lambda_vt: 0.0,
        lambda_tv: 2.0,
        lambda_vv: 0.0,
        lambda_tt: 0.0,
        ..LossWeights::default()
    };
    // text anchor at origin, positive video at 0.3, negative video at 1.0 → hinge 0.3
    let text = vec![emb(vec![0.0], vec![0.0])];
    let video = vec![emb(vec![0.3], vec![0.0]), emb(vec![1.0], vec![0.0])];
    let t = Triplet {
        anchor: 0,
        positive: 0,
        negative: 1,
        space: Space::Joint,
        direction: Direction::TextVideo,
    };
    let l = batch_loss(&text, &video, &[t], &w, DistanceKind::Euclidean).unwrap();
    assert!((l.tv - 0.3).abs() < 1e-15);
    assert!((l.total - 0.6).abs() < 1e-15);
    let bad = Triplet { negative: 5, ..t };
    assert!(matches!(
        batch_loss(&text, &video, &[bad], &w, DistanceKind::Euclidean),
        Err(Error::Index { index: 5, .. })
    ));
}

#[test]
fn toy_batch_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let text = random_sets(&mut rng, 4, 3);
    let video = random_sets(&mut rng, 4, 3);
    let triplets = random_triplets(&mut rng, 4, 40);
    let w = LossWeights::default();
    let l = batch_loss(&text, &video, &triplets, &w, DistanceKind::Euclidean).unwrap();
    assert!((l.total - oracle_loss(&text, &video, &triplets, &w)).abs() < 1e-12);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 3;
    for kind in [DistanceKind::Euclidean, DistanceKind::SqEuclidean, DistanceKind::Cosine] {
        let text = random_sets(&mut rng, 5, d);
        let video = random_sets(&mut rng, 5, d);
        let w = LossWeights::default().with_margin(0.8);
        let triplets: Vec<Triplet> = random_triplets(&mut rng, 5, 60)
            .into_iter()
            .filter(|t| {
                // keep away from the hinge kink
                let (av, cv) = t.direction.modalities();
                let pick = |v: bool, i: usize| t.space.select(if v { &video[i] } else { &text[i] }).to_vec();
                let (a, p, n) = (pick(av, t.anchor), pick(cv, t.positive), pick(cv, t.negative));
                let h = distance(&a, &p, kind).unwrap() - distance(&a, &n, kind).unwrap() + 0.8;
                h.abs() > 1e-3
            })
            .collect();
        let (_, grads) = batch_loss_with_grad(&text, &video, &triplets, &w, kind).unwrap();

        // Flatten every (text|video, space) vector; joint is treated as an
        // independent input, matching how the loss consumes it.
        let flatten = |sets: &[EmbeddingSet]| -> Vec<f64> {
            sets.iter().flat_map(|e| [e.noun.clone(), e.verb.clone(), e.joint.clone()].concat()).collect()
        };
        let point = [flatten(&text), flatten(&video)].concat();
        let analytic = [flatten(&grads.text), flatten(&grads.video)].concat();
        let unflatten = |p: &[f64]| -> Vec<EmbeddingSet> {
            p.chunks(4 * d)
                .map(|c| EmbeddingSet {
                    noun: c[..d].to_vec(),
                    verb: c[d..2 * d].to_vec(),
                    joint: c[2 * d..].to_vec(),
                })
                .collect()
        };
        let half = point.len() / 2;
        let f = |p: &[f64]| {
            batch_loss(&unflatten(&p[..half]), &unflatten(&p[half..]), &triplets, &w, kind)
                .unwrap()
                .total
        };
        let rep = grad_check(f, &point, &analytic, 1e-4);
        assert!(rep.max_rel_error < 1e-4, "{kind:?}: {rep:?}");
    }
}

#[test]
fn mining_degenerate_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let same: Vec<Caption> = (0..4).map(|i| caption(i, 1, &[2, 3])).collect();
    let rel = SpaceRelevance::from_captions(&same).unwrap();
    assert!(mine_triplets(&[0, 1, 2, 3], &rel, &Space::ALL, 5, &mut rng).is_empty());

    let disjoint = vec![caption(0, 1, &[1]), caption(1, 2, &[2])];
    let rel = SpaceRelevance::from_captions(&disjoint).unwrap();
    assert!(mine_triplets(&[0, 1], &rel, &Space::ALL, 5, &mut rng).is_empty());
}

fn six_item_batch() -> Vec<Caption> {
    vec![
        caption(0, 0, &[0]),
        caption(1, 0, &[0, 1]),
        caption(2, 1, &[1]),
        caption(3, 1, &[2]),
        caption(4, 0, &[2]),
        caption(5, 2, &[0, 2]),
    ]
}

#[test]
fn mining_matches_enumeration_and_replay() {
    let caps = six_item_batch();
    let rel = SpaceRelevance::from_captions(&caps).unwrap();
    let batch: Vec<usize> = (0..6).collect();
    let per_anchor = 3;
    let got = mine_triplets(&batch, &rel, &Space::ALL, per_anchor, &mut ChaCha8Rng::seed_from_u64(99));

    // Independent enumeration of valid (j, k) per anchor from the caption rules.
    let rule = |space: Space, a: &Caption, b: &Caption| -> bool {
        let shared = a.noun_classes.intersection(&b.noun_classes).count() > 0;
        match space {
            Space::Noun => shared,
            Space::Verb => a.verb_class == b.verb_class,
            Space::Joint => shared && a.verb_class == b.verb_class,
        }
    };
    let mut replay = ChaCha8Rng::seed_from_u64(99);
    let mut expected = Vec::new();
    for space in Space::ALL {
        for i in 0..6 {
            let mut pairs = Vec::new();
            for j in 0..6 {
                for k in 0..6 {
                    if j != i && rule(space, &caps[i], &caps[j]) && !rule(space, &caps[i], &caps[k]) {
                        pairs.push((j, k));
                    }
                }
            }
            if pairs.is_empty() {
                continue;
            }
            for direction in Direction::ALL {
                for idx in rand::seq::index::sample(&mut replay, pairs.len(), per_anchor.min(pairs.len())) {
                    let (j, k) = pairs[idx];
                    expected.push(Triplet { anchor: i, positive: j, negative: k, space, direction });
                }
            }
        }
    }
    assert_eq!(got, expected);
    assert!(!got.is_empty());
    let distinct: BTreeSet<_> = got.iter().collect();
    // sampling is without replacement within each group
    assert_eq!(distinct.len(), got.len());
}

proptest! {
    #[test]
    fn loss_properties(seed in any::<u64>(), n in 4usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = random_sets(&mut rng, n, 3);
        let video = random_sets(&mut rng, n, 3);
        let mut triplets = random_triplets(&mut rng, n, 30);
        let w = LossWeights::default();
        let k = DistanceKind::Euclidean;
        let l = batch_loss(&text, &video, &triplets, &w, k).unwrap();
        prop_assert!(l.total >= 0.0);
        prop_assert!((l.total - oracle_loss(&text, &video, &triplets, &w)).abs() < 1e-12);

        let doubled = LossWeights {
            lambda_vt: 2.0 * w.lambda_vt,
            lambda_tv: 2.0 * w.lambda_tv,
            lambda_vv: 2.0 * w.lambda_vv,
            lambda_tt: 2.0 * w.lambda_tt,
            ..w
        };
        prop_assert_eq!(batch_loss(&text, &video, &triplets, &doubled, k).unwrap().total, 2.0 * l.total);

        triplets.reverse();
        let r = batch_loss(&text, &video, &triplets, &w, k).unwrap();
        prop_assert!((r.total - l.total).abs() < 1e-12);
    }

    #[test]
    fn mined_triplets_respect_relevance(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let caps: Vec<Caption> = (0..n)
            .map(|i| {
                let a = rng.random_range(0..3u32);
                let b = rng.random_range(0..3u32);
                caption(i, rng.random_range(0..3), &[a, b])
            })
            .collect();
        let rel = SpaceRelevance::from_captions(&caps).unwrap();
        let batch: Vec<usize> = (0..n).rev().collect();
        for t in mine_triplets(&batch, &rel, &Space::ALL, 4, &mut rng) {
            prop_assert!(t.positive != t.negative && t.positive != t.anchor);
            prop_assert!(rel.relevant(t.space, batch[t.anchor], batch[t.positive]));
            prop_assert!(!rel.relevant(t.space, batch[t.anchor], batch[t.negative]));
        }
    }
}
