//! Deterministic synthetic dataset with known verb/noun structure.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::features::{ClipFeatures, FeatureArchive};
use super::Dataset;
use crate::error::{Error, Result};
use crate::text_roles::{Caption, EmbeddingTable, Role, RoleLexicon};

const VERBS: [&str; 16] = [
    "cut", "wash", "open", "close", "take", "put", "stir", "pour", "peel", "turn", "mix", "rinse",
    "dry", "fill", "grab", "insert",
];
const NOUNS: [&str; 16] = [
    "tomato", "knife", "pan", "fridge", "door", "onion", "plate", "spoon", "cup", "lid", "tap",
    "bowl", "sponge", "board", "oil", "water",
];
pub const SYNTH_MODALITIES: [&str; 3] = ["rgb", "flow", "audio"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_verb_classes: usize,
    pub n_noun_classes: usize,
    pub n_items: usize,
    pub feature_dim: usize,
    pub segments: usize,
    pub noise_sigma: f64,
    pub word_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_verb_classes: 8,
            n_noun_classes: 8,
            n_items: 400,
            feature_dim: 32,
            segments: 4,
            noise_sigma: 0.1,
            word_dim: 32,
            seed: 42,
        }
    }
}

pub fn verb_word(class: usize) -> String {
    VERBS.get(class).map_or_else(|| format!("verb{class}"), |w| w.to_string())
}

pub fn noun_word(class: usize) -> String {
    NOUNS.get(class).map_or_else(|| format!("noun{class}"), |w| w.to_string())
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Builds captions, clip features, a role lexicon and an embedding table.
///
/// Every item gets one verb class (balanced across classes) and one or two
/// noun classes. A clip's modality feature is the verb prototype plus the mean
/// of its noun prototypes, plus Gaussian noise with standard deviation
/// `noise_sigma`, repeated over segments with small per-segment jitter.
/// Prototypes have unit expected norm.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_verb_classes == 0 || spec.n_noun_classes == 0 {
        return Err(Error::Config("synthetic data needs at least one verb and one noun class".into()));
    }
    if spec.n_items == 0 || spec.feature_dim == 0 || spec.segments == 0 || spec.word_dim == 0 {
        return Err(Error::Config("synthetic sizes must be positive".into()));
    }
    if !(spec.noise_sigma.is_finite() && spec.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("bad noise sigma {}", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.feature_dim;
    let scale = 1.0 / (dim as f64).sqrt();
    let n_mod = SYNTH_MODALITIES.len();
    let verb_protos: Vec<Vec<Vec<f64>>> = (0..n_mod)
        .map(|_| (0..spec.n_verb_classes).map(|_| gaussian(&mut rng, dim, scale)).collect())
        .collect();
    let noun_protos: Vec<Vec<Vec<f64>>> = (0..n_mod)
        .map(|_| (0..spec.n_noun_classes).map(|_| gaussian(&mut rng, dim, scale)).collect())
        .collect();

    let mut verbs: Vec<usize> = (0..spec.n_items).map(|i| i % spec.n_verb_classes).collect();
    verbs.shuffle(&mut rng);

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, 0.1 * spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut captions = Vec::with_capacity(spec.n_items);
    let mut clips = Vec::with_capacity(spec.n_items);
    for (i, &verb) in verbs.iter().enumerate() {
        let k = if spec.n_noun_classes > 1 && rng.random_bool(0.3) { 2 } else { 1 };
        let nouns: BTreeSet<usize> = index::sample(&mut rng, spec.n_noun_classes, k).into_iter().collect();
        let words: Vec<String> = nouns.iter().map(|&n| format!("the {}", noun_word(n))).collect();
        let video_id = format!("vid{i:05}");
        captions.push(Caption {
            id: format!("cap{i:05}"),
            video_id: video_id.clone(),
            text: format!("{} {}", verb_word(verb), words.join(" and ")),
            verb_class: verb as u32,
            noun_classes: nouns.iter().map(|&n| n as u32).collect(),
        });

        let modalities = (0..n_mod)
            .map(|m| {
                let base: Vec<f64> = (0..dim)
                    .map(|d| {
                        let noun_mean = nouns.iter().map(|&n| noun_protos[m][n][d]).sum::<f64>()
                            / nouns.len() as f64;
                        verb_protos[m][verb][d] + noun_mean + noise.sample(&mut rng)
                    })
                    .collect();
                (0..spec.segments)
                    .flat_map(|_| base.iter().map(|&b| (b + jitter.sample(&mut rng)) as f32).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        clips.push(ClipFeatures {
            id: video_id,
            segments: spec.segments,
            dim,
            modalities,
        });
    }

    let mut lexicon = RoleLexicon::new();
    for v in 0..spec.n_verb_classes {
        lexicon.insert(&verb_word(v), Role::Verb);
    }
    for n in 0..spec.n_noun_classes {
        lexicon.insert(&noun_word(n), Role::Noun);
    }
    let features = FeatureArchive::new(SYNTH_MODALITIES.iter().map(|s| s.to_string()).collect(), clips)?;
    Ok(Dataset {
        captions,
        features,
        lexicon,
        table: EmbeddingTable::hashed(spec.word_dim, spec.seed)?,
    })
}
