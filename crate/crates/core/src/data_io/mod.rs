//! Dataset files: captions CSV, binary feature archive, role lexicon, word
//! vectors, checkpoints and the synthetic generator.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, TokenAxis};
use crate::text_roles::{tokenize, Caption, EmbeddingTable, RoleLexicon};

mod captions;
mod checkpoint;
mod features;
mod synth;

pub use captions::{captions_to_csv, load_captions, parse_captions, save_captions, CAPTION_HEADER};
pub use checkpoint::{
    load_checkpoint, payload_path, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION, PAYLOAD_MAGIC,
};
pub use features::{
    load_features, temporal_pool, ClipFeatures, FeatureArchive, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{noun_word, synth_dataset, verb_word, SynthSpec, SYNTH_MODALITIES};

pub const CAPTIONS_FILE: &str = "captions.csv";
pub const FEATURES_FILE: &str = "features.bin";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub captions: Vec<Caption>,
    pub features: FeatureArchive,
    pub lexicon: RoleLexicon,
    pub table: EmbeddingTable,
}

impl Dataset {
    /// Reads the four standard files from `dir`. Every caption must refer to a
    /// clip present in the archive.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let captions = load_captions(&dir.join(CAPTIONS_FILE))?;
        let features = load_features(&dir.join(FEATURES_FILE))?;
        let lexicon = RoleLexicon::load(&dir.join(LEXICON_FILE))?;
        let table = EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?;
        let d = Self {
            captions,
            features,
            lexicon,
            table,
        };
        d.check_links()?;
        Ok(d)
    }

    /// Writes the standard files. Word vectors are stored for every token that
    /// appears in a caption or the lexicon.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_captions(&self.captions, &dir.join(CAPTIONS_FILE))?;
        self.features.write(&dir.join(FEATURES_FILE))?;
        let lex = dir.join(LEXICON_FILE);
        std::fs::write(&lex, self.lexicon.to_tsv()).map_err(|e| Error::io(&lex, e))?;
        let mut vocab: BTreeSet<String> = self.lexicon.iter().map(|(t, _)| t.to_string()).collect();
        for c in &self.captions {
            vocab.extend(tokenize(&c.text).unwrap_or_default());
        }
        let emb = dir.join(EMBEDDINGS_FILE);
        std::fs::write(&emb, self.table.to_tsv(vocab.iter().map(String::as_str)))
            .map_err(|e| Error::io(&emb, e))
    }

    pub fn check_links(&self) -> Result<()> {
        match self.captions.iter().find(|c| self.features.get(&c.video_id).is_none()) {
            Some(c) => Err(Error::MissingAnnotation(format!(
                "caption {} refers to unknown clip {:?}",
                c.id, c.video_id
            ))),
            None => Ok(()),
        }
    }
}

/// Turns a clip into the per-modality token matrices the video encoder takes:
/// one temporally pooled row per modality, or every segment as its own row.
pub fn clip_tokens(clip: &ClipFeatures, config: &ModelConfig) -> Result<Vec<Matrix>> {
    (0..clip.modalities.len())
        .map(|m| {
            let full = clip.modality_matrix(m)?;
            match config.token_axis {
                TokenAxis::Segment => Ok(full),
                TokenAxis::Modality => Matrix::row_vector(&temporal_pool(&full, config.pooling)?),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip_preserves_everything_used() {
        let spec = SynthSpec { n_items: 30, feature_dim: 5, word_dim: 4, ..SynthSpec::default() };
        let d = synth_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.captions, d.captions);
        assert_eq!(back.features, d.features);
        assert_eq!(back.lexicon, d.lexicon);
        for c in &d.captions {
            for t in tokenize(&c.text).unwrap() {
                assert_eq!(back.table.vector(&t), d.table.vector(&t));
            }
        }
    }

    #[test]
    fn tokens_follow_axis() {
        let d = synth_dataset(&SynthSpec { n_items: 2, feature_dim: 5, ..SynthSpec::default() }).unwrap();
        let clip = &d.features.clips()[0];
        let cfg = ModelConfig { feature_dim: 5, ..ModelConfig::default() };
        let t = clip_tokens(clip, &cfg).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|m| m.shape() == (1, 5)));
        let seg = clip_tokens(clip, &ModelConfig { token_axis: TokenAxis::Segment, ..cfg }).unwrap();
        assert!(seg.iter().all(|m| m.shape() == (4, 5)));
    }
}
