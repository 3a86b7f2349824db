//! `key = value` run configuration with `[model]`, `[train]` and `[eval]`
//! sections. `#` starts a comment. Keys may also be given on the command line
//! as `section.key=value` (or a bare key when it is unambiguous).

use std::collections::BTreeSet;
use std::path::Path;

use roleret_core::loss::DistanceKind;
use roleret_core::model::{Pooling, TokenAxis};
use roleret_core::train::TrainConfig;

use crate::CliError;

const MODEL_KEYS: &[&str] = &[
    "word_dim",
    "feature_dim",
    "embed_dim",
    "model_dim",
    "heads",
    "ff_hidden",
    "text_hidden",
    "text_self_attention",
    "single_space",
    "pooling",
    "token_axis",
    "seed",
];
const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "learning_rate",
    "epochs",
    "per_anchor",
    "seed",
    "distance",
    "lambda_vt",
    "lambda_tv",
    "lambda_vv",
    "lambda_tt",
    "margin",
    "margin_vt",
    "margin_tv",
    "margin_vv",
    "margin_tt",
];
const EVAL_KEYS: &[&str] = &["k"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Default result count for `retrieve`.
    pub k: usize,
    /// Fully qualified keys set explicitly by a file or override.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            k: 10,
            explicit: BTreeSet::new(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| usage(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(usage(format!("bad value {value:?} for {key}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Core(roleret_core::Error::Io { path: path.to_path_buf(), source: e }))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "train", "eval"].contains(&name) {
                    return Err(usage(format!("line {}: unknown section [{name}]", i + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            let qualified = match &section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            self.set(&qualified, value.trim())?;
        }
        Ok(())
    }

    /// Applies `section.key=value` or `key=value`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| usage(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    fn resolve(key: &str) -> Result<(&'static str, String), CliError> {
        let sections: [(&'static str, &[&str]); 3] =
            [("model", MODEL_KEYS), ("train", TRAIN_KEYS), ("eval", EVAL_KEYS)];
        if let Some((section, name)) = key.split_once('.') {
            return match sections.iter().find(|(s, _)| *s == section) {
                Some((s, keys)) if keys.contains(&name) => Ok((s, name.to_string())),
                _ => Err(usage(format!("unknown config key {key}"))),
            };
        }
        let hits: Vec<&'static str> = sections
            .iter()
            .filter(|(_, keys)| keys.contains(&key))
            .map(|(s, _)| *s)
            .collect();
        match hits.as_slice() {
            [one] => Ok((one, key.to_string())),
            [] => Err(usage(format!("unknown config key {key}"))),
            _ => Err(usage(format!("ambiguous config key {key}: qualify it as section.{key}"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (section, name) = Self::resolve(key)?;
        let full = format!("{section}.{name}");
        let t = &mut self.train;
        let m = &mut t.model;
        let w = &mut t.weights;
        match (section, name.as_str()) {
            ("model", "word_dim") => m.word_dim = parse(&full, value)?,
            ("model", "feature_dim") => m.feature_dim = parse(&full, value)?,
            ("model", "embed_dim") => m.embed_dim = parse(&full, value)?,
            ("model", "model_dim") => m.model_dim = parse(&full, value)?,
            ("model", "heads") => m.heads = parse(&full, value)?,
            ("model", "ff_hidden") => m.ff_hidden = parse(&full, value)?,
            ("model", "text_hidden") => m.text_hidden = parse(&full, value)?,
            ("model", "text_self_attention") => m.text_self_attention = parse_bool(&full, value)?,
            ("model", "single_space") => m.single_space = parse_bool(&full, value)?,
            ("model", "pooling") => {
                m.pooling = match value {
                    "mean" => Pooling::Mean,
                    "max" => Pooling::Max,
                    _ => return Err(usage(format!("bad value {value:?} for {full}: expected mean or max"))),
                }
            }
            ("model", "token_axis") => {
                m.token_axis = match value {
                    "modality" => TokenAxis::Modality,
                    "segment" => TokenAxis::Segment,
                    _ => {
                        return Err(usage(format!(
                            "bad value {value:?} for {full}: expected modality or segment"
                        )))
                    }
                }
            }
            ("model", "seed") => m.seed = parse(&full, value)?,
            ("train", "batch_size") => t.batch_size = parse(&full, value)?,
            ("train", "learning_rate") => t.learning_rate = parse(&full, value)?,
            ("train", "epochs") => t.epochs = parse(&full, value)?,
            ("train", "per_anchor") => t.per_anchor = parse(&full, value)?,
            ("train", "seed") => t.seed = parse(&full, value)?,
            ("train", "distance") => {
                t.distance = match value {
                    "euclidean" => DistanceKind::Euclidean,
                    "sq_euclidean" => DistanceKind::SqEuclidean,
                    "cosine" => DistanceKind::Cosine,
                    _ => {
                        return Err(usage(format!(
                            "bad value {value:?} for {full}: expected euclidean, sq_euclidean or cosine"
                        )))
                    }
                }
            }
            ("train", "lambda_vt") => w.lambda_vt = parse(&full, value)?,
            ("train", "lambda_tv") => w.lambda_tv = parse(&full, value)?,
            ("train", "lambda_vv") => w.lambda_vv = parse(&full, value)?,
            ("train", "lambda_tt") => w.lambda_tt = parse(&full, value)?,
            ("train", "margin") => *w = w.with_margin(parse(&full, value)?),
            ("train", "margin_vt") => w.margin_vt = parse(&full, value)?,
            ("train", "margin_tv") => w.margin_tv = parse(&full, value)?,
            ("train", "margin_vv") => w.margin_vv = parse(&full, value)?,
            ("train", "margin_tt") => w.margin_tt = parse(&full, value)?,
            ("eval", "k") => self.k = parse(&full, value)?,
            _ => unreachable!("key list and setter disagree on {full}"),
        }
        self.explicit.insert(full);
        Ok(())
    }

    /// Sets both the weight-init and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.train.model.seed = seed;
        self.explicit.insert("model.seed".into());
        self.explicit.insert("train.seed".into());
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        if self.k == 0 {
            return Err(usage("eval.k must be >= 1"));
        }
        Ok(())
    }
}
