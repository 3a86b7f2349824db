//! Caption role extraction: tokenization, lexicon tagging and pooled
//! noun/verb role vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One narrated action segment with its class annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub id: String,
    pub video_id: String,
    pub text: String,
    pub verb_class: u32,
    pub noun_classes: BTreeSet<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Noun,
    Verb,
    Other,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Noun => "NOUN",
            Role::Verb => "VERB",
            Role::Other => "OTHER",
        })
    }
}

/// Token → role map. Keys are stored lowercased.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoleLexicon {
    entries: BTreeMap<String, Role>,
}

impl RoleLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, token: &str, role: Role) {
        self.entries.insert(token.to_lowercase(), role);
    }

    pub fn lookup(&self, token: &str) -> Role {
        self.entries
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(Role::Other)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Role)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Parses `token<TAB>TAG` lines with `TAG` in `{NOUN, VERB}`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (token, tag) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>TAG".into()))?;
            let role = match tag.trim() {
                "NOUN" => Role::Noun,
                "VERB" => Role::Verb,
                other => return Err(parse_err(format!("unknown tag {other:?}"))),
            };
            if token.is_empty() {
                return Err(parse_err("empty token".into()));
            }
            lex.insert(token, role);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        self.iter()
            .filter(|(_, r)| *r != Role::Other)
            .map(|(t, r)| format!("{t}\t{r}\n"))
            .collect()
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        return Err(Error::TokenizationEmpty);
    }
    Ok(tokens)
}

pub fn tag_roles(tokens: &[String], lexicon: &RoleLexicon) -> Vec<(String, Role)> {
    tokens
        .iter()
        .map(|t| (t.clone(), lexicon.lookup(t)))
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Deterministic pseudo-word-vector with components uniform in `[-0.5, 0.5]`.
pub fn hash_embed(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()) ^ seed);
    (0..dim).map(|_| rng.random_range(-0.5..=0.5)).collect()
}

#[derive(Debug, Clone, PartialEq)]
enum TableSource {
    Loaded(HashMap<String, Vec<f64>>),
    Hashed { seed: u64 },
}

/// Word vectors, either loaded from a file or generated on demand.
///
/// A loaded table falls back to hashed vectors (seed 0) for tokens it does not
/// contain, so lookups never fail.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    source: TableSource,
}

impl EmbeddingTable {
    pub fn hashed(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(Self {
            dim,
            source: TableSource::Hashed { seed },
        })
    }

    pub fn from_map(dim: usize, map: HashMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if let Some((tok, v)) = map.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::shape(format!(
                "vector for {tok:?} has length {}, expected {dim}",
                v.len()
            )));
        }
        Ok(Self {
            dim,
            source: TableSource::Loaded(map),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, token: &str) -> Vec<f64> {
        match &self.source {
            TableSource::Hashed { seed } => hash_embed(token, self.dim, *seed),
            TableSource::Loaded(map) => map
                .get(token)
                .cloned()
                .unwrap_or_else(|| hash_embed(token, self.dim, 0)),
        }
    }

    /// Parses `token<TAB>f1 f2 ... fdim` lines. All rows must share one width.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (token, rest) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>values".into()))?;
            let values = rest
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| parse_err(format!("bad float {v:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(parse_err(format!("expected {d} values, got {}", values.len())))
                }
                _ => {}
            }
            if map.insert(token.to_lowercase(), values).is_some() {
                return Err(Error::DuplicateId(token.to_string()));
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "embedding table is empty".into(),
        })?;
        Self::from_map(dim, map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Writes the given tokens' vectors as TSV in sorted token order.
    pub fn to_tsv<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> String {
        let sorted: BTreeSet<&str> = tokens.into_iter().collect();
        let mut out = String::new();
        for t in sorted {
            let values: Vec<String> = self.vector(t).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!("{t}\t{}\n", values.join(" ")));
        }
        out
    }
}

/// Pooled role vectors for one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleVectors {
    pub noun: Vec<f64>,
    pub verb: Vec<f64>,
    pub missing_noun: bool,
    pub missing_verb: bool,
}

impl RoleVectors {
    pub fn complete(&self) -> bool {
        !self.missing_noun && !self.missing_verb
    }
}

/// Mean of the vectors of NOUN (resp. VERB) tokens, summed in sorted token
/// order so the result does not depend on word order. A role with no tokens
/// yields the zero vector and sets its missing flag.
pub fn role_vectors(tagged: &[(String, Role)], table: &EmbeddingTable) -> RoleVectors {
    let pool = |role: Role| -> (Vec<f64>, bool) {
        let mut tokens: Vec<&str> = tagged
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(t, _)| t.as_str())
            .collect();
        tokens.sort_unstable();
        let mut acc = vec![0.0; table.dim()];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(table.vector(t)) {
                *a += v;
            }
        }
        if tokens.is_empty() {
            return (acc, true);
        }
        let n = tokens.len() as f64;
        (acc.into_iter().map(|v| v / n).collect(), false)
    };
    let (noun, missing_noun) = pool(Role::Noun);
    let (verb, missing_verb) = pool(Role::Verb);
    RoleVectors {
        noun,
        verb,
        missing_noun,
        missing_verb,
    }
}

/// Tokenize, tag and pool in one go.
pub fn caption_roles(text: &str, lexicon: &RoleLexicon, table: &EmbeddingTable) -> Result<RoleVectors> {
    let tokens = tokenize(text)?;
    Ok(role_vectors(&tag_roles(&tokens, lexicon), table))
}
