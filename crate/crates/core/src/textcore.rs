//! Tokenization, vocabularies, and embedding providers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, ParamId, Tensor, Var};
use crate::seed::{mix, splitmix64};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["PAD", "UNK", "BOS", "EOS"];

/// Output width of the contextual provider.
pub const CONTEXTUAL_DIM: usize = 768;
const HASH_DIM: usize = 64;
/// Weight of the context-dependent component relative to the token component.
const CONTEXT_MIX: f64 = 0.25;

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token/id bijection with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// frequency with ties broken lexicographically.
    pub fn build<I, S, T>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::Input("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut sequences = 0usize;
        for seq in corpus {
            sequences += 1;
            for tok in seq {
                *counts.entry(tok.as_ref().to_string()).or_default() += 1;
            }
        }
        if sequences == 0 {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(rest: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(rest);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Unknown tokens map to `UNK`; no BOS/EOS is added.
    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    /// One token per line; line number minus one is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, want) in RESERVED.iter().enumerate() {
            match lines.get(i) {
                Some(l) if l == want => {}
                other => {
                    return Err(Error::Parse {
                        path: origin.to_string(),
                        line: i + 1,
                        msg: format!("expected reserved token {want}, found {other:?}"),
                    })
                }
            }
        }
        for (i, l) in lines.iter().enumerate().skip(4) {
            if l.is_empty() || l.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: "token must be non-empty and contain no whitespace".into(),
                });
            }
        }
        Self::from_tokens(lines[4..].iter().map(|s| s.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Frozen stand-in for pretrained contextual embeddings.
///
/// The vector for a token mixes a token-only hash embedding with a hash
/// embedding keyed by the token and a fingerprint of the whole context, then
/// passes the sum through a fixed random projection and L2-normalizes it.
#[derive(Debug, Clone)]
pub struct ContextualEmbedder {
    seed: u64,
    dim: usize,
    projection: Vec<f64>,
}

impl ContextualEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xC0DE));
        let bound = (3.0 / HASH_DIM as f64).sqrt();
        let projection = (0..HASH_DIM * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        ContextualEmbedder { seed, dim, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 64-bit fingerprint of the previous response followed by the current utterance.
    pub fn fingerprint(prev_system: &[u32], current_user: &[u32]) -> u64 {
        let mut h = 0x9E37_79B9_7F4A_7C15u64;
        for &id in prev_system {
            h = splitmix64(h ^ (id as u64 + 1));
        }
        h = splitmix64(h ^ 0xFFFF_FFFF);
        for &id in current_user {
            h = splitmix64(h ^ (id as u64 + 1));
        }
        h
    }

    fn hash_vector(&self, key: u64, out: &mut [f64], weight: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, key));
        for o in out.iter_mut() {
            *o += weight * rng.gen_range(-1.0..1.0);
        }
    }

    /// Per-token vectors (`T x dim`) for `current_user` in the context of `prev_system`.
    pub fn embed(&self, prev_system: &[u32], current_user: &[u32]) -> Result<Tensor> {
        if current_user.is_empty() {
            return Err(Error::Input("contextual embedding needs a non-empty utterance".into()));
        }
        let fp = Self::fingerprint(prev_system, current_user);
        let mut data = Vec::with_capacity(current_user.len() * self.dim);
        let mut hashed = [0.0; HASH_DIM];
        for &id in current_user {
            hashed.iter_mut().for_each(|x| *x = 0.0);
            self.hash_vector(splitmix64(id as u64), &mut hashed, 1.0);
            self.hash_vector(splitmix64(fp ^ splitmix64(id as u64 ^ 0xABCD)), &mut hashed, CONTEXT_MIX);
            let mut v = vec![0.0; self.dim];
            crate::numkernel::linalg::matmul_acc(&hashed, &self.projection, &mut v, 1, HASH_DIM, self.dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            data.extend(v);
        }
        Tensor::new(&[current_user.len(), self.dim], data)
    }
}

/// Source of input vectors for the text and KB encoders.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Trainable { table: ParamId, dim: usize },
    Contextual(Arc<ContextualEmbedder>),
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Trainable { dim, .. } => *dim,
            EmbeddingProvider::Contextual(c) => c.dim(),
        }
    }

    /// Records `T x dim` input vectors. Contextual vectors enter as constants.
    pub fn embed(&self, g: &mut Graph, prev: &[u32], ids: &[u32]) -> Result<Var> {
        match self {
            EmbeddingProvider::Trainable { table, .. } => {
                let t = g.param(*table);
                let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                g.gather(t, &idx)
            }
            EmbeddingProvider::Contextual(c) => g.leaf(c.embed(prev, ids)?),
        }
    }
}
