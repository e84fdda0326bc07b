use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::catalog::{BRANDS, ITEM_TYPES};
use crate::error::{Error, Result};

pub const CELEBRITY_FIRST: [&str; 8] = ["ava", "liam", "noah", "emma", "mia", "leo", "zoe", "kai"];
pub const CELEBRITY_LAST: [&str; 6] = ["stone", "rivers", "hart", "lane", "cole", "fox"];

/// Pointer from a dialogue turn to the knowledge-base record it depends on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KbRef {
    /// Celebrity name (space-separated tokens) whose endorsements are asked about.
    Celebrity(String),
    /// Item type whose complementary item types are asked about.
    Query(String),
}

impl KbRef {
    pub fn kind(&self) -> &'static str {
        match self {
            KbRef::Celebrity(_) => "celebrity",
            KbRef::Query(_) => "query",
        }
    }

    pub fn key(&self) -> &str {
        match self {
            KbRef::Celebrity(k) | KbRef::Query(k) => k,
        }
    }
}

impl fmt::Display for KbRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind(), self.key())
    }
}

impl FromStr for KbRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, key) = s
            .split_once(':')
            .ok_or_else(|| Error::Input(format!("kb ref {s:?} lacks a kind prefix")))?;
        if key.is_empty() {
            return Err(Error::Input(format!("kb ref {s:?} has an empty key")));
        }
        match kind {
            "celebrity" => Ok(KbRef::Celebrity(key.to_string())),
            "query" => Ok(KbRef::Query(key.to_string())),
            other => Err(Error::Input(format!("unknown kb kind {other:?}"))),
        }
    }
}

/// Celebrity endorsements and item-type pairing queries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KbStore {
    pub celebrities: BTreeMap<String, Vec<String>>,
    pub queries: BTreeMap<String, Vec<String>>,
}

impl KbStore {
    /// Every celebrity endorses two distinct brands; every item type pairs with two others.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut celebrities = BTreeMap::new();
        for first in CELEBRITY_FIRST {
            for last in CELEBRITY_LAST {
                let picks = sample(&mut rng, BRANDS.len(), 2);
                let brands = picks.iter().map(|i| BRANDS[i].to_string()).collect();
                celebrities.insert(format!("{first} {last}"), brands);
            }
        }
        let mut queries = BTreeMap::new();
        for (i, item) in ITEM_TYPES.iter().enumerate() {
            let picks = sample(&mut rng, ITEM_TYPES.len() - 1, 2);
            let others = picks
                .iter()
                .map(|j| ITEM_TYPES[if j >= i { j + 1 } else { j }].to_string())
                .collect();
            queries.insert(item.to_string(), others);
        }
        KbStore { celebrities, queries }
    }

    pub fn lookup(&self, r: &KbRef) -> Option<&[String]> {
        match r {
            KbRef::Celebrity(k) => self.celebrities.get(k),
            KbRef::Query(k) => self.queries.get(k),
        }
        .map(Vec::as_slice)
    }

    /// Tokens describing the record: key tokens followed by value tokens.
    pub fn record_tokens(&self, r: &KbRef) -> Option<Vec<String>> {
        let values = self.lookup(r)?;
        let mut out: Vec<String> = r.key().split_whitespace().map(String::from).collect();
        for v in values {
            out.extend(v.split_whitespace().map(String::from));
        }
        Some(out)
    }

    /// Finds the record an utterance asks about: a celebrity named by two
    /// consecutive tokens, or a pairing query ("goes well with") about the
    /// last item type mentioned.
    pub fn detect<T: AsRef<str>>(&self, tokens: &[T]) -> Option<KbRef> {
        let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
        for w in toks.windows(2) {
            let name = format!("{} {}", w[0], w[1]);
            if self.celebrities.contains_key(&name) {
                return Some(KbRef::Celebrity(name));
            }
        }
        let asks_pairing = toks.windows(3).any(|w| w == ["goes", "well", "with"]);
        if asks_pairing {
            return toks
                .iter()
                .rev()
                .find(|t| self.queries.contains_key(**t))
                .map(|t| KbRef::Query(t.to_string()));
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        for (celeb, brands) in &self.celebrities {
            if let Some(b) = brands.iter().find(|b| !BRANDS.contains(&b.as_str())) {
                return Err(Error::Validation(format!("celebrity {celeb} endorses unknown brand {b}")));
            }
        }
        for (item, others) in &self.queries {
            if let Some(o) = std::iter::once(item)
                .chain(others)
                .find(|o| !ITEM_TYPES.contains(&o.as_str()))
            {
                return Err(Error::Validation(format!("query {item} references unknown item type {o}")));
            }
        }
        Ok(())
    }
}
