//! Synthetic fashion-shopping dialogues with gold slot tags, catalog image
//! features, knowledge-base records and the on-disk corpus formats.

mod catalog;
mod generate;
mod io;
mod kb;

pub use catalog::{
    generate_catalog, image_feature, Attribute, CatalogItem, ImageFeaturizer, BRANDS, COLORS, ITEM_TYPES, MATERIALS,
    PRICES, SIZES,
};
pub use generate::{
    describe, generate_corpus, generate_dialogue, generate_dialogue_with_rate, Constraints, CorpusSpec,
    GeneratedCorpus, DEFAULT_KB_RATE, POSITIONS,
};
pub use io::{
    read_catalog, read_corpus, read_dataset, read_kb, split_path, write_catalog, write_corpus, write_dataset, write_kb,
    CATALOG_FILE, KB_FILE, SPLITS,
};
pub use kb::{KbRef, KbStore, CELEBRITY_FIRST, CELEBRITY_LAST};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::slots::Tag;

/// Maximum number of images attached to one turn.
pub const MAX_IMAGES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::System => "system",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Role::User),
            "system" => Ok(Role::System),
            other => Err(Error::Input(format!("unknown role {other:?}"))),
        }
    }
}

/// One utterance of a dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub tokens: Vec<String>,
    pub images: Vec<u32>,
    /// Gold BIO tags; present exactly on user turns.
    pub tags: Option<Vec<Tag>>,
    pub kb_ref: Option<KbRef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueRecord {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl DialogueRecord {
    /// Checks the structural invariants; `catalog_size` additionally bounds image ids.
    pub fn validate(&self, catalog_size: Option<usize>) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("dialogue {}: {msg}", self.id)));
        if self.id.is_empty() || self.id.chars().any(|c| c.is_whitespace() || c == '|') {
            return fail("id must be non-empty without whitespace or '|'".into());
        }
        if self.turns.is_empty() {
            return fail("no turns".into());
        }
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::System };
            if t.role != expected {
                return fail(format!("turn {i} has role {} but roles must alternate from user", t.role));
            }
            if t.tokens.is_empty() {
                return fail(format!("turn {i} has no tokens"));
            }
            if let Some(tok) = t
                .tokens
                .iter()
                .find(|s| s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '|'))
            {
                return fail(format!("turn {i} has malformed token {tok:?}"));
            }
            if t.images.len() > MAX_IMAGES {
                return fail(format!("turn {i} has {} images, limit is {MAX_IMAGES}", t.images.len()));
            }
            if let Some(n) = catalog_size {
                if let Some(id) = t.images.iter().find(|&&id| id as usize >= n) {
                    return fail(format!("turn {i} references unknown image {id}"));
                }
            }
            match (&t.tags, t.role) {
                (Some(tags), Role::User) if tags.len() == t.tokens.len() => {}
                (Some(tags), Role::User) => {
                    return fail(format!("turn {i} has {} tags for {} tokens", tags.len(), t.tokens.len()))
                }
                (None, Role::User) => return fail(format!("user turn {i} lacks tags")),
                (Some(_), Role::System) => return fail(format!("system turn {i} carries tags")),
                (None, Role::System) => {}
            }
        }
        Ok(())
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::User)
    }

    pub fn system_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::System)
    }
}
