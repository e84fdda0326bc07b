use std::fs;
use std::path::Path;

use super::catalog::{Attribute, CatalogItem};
use super::generate::GeneratedCorpus;
use super::kb::KbStore;
use super::{DialogueRecord, KbRef, Role, Turn};
use crate::error::{Error, Result};
use crate::slots::Tag;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn format_turn(t: &Turn) -> String {
    let images = if t.images.is_empty() {
        "-".to_string()
    } else {
        t.images.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
    };
    let tags = match &t.tags {
        Some(tags) => tags.iter().map(Tag::to_string).collect::<Vec<_>>().join(" "),
        None => "-".to_string(),
    };
    let kb = t.kb_ref.as_ref().map_or_else(|| "-".to_string(), KbRef::to_string);
    format!("{}\t{}\t{images}\t{tags}\t{kb}", t.role, t.tokens.join(" "))
}

/// Serializes one dialogue as a corpus line (without the newline).
pub fn format_record(d: &DialogueRecord) -> String {
    let turns: Vec<String> = d.turns.iter().map(format_turn).collect();
    format!("{}\t{}\t{}", d.id, d.turns.len(), turns.join("|"))
}

fn parse_turn(field: &str) -> std::result::Result<Turn, String> {
    let parts: Vec<&str> = field.split('\t').collect();
    let [role, tokens, images, tags, kb] = parts[..] else {
        return Err(format!("turn has {} fields, expected 5", parts.len()));
    };
    let role: Role = role.parse().map_err(|e: Error| e.to_string())?;
    let tokens: Vec<String> = tokens.split(' ').map(String::from).collect();
    let images = if images == "-" {
        Vec::new()
    } else {
        images
            .split(',')
            .map(|s| s.parse::<u32>().map_err(|e| format!("image id {s:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?
    };
    let tags = if tags == "-" {
        None
    } else {
        Some(
            tags.split(' ')
                .map(|s| s.parse::<Tag>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        )
    };
    let kb_ref = if kb == "-" {
        None
    } else {
        Some(kb.parse::<KbRef>().map_err(|e| e.to_string())?)
    };
    Ok(Turn {
        role,
        tokens,
        images,
        tags,
        kb_ref,
    })
}

/// Parses one corpus line.
pub fn parse_record(line: &str) -> std::result::Result<DialogueRecord, String> {
    let mut head = line.splitn(3, '\t');
    let id = head.next().unwrap_or_default();
    let count: usize = head
        .next()
        .ok_or("missing turn count")?
        .parse()
        .map_err(|e| format!("turn count: {e}"))?;
    let body = head.next().ok_or("missing turns")?;
    let turns = body.split('|').map(parse_turn).collect::<std::result::Result<Vec<_>, _>>()?;
    if turns.len() != count {
        return Err(format!("declared {count} turns, found {}", turns.len()));
    }
    Ok(DialogueRecord {
        id: id.to_string(),
        turns,
    })
}

pub fn write_corpus(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    let mut out = String::new();
    for d in records {
        d.validate(None)?;
        out.push_str(&format_record(d));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<DialogueRecord>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let d = parse_record(line).map_err(|m| parse_err(path, i + 1, m))?;
        d.validate(None)?;
        out.push(d);
    }
    Ok(out)
}

/// File names of a dataset directory.
pub const CATALOG_FILE: &str = "catalog.tsv";
pub const KB_FILE: &str = "kb.tsv";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Path of a split file inside a dataset directory.
pub fn split_path(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(format!("{split}.tsv"))
}

/// Writes catalog, KB and the three splits into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &GeneratedCorpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_catalog(&dir.join(CATALOG_FILE), &data.catalog)?;
    write_kb(&dir.join(KB_FILE), &data.kb)?;
    for (split, records) in SPLITS.iter().zip([&data.train, &data.valid, &data.test]) {
        write_corpus(&split_path(dir, split), records)?;
    }
    Ok(())
}

/// Reads a dataset directory and checks every image id against the catalog.
pub fn read_dataset(dir: &Path) -> Result<GeneratedCorpus> {
    let catalog = read_catalog(&dir.join(CATALOG_FILE))?;
    let kb = read_kb(&dir.join(KB_FILE))?;
    let mut splits = Vec::with_capacity(3);
    for split in SPLITS {
        let records = read_corpus(&split_path(dir, split))?;
        for d in &records {
            d.validate(Some(catalog.len()))?;
        }
        splits.push(records);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(GeneratedCorpus {
        catalog,
        kb,
        train,
        valid,
        test,
    })
}

pub fn write_kb(path: &Path, kb: &KbStore) -> Result<()> {
    kb.validate()?;
    let mut out = String::new();
    for (kind, map) in [("celebrity", &kb.celebrities), ("query", &kb.queries)] {
        for (k, v) in map {
            out.push_str(&format!("{kind}\t{k}\t{}\n", v.join(",")));
        }
    }
    write_text(path, &out)
}

pub fn read_kb(path: &Path) -> Result<KbStore> {
    let text = read_text(path)?;
    let mut kb = KbStore::default();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [kind, key, values] = parts[..] else {
            return Err(parse_err(path, i + 1, format!("{} fields, expected 3", parts.len())));
        };
        let values: Vec<String> = values.split(',').map(String::from).collect();
        let map = match kind {
            "celebrity" => &mut kb.celebrities,
            "query" => &mut kb.queries,
            other => return Err(parse_err(path, i + 1, format!("unknown kind {other:?}"))),
        };
        if map.insert(key.to_string(), values).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate key {key:?}")));
        }
    }
    kb.validate()?;
    Ok(kb)
}

pub fn write_catalog(path: &Path, items: &[CatalogItem]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&it.id.to_string());
        for attr in Attribute::ALL {
            out.push('\t');
            out.push_str(it.value(attr));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogItem>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let [id, a, b, c, d, e, f] = parts[..] else {
            return Err(parse_err(path, i + 1, format!("{} fields, expected 7", parts.len())));
        };
        let id: u32 = id.parse().map_err(|e| parse_err(path, i + 1, format!("item id: {e}")))?;
        if id as usize != out.len() {
            return Err(parse_err(path, i + 1, format!("item id {id} out of sequence")));
        }
        out.push(CatalogItem::from_values(id, [a, b, c, d, e, f])?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("catalog {} is empty", path.display())));
    }
    Ok(out)
}
