use std::io::{BufRead, Write};
use std::path::Path;

use slotgen::corpus::{CatalogItem, DialogueRecord, KbStore, Role, Turn, MAX_IMAGES};
use slotgen::decoder::GenerationConfig;
use slotgen::model::{FeatureTable, Model};
use slotgen::slots::{extract_slot_values, Tag};
use slotgen::textcore::tokenize;

use crate::commands::{io_err, CliResult};

/// Stands in for a system turn whose text is not known yet or came back empty.
const PLACEHOLDER: &str = "UNK";

/// Interactive dialogue state over a loaded model.
pub struct Session<'a> {
    model: &'a Model,
    features: FeatureTable,
    catalog_len: usize,
    kb: KbStore,
    gen: GenerationConfig,
    history: Vec<Turn>,
}

/// A user line split into its text and the image ids that survived validation.
#[derive(Debug, PartialEq)]
struct UserInput {
    text: String,
    images: Vec<u32>,
    warnings: Vec<String>,
}

/// Splits an optional trailing `[img:ID,ID,...]` suffix off `line`.
fn parse_line(line: &str, catalog_len: usize) -> Result<UserInput, String> {
    let trimmed = line.trim();
    let (text, spec) = match trimmed.rfind("[img:") {
        Some(pos) if trimmed.ends_with(']') => (&trimmed[..pos], Some(&trimmed[pos + 5..trimmed.len() - 1])),
        _ => (trimmed, None),
    };
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    if let Some(spec) = spec {
        let ids: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if ids.len() > MAX_IMAGES {
            return Err(format!("{} images given, at most {MAX_IMAGES} are allowed per turn", ids.len()));
        }
        for id in ids {
            match id.parse::<u32>() {
                Ok(n) if (n as usize) < catalog_len => images.push(n),
                _ => warnings.push(format!("ignoring unknown image id {id:?}")),
            }
        }
    }
    Ok(UserInput {
        text: text.trim().to_string(),
        images,
        warnings,
    })
}

fn clean_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .map(|t| t.replace('|', ""))
        .filter(|t| !t.is_empty())
        .collect()
}

impl<'a> Session<'a> {
    pub fn new(model: &'a Model, catalog: &[CatalogItem], kb: KbStore, gen: GenerationConfig) -> CliResult<Self> {
        Ok(Self {
            model,
            features: FeatureTable::new(catalog, model.config.d_img)?,
            catalog_len: catalog.len(),
            kb,
            gen,
            history: Vec::new(),
        })
    }

    /// Processes one user turn and returns the lines to print.
    fn turn(&mut self, input: UserInput) -> CliResult<Vec<String>> {
        let mut lines: Vec<String> = input.warnings.iter().map(|w| format!("warning: {w}")).collect();
        let tokens = clean_tokens(&input.text);
        if tokens.is_empty() {
            lines.push("error: the turn has no text".into());
            return Ok(lines);
        }
        let user = Turn {
            role: Role::User,
            kb_ref: self.kb.detect(&tokens),
            tags: Some(vec![Tag::O; tokens.len()]),
            tokens,
            images: input.images,
        };
        let mut turns = self.history.clone();
        turns.push(user.clone());
        turns.push(Turn {
            role: Role::System,
            tokens: vec![PLACEHOLDER.into()],
            images: Vec::new(),
            tags: None,
            kb_ref: None,
        });
        let record = DialogueRecord {
            id: "chat".into(),
            turns,
        };
        let prepared = self.model.prepare(&record, &self.features, &self.kb)?;
        let (tags, response) = self.model.respond(&prepared, &self.gen)?;
        let values = extract_slot_values(&tags, &user.tokens)?;
        let slots: Vec<String> = values
            .iter()
            .flat_map(|(s, vs)| vs.iter().map(move |v| format!("{s}={v}")))
            .collect();
        lines.push(if slots.is_empty() {
            "slots: (none)".into()
        } else {
            format!("slots: {}", slots.join(" "))
        });
        lines.push(format!("system: {}", response.join(" ")));
        self.history.push(user);
        self.history.push(Turn {
            role: Role::System,
            tokens: if response.is_empty() { vec![PLACEHOLDER.into()] } else { response },
            images: Vec::new(),
            tags: None,
            kb_ref: None,
        });
        Ok(lines)
    }

    /// Reads user lines until `/quit` or end of input.
    pub fn run<R: BufRead, W: Write>(mut self, input: R, mut output: W) -> CliResult<()> {
        let out_err = |e| io_err(Path::new("<stdout>"), e);
        let mut lines = input.lines();
        loop {
            write!(output, "> ").map_err(out_err)?;
            output.flush().map_err(out_err)?;
            let line = match lines.next() {
                Some(l) => l.map_err(|e| io_err(Path::new("<stdin>"), e))?,
                None => break,
            };
            let reply = match line.trim() {
                "/quit" => break,
                "/reset" => {
                    self.history.clear();
                    vec!["history cleared".to_string()]
                }
                "" => continue,
                _ => match parse_line(&line, self.catalog_len) {
                    Ok(u) => self.turn(u)?,
                    Err(msg) => vec![format!("error: {msg}")],
                },
            };
            for l in reply {
                writeln!(output, "{l}").map_err(out_err)?;
            }
        }
        writeln!(output).map_err(out_err)?;
        Ok(())
    }
}
