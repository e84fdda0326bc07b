//! BIO slot tags, the slot prediction head, span extraction and slot metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkernel::{Axis, Graph, ParamId, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotType {
    Color,
    Material,
    ItemType,
    Size,
    Position,
    Brand,
}

impl SlotType {
    pub const ALL: [SlotType; 6] = [
        SlotType::Color,
        SlotType::Material,
        SlotType::ItemType,
        SlotType::Size,
        SlotType::Position,
        SlotType::Brand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotType::Color => "color",
            SlotType::Material => "material",
            SlotType::ItemType => "item_type",
            SlotType::Size => "size",
            SlotType::Position => "position",
            SlotType::Brand => "brand",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SlotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SlotType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SlotType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown slot type {s}")))
    }
}

/// A BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O,
    B(SlotType),
    I(SlotType),
}

/// Number of distinct tags: `O` plus `B-`/`I-` for each slot type.
pub const NUM_TAGS: usize = 1 + 2 * SlotType::ALL.len();

impl Tag {
    /// Dense id: `O` is 0, then `B-s`, `I-s` pairs in slot-type order.
    pub fn id(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(s) => 1 + 2 * s.index(),
            Tag::I(s) => 2 + 2 * s.index(),
        }
    }

    pub fn from_id(id: usize) -> Option<Tag> {
        match id {
            0 => Some(Tag::O),
            n if n < NUM_TAGS => {
                let s = SlotType::ALL[(n - 1) / 2];
                Some(if n % 2 == 1 { Tag::B(s) } else { Tag::I(s) })
            }
            _ => None,
        }
    }

    pub fn slot(self) -> Option<SlotType> {
        match self {
            Tag::O => None,
            Tag::B(s) | Tag::I(s) => Some(s),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(s) => write!(f, "B-{s}"),
            Tag::I(s) => write!(f, "I-{s}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::O);
        }
        match s.split_once('-') {
            Some(("B", t)) => Ok(Tag::B(t.parse()?)),
            Some(("I", t)) => Ok(Tag::I(t.parse()?)),
            _ => Err(Error::Input(format!("malformed tag {s}"))),
        }
    }
}

/// Turns every `I-s` that does not continue an `s` span into `B-s`.
pub fn repair_bio(tags: &mut [Tag]) {
    let mut prev: Option<SlotType> = None;
    for t in tags.iter_mut() {
        if let Tag::I(s) = *t {
            if prev != Some(s) {
                *t = Tag::B(s);
            }
        }
        prev = t.slot();
    }
}

/// `(type, start, end_exclusive)` spans of a tag sequence.
pub fn spans(tags: &[Tag]) -> Vec<(SlotType, usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(SlotType, usize)> = None;
    for (i, t) in tags.iter().enumerate() {
        let continues = matches!((t, open), (Tag::I(s), Some((o, _))) if *s == o);
        if continues {
            continue;
        }
        if let Some((s, start)) = open.take() {
            out.push((s, start, i));
        }
        if let Some(s) = t.slot() {
            open = Some((s, i));
        }
    }
    if let Some((s, start)) = open {
        out.push((s, start, tags.len()));
    }
    out
}

/// Slot values by type: each contiguous span joined with single spaces.
pub fn extract_slot_values<T: AsRef<str>>(tags: &[Tag], tokens: &[T]) -> Result<BTreeMap<SlotType, Vec<String>>> {
    if tags.len() != tokens.len() {
        return Err(Error::Input(format!("{} tags for {} tokens", tags.len(), tokens.len())));
    }
    let mut out: BTreeMap<SlotType, Vec<String>> = BTreeMap::new();
    for (s, a, b) in spans(tags) {
        let value = tokens[a..b].iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        out.entry(s).or_default().push(value);
    }
    Ok(out)
}

/// Token accuracy and span-level micro F1.
pub fn slot_metrics(predicted: &[Vec<Tag>], gold: &[Vec<Tag>]) -> Result<(f64, f64)> {
    if predicted.len() != gold.len() {
        return Err(Error::Input(format!("{} predicted vs {} gold sequences", predicted.len(), gold.len())));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Input(format!("sequence {i}: {} predicted vs {} gold tags", p.len(), g.len())));
        }
        correct += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
        let ps = spans(p);
        let gs = spans(g);
        n_pred += ps.len();
        n_gold += gs.len();
        tp += ps.iter().filter(|s| gs.contains(s)).count();
    }
    let accuracy = if total == 0 { 1.0 } else { correct as f64 / total as f64 };
    let f1 = if n_pred == 0 && n_gold == 0 {
        1.0
    } else if tp == 0 {
        0.0
    } else {
        let p = tp as f64 / n_pred as f64;
        let r = tp as f64 / n_gold as f64;
        2.0 * p * r / (p + r)
    };
    Ok((accuracy, f1))
}

/// Parameters of the slot head.
#[derive(Debug, Clone, Copy)]
pub struct SlotHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub salience_gain: ParamId,
}

/// Per-token tag distributions and the decoded tags.
#[derive(Debug, Clone)]
pub struct SlotPrediction {
    pub distribution: Vec<Vec<f64>>,
    pub tags: Vec<Tag>,
    /// Column means of the slot attention weights.
    pub salience: Vec<f64>,
}

impl SlotPrediction {
    pub fn values<T: AsRef<str>>(&self, tokens: &[T]) -> Result<BTreeMap<SlotType, Vec<String>>> {
        extract_slot_values(&self.tags, tokens)
    }
}

/// Tag logits for every token.
///
/// `logits_t = sa_output_t W + b + salience_t * gain`, where `salience_t`
/// is the mean attention that token `t` receives.
pub fn slot_logits(g: &mut Graph, sa_output: Var, sa_weights: Var, head: &SlotHead) -> Result<Var> {
    let (t, _) = g.shape(sa_output);
    if g.shape(sa_weights) != (t, t) {
        let (r, c) = g.shape(sa_weights);
        return Err(Error::dim("slot_logits", &[t, t], &[r, c]));
    }
    let w = g.param(head.weight);
    let b = g.param(head.bias);
    let gain = g.param(head.salience_gain);
    let proj = g.matmul(sa_output, w)?;
    let proj = g.add_row(proj, b)?;
    let salience = g.mean_rows(sa_weights);
    let salience = g.transpose(salience);
    let boost = g.matmul(salience, gain)?;
    g.add(proj, boost)
}

/// Row-softmax of the logits, decoded by argmax with BIO repair.
pub fn predict_slots(g: &mut Graph, sa_output: Var, sa_weights: Var, head: &SlotHead) -> Result<SlotPrediction> {
    let logits = slot_logits(g, sa_output, sa_weights, head)?;
    let probs = g.softmax(logits, Axis::Cols);
    let (t, c) = g.shape(probs);
    let values = g.value(probs);
    let distribution: Vec<Vec<f64>> = values.chunks_exact(c).map(<[f64]>::to_vec).collect();
    let mut tags: Vec<Tag> = distribution
        .iter()
        .map(|row| Tag::from_id(argmax(row)).expect("tag id in range"))
        .collect();
    repair_bio(&mut tags);
    let w = g.value(sa_weights);
    let salience = (0..t).map(|j| (0..t).map(|i| w[i * t + j]).sum::<f64>() / t as f64).collect();
    Ok(SlotPrediction {
        distribution,
        tags,
        salience,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `token/TAG` pairs separated by single spaces.
pub fn format_tag_line<T: AsRef<str>>(tokens: &[T], tags: &[Tag]) -> Result<String> {
    if tokens.len() != tags.len() {
        return Err(Error::Input(format!("{} tags for {} tokens", tags.len(), tokens.len())));
    }
    Ok(tokens
        .iter()
        .zip(tags)
        .map(|(tok, tag)| format!("{}/{}", tok.as_ref(), tag))
        .collect::<Vec<_>>()
        .join(" "))
}

pub fn parse_tag_line(line: &str) -> Result<(Vec<String>, Vec<Tag>)> {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for pair in line.split(' ').filter(|p| !p.is_empty()) {
        let (tok, tag) = pair
            .rsplit_once('/')
            .ok_or_else(|| Error::Input(format!("missing '/' in {pair}")))?;
        tokens.push(tok.to_string());
        tags.push(tag.parse()?);
    }
    Ok((tokens, tags))
}

pub fn write_tag_file(path: &Path, rows: &[(Vec<String>, Vec<Tag>)]) -> Result<()> {
    let mut out = String::new();
    for (tokens, tags) in rows {
        out.push_str(&format_tag_line(tokens, tags)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tag_file(path: &Path) -> Result<Vec<(Vec<String>, Vec<Tag>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            parse_tag_line(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
