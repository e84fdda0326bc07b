use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog::{generate_catalog, Attribute, CatalogItem};
use super::kb::{KbRef, KbStore};
use super::{DialogueRecord, Role, Turn, MAX_IMAGES};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::seed::mix;
use crate::slots::{SlotType, Tag};

pub const POSITIONS: [&str; MAX_IMAGES] = ["1st", "2nd", "3rd", "4th", "5th"];
pub const DEFAULT_KB_RATE: f64 = 0.2;

/// Cumulative product constraints expressed so far in a dialogue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Constraints {
    pub item_type: Option<usize>,
    pub color: Option<usize>,
    pub material: Option<usize>,
    pub size: Option<usize>,
    pub brand: Option<usize>,
}

const REFINABLE: [Attribute; 5] = [
    Attribute::Color,
    Attribute::Material,
    Attribute::Brand,
    Attribute::Size,
    Attribute::ItemType,
];

impl Constraints {
    pub fn get(&self, attr: Attribute) -> Option<usize> {
        match attr {
            Attribute::ItemType => self.item_type,
            Attribute::Color => self.color,
            Attribute::Material => self.material,
            Attribute::Size => self.size,
            Attribute::Brand => self.brand,
            Attribute::Price => None,
        }
    }

    pub fn set(&mut self, attr: Attribute, value: Option<usize>) {
        match attr {
            Attribute::ItemType => self.item_type = value,
            Attribute::Color => self.color = value,
            Attribute::Material => self.material = value,
            Attribute::Size => self.size = value,
            Attribute::Brand => self.brand = value,
            Attribute::Price => {}
        }
    }

    fn value(&self, attr: Attribute) -> Option<&'static str> {
        self.get(attr).map(|i| attr.values()[i])
    }

    /// Number of set constraints the item satisfies, and whether it satisfies all.
    fn score(&self, item: &CatalogItem) -> (usize, bool) {
        let mut hit = 0;
        let mut all = true;
        for attr in REFINABLE {
            if let Some(v) = self.get(attr) {
                if item.index(attr) == v {
                    hit += 1;
                } else {
                    all = false;
                }
            }
        }
        (hit, all)
    }
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(String::from)
}

/// The system's textual reply to a set of constraints.
pub fn describe(c: &Constraints) -> Vec<String> {
    let mut out: Vec<String> = words("here are some").collect();
    for attr in [Attribute::Color, Attribute::Material] {
        if let Some(v) = c.value(attr) {
            out.extend(words(v));
        }
    }
    out.extend(words(c.value(Attribute::ItemType).unwrap_or("items")));
    if let Some(b) = c.value(Attribute::Brand) {
        out.push("by".into());
        out.extend(words(b));
    }
    if let Some(s) = c.value(Attribute::Size) {
        out.extend(words("in size"));
        out.extend(words(s));
    }
    out
}

fn slot_of(attr: Attribute) -> SlotType {
    match attr {
        Attribute::ItemType => SlotType::ItemType,
        Attribute::Color => SlotType::Color,
        Attribute::Material => SlotType::Material,
        Attribute::Size => SlotType::Size,
        Attribute::Brand => SlotType::Brand,
        Attribute::Price => unreachable!("price is never mentioned"),
    }
}

/// Accumulates an utterance from literal text and tagged slot fills.
#[derive(Default)]
struct Utterance {
    tokens: Vec<String>,
    tags: Vec<Tag>,
}

impl Utterance {
    fn text(&mut self, s: &str) -> &mut Self {
        for w in words(s) {
            self.tokens.push(w);
            self.tags.push(Tag::O);
        }
        self
    }

    fn slot(&mut self, slot: SlotType, s: &str) -> &mut Self {
        for (i, w) in words(s).enumerate() {
            self.tokens.push(w);
            self.tags.push(if i == 0 { Tag::B(slot) } else { Tag::I(slot) });
        }
        self
    }

    fn attr(&mut self, attr: Attribute, index: usize) -> &mut Self {
        self.slot(slot_of(attr), attr.values()[index])
    }

    fn into_turn(self, kb_ref: Option<KbRef>) -> Turn {
        Turn {
            role: Role::User,
            tokens: self.tokens,
            images: Vec::new(),
            tags: Some(self.tags),
            kb_ref,
        }
    }
}

fn system_turn(tokens: Vec<String>, images: Vec<u32>) -> Turn {
    Turn {
        role: Role::System,
        tokens,
        images,
        tags: None,
        kb_ref: None,
    }
}

struct Generator<'a> {
    catalog: &'a [CatalogItem],
    kb: &'a KbStore,
    rng: ChaCha8Rng,
    constraints: Constraints,
    shown: Vec<u32>,
}

impl Generator<'_> {
    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        *xs.choose(&mut self.rng).expect("non-empty choice list")
    }

    fn pick_index(&mut self, attr: Attribute) -> usize {
        self.rng.gen_range(0..attr.values().len())
    }

    /// Up to five items: full matches in random order, then the best partial matches.
    fn select_images(&mut self) -> Vec<u32> {
        let count = self.rng.gen_range(1..=MAX_IMAGES);
        let mut full = Vec::new();
        let mut partial = Vec::new();
        for it in self.catalog {
            match self.constraints.score(it) {
                (_, true) => full.push(it.id),
                (hit, false) => partial.push((hit, it.id)),
            }
        }
        full.shuffle(&mut self.rng);
        full.truncate(count);
        if full.len() < count {
            partial.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            full.extend(partial.iter().take(count - full.len()).map(|p| p.1));
        }
        full
    }

    fn respond_with_products(&mut self) -> Turn {
        let images = self.select_images();
        self.shown = images.clone();
        system_turn(describe(&self.constraints), images)
    }

    fn initial(&mut self) -> [Turn; 2] {
        let mut c = Constraints {
            item_type: Some(self.pick_index(Attribute::ItemType)),
            ..Default::default()
        };
        for (attr, p) in [
            (Attribute::Color, 0.6),
            (Attribute::Material, 0.5),
            (Attribute::Brand, 0.5),
            (Attribute::Size, 0.3),
        ] {
            if self.rng.gen_bool(p) {
                let v = self.pick_index(attr);
                c.set(attr, Some(v));
            }
        }
        let prefix = self.pick(&["show me a", "i want a", "i am looking for a", "can you show me a"]);
        let mut u = Utterance::default();
        u.text(prefix);
        for attr in [Attribute::Color, Attribute::Material, Attribute::ItemType] {
            if let Some(v) = c.get(attr) {
                u.attr(attr, v);
            }
        }
        if let Some(v) = c.brand {
            u.text("by").attr(Attribute::Brand, v);
        }
        if let Some(v) = c.size {
            u.text("in size").attr(Attribute::Size, v);
        }
        self.constraints = c;
        [u.into_turn(None), self.respond_with_products()]
    }

    fn refine(&mut self) -> [Turn; 2] {
        let attr = self.pick(&REFINABLE);
        let n = attr.values().len();
        let value = match self.constraints.get(attr) {
            Some(cur) => (cur + self.rng.gen_range(1..n)) % n,
            None => self.rng.gen_range(0..n),
        };
        let mut u = Utterance::default();
        match attr {
            Attribute::Color => match self.rng.gen_range(0..3) {
                0 => u.text("what about").attr(attr, value).text("ones"),
                1 => u.text("i prefer").attr(attr, value),
                _ => u.text("show me something in").attr(attr, value),
            },
            Attribute::Material => match self.rng.gen_range(0..3) {
                0 => u.text("do you have it in").attr(attr, value),
                1 => u.text("i prefer").attr(attr, value),
                _ => u.text("what about").attr(attr, value).text("ones"),
            },
            Attribute::Brand => match self.rng.gen_range(0..2) {
                0 => u.text("anything by").attr(attr, value),
                _ => u.text("show me something by").attr(attr, value),
            },
            Attribute::Size => match self.rng.gen_range(0..2) {
                0 => u.text("do you have it in size").attr(attr, value),
                _ => u.text("i need size").attr(attr, value),
            },
            _ => match self.rng.gen_range(0..2) {
                0 => u.text("show me a matching").attr(attr, value),
                _ => u.text("what about a").attr(attr, value),
            },
        };
        self.constraints.set(attr, Some(value));
        [u.into_turn(None), self.respond_with_products()]
    }

    fn position_ref(&mut self) -> [Turn; 2] {
        let k = self.rng.gen_range(0..self.shown.len());
        let item = self.catalog[self.shown[k] as usize];
        let pos = POSITIONS[k];
        let mut u = Utterance::default();
        match self.rng.gen_range(0..3) {
            0 => u.text("show me more like the").slot(SlotType::Position, pos).text("image"),
            1 => u.text("i like the").slot(SlotType::Position, pos).text("one"),
            _ => u.text("something similar to the").slot(SlotType::Position, pos).text("image"),
        };
        self.constraints = Constraints {
            item_type: Some(item.item_type),
            color: Some(item.color),
            ..Default::default()
        };
        let mut reply: Vec<String> = words("here are more").collect();
        reply.extend(words(item.value(Attribute::Color)));
        reply.extend(words(item.value(Attribute::ItemType)));
        reply.extend(words("similar to the"));
        reply.push(pos.to_string());
        reply.push("one".into());
        let images = self.select_images();
        self.shown = images.clone();
        [u.into_turn(None), system_turn(reply, images)]
    }

    fn knowledge(&mut self) -> Result<[Turn; 2]> {
        let mut u = Utterance::default();
        let (kb_ref, mut reply) = if self.rng.gen_bool(0.6) {
            let names: Vec<&String> = self.kb.celebrities.keys().collect();
            if names.is_empty() {
                return Err(Error::Input("knowledge base has no celebrities".into()));
            }
            let name = names[self.rng.gen_range(0..names.len())].clone();
            match self.rng.gen_range(0..2) {
                0 => u.text("will").text(&name).text("endorse this ?"),
                _ => u.text("does").text(&name).text("like this brand ?"),
            };
            let mut reply: Vec<String> = words(&name).collect();
            reply.push("endorses".into());
            (KbRef::Celebrity(name), reply)
        } else {
            let item = match self.constraints.item_type {
                Some(i) => i,
                None => {
                    let i = self.pick_index(Attribute::ItemType);
                    self.constraints.item_type = Some(i);
                    i
                }
            };
            u.text("what goes well with this").attr(Attribute::ItemType, item).text("?");
            let name = Attribute::ItemType.values()[item];
            let mut reply: Vec<String> = words(name).collect();
            reply.extend(words("goes well with"));
            (KbRef::Query(name.to_string()), reply)
        };
        let values = self
            .kb
            .lookup(&kb_ref)
            .ok_or_else(|| Error::Input(format!("knowledge base lacks {kb_ref}")))?;
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                reply.push(if i + 1 == values.len() { "and" } else { "," }.into());
            }
            reply.extend(words(v));
        }
        self.shown.clear();
        Ok([u.into_turn(Some(kb_ref)), system_turn(reply, Vec::new())])
    }
}

/// Generates one dialogue with the default KB-turn rate.
pub fn generate_dialogue(
    catalog: &[CatalogItem],
    kb: &KbStore,
    seed: u64,
    n_turn_pairs: usize,
) -> Result<DialogueRecord> {
    generate_dialogue_with_rate(catalog, kb, seed, n_turn_pairs, DEFAULT_KB_RATE)
}

/// Generates one dialogue; `kb_rate` is the probability that it contains a KB-dependent turn.
pub fn generate_dialogue_with_rate(
    catalog: &[CatalogItem],
    kb: &KbStore,
    seed: u64,
    n_turn_pairs: usize,
    kb_rate: f64,
) -> Result<DialogueRecord> {
    if catalog.is_empty() {
        return Err(Error::Input("catalog is empty".into()));
    }
    if !(1..=20).contains(&n_turn_pairs) {
        return Err(Error::Input(format!("turn pairs {n_turn_pairs} outside 1..=20")));
    }
    if !(0.0..=1.0).contains(&kb_rate) {
        return Err(Error::Input(format!("kb rate {kb_rate} outside [0, 1]")));
    }
    if catalog.iter().enumerate().any(|(i, it)| it.id as usize != i) {
        return Err(Error::Input("catalog ids must be 0..n in order".into()));
    }
    let mut g = Generator {
        catalog,
        kb,
        rng: ChaCha8Rng::seed_from_u64(seed),
        constraints: Constraints::default(),
        shown: Vec::new(),
    };
    let kb_pair = if g.rng.gen_bool(kb_rate) {
        Some(if n_turn_pairs == 1 { 0 } else { g.rng.gen_range(1..n_turn_pairs) })
    } else {
        None
    };
    let mut turns = Vec::with_capacity(2 * n_turn_pairs);
    for p in 0..n_turn_pairs {
        let pair = if kb_pair == Some(p) {
            g.knowledge()?
        } else if g.constraints.item_type.is_none() {
            g.initial()
        } else if !g.shown.is_empty() && g.rng.gen_bool(0.35) {
            g.position_ref()
        } else {
            g.refine()
        };
        turns.extend(pair);
    }
    Ok(DialogueRecord {
        id: format!("d{seed:016x}"),
        turns,
    })
}

/// Sizes and seed of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub catalog_size: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub turn_pairs: usize,
    pub kb_rate: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            catalog_size: 200,
            train: 500,
            valid: 100,
            test: 100,
            turn_pairs: 4,
            kb_rate: DEFAULT_KB_RATE,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub catalog: Vec<CatalogItem>,
    pub kb: KbStore,
    pub train: Vec<DialogueRecord>,
    pub valid: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
}

/// Generates catalog, KB and the three splits; each dialogue draws from its own derived seed.
pub fn generate_corpus(spec: &CorpusSpec, exec: Execution) -> Result<GeneratedCorpus> {
    let catalog = generate_catalog(spec.catalog_size, mix(spec.seed, 0))?;
    let kb = KbStore::generate(mix(spec.seed, 1));
    let split = |name: &str, tag: u64, n: usize| -> Result<Vec<DialogueRecord>> {
        let base = mix(spec.seed, tag);
        let idx: Vec<usize> = (0..n).collect();
        map_indexed(exec, &idx, |_, &i| {
            generate_dialogue_with_rate(&catalog, &kb, mix(base, i as u64), spec.turn_pairs, spec.kb_rate).map(
                |mut d| {
                    d.id = format!("{name}-{i:06}");
                    d
                },
            )
        })
        .into_iter()
        .collect()
    };
    Ok(GeneratedCorpus {
        train: split("train", 2, spec.train)?,
        valid: split("valid", 3, spec.valid)?,
        test: split("test", 4, spec.test)?,
        catalog,
        kb,
    })
}
