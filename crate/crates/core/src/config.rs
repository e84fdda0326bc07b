//! Run configuration: model variant, component switches, sizes and
//! optimization settings, stored as `key = value` text.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::decoder::GenerationConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Text-only hierarchical encoder-decoder.
    Hred,
    /// Adds the linear image encoder.
    Mhred,
    /// Transformer utterance encoder with the linear image encoder.
    MTrans,
    /// Transformer utterance and image encoders.
    MulTrans,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Hred, Variant::Mhred, Variant::MTrans, Variant::MulTrans];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hred => "hred",
            Variant::Mhred => "mhred",
            Variant::MTrans => "mtrans",
            Variant::MulTrans => "multrans",
        }
    }

    pub fn multimodal(self) -> bool {
        self != Variant::Hred
    }

    pub fn transformer_text(self) -> bool {
        matches!(self, Variant::MTrans | Variant::MulTrans)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// How the slot-attention output becomes the turn's text vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Final,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Final => "final",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "final" => Ok(Pooling::Final),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub use_sa: bool,
    pub use_kb: bool,
    pub use_pgpt: bool,
    pub d_h: usize,
    /// Trainable word-embedding width (decoder input, and encoder input without the contextual provider).
    pub d_e: usize,
    pub d_img: usize,
    /// Slot-attention dropout; `None` picks 0.3 for text-only and 0.5 for multimodal variants.
    pub dropout_sa: Option<f64>,
    pub sa_pooling: Pooling,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Weight of the slot loss in the joint objective.
    pub slot_weight: f64,
    pub min_count: usize,
    pub seed: u64,
    pub gen: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Mhred,
            use_sa: true,
            use_kb: true,
            use_pgpt: false,
            d_h: 512,
            d_e: 512,
            d_img: 64,
            dropout_sa: None,
            sa_pooling: Pooling::Mean,
            epochs: 15,
            batch: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            slot_weight: 1.0,
            min_count: 1,
            seed: 1,
            gen: GenerationConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{key}: {e}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got {v:?}")),
    }
}

impl RunConfig {
    pub fn dropout(&self) -> f64 {
        self.dropout_sa
            .unwrap_or(if self.variant.multimodal() { 0.5 } else { 0.3 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_h == 0 || self.d_e == 0 {
            return bad("d_h and d_e must be positive".into());
        }
        if self.d_img < 8 {
            return bad(format!("d_img {} is below 8", self.d_img));
        }
        let p = self.dropout();
        if !(0.0..1.0).contains(&p) {
            return bad(format!("dropout_sa {p} outside [0, 1)"));
        }
        if self.epochs == 0 || self.batch == 0 || self.min_count == 0 {
            return bad("epochs, batch and min_count must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("slot_weight", self.slot_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} {v} must be non-negative"));
            }
        }
        if self.variant.transformer_text() && !(2 * self.d_h).is_multiple_of(4) {
            return bad(format!("2*d_h = {} is not divisible by 4 heads", 2 * self.d_h));
        }
        if self.variant == Variant::MulTrans && !self.d_h.is_multiple_of(4) {
            return bad(format!("d_h = {} is not divisible by 4 heads", self.d_h));
        }
        self.gen.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "variant" => self.variant = v.parse().map_err(|e: Error| e.to_string())?,
            "use_sa" => self.use_sa = parse_bool(key, v)?,
            "use_kb" => self.use_kb = parse_bool(key, v)?,
            "use_pgpt" => self.use_pgpt = parse_bool(key, v)?,
            "d_h" => self.d_h = parse_value(key, v)?,
            "d_e" => self.d_e = parse_value(key, v)?,
            "d_img" => self.d_img = parse_value(key, v)?,
            "dropout_sa" => {
                self.dropout_sa = if v == "auto" { None } else { Some(parse_value(key, v)?) }
            }
            "sa_pooling" => self.sa_pooling = v.parse().map_err(|e: Error| e.to_string())?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "slot_weight" => self.slot_weight = parse_value(key, v)?,
            "min_count" => self.min_count = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "max_len" => self.gen.max_len = parse_value(key, v)?,
            "beam_width" => self.gen.beam_width = parse_value(key, v)?,
            "length_norm_alpha" => self.gen.length_norm_alpha = parse_value(key, v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("variant", self.variant.to_string());
        kv("use_sa", self.use_sa.to_string());
        kv("use_kb", self.use_kb.to_string());
        kv("use_pgpt", self.use_pgpt.to_string());
        kv("d_h", self.d_h.to_string());
        kv("d_e", self.d_e.to_string());
        kv("d_img", self.d_img.to_string());
        kv(
            "dropout_sa",
            self.dropout_sa.map_or_else(|| "auto".to_string(), |p| format!("{p:?}")),
        );
        kv("sa_pooling", self.sa_pooling.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("clip_norm", format!("{:?}", self.clip_norm));
        kv("slot_weight", format!("{:?}", self.slot_weight));
        kv("min_count", self.min_count.to_string());
        kv("seed", self.seed.to_string());
        kv("max_len", self.gen.max_len.to_string());
        kv("beam_width", self.gen.beam_width.to_string());
        kv("length_norm_alpha", format!("{:?}", self.gen.length_norm_alpha));
        s
    }
}
