use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Aggregated generation and slot metrics for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub nist: f64,
    pub slot_accuracy: f64,
    pub slot_f1: f64,
    pub dialogues: usize,
    pub responses: usize,
    pub user_turns: usize,
}

impl EvalReport {
    fn floats(&self) -> [(&'static str, f64); 8] {
        [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("bleu3", self.bleu3),
            ("bleu4", self.bleu4),
            ("rouge_l", self.rouge_l),
            ("nist", self.nist),
            ("slot_accuracy", self.slot_accuracy),
            ("slot_f1", self.slot_f1),
        ]
    }

    fn counts(&self) -> [(&'static str, usize); 3] {
        [
            ("dialogues", self.dialogues),
            ("responses", self.responses),
            ("user_turns", self.user_turns),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.floats().iter().all(|(_, v)| v.is_finite())
    }

    /// Aligned two-column table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.floats() {
            let _ = writeln!(s, "{k:<14} {v:>10.4}");
        }
        for (k, v) in self.counts() {
            let _ = writeln!(s, "{k:<14} {v:>10}");
        }
        s
    }

    /// `key=value` lines; floats use the shortest round-trip representation.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.floats() {
            let _ = writeln!(s, "{k}={v:?}");
        }
        for (k, v) in self.counts() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut r = EvalReport {
            bleu1: f64::NAN,
            bleu2: f64::NAN,
            bleu3: f64::NAN,
            bleu4: f64::NAN,
            rouge_l: f64::NAN,
            nist: f64::NAN,
            slot_accuracy: f64::NAN,
            slot_f1: f64::NAN,
            dialogues: 0,
            responses: 0,
            user_turns: 0,
        };
        let mut seen = 0usize;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: "report".into(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let f = || v.parse::<f64>().map_err(|e| err(format!("{k}: {e}")));
            let u = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "bleu1" => r.bleu1 = f()?,
                "bleu2" => r.bleu2 = f()?,
                "bleu3" => r.bleu3 = f()?,
                "bleu4" => r.bleu4 = f()?,
                "rouge_l" => r.rouge_l = f()?,
                "nist" => r.nist = f()?,
                "slot_accuracy" => r.slot_accuracy = f()?,
                "slot_f1" => r.slot_f1 = f()?,
                "dialogues" => r.dialogues = u()?,
                "responses" => r.responses = u()?,
                "user_turns" => r.user_turns = u()?,
                other => return Err(err(format!("unknown key {other}"))),
            }
            seen += 1;
        }
        if seen != 11 {
            return Err(Error::Parse {
                path: "report".into(),
                line: 0,
                msg: format!("expected 11 keys, found {seen}"),
            });
        }
        Ok(r)
    }
}
