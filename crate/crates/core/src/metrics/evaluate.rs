use super::{bleu, nist, rouge_l, EvalReport};
use crate::decoder::GenerationConfig;
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};
use crate::model::{DialoguePrediction, Model, PreparedDialogue};
use crate::slots::{slot_metrics, Tag};
use crate::corpus::Role;

/// Report plus the raw predictions it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub predictions: Vec<DialoguePrediction>,
}

/// Scores aligned generated/gold responses and predicted/gold tag sequences.
pub fn score_corpus(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    pred_tags: &[Vec<Tag>],
    gold_tags: &[Vec<Tag>],
    dialogues: usize,
) -> Result<EvalReport> {
    let (slot_accuracy, slot_f1) = slot_metrics(pred_tags, gold_tags)?;
    Ok(EvalReport {
        bleu1: bleu(hyps, refs, 1)?,
        bleu2: bleu(hyps, refs, 2)?,
        bleu3: bleu(hyps, refs, 3)?,
        bleu4: bleu(hyps, refs, 4)?,
        rouge_l: rouge_l(hyps, refs)?,
        nist: nist(hyps, refs, 5)?,
        slot_accuracy,
        slot_f1,
        dialogues,
        responses: hyps.len(),
        user_turns: pred_tags.len(),
    })
}

/// Generates every response from its gold history, predicts every user
/// turn's tags, and scores both against the gold annotations.
pub fn evaluate(
    model: &Model,
    data: &[PreparedDialogue],
    gen: &GenerationConfig,
    exec: Execution,
) -> Result<EvalOutput> {
    if data.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    gen.validate()?;
    let predictions = try_map_indexed(exec, data, |_, d| model.predict_dialogue(d, gen))?;
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut pred_tags = Vec::new();
    let mut gold_tags = Vec::new();
    for (d, p) in data.iter().zip(&predictions) {
        let gold_responses = d.turns.iter().filter(|t| t.role == Role::System).map(|t| t.tokens.clone());
        refs.extend(gold_responses);
        hyps.extend(p.responses.iter().cloned());
        for t in d.turns.iter().filter(|t| t.role == Role::User) {
            gold_tags.push(
                t.tags
                    .clone()
                    .ok_or_else(|| Error::Validation(format!("dialogue {}: user turn without tags", d.id)))?,
            );
        }
        pred_tags.extend(p.slots.iter().cloned());
    }
    let report = score_corpus(&hyps, &refs, &pred_tags, &gold_tags, data.len())?;
    Ok(EvalOutput { report, predictions })
}
