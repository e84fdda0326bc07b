//! Mini-batch training with AdamW, global-norm clipping and best-valid selection.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::evaluate;
use crate::model::{Model, PreparedDialogue};
use crate::numkernel::{AdamW, ParamStore};
use crate::seed::mix;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub valid_bleu4: Option<f64>,
    pub valid_slot_f1: Option<f64>,
    pub seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        write!(
            f,
            "epoch {:>3}  train_loss {:.4}  valid_loss {}  valid_bleu4 {}  valid_slot_f1 {}  ({:.1}s)",
            self.epoch,
            self.train_loss,
            opt(self.valid_loss),
            opt(self.valid_bleu4),
            opt(self.valid_slot_f1),
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub exec: Execution,
    /// Decode the validation set every epoch to report BLEU-4 and slot F1.
    pub valid_generation: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            exec: Execution::default(),
            valid_generation: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (lowest validation loss, or the last epoch without validation data).
    pub best_epoch: usize,
}

/// Trains `model` in place. On return the kept parameters are rounded to
/// `f32` so that a saved checkpoint reproduces the in-memory model exactly.
pub fn train(
    model: &mut Model,
    train: &[PreparedDialogue],
    valid: &[PreparedDialogue],
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let cfg = model.config.clone();
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let epoch_seed = mix(cfg.seed, 0xE90C_0000 + epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&PreparedDialogue> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| mix(epoch_seed, i as u64)).collect();
            let mut res = model.batch_gradients(&batch, &seeds, opts.exec)?;
            if !res.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, batch {b}",
                    res.loss
                )));
            }
            res.grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut model.store, &res.grads)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            loss_sum += res.loss;
            batches += 1;
        }

        let mut log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_loss: None,
            valid_bleu4: None,
            valid_slot_f1: None,
            seconds: 0.0,
        };
        if !valid.is_empty() {
            let vl = model.corpus_loss(valid, opts.exec)?;
            log.valid_loss = Some(vl);
            if opts.valid_generation {
                let out = evaluate(model, valid, &cfg.gen, opts.exec)?;
                log.valid_bleu4 = Some(out.report.bleu4);
                log.valid_slot_f1 = Some(out.report.slot_f1);
            }
            if best.as_ref().is_none_or(|(l, _, _)| vl < *l) {
                best = Some((vl, epoch, model.store.clone()));
            }
        }
        log.seconds = started.elapsed().as_secs_f64();
        on_epoch(&log);
        logs.push(log);
    }

    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => cfg.epochs,
    };
    model.store.round_to_f32();
    Ok(TrainOutcome { logs, best_epoch })
}
