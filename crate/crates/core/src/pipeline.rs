//! End-to-end runs: vocabulary construction, training, evaluation, and the ablation grid.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::corpus::{DialogueRecord, GeneratedCorpus};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{FeatureTable, Model};
use crate::train::{train, EpochLog, TrainOptions, TrainOutcome};
use crate::textcore::Vocabulary;

/// Catalog, knowledge base and the three dialogue splits.
pub type Dataset = GeneratedCorpus;

/// Vocabulary over every turn of the given dialogues.
pub fn build_vocab(records: &[DialogueRecord], min_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(records.iter().flat_map(|d| d.turns.iter().map(|t| t.tokens.clone())), min_count)
}

/// Result of [`run_experiment`].
pub struct Experiment {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Builds the vocabulary from the training split, trains, and evaluates on the test split.
pub fn run_experiment(
    cfg: &RunConfig,
    data: &Dataset,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Experiment> {
    let vocab = build_vocab(&data.train, cfg.min_count)?;
    let mut model = Model::new(cfg.clone(), vocab)?;
    let features = FeatureTable::new(&data.catalog, cfg.d_img)?;
    let train_set = model.prepare_all(&data.train, &features, &data.kb, opts.exec)?;
    let valid_set = model.prepare_all(&data.valid, &features, &data.kb, opts.exec)?;
    let test_set = model.prepare_all(&data.test, &features, &data.kb, opts.exec)?;
    let outcome = train(&mut model, &train_set, &valid_set, opts, on_epoch)?;
    let report = evaluate(&model, &test_set, &cfg.gen, opts.exec)?.report;
    Ok(Experiment { model, outcome, report })
}

/// The eight ±SA × ±KB × ±contextual-embedding configurations derived from `base`.
pub fn ablation_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut out = Vec::with_capacity(8);
    for use_sa in [true, false] {
        for use_kb in [true, false] {
            for use_pgpt in [true, false] {
                out.push(RunConfig {
                    use_sa,
                    use_kb,
                    use_pgpt,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub config: RunConfig,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
}

impl AblationRow {
    pub fn stat(&self, f: impl Fn(&EvalReport) -> f64) -> (f64, f64) {
        let xs: Vec<f64> = self.reports.iter().map(f).collect();
        mean_std(&xs)
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

impl AblationReport {
    /// Plain-text table of mean ± std per configuration.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds: {}", seeds.join(","));
        let _ = writeln!(
            s,
            "{:<9} {:>3} {:>3} {:>5}  {:>17}  {:>17}  {:>17}  {:>17}",
            "variant", "SA", "KB", "PGPT", "BLEU-4", "ROUGE-L", "slot acc", "slot F1"
        );
        let mark = |b: bool| if b { "+" } else { "-" };
        for row in &self.rows {
            let c = &row.config;
            let cell = |f: &dyn Fn(&EvalReport) -> f64| {
                let (m, sd) = row.stat(f);
                format!("{m:.4} ± {sd:.4}")
            };
            let _ = writeln!(
                s,
                "{:<9} {:>3} {:>3} {:>5}  {:>17}  {:>17}  {:>17}  {:>17}",
                c.variant.name(),
                mark(c.use_sa),
                mark(c.use_kb),
                mark(c.use_pgpt),
                cell(&|r| r.bleu4),
                cell(&|r| r.rouge_l),
                cell(&|r| r.slot_accuracy),
                cell(&|r| r.slot_f1),
            );
        }
        s
    }
}

/// Trains and evaluates every configuration in `configs` once per seed.
pub fn run_grid(
    configs: &[RunConfig],
    seeds: &[u64],
    data: &Dataset,
    exec: Execution,
    progress: &mut dyn FnMut(&RunConfig, &EvalReport),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Input("ablation needs at least one seed".into()));
    }
    let opts = TrainOptions {
        exec,
        valid_generation: false,
    };
    let mut rows = Vec::with_capacity(configs.len());
    for base in configs {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = RunConfig { seed, ..base.clone() };
            let exp = run_experiment(&cfg, data, &opts, &mut |_| {})?;
            progress(&cfg, &exp.report);
            reports.push(exp.report);
        }
        rows.push(AblationRow {
            config: base.clone(),
            reports,
        });
    }
    Ok(AblationReport {
        rows,
        seeds: seeds.to_vec(),
    })
}

/// The full 2×2×2 grid for `base.variant`.
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    data: &Dataset,
    exec: Execution,
    progress: &mut dyn FnMut(&RunConfig, &EvalReport),
) -> Result<AblationReport> {
    run_grid(&ablation_grid(base), seeds, data, exec, progress)
}
