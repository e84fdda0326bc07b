use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use slotgen::checkpoint;
use slotgen::config::RunConfig;
use slotgen::corpus::{generate_corpus, read_dataset, split_path, write_dataset, CorpusSpec, GeneratedCorpus, Role};
use slotgen::decoder::GenerationConfig;
use slotgen::metrics::evaluate;
use slotgen::model::{FeatureTable, Model, PreparedDialogue};
use slotgen::pipeline::{run_ablation, run_experiment};
use slotgen::slots::format_tag_line;
use slotgen::train::TrainOptions;
use slotgen::{Error, Execution};

use crate::{chat, Command, GenArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const ABLATION_FILE: &str = "ablation.txt";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments (exit code 1).
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Lib(Error::Input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generation(base: &GenerationConfig, args: &GenArgs) -> CliResult<GenerationConfig> {
    let gen = GenerationConfig {
        beam_width: args.beam.unwrap_or(base.beam_width),
        max_len: args.max_len.unwrap_or(base.max_len),
        ..*base
    };
    gen.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(gen)
}

fn split_records<'a>(data: &'a GeneratedCorpus, split: &str) -> CliResult<&'a [slotgen::corpus::DialogueRecord]> {
    match split {
        "train" => Ok(&data.train),
        "valid" => Ok(&data.valid),
        "test" => Ok(&data.test),
        other => Err(CliError::Usage(format!("unknown split {other:?} (expected train, valid or test)"))),
    }
}

fn prepare_split(
    model: &Model,
    data: &GeneratedCorpus,
    split: &str,
    exec: Execution,
) -> CliResult<Vec<PreparedDialogue>> {
    let records = split_records(data, split)?;
    let features = FeatureTable::new(&data.catalog, model.config.d_img)?;
    Ok(model.prepare_all(records, &features, &data.kb, exec)?)
}

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenCorpus {
            out,
            seed,
            catalog_size,
            train,
            valid,
            test,
            turn_pairs,
            kb_rate,
            exec,
        } => {
            let spec = CorpusSpec {
                catalog_size,
                train,
                valid,
                test,
                turn_pairs,
                kb_rate,
                seed,
            };
            let data = generate_corpus(&spec, exec.exec())?;
            write_dataset(&out, &data)?;
            println!(
                "wrote {} catalog items, {} train / {} valid / {} test dialogues to {}",
                data.catalog.len(),
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            overrides,
            exec,
        } => {
            let cfg = load_config(config.as_deref(), seed, &overrides)?;
            let dataset = read_dataset(&data)?;
            mkdir(&out)?;
            let log_path = out.join(TRAIN_LOG_FILE);
            let mut log = String::new();
            let opts = TrainOptions {
                exec: exec.exec(),
                valid_generation: !dataset.valid.is_empty(),
            };
            let exp = run_experiment(&cfg, &dataset, &opts, &mut |l| {
                println!("{l}");
                log.push_str(&l.to_string());
                log.push('\n');
            })?;
            log.push_str(&format!("kept epoch {}\n", exp.outcome.best_epoch));
            write_file(&log_path, &log)?;
            let ckpt = out.join(CHECKPOINT_FILE);
            checkpoint::save(&exp.model, &ckpt)?;
            println!("kept epoch {}; checkpoint {}", exp.outcome.best_epoch, ckpt.display());
            if !dataset.test.is_empty() {
                print!("test split:\n{}", exp.report.to_text());
            }
            Ok(())
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            out,
            gen,
            exec,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let gen = generation(&model.config.gen, &gen)?;
            let dataset = read_dataset(&data)?;
            let prepared = prepare_split(&model, &dataset, &split, exec.exec())?;
            let report = evaluate(&model, &prepared, &gen, exec.exec())?.report;
            let dir = out.unwrap_or_else(|| ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            mkdir(&dir)?;
            write_file(&dir.join(REPORT_TEXT_FILE), &report.to_text())?;
            write_file(&dir.join(REPORT_KV_FILE), &report.to_kv())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::PredictSlots {
            checkpoint: ckpt,
            data,
            split,
            out,
            exec,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = read_dataset(&data)?;
            let prepared = prepare_split(&model, &dataset, &split, exec.exec())?;
            let tagged = slotgen::exec::try_map_indexed(exec.exec(), &prepared, |_, d| model.tag_dialogue(d))?;
            let mut text = String::new();
            for (d, slots) in prepared.iter().zip(&tagged) {
                let users = d.turns.iter().filter(|t| t.role == Role::User);
                for (t, tags) in users.zip(slots) {
                    text.push_str(&format_tag_line(&t.tokens, tags)?);
                    text.push('\n');
                }
            }
            match out {
                Some(p) => write_file(&p, &text)?,
                None => io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| io_err(Path::new("<stdout>"), e))?,
            }
            Ok(())
        }
        Command::Chat {
            checkpoint: ckpt,
            data,
            gen,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let gen = generation(&model.config.gen, &gen)?;
            let catalog = slotgen::corpus::read_catalog(&data.join(slotgen::corpus::CATALOG_FILE))?;
            let kb = slotgen::corpus::read_kb(&data.join(slotgen::corpus::KB_FILE))?;
            let session = chat::Session::new(&model, &catalog, kb, gen)?;
            let stdin = io::stdin();
            let stdout = io::stdout();
            session.run(stdin.lock(), stdout.lock())
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
            overrides,
            exec,
        } => {
            if seeds.is_empty() {
                return Err(CliError::Usage("--seeds needs at least one seed".into()));
            }
            let cfg = load_config(config.as_deref(), None, &overrides)?;
            let dataset = read_dataset(&data)?;
            if dataset.test.is_empty() {
                return Err(Error::Input(format!("{} is empty", split_path(&data, "test").display())).into());
            }
            let report = run_ablation(&cfg, &seeds, &dataset, exec.exec(), &mut |c, r| {
                eprintln!(
                    "sa={} kb={} pgpt={} seed={}: bleu4 {:.4} rouge_l {:.4} slot_f1 {:.4}",
                    c.use_sa, c.use_kb, c.use_pgpt, c.seed, r.bleu4, r.rouge_l, r.slot_f1
                );
            })?;
            let table = report.to_table();
            print!("{table}");
            if let Some(dir) = out {
                mkdir(&dir)?;
                write_file(&dir.join(ABLATION_FILE), &table)?;
            }
            Ok(())
        }
    }
}
