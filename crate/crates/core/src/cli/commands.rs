use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use super::config::{required, RunConfig};
use super::{CliError, Command, DataArgs};
use crate::corpus::synthetic::{keyword_corpus, SyntheticConfig};
use crate::corpus::{self, balance_ratio, bootstrap_label, compute_stats, Dataset, Partition, RuleSet, SplitSet};
use crate::diagnostics::{self, svg};
use crate::ensemble::{self, EnsembleReport};
use crate::eval;
use crate::model::{ModelConfig, ModelState};
use crate::pipeline::{encode_ids, prepare};
use crate::seed;
use crate::text::{default_stopwords, parse_stopwords};
use crate::tokenizer::{build_vocab, TokenBatch, Vocabulary};
use crate::trainer::{self, load_checkpoint, Checkpoint, TrainData, TrainOptions};

const VOCAB_FILE: &str = "vocab.txt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime("cli", format!("{}: {e}", path.display()))
}

fn output_dir(config: &RunConfig) -> Result<&Path, CliError> {
    let dir = config.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write(path, text + "\n")
}

/// Runs a CSV writer into a file.
fn write_csv<E: std::fmt::Display>(path: &Path, f: impl FnOnce(fs::File) -> Result<(), E>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f(file).map_err(|e| io_err(path, e))
}

fn parse_partition(flag: Option<String>, config: &RunConfig) -> Result<Partition, CliError> {
    match flag {
        Some(s) => s.parse().map_err(CliError::usage),
        None => Ok(config.partition),
    }
}

fn load_split(path: &Path) -> Result<SplitSet, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    SplitSet::from_json(&text).map_err(|e| CliError::runtime("corpus", format!("{}: {e}", path.display())))
}

/// Existing path required; a missing one is a usage error.
fn existing(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::usage(format!("{what} {} does not exist", path.display())))
    }
}

struct Inputs {
    dataset: Dataset,
    split: SplitSet,
}

fn load_inputs(data: &DataArgs, config: &RunConfig) -> Result<Inputs, CliError> {
    let dataset_path = existing(required(data.dataset.clone(), &config.dataset, "dataset")?, "dataset")?;
    let split_path = existing(required(data.split.clone(), &config.split, "split")?, "split manifest")?;
    Ok(Inputs {
        dataset: corpus::load_dataset(dataset_path)?,
        split: load_split(&split_path)?,
    })
}

/// Vocabulary from the flag or config, else `vocab.txt` next to or above the
/// checkpoint.
fn locate_vocab(data: &DataArgs, config: &RunConfig, checkpoint: Option<&Path>) -> Result<Vocabulary, CliError> {
    if let Some(p) = data.vocab.clone().or_else(|| config.vocab.clone()) {
        return Ok(Vocabulary::load(existing(p, "vocabulary")?)?);
    }
    if let Some(ck) = checkpoint {
        for dir in [Some(ck), ck.parent()].into_iter().flatten() {
            let p = dir.join(VOCAB_FILE);
            if p.exists() {
                return Ok(Vocabulary::load(p)?);
            }
        }
    }
    Err(CliError::usage(
        "missing --vocab (no vocab.txt found next to the checkpoint)",
    ))
}

fn load_member(path: &Path) -> Result<Checkpoint, CliError> {
    let path = existing(path.to_owned(), "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn check_vocab(ck: &Checkpoint, vocab: &Vocabulary, path: &Path) -> Result<(), CliError> {
    match &ck.vocab_sha256 {
        Some(h) if *h != vocab.content_hash() => Err(CliError::runtime(
            "tokenizer",
            format!(
                "vocabulary does not match the one checkpoint {} was trained with",
                path.display()
            ),
        )),
        _ => Ok(()),
    }
}

/// Checkpoint, vocabulary and the encoded partition it is applied to.
struct Scored {
    checkpoint: Checkpoint,
    batch: TokenBatch,
    ids: Vec<String>,
}

fn load_scored(
    data: &DataArgs,
    flag: Option<PathBuf>,
    partition: Partition,
    config: &RunConfig,
) -> Result<Scored, CliError> {
    let ck_path = existing(required(flag, &config.checkpoint, "checkpoint")?, "checkpoint")?;
    let inputs = load_inputs(data, config)?;
    let checkpoint = load_checkpoint(&ck_path)?;
    let vocab = locate_vocab(data, config, Some(&ck_path))?;
    check_vocab(&checkpoint, &vocab, &ck_path)?;
    let ids = inputs.split.ids(partition).to_vec();
    let batch = encode_ids(
        &inputs.dataset,
        &ids,
        &vocab,
        &checkpoint.labels,
        checkpoint.model.config().max_len,
    )?;
    Ok(Scored { checkpoint, batch, ids })
}

pub(super) fn dispatch(command: Command, mut config: RunConfig) -> Result<(), CliError> {
    match command {
        Command::Stats { dataset, stopwords } => {
            let path = existing(required(dataset, &config.dataset, "dataset")?, "dataset")?;
            let ds = corpus::load_dataset(path)?;
            let stop = match stopwords.or(config.stopwords.clone()) {
                Some(p) => parse_stopwords(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?),
                None => default_stopwords(),
            };
            let report = compute_stats(&ds, &stop)?;
            let balance = balance_ratio(&ds)?;
            let out = output_dir(&config)?;
            write_csv(&out.join("stats.csv"), |f| report.write_csv(f))?;
            write_json(
                &out.join("balance.json"),
                &json!({
                    "ratio": format!("{:.2}", balance.ratio),
                    "display": balance.display_ratio(),
                    "max_category": balance.max_category,
                    "max_items": balance.max_items,
                    "min_category": balance.min_category,
                    "min_items": balance.min_items,
                    "bound": format!("1:{}", corpus::BALANCE_BOUND),
                    "within_bound": balance.within_bound,
                }),
            )?;
            println!(
                "items {}  balance {} (max {} {}, min {} {})  bound 1:{} {}",
                report.total.items,
                balance.display_ratio(),
                balance.max_category,
                balance.max_items,
                balance.min_category,
                balance.min_items,
                corpus::BALANCE_BOUND,
                if balance.within_bound { "ok" } else { "VIOLATED" }
            );
        }
        Command::Bootstrap { dataset, rules } => {
            let ds_path = existing(required(dataset, &config.dataset, "dataset")?, "dataset")?;
            let rules_path = existing(required(rules, &config.rules, "rules")?, "rules")?;
            let ds = corpus::load_dataset(ds_path)?;
            let declared = (!ds.labels().is_empty()).then(|| ds.labels());
            let rules = RuleSet::load(rules_path, declared)?;
            let mut lines = String::new();
            let mut matched = 0;
            for a in ds.articles() {
                let candidates = bootstrap_label(&rules, a);
                matched += usize::from(!candidates.is_empty());
                lines.push_str(&json!({"id": a.id, "candidates": candidates}).to_string());
                lines.push('\n');
            }
            write(&output_dir(&config)?.join("bootstrap.jsonl"), lines)?;
            println!("{matched} of {} articles matched at least one rule", ds.len());
        }
        Command::Split {
            dataset,
            ratios,
            stratify,
        } => {
            let seed = config.require_seed("split")?;
            let path = existing(required(dataset, &config.dataset, "dataset")?, "dataset")?;
            let ds = corpus::load_dataset(path)?;
            let ratios = match ratios {
                Some(r) => [r[0], r[1], r[2]],
                None => config.ratios,
            };
            let s = corpus::split(&ds, seed, ratios, stratify || config.stratify)?;
            write(&output_dir(&config)?.join("split.json"), s.to_json())?;
            println!(
                "train {}  validation {}  test {}",
                s.train.len(),
                s.validation.len(),
                s.test.len()
            );
        }
        Command::BuildVocab { data, vocab_size } => {
            let inputs = load_inputs(&data, &config)?;
            let vocab = build_vocab(
                inputs.dataset.select(&inputs.split.train)?,
                vocab_size.unwrap_or(config.vocab_size),
            )?;
            vocab.save(output_dir(&config)?.join(VOCAB_FILE))?;
            println!("{} tokens, sha256 {}", vocab.len(), vocab.content_hash());
        }
        Command::Train {
            data,
            lr,
            batch_size,
            max_epochs,
            patience,
            weight_decay,
            max_len,
            resume,
        } => {
            let seed = config.require_seed("train")?;
            let t = &mut config.train;
            t.seed = seed;
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.max_epochs = max_epochs.unwrap_or(t.max_epochs);
            t.patience = patience.unwrap_or(t.patience);
            t.weight_decay = weight_decay.unwrap_or(t.weight_decay);
            config.max_len = max_len.unwrap_or(config.max_len);
            run_train(&data, &config, resume)?;
        }
        Command::Evaluate {
            data,
            checkpoint,
            partition,
        } => {
            let partition = parse_partition(partition, &config)?;
            let s = load_scored(&data, checkpoint, partition, &config)?;
            let chunk = config.train.eval_batch_size;
            let (report, cm) = eval::evaluate(&s.checkpoint.model, &s.batch, &s.checkpoint.labels, chunk)?;
            let out = output_dir(&config)?;
            write_json(&out.join("report.json"), &report)?;
            write_csv(&out.join("confusion.csv"), |f| cm.write_csv(f))?;
            match eval::normalize_rows(&cm) {
                Ok(_) => write_csv(&out.join("confusion_normalized.csv"), |f| {
                    eval::write_normalized_csv(&cm, f)
                })?,
                Err(e) => eprintln!("warning: normalized confusion matrix skipped: {e}"),
            }
            write_csv(&out.join("per_category.csv"), |f| report.write_per_category_csv(f))?;
            println!(
                "{} examples  accuracy {:.4}  micro F1 {:.4}  macro F1 {:.4}",
                report.examples, report.accuracy, report.micro.f1, report.macro_avg.f1
            );
        }
        Command::McDropout {
            data,
            checkpoint,
            partition,
            samples,
        } => {
            let seed = config.require_seed("mc-dropout")?;
            let partition = parse_partition(partition, &config)?;
            let s = load_scored(&data, checkpoint, partition, &config)?;
            let samples = samples.unwrap_or(config.mc_samples);
            let run = diagnostics::mc_dropout(
                &s.checkpoint.model,
                &s.batch,
                &s.ids,
                samples,
                seed,
                config.train.eval_batch_size,
            )?;
            let out = output_dir(&config)?;
            write_csv(&out.join("mc_dropout.csv"), |f| {
                diagnostics::write_certainty_csv(&run.records, &s.checkpoint.labels, f)
            })?;
            write(&out.join("mc_dropout.svg"), svg::certainty_strips(&run.records))?;
            let mean = |flag: bool| {
                let v: Vec<f64> = run
                    .records
                    .iter()
                    .filter(|r| r.correct == flag)
                    .map(|r| r.certainty)
                    .collect();
                (
                    v.len(),
                    if v.is_empty() {
                        None
                    } else {
                        Some(v.iter().sum::<f64>() / v.len() as f64)
                    },
                )
            };
            let (n_ok, ok) = mean(true);
            let (n_bad, bad) = mean(false);
            write_json(
                &out.join("mc_dropout_summary.json"),
                &json!({
                    "samples": samples,
                    "dropout_rate": s.checkpoint.model.config().dropout_rate,
                    "correct": {"count": n_ok, "mean_certainty": ok},
                    "incorrect": {"count": n_bad, "mean_certainty": bad},
                }),
            )?;
            println!(
                "{samples} samples  correct {n_ok} (mean certainty {})  incorrect {n_bad} (mean certainty {})",
                ok.map_or("-".into(), |v| format!("{v:.4}")),
                bad.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Tsne {
            data,
            checkpoint,
            partition,
            perplexity,
            iterations,
        } => {
            let seed = config.require_seed("tsne")?;
            let partition = parse_partition(partition, &config)?;
            let s = load_scored(&data, checkpoint, partition, &config)?;
            let mut tc = config.tsne.clone();
            tc.seed = seed;
            tc.perplexity = perplexity.unwrap_or(tc.perplexity);
            tc.iterations = iterations.unwrap_or(tc.iterations);
            let points = diagnostics::extract_cls(&s.checkpoint.model, &s.batch, config.train.eval_batch_size)?;
            let labels = s.batch.labels.clone().unwrap_or_default();
            let proj = diagnostics::tsne(&points, &labels, &tc)?;
            let sil = diagnostics::silhouette(&proj.coords, &labels);
            let out = output_dir(&config)?;
            write_csv(&out.join("tsne.csv"), |f| {
                proj.write_csv(&s.ids, &s.checkpoint.labels, f)
            })?;
            write(&out.join("tsne.svg"), svg::scatter(&proj, &s.checkpoint.labels))?;
            write_json(
                &out.join("tsne.json"),
                &json!({
                    "initial_kl": proj.initial_kl,
                    "final_kl": proj.final_kl,
                    "silhouette": sil,
                    "config": tc,
                }),
            )?;
            println!(
                "{} points  KL {:.4} -> {:.4}  silhouette {:.3}",
                points.len(),
                proj.initial_kl,
                proj.final_kl,
                sil
            );
        }
        Command::Ensemble {
            data,
            members,
            partition,
        } => {
            let seed = config.require_seed("ensemble")?;
            let partition = parse_partition(partition, &config)?;
            run_ensemble(&data, members, partition, seed, &config)?;
        }
        Command::Synth {
            classes,
            per_class,
            label_noise,
        } => {
            let seed = config.require_seed("synth")?;
            if classes < 2 || per_class == 0 || !(0.0..1.0).contains(&label_noise) {
                return Err(CliError::usage(
                    "synth needs classes ≥ 2, per_class ≥ 1 and label_noise in [0, 1)",
                ));
            }
            let ds = keyword_corpus(&SyntheticConfig {
                classes,
                per_class,
                label_noise,
                seed,
                ..Default::default()
            });
            let mut text = String::new();
            for a in ds.articles() {
                text.push_str(&serde_json::to_string(a).map_err(|e| CliError::runtime("corpus", e))?);
                text.push('\n');
            }
            write(&output_dir(&config)?.join("synthetic.jsonl"), text)?;
            println!("{} articles in {} categories", ds.len(), classes);
        }
    }
    Ok(())
}

fn run_train(data: &DataArgs, config: &RunConfig, resume: bool) -> Result<(), CliError> {
    let inputs = load_inputs(data, config)?;
    let vocab = match data.vocab.clone().or_else(|| config.vocab.clone()) {
        Some(p) => Some(Vocabulary::load(existing(p, "vocabulary")?)?),
        None => None,
    };
    let prepared = prepare(&inputs.dataset, &inputs.split, vocab, config.vocab_size, config.max_len)?;
    let out = output_dir(config)?;
    prepared.vocab.save(out.join(VOCAB_FILE))?;
    let model_config = ModelConfig {
        vocab_size: prepared.vocab.len(),
        max_len: config.max_len,
        n_classes: prepared.labels.len(),
        ..config.model.clone()
    };
    let model = ModelState::init(&model_config, seed::derive(config.train.seed, "init", &[]))?;
    eprintln!(
        "training {} parameters on {} examples ({} validation), {} classes",
        model.param_count(),
        prepared.train.rows(),
        prepared.validation.rows(),
        prepared.labels.len()
    );
    let started = Instant::now();
    let outcome = trainer::train(
        model,
        &TrainData {
            train: &prepared.train,
            validation: &prepared.validation,
            labels: &prepared.labels,
        },
        &config.train,
        &TrainOptions {
            run_dir: Some(out.to_owned()),
            resume,
            vocab_sha256: Some(prepared.vocab.content_hash()),
        },
        |r| {
            eprintln!(
                "epoch {:3}  train_loss {:.4}  val_loss {:.4}  val_f1 {:.4}  ({:.1}s)",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.val_f1,
                started.elapsed().as_secs_f64()
            )
        },
    )?;
    let h = &outcome.history;
    let (test_report, _) = eval::evaluate(
        &outcome.best.model,
        &prepared.test,
        &prepared.labels,
        config.train.eval_batch_size,
    )?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "best_epoch": h.best_epoch,
            "stopped_epoch": h.stopped_epoch,
            "early_stopped": h.early_stopped,
            "best_validation_f1": outcome.best.validation_f1,
            "test": test_report,
            "model": outcome.best.model.config(),
            "train": config.train,
        }),
    )?;
    println!(
        "best epoch {}  stopped at {}{}  validation F1 {:.4}  test micro F1 {:.4}",
        h.best_epoch,
        h.stopped_epoch,
        if h.early_stopped { " (early stop)" } else { "" },
        outcome.best.validation_f1.unwrap_or(f64::NAN),
        test_report.micro.f1
    );
    Ok(())
}

fn run_ensemble(
    data: &DataArgs,
    members: Option<PathBuf>,
    partition: Partition,
    seed: u64,
    config: &RunConfig,
) -> Result<(), CliError> {
    let list_path = existing(required(members, &config.members, "members")?, "member list")?;
    let text = fs::read_to_string(&list_path).map_err(|e| io_err(&list_path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", list_path.display())))?;
    let reps: Vec<Vec<PathBuf>> = match serde_json::from_value::<Vec<PathBuf>>(value.clone()) {
        Ok(single) => vec![single],
        Err(_) => serde_json::from_value(value).map_err(|_| {
            CliError::usage(format!(
                "{}: expected an array of checkpoint paths or an array of such arrays",
                list_path.display()
            ))
        })?,
    };
    let inputs = load_inputs(data, config)?;
    let ids = inputs.split.ids(partition).to_vec();
    let mut reports: Vec<EnsembleReport> = Vec::with_capacity(reps.len());
    for (r, paths) in reps.iter().enumerate() {
        let mut members = Vec::with_capacity(paths.len());
        for (i, p) in paths.iter().enumerate() {
            let ck = load_member(p).map_err(|e| CliError {
                message: format!("member M{} ({}): {}", i + 1, p.display(), e.message),
                ..e
            })?;
            members.push((format!("M{}", i + 1), ck));
        }
        let (_, first) = members.first().ok_or_else(|| CliError::usage("member list is empty"))?;
        let vocab = locate_vocab(data, config, Some(&paths[0]))?;
        check_vocab(first, &vocab, &paths[0])?;
        let labels = first.labels.clone();
        let batch = encode_ids(&inputs.dataset, &ids, &vocab, &labels, first.model.config().max_len)?;
        let report = ensemble::ensemble_eval(
            &members,
            &batch,
            &labels,
            seed::derive(seed, "ensemble", &[r as u64]),
            config.train.eval_batch_size,
        )?;
        reports.push(report);
    }
    let summary = ensemble::summarize(&reports)?;
    let out = output_dir(config)?;
    write_csv(&out.join("ensemble.csv"), |f| summary.write_csv(f))?;
    let runs: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "members": r.members.iter().map(|(n, m)| json!({"name": n, "report": m})).collect::<Vec<_>>(),
                "ensemble": r.ensemble,
            })
        })
        .collect();
    write_json(&out.join("ensemble.json"), &json!({ "repetitions": runs }))?;
    let cells: Vec<String> = summary
        .columns
        .iter()
        .zip(&summary.f1)
        .map(|(c, v)| format!("{c} {:.4}", v.mean))
        .collect();
    println!("F1 over {} repetition(s): {}", summary.repetitions, cells.join("  "));
    Ok(())
}
