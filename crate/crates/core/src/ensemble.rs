//! Unweighted majority vote over member predictions.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::eval::{self, EvalError, EvalReport};
use crate::seed;
use crate::tokenizer::TokenBatch;
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("cannot vote over an empty list")]
    EmptyVotes,
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("member {member}: {reason}")]
    Incompatible { member: String, reason: String },
    #[error("member {member}: {source}")]
    Member { member: String, source: EvalError },
    #[error("test batch has no labels")]
    MissingLabels,
    #[error("repetition {index} has members {found:?}, expected {expected:?}")]
    RepetitionLayout {
        index: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Most frequent label; ties are broken uniformly at random among the tied
/// labels. The RNG is only consulted on ties.
pub fn vote(votes: &[usize], rng: &mut impl Rng) -> Result<usize, EnsembleError> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &v in votes {
        match counts.iter_mut().find(|(l, _)| *l == v) {
            Some((_, c)) => *c += 1,
            None => counts.push((v, 1)),
        }
    }
    let top = counts.iter().map(|&(_, c)| c).max().ok_or(EnsembleError::EmptyVotes)?;
    let mut tied: Vec<usize> = counts.iter().filter(|&&(_, c)| c == top).map(|&(l, _)| l).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    tied.sort_unstable();
    Ok(tied[rng.gen_range(0..tied.len())])
}

/// Votes per example over `member_preds[member][example]`. Example `i` breaks
/// ties with a stream derived from `(seed, i)`.
pub fn vote_all(member_preds: &[Vec<usize>], seed: u64) -> Result<Vec<usize>, EnsembleError> {
    let n = member_preds.first().map(Vec::len).ok_or(EnsembleError::NoMembers)?;
    (0..n)
        .map(|i| {
            let votes: Vec<usize> = member_preds.iter().map(|m| m[i]).collect();
            vote(&votes, &mut seed::rng(seed, "vote", &[i as u64]))
        })
        .collect()
}

/// Member reports next to the ensemble report.
#[derive(Clone, Debug)]
pub struct EnsembleReport {
    pub members: Vec<(String, EvalReport)>,
    pub ensemble: EvalReport,
}

/// Checks that every member shares the first member's labels, vocabulary
/// and sequence length.
pub fn check_compatible(members: &[(String, Checkpoint)], labels: &[String]) -> Result<(), EnsembleError> {
    let (_, first) = members.first().ok_or(EnsembleError::NoMembers)?;
    for (name, ck) in members {
        let bad = |reason: String| {
            Err(EnsembleError::Incompatible {
                member: name.clone(),
                reason,
            })
        };
        if ck.labels != labels {
            return bad(format!("label set {:?} differs from {:?}", ck.labels, labels));
        }
        if ck.vocab_sha256 != first.vocab_sha256 {
            return bad("trained with a different vocabulary".into());
        }
        if ck.model.config().max_len != first.model.config().max_len {
            return bad(format!(
                "max_len {} differs from {}",
                ck.model.config().max_len,
                first.model.config().max_len
            ));
        }
    }
    Ok(())
}

/// Evaluates each member on `test` (concurrently), votes, and evaluates the vote.
pub fn ensemble_eval(
    members: &[(String, Checkpoint)],
    test: &TokenBatch,
    labels: &[String],
    seed: u64,
    chunk: usize,
) -> Result<EnsembleReport, EnsembleError> {
    check_compatible(members, labels)?;
    let truths = test.labels.as_ref().ok_or(EnsembleError::MissingLabels)?;
    let preds = members
        .par_iter()
        .map(|(name, ck)| {
            let wrap = |source| EnsembleError::Member {
                member: name.clone(),
                source,
            };
            let p = eval::predict(&ck.model, test, chunk).map_err(wrap)?;
            let cm = eval::confusion(&p.predicted, truths, labels).map_err(wrap)?;
            let mut report = eval::metrics(&cm).map_err(wrap)?;
            report.loss = Some(p.losses.iter().sum::<f64>() / p.losses.len() as f64);
            Ok((p.predicted, report))
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    let member_preds: Vec<Vec<usize>> = preds.iter().map(|(p, _)| p.clone()).collect();
    let voted = vote_all(&member_preds, seed)?;
    let ensemble = eval::metrics(&eval::confusion(&voted, truths, labels)?)?;
    Ok(EnsembleReport {
        members: members
            .iter()
            .zip(preds)
            .map(|((n, _), (_, r))| (n.clone(), r))
            .collect(),
        ensemble,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Per-column mean ± population std over repetitions.
#[derive(Clone, Debug)]
pub struct RepetitionSummary {
    /// Member names followed by `Ensemble`.
    pub columns: Vec<String>,
    pub f1: Vec<MeanStd>,
    pub accuracy: Vec<MeanStd>,
    pub repetitions: usize,
}

pub fn summarize(reps: &[EnsembleReport]) -> Result<RepetitionSummary, EnsembleError> {
    let first = reps.first().ok_or(EnsembleError::NoMembers)?;
    let names: Vec<String> = first.members.iter().map(|(n, _)| n.clone()).collect();
    for (index, r) in reps.iter().enumerate() {
        let found: Vec<String> = r.members.iter().map(|(n, _)| n.clone()).collect();
        if found != names {
            return Err(EnsembleError::RepetitionLayout {
                index,
                expected: names,
                found,
            });
        }
    }
    let column = |f: &dyn Fn(&EnsembleReport) -> Vec<f64>| -> Vec<MeanStd> {
        let per_rep: Vec<Vec<f64>> = reps.iter().map(f).collect();
        (0..=names.len())
            .map(|c| mean_std(&per_rep.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .collect()
    };
    let pick = |g: fn(&EvalReport) -> f64| {
        move |r: &EnsembleReport| r.members.iter().map(|(_, m)| g(m)).chain([g(&r.ensemble)]).collect()
    };
    Ok(RepetitionSummary {
        columns: names.iter().cloned().chain(["Ensemble".to_owned()]).collect(),
        f1: column(&pick(|r| r.micro.f1)),
        accuracy: column(&pick(|r| r.accuracy)),
        repetitions: reps.len(),
    })
}

impl RepetitionSummary {
    /// One column per member plus `Ensemble`; rows hold means and stds.
    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(std::iter::once(String::new()).chain(self.columns.iter().cloned()))?;
        for (name, vals) in [("F1", &self.f1), ("Accuracy", &self.accuracy)] {
            w.write_record(std::iter::once(name.to_owned()).chain(vals.iter().map(|v| format!("{:.4}", v.mean))))?;
            w.write_record(std::iter::once(format!("{name}_std")).chain(vals.iter().map(|v| format!("{:.4}", v.std))))?;
        }
        w.flush()?;
        Ok(())
    }
}
