use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DiagnosticsError;
use crate::autodiff::Element;
use crate::eval::argmax;
use crate::model::{Mode, ModelState};
use crate::seed;
use crate::tokenizer::TokenBatch;

pub const DEFAULT_SAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertaintyRecord {
    pub id: String,
    pub true_label: usize,
    /// Argmax of the mean probability vector.
    pub predicted: usize,
    /// Mean probability of `predicted` over the samples.
    pub certainty: f64,
    /// Standard deviation of that probability over the samples.
    pub spread: f64,
    pub correct: bool,
}

/// Per-sample probability vectors alongside the summary records.
#[derive(Clone, Debug)]
pub struct McDropoutRun {
    pub records: Vec<CertaintyRecord>,
    /// `[sample][example]` probability vectors.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// Mean probability vector per example.
    pub mean_probs: Vec<Vec<f64>>,
}

fn softmax_rows(logits: &[f64], c: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(c)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            exp.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// `samples` stochastic forward passes with dropout active. Sample `s`, chunk
/// `k` draws its masks from a stream derived from `(seed, s, k)`, so results
/// do not depend on thread scheduling.
pub fn mc_dropout<T: Element>(
    model: &ModelState<T>,
    batch: &TokenBatch,
    ids: &[String],
    samples: usize,
    seed: u64,
    chunk: usize,
) -> Result<McDropoutRun, DiagnosticsError> {
    if samples == 0 {
        return Err(DiagnosticsError::SampleCount);
    }
    if batch.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let truths = batch.labels.as_ref().ok_or(crate::model::ModelError::MissingLabels)?;
    if ids.len() != batch.rows() {
        return Err(DiagnosticsError::Dimension(format!(
            "{} ids for {} rows",
            ids.len(),
            batch.rows()
        )));
    }
    let chunks: Vec<TokenBatch> = batch.chunks(chunk.max(1)).collect();
    let c = model.config().n_classes;
    let per_sample: Vec<Vec<Vec<f64>>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut probs = Vec::with_capacity(batch.rows());
            for (k, b) in chunks.iter().enumerate() {
                let mut rng = seed::rng(seed, "mc-dropout", &[s as u64, k as u64]);
                let out = model.forward(b, Mode::McDropout, Some(&mut rng))?;
                probs.extend(softmax_rows(&out.logits.to_f64_vec(), c));
            }
            Ok(probs)
        })
        .collect::<Result<_, DiagnosticsError>>()?;
    let n = batch.rows();
    // Running means: identical samples leave the mean bit-exact.
    let mut mean_probs = vec![vec![0.0; c]; n];
    for (k, sample) in per_sample.iter().enumerate() {
        for (m, p) in mean_probs.iter_mut().zip(sample) {
            for (a, b) in m.iter_mut().zip(p) {
                *a += (b - *a) / (k + 1) as f64;
            }
        }
    }
    let records = (0..n)
        .map(|i| {
            let predicted = argmax(&mean_probs[i]);
            let certainty = mean_probs[i][predicted];
            let var = per_sample
                .iter()
                .map(|s| (s[i][predicted] - certainty).powi(2))
                .sum::<f64>()
                / samples as f64;
            CertaintyRecord {
                id: ids[i].clone(),
                true_label: truths[i],
                predicted,
                certainty,
                spread: var.sqrt(),
                correct: predicted == truths[i],
            }
        })
        .collect();
    Ok(McDropoutRun {
        records,
        samples: per_sample,
        mean_probs,
    })
}

/// `id,true,predicted,certainty,spread,correct` rows.
pub fn write_certainty_csv(records: &[CertaintyRecord], labels: &[String], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "true", "predicted", "certainty", "spread", "correct"])?;
    let name = |l: usize| labels.get(l).cloned().unwrap_or_else(|| l.to_string());
    for r in records {
        w.write_record([
            r.id.clone(),
            name(r.true_label),
            name(r.predicted),
            format!("{:.6}", r.certainty),
            format!("{:.6}", r.spread),
            r.correct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Eval-mode last-layer `[CLS]` states, one row per input in order.
pub fn extract_cls<T: Element>(
    model: &ModelState<T>,
    batch: &TokenBatch,
    chunk: usize,
) -> Result<Vec<Vec<f64>>, DiagnosticsError> {
    if batch.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let d = model.config().d_model;
    let chunks: Vec<TokenBatch> = batch.chunks(chunk.max(1)).collect();
    let parts = chunks
        .par_iter()
        .map(|b| {
            let out = model.forward(b, Mode::Eval, None)?;
            Ok(out
                .cls_hidden
                .to_f64_vec()
                .chunks(d)
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, DiagnosticsError>>()?;
    Ok(parts.into_iter().flatten().collect())
}
