//! Confusion matrices and accuracy / precision / recall / F1 reports.
//!
//! Undefined ratios (zero denominators) are reported as 0. Micro averages pool
//! counts over categories, so for single-label data micro precision, recall
//! and F1 all equal accuracy.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Element;
use crate::model::{Mode, ModelError, ModelState};
use crate::tokenizer::TokenBatch;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and truths ({truths}) differ in length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("label index {index} outside the {n_labels} known labels")]
    UnknownLabel { index: usize, n_labels: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("category \"{0}\" has no examples; its row cannot be normalized")]
    EmptyRow(String),
    #[error("batch has no labels")]
    MissingLabels,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Counts with rows = true label, columns = predicted label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: &[String]) -> Self {
        Self {
            labels: labels.to_vec(),
            counts: vec![vec![0; labels.len()]; labels.len()],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Adds another shard's counts (same label order).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        write_matrix(
            &self.labels,
            self.counts.iter().map(|r| r.iter().map(u64::to_string).collect()),
            out,
        )
    }
}

fn write_matrix(labels: &[String], rows: impl Iterator<Item = Vec<String>>, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("true\\pred".to_owned()).chain(labels.iter().cloned()))?;
    for (label, row) in labels.iter().zip(rows) {
        w.write_record(std::iter::once(label.clone()).chain(row))?;
    }
    w.flush()?;
    Ok(())
}

pub fn confusion(preds: &[usize], truths: &[usize], labels: &[String]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(labels);
    for (&p, &t) in preds.iter().zip(truths) {
        for index in [p, t] {
            if index >= labels.len() {
                return Err(EvalError::UnknownLabel {
                    index,
                    n_labels: labels.len(),
                });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Each row divided by its total.
pub fn normalize_rows(cm: &ConfusionMatrix) -> Result<Vec<Vec<f64>>, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::Empty);
    }
    cm.counts
        .iter()
        .zip(&cm.labels)
        .map(|(row, label)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                return Err(EvalError::EmptyRow(label.clone()));
            }
            Ok(row.iter().map(|&c| c as f64 / n as f64).collect())
        })
        .collect()
}

pub fn write_normalized_csv(cm: &ConfusionMatrix, out: impl Write) -> Result<(), EvalError> {
    let rows = normalize_rows(cm)?;
    write_matrix(
        &cm.labels,
        rows.into_iter().map(|r| r.iter().map(|v| format!("{v:.6}")).collect()),
        out,
    )
    .map_err(|e| EvalError::EmptyRow(e.to_string()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: u64,
    pub accuracy: f64,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub per_category: Vec<CategoryMetrics>,
    /// Mean cross-entropy, when computed from model outputs.
    pub loss: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from counts, `2TP / (2TP + FP + FN)`, equal to the harmonic mean of
/// precision and recall.
fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<EvalReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let c = cm.labels.len();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut per_category = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.counts[k][k];
        let support: u64 = cm.counts[k].iter().sum();
        let predicted: u64 = cm.counts.iter().map(|r| r[k]).sum();
        let (fp, fn_) = (predicted - tp, support - tp);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per_category.push(CategoryMetrics {
            category: cm.labels[k].clone(),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f1(tp, fp, fn_),
            support,
        });
    }
    let mean = |f: fn(&CategoryMetrics) -> f64| per_category.iter().map(f).sum::<f64>() / c as f64;
    let macro_avg = Prf {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(EvalReport {
        examples: total,
        accuracy: ratio(cm.trace(), total),
        micro: Prf {
            precision: ratio(tp_all, tp_all + fp_all),
            recall: ratio(tp_all, tp_all + fn_all),
            f1: f1(tp_all, fp_all, fn_all),
        },
        macro_avg,
        per_category,
        loss: None,
    })
}

impl EvalReport {
    pub fn write_per_category_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["category", "precision", "recall", "f1", "support"])?;
        for m in &self.per_category {
            w.write_record([
                m.category.clone(),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
                m.support.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode predictions with per-example cross-entropy.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    pub losses: Vec<f64>,
}

/// Runs the model over `batch` in chunks of `chunk` rows; chunk results are
/// computed independently and concatenated in order.
pub fn predict<T: Element>(model: &ModelState<T>, batch: &TokenBatch, chunk: usize) -> Result<Predictions, EvalError> {
    let chunks: Vec<TokenBatch> = batch.chunks(chunk).collect();
    let parts = chunks
        .par_iter()
        .map(|b| {
            let out = model.forward(b, Mode::Eval, None)?;
            let c = out.logits.shape()[1];
            let mut predicted = Vec::with_capacity(b.rows());
            let mut losses = Vec::with_capacity(b.rows());
            for r in 0..b.rows() {
                let row: Vec<f64> = out.logits.data()[r * c..(r + 1) * c]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                predicted.push(argmax(&row));
                if let Some(labels) = &b.labels {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    losses.push(log_z - row[labels[r]]);
                }
            }
            Ok((predicted, losses))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut out = Predictions {
        predicted: Vec::with_capacity(batch.rows()),
        losses: Vec::new(),
    };
    for (p, l) in parts {
        out.predicted.extend(p);
        out.losses.extend(l);
    }
    Ok(out)
}

/// Full report for a labeled batch, including mean loss.
pub fn evaluate<T: Element>(
    model: &ModelState<T>,
    batch: &TokenBatch,
    labels: &[String],
    chunk: usize,
) -> Result<(EvalReport, ConfusionMatrix), EvalError> {
    let truths = batch.labels.as_ref().ok_or(EvalError::MissingLabels)?;
    let preds = predict(model, batch, chunk)?;
    let cm = confusion(&preds.predicted, truths, labels)?;
    let mut report = metrics(&cm)?;
    report.loss = Some(preds.losses.iter().sum::<f64>() / preds.losses.len() as f64);
    Ok((report, cm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("L{i}")).collect()
    }

    #[test]
    fn hand_counted_confusion() {
        let cm = confusion(&[0, 1, 1, 2], &[0, 0, 1, 2], &names(3)).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let r = metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.micro.f1, 0.75);
        assert_eq!(r.per_category[0].recall, 0.5);
        assert_eq!(r.per_category[1].precision, 0.5);
        assert!((r.per_category[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let t = [0, 1, 2, 2, 1];
        let cm = confusion(&t, &t, &names(3)).unwrap();
        assert_eq!(cm.trace(), 5);
        let r = metrics(&cm).unwrap();
        assert_eq!((r.accuracy, r.micro.f1, r.macro_avg.f1), (1.0, 1.0, 1.0));
        for row in normalize_rows(&cm).unwrap().iter().enumerate() {
            for (j, &v) in row.1.iter().enumerate() {
                assert_eq!(v, if j == row.0 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn empty_input_gives_zero_total() {
        let cm = confusion(&[], &[], &names(2)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(normalize_rows(&cm), Err(EvalError::Empty)));
        assert!(matches!(metrics(&cm), Err(EvalError::Empty)));
    }

    #[test]
    fn unknown_label_is_rejected() {
        assert!(matches!(
            confusion(&[3], &[0], &names(3)),
            Err(EvalError::UnknownLabel { index: 3, .. })
        ));
    }

    #[test]
    fn row_normalization() {
        let cm = ConfusionMatrix {
            labels: names(3),
            counts: vec![vec![2, 2, 0], vec![0, 1, 0], vec![0, 0, 0]],
        };
        assert!(matches!(normalize_rows(&cm), Err(EvalError::EmptyRow(l)) if l == "L2"));
        let mut ok = cm.clone();
        ok.counts[2][2] = 4;
        assert_eq!(normalize_rows(&ok).unwrap()[0], vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn missing_class_scores_zero_in_macro() {
        let cm = confusion(&[0, 0], &[0, 0], &names(2)).unwrap();
        let r = metrics(&cm).unwrap();
        assert_eq!(r.per_category[1].f1, 0.0);
        assert_eq!(r.macro_avg.f1, 0.5);
    }

    #[test]
    fn csv_layouts() {
        let cm = confusion(&[0, 1], &[0, 0], &names(2)).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "true\\pred,L0,L1\nL0,1,1\nL1,0,0\n");
        let mut buf = Vec::new();
        metrics(&cm).unwrap().write_per_category_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("category,precision,recall,f1,support\nL0,1.000000,0.500000"));
    }

    fn labelled_pairs() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..24).prop_flat_map(|c| (Just(c), prop::collection::vec((0..c, 0..c), 1..200)))
    }

    proptest! {
        #[test]
        fn micro_scores_equal_accuracy((c, pairs) in labelled_pairs()) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = metrics(&confusion(&p, &t, &names(c)).unwrap()).unwrap();
            prop_assert_eq!(r.micro.precision, r.accuracy);
            prop_assert_eq!(r.micro.recall, r.accuracy);
            prop_assert_eq!(r.micro.f1, r.accuracy);
            for m in &r.per_category {
                prop_assert!((0.0..=1.0).contains(&m.f1));
                if m.precision + m.recall > 0.0 {
                    let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                    prop_assert!((h - m.f1).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn label_permutation_keeps_aggregates((c, pairs) in labelled_pairs(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let (pp, tp): (Vec<usize>, Vec<usize>) = pairs.iter().map(|&(a, b)| (perm[a], perm[b])).unzip();
            let mut permuted_names = vec![String::new(); c];
            for (i, &j) in perm.iter().enumerate() {
                permuted_names[j] = format!("L{i}");
            }
            let r1 = metrics(&confusion(&p, &t, &names(c)).unwrap()).unwrap();
            let r2 = metrics(&confusion(&pp, &tp, &permuted_names).unwrap()).unwrap();
            prop_assert_eq!(r1.accuracy, r2.accuracy);
            prop_assert_eq!(r1.micro, r2.micro);
            prop_assert!((r1.macro_avg.f1 - r2.macro_avg.f1).abs() < 1e-12);
            for (i, &j) in perm.iter().enumerate() {
                prop_assert_eq!(&r1.per_category[i].f1, &r2.per_category[j].f1);
            }
        }

        #[test]
        fn normalized_rows_sum_to_one_and_keep_argmax((c, pairs) in labelled_pairs()) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion(&p, &t, &names(c)).unwrap();
            let mut filled = cm.clone();
            for (i, row) in filled.counts.iter_mut().enumerate() {
                if row.iter().sum::<u64>() == 0 {
                    row[i] = 1;
                }
            }
            let n = normalize_rows(&filled).unwrap();
            for (row, counts) in n.iter().zip(&filled.counts) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert_eq!(argmax(row), argmax(counts));
            }
        }
    }
}
