//! Glue from a labeled dataset and split manifest to encoded batches.

use crate::corpus::{CorpusError, Dataset, Partition, SplitSet};
use crate::tokenizer::{build_vocab, encode_batch, TokenBatch, TokenizerError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Encodes the articles listed in `ids`, labeled by position in `labels`.
pub fn encode_ids(
    dataset: &Dataset,
    ids: &[String],
    vocab: &Vocabulary,
    labels: &[String],
    max_len: usize,
) -> Result<TokenBatch, PipelineError> {
    let articles = dataset.select(ids)?;
    let label_ids = articles
        .iter()
        .map(|a| {
            let c = a
                .category
                .as_deref()
                .ok_or_else(|| CorpusError::Unlabeled(a.id.clone()))?;
            labels
                .iter()
                .position(|l| l == c)
                .ok_or_else(|| CorpusError::UnknownCategory(c.to_owned()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(encode_batch(vocab, articles, max_len, Some(label_ids))?)
}

/// Encoded train/validation/test partitions sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub train: TokenBatch,
    pub validation: TokenBatch,
    pub test: TokenBatch,
}

impl Prepared {
    pub fn partition(&self, p: Partition) -> &TokenBatch {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }
}

/// Builds the vocabulary from the train partition only (unless one is
/// supplied) and encodes every partition.
pub fn prepare(
    dataset: &Dataset,
    split: &SplitSet,
    vocab: Option<Vocabulary>,
    vocab_size: usize,
    max_len: usize,
) -> Result<Prepared, PipelineError> {
    let vocab = match vocab {
        Some(v) => v,
        None => build_vocab(dataset.select(&split.train)?, vocab_size)?,
    };
    let labels = dataset.labels().to_vec();
    let enc = |ids: &[String]| encode_ids(dataset, ids, &vocab, &labels, max_len);
    Ok(Prepared {
        train: enc(&split.train)?,
        validation: enc(&split.validation)?,
        test: enc(&split.test)?,
        labels: labels.clone(),
        vocab,
    })
}
