//! Word-level vocabulary and fixed-length encoding with `[CLS]`/`[SEP]`/`[PAD]`.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Article;
use crate::text::words;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_VOCAB_SIZE: usize = 8000;

const HEADER_TAG: &str = "#newsbench-vocab";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary max_size must be at least 5, got {0}")]
    MaxSizeTooSmall(usize),
    #[error("cannot build a vocabulary from an empty training set")]
    EmptyTrainingSet,
    #[error("max_len must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt vocabulary file: {0}")]
    Corrupt(String),
}

/// Token ↔ id map with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_size: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, max_size: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            index,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Content hash over the token list.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                h.update(b"\n");
            }
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Header line, then one token per line; the k-th token line holds id k.
    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "{HEADER_TAG} max_size={} size={} sha256={}\n",
            self.max_size,
            self.tokens.len(),
            self.content_hash()
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(contents: &str) -> Result<Self, TokenizerError> {
        let mut lines = contents.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Corrupt("missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(TokenizerError::Corrupt("bad header tag".into()));
        }
        let mut max_size = None;
        let mut size = None;
        let mut hash = None;
        for f in fields {
            match f.split_once('=') {
                Some(("max_size", v)) => max_size = v.parse::<usize>().ok(),
                Some(("size", v)) => size = v.parse::<usize>().ok(),
                Some(("sha256", v)) => hash = Some(v.to_owned()),
                _ => return Err(TokenizerError::Corrupt(format!("unknown header field {f:?}"))),
            }
        }
        let (Some(max_size), Some(size), Some(hash)) = (max_size, size, hash) else {
            return Err(TokenizerError::Corrupt("incomplete header".into()));
        };
        let tokens: Vec<String> = lines.map(str::to_owned).collect();
        if tokens.len() != size {
            return Err(TokenizerError::Corrupt(format!(
                "header declares {size} tokens, found {}",
                tokens.len()
            )));
        }
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(TokenizerError::Corrupt("reserved tokens missing".into()));
        }
        let vocab = Self::from_tokens(tokens, max_size);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::Corrupt("duplicate tokens".into()));
        }
        if vocab.content_hash() != hash {
            return Err(TokenizerError::Corrupt("content hash mismatch".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&s)
    }

    /// Words for ids, skipping reserved tokens.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id as usize >= RESERVED.len())
            .filter_map(|&id| self.token(id).map(str::to_owned))
            .collect()
    }
}

/// Keeps the `max_size - 4` most frequent words; equal counts are ordered
/// lexicographically.
pub fn build_vocab<'a>(
    train_articles: impl IntoIterator<Item = &'a Article>,
    max_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    if max_size < 5 {
        return Err(TokenizerError::MaxSizeTooSmall(max_size));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut n_articles = 0;
    for a in train_articles {
        n_articles += 1;
        for w in words(&a.title).chain(words(&a.body)) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if n_articles == 0 {
        return Err(TokenizerError::EmptyTrainingSet);
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size - RESERVED.len()).map(|(w, _)| w))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, max_size))
}

/// One encoded sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedRow {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

/// `[CLS] words… [SEP] [PAD]…`, exactly `max_len` long; long inputs lose their
/// trailing words so that `[SEP]` stays the last real token.
pub fn encode(vocab: &Vocabulary, article: &Article, max_len: usize) -> Result<EncodedRow, TokenizerError> {
    if max_len < 2 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        words(&article.title)
            .chain(words(&article.body))
            .take(max_len - 2)
            .map(|w| vocab.id(&w).unwrap_or(UNK)),
    );
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut mask = vec![1u8; real];
    mask.resize(max_len, 0);
    Ok(EncodedRow { ids, mask })
}

/// `rows × max_len` token ids and attention mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub max_len: usize,
    pub labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn from_rows(rows: Vec<EncodedRow>, max_len: usize, labels: Option<Vec<usize>>) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * max_len);
        let mut mask = Vec::with_capacity(rows.len() * max_len);
        for r in rows {
            debug_assert_eq!(r.ids.len(), max_len);
            ids.extend(r.ids);
            mask.extend(r.mask);
        }
        Self {
            ids,
            mask,
            max_len,
            labels,
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len().checked_div(self.max_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_ids(&self, i: usize) -> &[u32] {
        &self.ids[i * self.max_len..(i + 1) * self.max_len]
    }

    pub fn row_mask(&self, i: usize) -> &[u8] {
        &self.mask[i * self.max_len..(i + 1) * self.max_len]
    }

    /// Sub-batch with the given row indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * self.max_len);
        let mut mask = Vec::with_capacity(rows.len() * self.max_len);
        for &r in rows {
            ids.extend_from_slice(self.row_ids(r));
            mask.extend_from_slice(self.row_mask(r));
        }
        Self {
            ids,
            mask,
            max_len: self.max_len,
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    /// Consecutive sub-batches of at most `size` rows.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = TokenBatch> + '_ {
        let n = self.rows();
        (0..n)
            .step_by(size.max(1))
            .map(move |start| self.select(&(start..(start + size).min(n)).collect::<Vec<_>>()))
    }
}

/// Encodes articles; labels, when given, must align with `articles`.
pub fn encode_batch<'a>(
    vocab: &Vocabulary,
    articles: impl IntoIterator<Item = &'a Article>,
    max_len: usize,
    labels: Option<Vec<usize>>,
) -> Result<TokenBatch, TokenizerError> {
    let rows = articles
        .into_iter()
        .map(|a| encode(vocab, a, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenBatch::from_rows(rows, max_len, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn art(text: &str) -> Article {
        Article::new("x", text, "", None)
    }

    #[test]
    fn ties_break_lexicographically() {
        let arts = [art("a b"), art("a c")];
        let v = build_vocab(&arts, 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id("c"), None);
        assert_eq!(build_vocab(&arts, 6).unwrap(), v);
    }

    #[test]
    fn max_size_four_is_rejected() {
        assert!(matches!(
            build_vocab(&[art("a")], 4),
            Err(TokenizerError::MaxSizeTooSmall(4))
        ));
    }

    #[test]
    fn empty_article_is_cls_sep_pads() {
        let v = build_vocab(&[art("a")], 10).unwrap();
        let r = encode(&v, &Article::new("e", "", "", None), 128).unwrap();
        assert_eq!(&r.ids[..2], &[CLS, SEP]);
        assert!(r.ids[2..].iter().all(|&i| i == PAD));
        assert_eq!(r.mask.iter().filter(|&&m| m == 1).count(), 2);
    }

    #[test]
    fn long_article_truncates_to_exact_length() {
        let text: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let a = art(&text.join(" "));
        let v = build_vocab([&a], 100).unwrap();
        let r = encode(&v, &a, 128).unwrap();
        assert_eq!(r.ids.len(), 128);
        assert_eq!(*r.ids.last().unwrap(), SEP);
        assert!(r.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn unseen_words_become_unk() {
        let v = build_vocab(&[art("known words")], 10).unwrap();
        let r = encode(&v, &art("totally novel"), 8).unwrap();
        assert_eq!(&r.ids[..4], &[CLS, UNK, UNK, SEP]);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let v = build_vocab(&[art("x y z y")], 20).unwrap();
        let s = v.to_file_string();
        assert_eq!(Vocabulary::parse(&s).unwrap(), v);
        let tampered = s.replace("\nz\n", "\nq\n");
        assert!(matches!(Vocabulary::parse(&tampered), Err(TokenizerError::Corrupt(_))));
    }

    #[test]
    fn batch_select_keeps_labels_aligned() {
        let v = build_vocab(&[art("a b c")], 10).unwrap();
        let arts = [art("a"), art("b"), art("c")];
        let b = encode_batch(&v, &arts, 6, Some(vec![0, 1, 2])).unwrap();
        let s = b.select(&[2, 0]);
        assert_eq!(s.labels, Some(vec![2, 0]));
        assert_eq!(s.row_ids(0), b.row_ids(2));
        assert_eq!(b.chunks(2).map(|c| c.rows()).collect::<Vec<_>>(), [2, 1]);
    }

    proptest! {
        #[test]
        fn encoding_invariants(text in "[a-zA-Z ]{0,400}", pad in "[ \t\n]{0,5}") {
            let a = art(&text);
            let v = build_vocab([&a], 50).unwrap();
            let r = encode(&v, &a, 128).unwrap();
            prop_assert_eq!(r.ids.len(), 128);
            prop_assert_eq!(r.ids[0], CLS);
            for (id, m) in r.ids.iter().zip(&r.mask) {
                prop_assert_eq!(*m == 0, *id == PAD);
            }
            let padded = art(&format!("{text}{pad}"));
            prop_assert_eq!(encode(&v, &padded, 128).unwrap(), r);
        }

        #[test]
        fn in_vocabulary_text_round_trips(ws in prop::collection::vec("[a-z]{1,6}", 0..125)) {
            let a = art(&ws.join(" "));
            let v = build_vocab([&a], 1000).unwrap();
            let r = encode(&v, &a, 128).unwrap();
            prop_assert_eq!(v.decode(&r.ids), ws);
        }
    }
}
