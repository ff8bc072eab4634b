//! Article ingestion, curation statistics, regex bootstrap labeling and
//! seeded splits.

mod rules;
mod split;
mod stats;
pub mod synthetic;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rules::{bootstrap_label, Candidate, RuleSet};
pub use split::{split, Partition, SplitSet, DEFAULT_RATIOS};
pub use stats::{balance_ratio, compute_stats, BalanceReport, CategoryStats, StatsReport, BALANCE_BOUND};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate article id \"{id}\"")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: field `{field}` must be nonempty")]
    EmptyField { line: usize, field: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("article \"{0}\" has no category label")]
    Unlabeled(String),
    #[error("balance ratio needs at least 2 categories, found {0}")]
    TooFewCategories(usize),
    #[error("category \"{0}\" has no articles")]
    EmptyCategory(String),
    #[error("rules for \"{category}\": pattern {pattern:?} does not compile: {message}")]
    BadPattern {
        category: String,
        pattern: String,
        message: String,
    },
    #[error("unknown category \"{0}\"")]
    UnknownCategory(String),
    #[error("invalid rule file: {0}")]
    RuleFile(String),
    #[error("split ratios {0:?} must be positive and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("cannot split {0} articles into three nonempty partitions")]
    TooSmall(usize),
    #[error("unknown article id \"{0}\"")]
    UnknownId(String),
}

/// One news item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub category: Option<String>,
}

impl Article {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
        category: Option<&str>,
    ) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            category: category.map(str::to_owned),
        }
    }

    /// Title and body joined by a single space.
    pub fn text(&self) -> String {
        let mut s = String::with_capacity(self.title.len() + 1 + self.body.len());
        s.push_str(&self.title);
        s.push(' ');
        s.push_str(&self.body);
        s
    }
}

/// A corpus plus its label vocabulary in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    articles: Vec<Article>,
    labels: Vec<String>,
}

impl Dataset {
    /// Validates ids and titles and collects labels in first-seen order.
    pub fn from_articles(articles: Vec<Article>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        let mut labels = Vec::new();
        for (i, a) in articles.iter().enumerate() {
            let line = i + 1;
            check_article(a, line)?;
            if !seen.insert(a.id.clone()) {
                return Err(CorpusError::DuplicateId { id: a.id.clone(), line });
            }
            if let Some(c) = &a.category {
                if !labels.contains(c) {
                    labels.push(c.clone());
                }
            }
        }
        Ok(Self { articles, labels })
    }

    /// Parses JSON Lines; blank lines are skipped.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut articles = Vec::new();
        let mut seen = HashSet::new();
        let mut labels: Vec<String> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let article: Article = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            check_article(&article, line_no)?;
            if !seen.insert(article.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    id: article.id,
                    line: line_no,
                });
            }
            if let Some(c) = &article.category {
                if !labels.contains(c) {
                    labels.push(c.clone());
                }
            }
            articles.push(article);
        }
        Ok(Self { articles, labels })
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn label_index(&self, category: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == category)
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.articles.iter().find(|a| a.id == id)
    }

    /// Label indices for every article; errors on the first unlabeled one.
    pub fn label_ids(&self) -> Result<Vec<usize>, CorpusError> {
        self.articles
            .iter()
            .map(|a| {
                let c = a
                    .category
                    .as_deref()
                    .ok_or_else(|| CorpusError::Unlabeled(a.id.clone()))?;
                self.label_index(c)
                    .ok_or_else(|| CorpusError::UnknownCategory(c.to_owned()))
            })
            .collect()
    }

    /// Articles with the given ids, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&Article>, CorpusError> {
        let index: std::collections::HashMap<&str, &Article> =
            self.articles.iter().map(|a| (a.id.as_str(), a)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| CorpusError::UnknownId(id.clone()))
            })
            .collect()
    }
}

fn check_article(a: &Article, line: usize) -> Result<(), CorpusError> {
    if a.id.is_empty() {
        return Err(CorpusError::EmptyField { line, field: "id" });
    }
    if a.title.is_empty() {
        return Err(CorpusError::EmptyField { line, field: "title" });
    }
    Ok(())
}

/// Reads a JSON Lines dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Dataset::from_jsonl(BufReader::new(file))
}
