//! Word segmentation shared by corpus statistics and the tokenizer.

use std::collections::HashSet;

/// Lowercased maximal runs of alphanumeric characters.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Version tag of the bundled stopword list.
pub const STOPWORDS_VERSION: &str = "en-v1";

const STOPWORDS_EN_V1: &str = include_str!("../data/stopwords_en_v1.txt");

/// Parses a stopword file: one word per line, `#` comments and blank lines ignored.
pub fn parse_stopwords(contents: &str) -> HashSet<String> {
    contents
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// The bundled English list.
pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(STOPWORDS_EN_V1)
}
