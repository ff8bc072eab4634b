//! Keyword-separable synthetic corpora for end-to-end runs and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Article, Dataset};

const FILLER: &[&str] = &[
    "the",
    "a",
    "of",
    "and",
    "to",
    "in",
    "company",
    "said",
    "today",
    "report",
    "market",
    "new",
    "year",
    "data",
    "team",
    "plan",
    "update",
    "global",
    "group",
    "week",
    "announced",
    "statement",
    "industry",
    "result",
    "focus",
    "board",
    "region",
    "share",
    "growth",
    "business",
    "program",
    "review",
    "source",
    "public",
    "early",
    "late",
    "first",
    "second",
    "news",
    "service",
    "value",
    "support",
    "project",
    "partner",
    "network",
    "quarter",
    "level",
    "process",
    "product",
    "patient",
    "study",
    "policy",
    "system",
    "health",
    "research",
    "center",
    "office",
];

/// Generation parameters.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub keywords_per_class: usize,
    /// Inclusive range of body lengths in words.
    pub body_words: (usize, usize),
    /// Keywords planted in each body.
    pub planted: usize,
    /// Fraction of articles whose label is replaced by a different class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 200,
            keywords_per_class: 8,
            body_words: (12, 30),
            planted: 3,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

/// Class names `Cat0..`, each with its own keyword set `k{class}w{j}`.
pub fn keyword_corpus(config: &SyntheticConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let keyword = |c: usize, j: usize| format!("k{c}w{j}");
    let mut articles = Vec::with_capacity(config.classes * config.per_class);
    for i in 0..config.per_class {
        for c in 0..config.classes {
            let filler = |rng: &mut ChaCha8Rng| FILLER[rng.gen_range(0..FILLER.len())].to_owned();
            let title_kw = keyword(c, rng.gen_range(0..config.keywords_per_class));
            let mut title: Vec<String> = (0..3).map(|_| filler(&mut rng)).collect();
            let at = rng.gen_range(0..=title.len());
            title.insert(at, title_kw);
            let len = rng.gen_range(config.body_words.0..=config.body_words.1);
            let mut body: Vec<String> = (0..len).map(|_| filler(&mut rng)).collect();
            for _ in 0..config.planted {
                let kw = keyword(c, rng.gen_range(0..config.keywords_per_class));
                let at = rng.gen_range(0..=body.len());
                body.insert(at, kw);
            }
            let mut label = c;
            if config.label_noise > 0.0 && config.classes > 1 && rng.gen::<f64>() < config.label_noise {
                label = (c + rng.gen_range(1..config.classes)) % config.classes;
            }
            articles.push(Article::new(
                format!("syn-{c}-{i:04}"),
                title.join(" "),
                body.join(" "),
                Some(&format!("Cat{label}")),
            ));
        }
    }
    Dataset::from_articles(articles).expect("generated ids are unique")
}
