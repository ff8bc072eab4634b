use std::collections::HashSet;
use std::io::Write;

use serde::Serialize;

use super::{CorpusError, Dataset};
use crate::text::words;

/// Balance ratios at or above this value are flagged.
pub const BALANCE_BOUND: f64 = 4.0;

/// One row of the per-category statistics table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryStats {
    pub category: String,
    pub items: usize,
    pub nonstop_mean: f64,
    pub nonstop_std: f64,
    pub nonstop_min: usize,
    pub nonstop_max: usize,
    pub nonstop_median: f64,
    pub stop_mean: f64,
    pub stop_std: f64,
    pub stop_min: usize,
    pub stop_max: usize,
    pub stop_median: f64,
    pub char_min: usize,
    pub char_max: usize,
    pub char_mean: f64,
    pub char_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub categories: Vec<CategoryStats>,
    pub total: CategoryStats,
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    nonstop: usize,
    stop: usize,
    chars: usize,
}

fn count(text_title: &str, body: &str, stopwords: &HashSet<String>) -> Counts {
    let mut c = Counts {
        chars: text_title.chars().count() + body.chars().count(),
        ..Default::default()
    };
    for w in words(text_title).chain(words(body)) {
        if stopwords.contains(&w) {
            c.stop += 1;
        } else {
            c.nonstop += 1;
        }
    }
    c
}

struct Summary {
    mean: f64,
    std: f64,
    min: usize,
    max: usize,
    median: f64,
}

fn summarize(values: &mut [usize]) -> Summary {
    values.sort_unstable();
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let mid = values.len() / 2;
    let median = if values.len() % 2 == 1 {
        values[mid] as f64
    } else {
        (values[mid - 1] + values[mid]) as f64 / 2.0
    };
    Summary {
        mean,
        std: var.sqrt(),
        min: values[0],
        max: values[values.len() - 1],
        median,
    }
}

fn row(category: &str, counts: &[Counts]) -> CategoryStats {
    let mut ns: Vec<usize> = counts.iter().map(|c| c.nonstop).collect();
    let mut st: Vec<usize> = counts.iter().map(|c| c.stop).collect();
    let mut ch: Vec<usize> = counts.iter().map(|c| c.chars).collect();
    let (ns, st, ch) = (summarize(&mut ns), summarize(&mut st), summarize(&mut ch));
    CategoryStats {
        category: category.to_owned(),
        items: counts.len(),
        nonstop_mean: ns.mean,
        nonstop_std: ns.std,
        nonstop_min: ns.min,
        nonstop_max: ns.max,
        nonstop_median: ns.median,
        stop_mean: st.mean,
        stop_std: st.std,
        stop_min: st.min,
        stop_max: st.max,
        stop_median: st.median,
        char_min: ch.min,
        char_max: ch.max,
        char_mean: ch.mean,
        char_median: ch.median,
    }
}

/// Word and character statistics per category plus a total row.
///
/// Std is the population standard deviation; the median of an even-sized
/// sample is the mean of the two middle values.
pub fn compute_stats(dataset: &Dataset, stopwords: &HashSet<String>) -> Result<StatsReport, CorpusError> {
    if dataset.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let labels = dataset.label_ids()?;
    let mut per_category: Vec<Vec<Counts>> = vec![Vec::new(); dataset.labels().len()];
    let mut all = Vec::with_capacity(dataset.len());
    for (a, &l) in dataset.articles().iter().zip(&labels) {
        let c = count(&a.title, &a.body, stopwords);
        per_category[l].push(c);
        all.push(c);
    }
    let categories = dataset
        .labels()
        .iter()
        .zip(&per_category)
        .filter(|(_, c)| !c.is_empty())
        .map(|(name, c)| row(name, c))
        .collect();
    Ok(StatsReport {
        categories,
        total: row("Total", &all),
    })
}

impl StatsReport {
    pub const CSV_HEADER: [&'static str; 16] = [
        "Cat",
        "Items",
        "NonStop_Mean",
        "NonStop_Std",
        "NonStop_Min",
        "NonStop_Max",
        "NonStop_Med",
        "Stop_Mean",
        "Stop_Std",
        "Stop_Min",
        "Stop_Max",
        "Stop_Med",
        "Char_Min",
        "Char_Max",
        "Char_Mean",
        "Char_Med",
    ];

    /// One row per category then `Total`; fractional values at 2 decimals.
    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in self.categories.iter().chain(std::iter::once(&self.total)) {
            let f = |v: f64| format!("{v:.2}");
            w.write_record([
                r.category.clone(),
                r.items.to_string(),
                f(r.nonstop_mean),
                f(r.nonstop_std),
                r.nonstop_min.to_string(),
                r.nonstop_max.to_string(),
                f(r.nonstop_median),
                f(r.stop_mean),
                f(r.stop_std),
                r.stop_min.to_string(),
                r.stop_max.to_string(),
                f(r.stop_median),
                r.char_min.to_string(),
                r.char_max.to_string(),
                f(r.char_mean),
                f(r.char_median),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest-to-smallest category size ratio.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub ratio: f64,
    pub max_category: String,
    pub max_items: usize,
    pub min_category: String,
    pub min_items: usize,
    /// `ratio < BALANCE_BOUND`.
    pub within_bound: bool,
}

impl BalanceReport {
    /// `1:3.65`-style rendering at two decimals.
    pub fn display_ratio(&self) -> String {
        format!("1:{:.2}", self.ratio)
    }
}

/// Ties on max or min resolve to the first category in label order.
pub fn balance_ratio(dataset: &Dataset) -> Result<BalanceReport, CorpusError> {
    let labels = dataset.labels();
    if labels.len() < 2 {
        return Err(CorpusError::TooFewCategories(labels.len()));
    }
    let mut counts = vec![0usize; labels.len()];
    for a in dataset.articles() {
        if let Some(i) = a.category.as_deref().and_then(|c| dataset.label_index(c)) {
            counts[i] += 1;
        }
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(CorpusError::EmptyCategory(labels[i].clone()));
    }
    let mut max_i = 0;
    let mut min_i = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[max_i] {
            max_i = i;
        }
        if c < counts[min_i] {
            min_i = i;
        }
    }
    let ratio = counts[max_i] as f64 / counts[min_i] as f64;
    Ok(BalanceReport {
        ratio,
        max_category: labels[max_i].clone(),
        max_items: counts[max_i],
        min_category: labels[min_i].clone(),
        min_items: counts[min_i],
        within_bound: ratio < BALANCE_BOUND,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Article;
    use crate::text::default_stopwords;
    use proptest::prelude::*;

    fn labeled(counts: &[(&str, usize)]) -> Dataset {
        let mut articles = Vec::new();
        for (cat, n) in counts {
            for i in 0..*n {
                articles.push(Article::new(format!("{cat}-{i}"), "title", "", Some(cat)));
            }
        }
        Dataset::from_articles(articles).unwrap()
    }

    #[test]
    fn counts_stop_and_nonstop_words() {
        let stop: HashSet<String> = ["the".to_owned()].into();
        let c = count("The cat sat", "", &stop);
        assert_eq!((c.nonstop, c.stop), (2, 1));
    }

    #[test]
    fn single_article_has_degenerate_summary() {
        let ds = Dataset::from_articles(vec![Article::new("a", "Word", "", Some("X"))]).unwrap();
        let r = compute_stats(&ds, &default_stopwords()).unwrap();
        let t = &r.total;
        assert_eq!((t.nonstop_min, t.nonstop_max), (1, 1));
        assert_eq!(t.nonstop_median, 1.0);
        assert_eq!(t.nonstop_std, 0.0);
        assert_eq!((t.char_min, t.char_max), (4, 4));
    }

    #[test]
    fn unlabeled_article_is_an_error() {
        let ds = Dataset::from_articles(vec![Article::new("a", "Word", "", None)]).unwrap();
        assert!(matches!(
            compute_stats(&ds, &default_stopwords()),
            Err(CorpusError::Unlabeled(_))
        ));
    }

    #[test]
    fn even_median_averages_middle_pair() {
        let s = summarize(&mut [4, 1, 3, 2]);
        assert_eq!(s.median, 2.5);
        assert_eq!((s.min, s.max), (1, 4));
    }

    #[test]
    fn extreme_counts_665_and_182_give_three_sixty_five() {
        let ds = labeled(&[("JobBizLaw", 665), ("PV-Reg", 182)]);
        let b = balance_ratio(&ds).unwrap();
        assert_eq!(format!("{:.2}", b.ratio), "3.65");
        assert_eq!(b.display_ratio(), "1:3.65");
        assert_eq!(b.max_category, "JobBizLaw");
        assert_eq!(b.min_category, "PV-Reg");
        assert!(b.within_bound);
    }

    #[test]
    fn equal_sizes_give_one() {
        let b = balance_ratio(&labeled(&[("A", 7), ("B", 7), ("C", 7)])).unwrap();
        assert_eq!(b.ratio, 1.0);
    }

    #[test]
    fn ratio_above_four_is_flagged() {
        let b = balance_ratio(&labeled(&[("A", 801), ("B", 200)])).unwrap();
        assert_eq!(b.ratio, 4.005);
        assert!(!b.within_bound);
    }

    #[test]
    fn single_category_is_rejected() {
        assert!(matches!(
            balance_ratio(&labeled(&[("A", 3)])),
            Err(CorpusError::TooFewCategories(1))
        ));
    }

    #[test]
    fn csv_has_total_row() {
        let ds = labeled(&[("A", 2), ("B", 1)]);
        let r = compute_stats(&ds, &default_stopwords()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("Cat,Items,NonStop_Mean"));
        assert!(lines[3].starts_with("Total,3,"));
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<(usize, String, String)>> {
        let word = prop::sample::select(vec!["the", "a", "trial", "drug", "of", "phase", "Merger", "and", "x1"]);
        let text = prop::collection::vec(word, 0..12).prop_map(|w| w.join(" "));
        prop::collection::vec((0usize..4, text.clone(), text), 1..60)
    }

    proptest! {
        #[test]
        fn totals_match_brute_force_recount(rows in corpus_strategy()) {
            let articles: Vec<Article> = rows
                .iter()
                .enumerate()
                .map(|(i, (c, t, b))| Article::new(format!("id{i}"), format!("T{t}"), b.clone(), Some(&format!("C{c}"))))
                .collect();
            let ds = Dataset::from_articles(articles.clone()).unwrap();
            let stop = default_stopwords();
            let r = compute_stats(&ds, &stop).unwrap();
            prop_assert_eq!(r.total.items, r.categories.iter().map(|c| c.items).sum::<usize>());
            // Independent recount: whitespace-free lowercase scan per character.
            let recount = |s: &str| -> (usize, usize) {
                let mut cur = String::new();
                let (mut ns, mut st) = (0, 0);
                for ch in s.chars().chain(std::iter::once(' ')) {
                    if ch.is_alphanumeric() {
                        cur.extend(ch.to_lowercase());
                    } else if !cur.is_empty() {
                        if stop.contains(&cur) { st += 1 } else { ns += 1 }
                        cur.clear();
                    }
                }
                (ns, st)
            };
            let per: Vec<(usize, usize)> = articles
                .iter()
                .map(|a| {
                    let (n1, s1) = recount(&a.title);
                    let (n2, s2) = recount(&a.body);
                    (n1 + n2, s1 + s2)
                })
                .collect();
            prop_assert_eq!(r.total.nonstop_min, per.iter().map(|p| p.0).min().unwrap());
            prop_assert_eq!(r.total.nonstop_max, per.iter().map(|p| p.0).max().unwrap());
            prop_assert_eq!(r.total.stop_min, per.iter().map(|p| p.1).min().unwrap());
            prop_assert_eq!(r.total.stop_max, per.iter().map(|p| p.1).max().unwrap());
            for c in &r.categories {
                prop_assert!(c.nonstop_min as f64 <= c.nonstop_median && c.nonstop_median <= c.nonstop_max as f64);
                prop_assert!(c.stop_std >= 0.0 && c.nonstop_std >= 0.0);
            }
        }

        #[test]
        fn balance_is_order_invariant(rows in prop::collection::vec(0usize..3, 3..40), seed in any::<u64>()) {
            let mut rows = rows;
            rows.extend([0, 1, 2]);
            let make = |order: &[usize]| {
                Dataset::from_articles(
                    order.iter().enumerate().map(|(i, c)| Article::new(format!("{i}"), "t", "", Some(&format!("C{c}")))).collect(),
                ).unwrap()
            };
            let mut shuffled = rows.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(balance_ratio(&make(&rows)).unwrap().ratio, balance_ratio(&make(&shuffled)).unwrap().ratio);
        }
    }
}
