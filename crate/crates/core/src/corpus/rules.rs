use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::Serialize;

use super::{Article, CorpusError};

/// Compiled keyword rules: category → patterns.
#[derive(Clone, Debug)]
pub struct RuleSet {
    rules: BTreeMap<String, Vec<Regex>>,
}

/// One rule hit. Candidates are suggestions for curation, not labels.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Candidate {
    pub category: String,
    /// Byte offsets into `title + " " + body`.
    pub start: usize,
    pub end: usize,
    pub span: String,
}

impl RuleSet {
    /// Compiles every pattern. When `declared` is given, every category must be
    /// one of those labels.
    pub fn compile(patterns: &BTreeMap<String, Vec<String>>, declared: Option<&[String]>) -> Result<Self, CorpusError> {
        let mut rules = BTreeMap::new();
        for (category, list) in patterns {
            if let Some(labels) = declared {
                if !labels.contains(category) {
                    return Err(CorpusError::UnknownCategory(category.clone()));
                }
            }
            let compiled = list
                .iter()
                .map(|p| {
                    Regex::new(p).map_err(|e| CorpusError::BadPattern {
                        category: category.clone(),
                        pattern: p.clone(),
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rules.insert(category.clone(), compiled);
        }
        Ok(Self { rules })
    }

    /// Parses a JSON object mapping category name to an array of patterns.
    pub fn from_json(json: &str, declared: Option<&[String]>) -> Result<Self, CorpusError> {
        let patterns: BTreeMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| CorpusError::RuleFile(e.to_string()))?;
        Self::compile(&patterns, declared)
    }

    pub fn load(path: impl AsRef<Path>, declared: Option<&[String]>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&json, declared)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }
}

/// Runs every rule against the article text and returns all hits, sorted by
/// category then position, with identical hits from different patterns merged.
pub fn bootstrap_label(rules: &RuleSet, article: &Article) -> Vec<Candidate> {
    let text = article.text();
    let mut out: Vec<Candidate> = rules
        .rules
        .iter()
        .flat_map(|(category, patterns)| {
            let text = &text;
            patterns.iter().flat_map(move |re| {
                re.find_iter(text).map(move |m| Candidate {
                    category: category.clone(),
                    start: m.start(),
                    end: m.end(),
                    span: m.as_str().to_owned(),
                })
            })
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PHASE: &str = r"(C|clinical\s)?((phases?|stages?)\s)([1-4IV/]{1,3})";

    fn phase_rules() -> RuleSet {
        let mut m = BTreeMap::new();
        m.insert("ClinicalPhase".to_owned(), vec![PHASE.to_owned()]);
        RuleSet::compile(&m, None).unwrap()
    }

    fn hits(title: &str) -> Vec<Candidate> {
        bootstrap_label(&phase_rules(), &Article::new("x", title, "", None))
    }

    #[test]
    fn clinical_phase_matches_once() {
        let h = hits("clinical phase 3 trial begins");
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].span, "clinical phase 3");
    }

    #[test]
    fn disease_stage_is_a_false_positive() {
        let h = hits("disease stage 2 melanoma");
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].span, "stage 2");
    }

    #[test]
    fn early_phase_is_a_false_negative() {
        assert!(hits("early phase trial announced").is_empty());
    }

    #[test]
    fn matches_body_text_too() {
        let a = Article::new("x", "Update", "Results from Phase II and phase I/II", None);
        let h = bootstrap_label(&phase_rules(), &a);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].span, "phase I/I");
    }

    #[test]
    fn undeclared_category_is_rejected() {
        let err = RuleSet::from_json(r#"{"Nope": ["x"]}"#, Some(&["C1".to_owned()])).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownCategory(c) if c == "Nope"));
    }

    #[test]
    fn broken_pattern_is_reported() {
        let err = RuleSet::from_json(r#"{"C1": ["(unclosed"]}"#, None).unwrap_err();
        assert!(matches!(err, CorpusError::BadPattern { .. }));
    }

    #[test]
    fn article_can_match_several_categories() {
        let rules = RuleSet::from_json(r#"{"C3": ["phase 3"], "Onc": ["melanoma"]}"#, None).unwrap();
        let h = bootstrap_label(&rules, &Article::new("x", "phase 3 melanoma study", "", None));
        let cats: Vec<&str> = h.iter().map(|c| c.category.as_str()).collect();
        assert_eq!(cats, ["C3", "Onc"]);
    }

    proptest! {
        #[test]
        fn invariant_under_rule_reordering(perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(), text in "[a-z0-9 ]{0,40}") {
            let pats = ["phase [0-9]", "[0-9]+", "a", "ph"];
            let reordered: Vec<String> = perm.iter().map(|&i| pats[i].to_owned()).collect();
            let original: Vec<String> = pats.iter().map(|s| s.to_string()).collect();
            let a = Article::new("x", text.clone(), "tail 12", None);
            let r1 = RuleSet::compile(&[("K".to_owned(), original)].into(), None).unwrap();
            let r2 = RuleSet::compile(&[("K".to_owned(), reordered)].into(), None).unwrap();
            prop_assert_eq!(bootstrap_label(&r1, &a), bootstrap_label(&r2, &a));
        }
    }
}
