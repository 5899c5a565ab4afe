//! Cross-source concept grouping: which codes in each codebook talk about a
//! given keyword.

use serde::{Deserialize, Serialize};

use crate::codebook::normalize_label;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSource {
    pub source: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub keyword: String,
    pub stem: String,
    /// One entry per source, in the order given.
    pub members: Vec<ConceptSource>,
}

impl ConceptGroup {
    pub fn sizes(&self) -> Vec<(String, usize)> {
        self.members.iter().map(|m| (m.source.clone(), m.labels.len())).collect()
    }

    pub fn get(&self, source: &str) -> Option<&[String]> {
        self.members.iter().find(|m| m.source == source).map(|m| m.labels.as_slice())
    }
}

/// Lowercased, normalized keyword with one trailing "ing", "ed" or "s" cut.
pub fn stem(keyword: &str) -> String {
    let k = normalize_label(keyword).unwrap_or_default();
    for suffix in ["ing", "ed", "s"] {
        if let Some(base) = k.strip_suffix(suffix) {
            if !base.is_empty() && !base.ends_with(' ') {
                return base.to_string();
            }
        }
    }
    k
}

/// Whether some token of the normalized label starts the stem.
pub fn matches_stem(label: &str, stem: &str) -> bool {
    if stem.is_empty() {
        return false;
    }
    let Ok(normalized) = normalize_label(label) else { return false };
    format!(" {normalized}").contains(&format!(" {stem}"))
}

/// `sources` pairs a source name with its labels. Members keep their given
/// spelling and are sorted by normalized form.
pub fn concept_group(keyword: &str, sources: &[(String, Vec<String>)]) -> ConceptGroup {
    let stem = stem(keyword);
    let members = sources
        .iter()
        .map(|(source, labels)| {
            let mut hits: Vec<(String, String)> = labels
                .iter()
                .filter(|l| matches_stem(l, &stem))
                .map(|l| (normalize_label(l).unwrap_or_default(), l.clone()))
                .collect();
            hits.sort();
            hits.dedup_by(|a, b| a.0 == b.0);
            ConceptSource { source: source.clone(), labels: hits.into_iter().map(|h| h.1).collect() }
        })
        .collect();
    ConceptGroup { keyword: keyword.to_string(), stem, members }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stemming() {
        assert_eq!(stem("feedback"), "feedback");
        assert_eq!(stem("Feedbacks"), "feedback");
        assert_eq!(stem("sharing"), "shar");
        assert_eq!(stem("updated"), "updat");
        assert_eq!(stem("s"), "s");
    }

    #[test]
    fn token_prefix_only() {
        assert!(matches_stem("user feedback", "feedback"));
        assert!(matches_stem("feedbacks given", "feedback"));
        assert!(!matches_stem("feed the cat", "feedback"));
        assert!(!matches_stem("userfeedback", "feedback"));
        assert!(matches_stem("solicit user-feedback", "feedback"));
    }

    #[test]
    fn absent_keyword_gives_empty_memberships() {
        let g = concept_group("zebra", &[("a".into(), vec!["x".into()]), ("b".into(), vec![])]);
        assert_eq!(g.sizes(), vec![("a".into(), 0), ("b".into(), 0)]);
    }
}
