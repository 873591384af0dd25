//! Drug-name and free-text canonicalization shared by extraction, cleaning
//! and evaluation.

use std::sync::LazyLock;

use regex::Regex;

static STRENGTH: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b\d+(?:\.\d+)?(?:\s*(?:mg|mcg|g))?(?:\s*[-/]\s*\d+(?:\.\d+)?)?\s*(?:mg|mcg|g)\b",
    )
    .expect("static regex")
});

/// Removes strength tokens (`8-2 mg`, `380 mg`, `2 mg-0.5 mg`) and collapses
/// whitespace, keeping the original case.
pub fn strip_strength(name: &str) -> String {
    collapse_whitespace(&STRENGTH.replace_all(name, " "))
}

/// Grouping/matching form of a drug name: strength removed, lowercased,
/// whitespace collapsed.
pub fn normalize_drug_name(name: &str) -> String {
    strip_strength(name).to_lowercase()
}

pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-folded, whitespace-collapsed text for equality checks.
pub fn canonical_text(s: &str) -> String {
    collapse_whitespace(s).to_lowercase()
}
