//! Word tokenizer shared by retrieval scoring and the similarity metrics.
//!
//! A token is a maximal run of alphanumeric characters (Unicode `Alphabetic`
//! or `Numeric`), lowercased after splitting.

use std::collections::BTreeSet;

/// Tokens in order of appearance, duplicates kept.
pub fn tokenize_seq(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deduplicated token set.
pub fn tokenize(text: &str) -> BTreeSet<String> {
    tokenize_seq(text).into_iter().collect()
}
