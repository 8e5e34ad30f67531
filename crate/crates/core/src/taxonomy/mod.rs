//! Bug categories: the guide format, per-bug classification, category
//! distributions, and derivation of a guide by hierarchical summarization.

mod classify;
mod derive;
mod guide;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use classify::{
    classify, classify_all, classify_prompt, parse_reply, truncate_patch, CategoryLabel, ClassifyError,
    PATCH_TRUNCATION_MARKER,
};
pub use derive::{derive_taxonomy, patch_outline, Derivation, Summary, TaxonomyError, STATE_FILE};
pub use guide::{CategoryEntry, CategoryGuide, GuideError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaxonomyConfig {
    /// Token cap on the patch shown to the classifier.
    pub patch_tokens: usize,
    /// Token caps on the inputs of each leaf summary.
    pub statement_tokens: usize,
    pub outline_tokens: usize,
    pub classify_retries: usize,
    pub fanout: usize,
    pub temperature: f64,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self {
            patch_tokens: 4_000,
            statement_tokens: 1_000,
            outline_tokens: 400,
            classify_retries: 1,
            fanout: 8,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Distribution {
    /// Share of each code among labeled bugs.
    pub fractions: BTreeMap<char, f64>,
    pub labeled: usize,
    pub unlabeled: usize,
}

pub fn distribution(labels: &[CategoryLabel]) -> Distribution {
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut unlabeled = 0;
    for l in labels {
        match l.code {
            Some(c) => *counts.entry(c).or_insert(0) += 1,
            None => unlabeled += 1,
        }
    }
    let labeled: usize = counts.values().sum();
    Distribution {
        fractions: counts
            .into_iter()
            .map(|(c, n)| (c, n as f64 / labeled as f64))
            .collect(),
        labeled,
        unlabeled,
    }
}
