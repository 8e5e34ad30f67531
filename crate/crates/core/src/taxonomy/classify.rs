use serde::{Deserialize, Serialize};

use super::{CategoryGuide, TaxonomyConfig};
use crate::dataset::BugRecord;
use crate::model_client::{ask, truncate_with_marker, ModelBackend, ModelError, SamplingParams, Tokenizer};
use crate::parallel::{self, Parallelism};
use crate::prompts;

pub const PATCH_TRUNCATION_MARKER: &str = "[... patch truncated ...]";

/// Classification of one bug. `code` is `None` when no valid label was
/// obtained; `error` then says why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLabel {
    pub instance_id: String,
    pub code: Option<char>,
    pub reasoning: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CategoryLabel {
    pub fn is_labeled(&self) -> bool {
        self.code.is_some()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("reply has no usable <category> element: {0}")]
    ParseFailure(String),
    #[error("category {0:?} is not in the guide")]
    UnknownCode(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Text between the first `<tag>` and the following `</tag>`.
pub(crate) fn element<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(&text[start..start + len])
}

/// Extracts `(code, reasoning)` from a classification reply.
pub fn parse_reply(reply: &str, guide: &CategoryGuide) -> Result<(char, String), ClassifyError> {
    let raw = element(reply, "category").ok_or_else(|| ClassifyError::ParseFailure("missing".into()))?;
    let code = raw.trim();
    let mut chars = code.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Err(ClassifyError::ParseFailure(format!("expected one letter, got {code:?}")));
    };
    if !guide.contains(c) {
        return Err(ClassifyError::UnknownCode(code.to_string()));
    }
    let reasoning = element(reply, "reasoning").unwrap_or_default().trim().to_string();
    Ok((c, reasoning))
}

/// Splits a diff into per-file sections of (header, hunks).
fn split_sections(patch: &str) -> Vec<(String, Vec<String>)> {
    let lines: Vec<&str> = patch.split_inclusive('\n').collect();
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let bare_header = line.starts_with("--- ")
            && lines.get(i + 1).is_some_and(|l| l.starts_with("+++ "))
            && lines.get(i + 2).is_some_and(|l| l.starts_with("@@"))
            && !out.last().is_some_and(|(h, hunks)| hunks.is_empty() && h.starts_with("diff --git"));
        if line.starts_with("diff --git ") || bare_header || out.is_empty() {
            out.push((String::new(), Vec::new()));
        }
        let (header, hunks) = out.last_mut().expect("section");
        if line.starts_with("@@") {
            hunks.push(String::new());
        }
        match hunks.last_mut() {
            Some(h) => h.push_str(line),
            None => header.push_str(line),
        }
    }
    out
}

/// Caps a patch at `max_tokens`. Every file header is kept; hunks are
/// kept in order until the first one that does not fit.
pub fn truncate_patch(patch: &str, tokenizer: &dyn Tokenizer, max_tokens: usize) -> String {
    if tokenizer.count(patch) <= max_tokens {
        return patch.to_string();
    }
    let sections = split_sections(patch);
    let marker_cost = tokenizer.count(PATCH_TRUNCATION_MARKER);
    let header_cost: usize = sections.iter().map(|(h, _)| tokenizer.count(h)).sum();
    if header_cost + marker_cost > max_tokens {
        return truncate_with_marker(tokenizer, patch, max_tokens, &format!("\n{PATCH_TRUNCATION_MARKER}"));
    }
    let mut budget = max_tokens - header_cost - marker_cost;
    let mut open = true;
    let mut out = String::new();
    for (header, hunks) in &sections {
        out.push_str(header);
        for h in hunks {
            let n = tokenizer.count(h);
            if open && n <= budget {
                budget -= n;
                out.push_str(h);
            } else {
                open = false;
            }
        }
    }
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(PATCH_TRUNCATION_MARKER);
    out.push('\n');
    out
}

pub fn classify_prompt(bug: &BugRecord, guide: &CategoryGuide, tokenizer: &dyn Tokenizer, config: &TaxonomyConfig) -> String {
    let guide_text = guide.to_string();
    let patch = truncate_patch(bug.patch.as_str(), tokenizer, config.patch_tokens);
    prompts::render_single(
        prompts::CLASSIFY,
        &[
            ("guide", guide_text.trim_end()),
            ("ps", bug.problem_statement.text.trim_end()),
            ("patch", patch.trim_end()),
        ],
    )
}

/// Labels one bug. Unparsable or out-of-guide replies are retried
/// `config.classify_retries` times; after that the bug stays unlabeled.
pub fn classify(
    backend: &dyn ModelBackend,
    tokenizer: &dyn Tokenizer,
    bug: &BugRecord,
    guide: &CategoryGuide,
    config: &TaxonomyConfig,
) -> CategoryLabel {
    let prompt = classify_prompt(bug, guide, tokenizer, config);
    let key = format!("{}/classify", bug.instance_id);
    let params = SamplingParams {
        temperature: config.temperature,
        max_tokens: None,
        seed: 0,
    };
    let mut label = CategoryLabel {
        instance_id: bug.instance_id.clone(),
        code: None,
        reasoning: String::new(),
        model: backend.model_name().to_string(),
        error: None,
    };
    for attempt in 0..=config.classify_retries {
        let result = ask(backend, &key, prompts::SINGLE_TURN_SYSTEM, &prompt, &params)
            .map_err(ClassifyError::from)
            .and_then(|r| parse_reply(&r.assistant_content, guide));
        match result {
            Ok((code, reasoning)) => {
                label.code = Some(code);
                label.reasoning = reasoning;
                label.error = None;
                return label;
            }
            Err(e) => {
                tracing::warn!(instance = %bug.instance_id, attempt, error = %e, "classification failed");
                label.error = Some(e.to_string());
                if matches!(e, ClassifyError::Model(ModelError::ScriptExhausted { .. })) {
                    break;
                }
            }
        }
    }
    label
}

pub fn classify_all(
    backend: &dyn ModelBackend,
    tokenizer: &dyn Tokenizer,
    bugs: &[BugRecord],
    guide: &CategoryGuide,
    config: &TaxonomyConfig,
    mode: Parallelism,
) -> Vec<CategoryLabel> {
    parallel::map(bugs, mode, |b| classify(backend, tokenizer, b, guide, config))
}
