use std::sync::OnceLock;

use regex::Regex;

use super::GenerationConfig;
use crate::dataset::{parse_diff, FileChange, ProblemStatement};
use crate::model_client::{ask, truncate_with_marker, ModelBackend, ModelError, SamplingParams, Tokenizer};
use crate::prompts;

#[derive(Debug, thiserror::Error)]
pub enum DescribeError {
    #[error("failing test output is empty")]
    EmptyFailingOutput,
    #[error("model returned an empty report")]
    EmptyReport,
    #[error(transparent)]
    Model(#[from] ModelError),
}

const OUTPUT_TRUNCATION_MARKER: &str = "\n[... test output truncated ...]";

/// The part of runner output that explains failures: from the first
/// failure/error banner on, or everything when there is none.
pub fn failing_section(raw: &str) -> &str {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^=+ (FAILURES|ERRORS) =+$").expect("banner regex"));
    re.find(raw).map_or(raw, |m| &raw[m.start()..])
}

/// One line per file in the patch, without any hunk content.
pub fn changed_files(patch: &str) -> String {
    let Ok(files) = parse_diff(patch) else {
        return String::new();
    };
    files
        .iter()
        .map(|f| {
            let what = match f.change() {
                FileChange::Edited => "modified",
                FileChange::Created => "added",
                FileChange::Deleted => "deleted",
            };
            format!("- {} ({what})", f.path())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the model for a user-facing report of the failure. The prompt
/// carries the failing output and the list of changed files only.
pub fn describe_bug(
    backend: &dyn ModelBackend,
    tokenizer: &dyn Tokenizer,
    episode: &str,
    failing_output: &str,
    changed_files: &str,
    config: &GenerationConfig,
) -> Result<ProblemStatement, DescribeError> {
    if failing_output.trim().is_empty() {
        return Err(DescribeError::EmptyFailingOutput);
    }
    let output = truncate_with_marker(
        tokenizer,
        failing_output.trim_end(),
        config.describe_output_tokens,
        OUTPUT_TRUNCATION_MARKER,
    );
    let prompt = prompts::render(
        prompts::DESCRIBE_BUG,
        &[("changed_files", changed_files), ("failing_output", &output)],
    );
    let params = SamplingParams {
        temperature: config.episode.temperature,
        ..SamplingParams::default()
    };
    let mut last = DescribeError::EmptyReport;
    for attempt in 0..=config.describe_retries {
        match ask(backend, episode, prompts::SINGLE_TURN_SYSTEM, &prompt, &params) {
            Ok(reply) if !reply.assistant_content.trim().is_empty() => {
                return Ok(ProblemStatement {
                    tokens: tokenizer.count(&reply.assistant_content),
                    text: reply.assistant_content,
                    model: backend.model_name().to_string(),
                });
            }
            Ok(_) => last = DescribeError::EmptyReport,
            Err(e) => last = DescribeError::Model(e),
        }
        tracing::warn!(episode, attempt, error = %last, "bug report attempt failed");
    }
    Err(last)
}
