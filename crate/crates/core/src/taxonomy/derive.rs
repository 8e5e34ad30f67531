use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::classify::element;
use super::{CategoryGuide, GuideError, TaxonomyConfig};
use crate::dataset::{fingerprint, parse_diff, BugRecord};
use crate::model_client::{ask, truncate_with_marker, ModelBackend, ModelError, SamplingParams, Tokenizer};
use crate::parallel::{self, Parallelism};
use crate::prompts;

pub const STATE_FILE: &str = "taxonomy_state.json";
const CUT: &str = "\n[... truncated ...]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub summary: String,
    pub candidate_types: Vec<String>,
}

impl Summary {
    /// Lenient: a reply without the expected elements becomes the summary.
    pub fn parse(reply: &str) -> Self {
        let summary = element(reply, "summary").unwrap_or(reply).trim().to_string();
        let candidate_types = element(reply, "candidate_types")
            .unwrap_or_default()
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        Self { summary, candidate_types }
    }

    fn render(&self) -> String {
        format!(
            "<bug_summary>\n<summary>{}</summary>\n<candidate_types>{}</candidate_types>\n</bug_summary>",
            self.summary,
            self.candidate_types.join(", ")
        )
    }
}

fn render_all(items: &[Summary]) -> String {
    items.iter().map(Summary::render).collect::<Vec<_>>().join("\n\n")
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("no bugs to summarize")]
    NoBugs,
    #[error("fanout must be at least 2, got {0}")]
    Fanout(usize),
    #[error("model call {key} failed: {source}")]
    Model { key: String, source: ModelError },
    #[error("final guide does not parse: {source}")]
    Guide {
        source: GuideError,
        reply: String,
    },
    #[error("taxonomy state {path}: {source}")]
    State { path: PathBuf, source: std::io::Error },
}

/// Completed calls of a derivation, keyed by episode key.
#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    fingerprint: String,
    summaries: BTreeMap<String, Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    guide_reply: Option<String>,
}

struct Persist {
    path: Option<PathBuf>,
}

impl Persist {
    fn load(&self, fp: &str) -> Result<State, TaxonomyError> {
        let fresh = State {
            fingerprint: fp.to_string(),
            ..State::default()
        };
        let Some(path) = &self.path else { return Ok(fresh) };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(fresh),
            Err(source) => return Err(TaxonomyError::State { path: path.clone(), source }),
        };
        match serde_json::from_str::<State>(&text) {
            Ok(s) if s.fingerprint == fp => {
                tracing::info!(calls = s.summaries.len(), "resuming taxonomy derivation");
                Ok(s)
            }
            Ok(_) => {
                tracing::warn!(path = %path.display(), "taxonomy state is for other inputs, starting over");
                Ok(fresh)
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable taxonomy state, starting over");
                Ok(fresh)
            }
        }
    }

    fn save(&self, state: &State) -> Result<(), TaxonomyError> {
        let Some(path) = &self.path else { return Ok(()) };
        let err = |source| TaxonomyError::State { path: path.clone(), source };
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
        serde_json::to_writer_pretty(&mut tmp, state).map_err(|e| err(e.into()))?;
        tmp.write_all(b"\n").map_err(err)?;
        tmp.persist(path).map_err(|e| err(e.error))?;
        Ok(())
    }
}

/// Changed files plus hunk headers, capped.
pub fn patch_outline(patch: &str, tokenizer: &dyn Tokenizer, max_tokens: usize) -> String {
    let mut out = crate::buggen::changed_files(patch);
    if let Ok(files) = parse_diff(patch) {
        for f in &files {
            for h in &f.hunks {
                out.push_str(&format!(
                    "\n{} @@ -{},{} +{},{} @@",
                    f.path(),
                    h.old_start,
                    h.old_len,
                    h.new_start,
                    h.new_len
                ));
            }
        }
    }
    truncate_with_marker(tokenizer, &out, max_tokens, CUT)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivation {
    pub guide: CategoryGuide,
    /// The final model reply the guide was parsed from.
    pub guide_reply: String,
    /// Model calls made by this run; resumed calls are not counted.
    pub calls: usize,
    pub rounds: usize,
}

/// Hierarchical summarization: one summary per bug, then groups of
/// `fanout` summaries are merged round by round until a single group is
/// left, which the final call turns into a guide. With `state_dir`, every
/// finished round is saved and a rerun on the same inputs resumes.
pub fn derive_taxonomy(
    backend: &dyn ModelBackend,
    tokenizer: &dyn Tokenizer,
    bugs: &[BugRecord],
    fanout: usize,
    config: &TaxonomyConfig,
    state_dir: Option<&Path>,
    mode: Parallelism,
) -> Result<Derivation, TaxonomyError> {
    if bugs.is_empty() {
        return Err(TaxonomyError::NoBugs);
    }
    if fanout < 2 {
        return Err(TaxonomyError::Fanout(fanout));
    }
    let ids: Vec<&str> = bugs.iter().map(|b| b.instance_id.as_str()).collect();
    let fp = fingerprint(&(ids, fanout, config.statement_tokens, config.outline_tokens));
    let persist = Persist {
        path: state_dir.map(|d| d.join(STATE_FILE)),
    };
    let mut state = persist.load(&fp)?;
    let params = SamplingParams {
        temperature: config.temperature,
        max_tokens: None,
        seed: 0,
    };
    let mut calls = 0;

    // Runs the (key, prompt) jobs not yet in `state`, saving before
    // reporting the first failure.
    let mut run_round = |state: &mut State, jobs: Vec<(String, String)>| -> Result<Vec<Summary>, TaxonomyError> {
        let todo: Vec<&(String, String)> = jobs.iter().filter(|(k, _)| !state.summaries.contains_key(k)).collect();
        let results = parallel::map(&todo, mode, |(key, prompt)| {
            ask(backend, key, prompts::SINGLE_TURN_SYSTEM, prompt, &params).map(|r| Summary::parse(&r.assistant_content))
        });
        calls += todo.len();
        let mut first_err = None;
        for ((key, _), r) in todo.iter().zip(results) {
            match r {
                Ok(s) => {
                    state.summaries.insert(key.clone(), s);
                }
                Err(source) if first_err.is_none() => {
                    first_err = Some(TaxonomyError::Model { key: key.clone(), source });
                }
                Err(_) => {}
            }
        }
        persist.save(state)?;
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok(jobs.iter().map(|(k, _)| state.summaries[k].clone()).collect())
    };

    let leaves: Vec<(String, String)> = bugs
        .iter()
        .map(|b| {
            let statement = truncate_with_marker(tokenizer, &b.problem_statement.text, config.statement_tokens, CUT);
            let outline = patch_outline(b.patch.as_str(), tokenizer, config.outline_tokens);
            (
                format!("taxonomy/summarize/{}", b.instance_id),
                prompts::render(
                    prompts::TAXONOMY_SUMMARIZE,
                    &[("problem_statement", statement.trim_end()), ("patch_outline", &outline)],
                ),
            )
        })
        .collect();
    let mut level = run_round(&mut state, leaves)?;
    let mut rounds = 1;
    while level.len() > fanout {
        let jobs = level
            .chunks(fanout)
            .enumerate()
            .map(|(g, group)| {
                (
                    format!("taxonomy/merge/{rounds}/{g}"),
                    prompts::render(prompts::TAXONOMY_MERGE, &[("summaries", &render_all(group))]),
                )
            })
            .collect();
        level = run_round(&mut state, jobs)?;
        rounds += 1;
    }

    let guide_reply = match &state.guide_reply {
        Some(r) => r.clone(),
        None => {
            let prompt = prompts::render(prompts::TAXONOMY_GUIDE, &[("summaries", &render_all(&level))]);
            let reply = ask(backend, "taxonomy/guide", prompts::SINGLE_TURN_SYSTEM, &prompt, &params)
                .map_err(|source| TaxonomyError::Model {
                    key: "taxonomy/guide".into(),
                    source,
                })?;
            calls += 1;
            reply.assistant_content
        }
    };
    let guide = CategoryGuide::parse_lenient(&guide_reply).map_err(|source| TaxonomyError::Guide {
        source,
        reply: guide_reply.clone(),
    })?;
    state.guide_reply = Some(guide_reply.clone());
    persist.save(&state)?;
    Ok(Derivation {
        guide,
        guide_reply,
        calls,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_parsing_is_lenient() {
        let s = Summary::parse("<summary> A </summary><candidate_types>x, y ,</candidate_types>");
        assert_eq!(s, Summary { summary: "A".into(), candidate_types: vec!["x".into(), "y".into()] });
        assert_eq!(Summary::parse("just text\n").summary, "just text");
    }

    #[test]
    fn outline_lists_files_and_hunks() {
        let patch = "diff --git a/m.py b/m.py\n--- a/m.py\n+++ b/m.py\n@@ -1,2 +1,2 @@\n-a\n+b\n c\n";
        let tok = crate::model_client::default_tokenizer();
        assert_eq!(patch_outline(patch, tok.as_ref(), 100), "- m.py (modified)\nm.py @@ -1,2 +1,2 @@");
    }
}
