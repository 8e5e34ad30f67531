use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::diff::{diff_stats, DiffStats, MalformedDiff};
use super::record::BugRecord;
use crate::model_client::Tokenizer;
use crate::parallel::{self, Parallelism};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record {instance_id}: {source}")]
    MalformedDiff {
        instance_id: String,
        #[source]
        source: MalformedDiff,
    },
}

/// Corpus-level averages. Every `avg_*` field is an arithmetic mean over
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub total_tasks: usize,
    pub avg_problem_tokens: f64,
    pub avg_diff_patch_tokens: f64,
    /// Edited plus created; deletions are reported separately.
    pub avg_files_modified: f64,
    pub avg_net_lines_changed: f64,
    pub unique_repositories: usize,
    pub avg_tasks_per_repo: f64,
    pub avg_lines_of_code: f64,
    pub avg_lines_of_documentation: f64,
    pub avg_files_edited: f64,
    pub avg_files_created: f64,
    pub avg_files_deleted: f64,
    pub tokenizer: String,
}

/// Integer totals; means are divided out once, so results are the
/// correctly rounded quotient of exact sums.
#[derive(Debug, Clone, Copy, Default)]
struct Totals {
    problem_tokens: u64,
    patch_tokens: u64,
    edited: u64,
    created: u64,
    deleted: u64,
    added: i64,
    removed: i64,
    code: u64,
    doc: u64,
}

impl Totals {
    fn add(&mut self, d: &DiffStats, problem_tokens: usize) {
        self.problem_tokens += problem_tokens as u64;
        self.patch_tokens += d.patch_tokens as u64;
        self.edited += d.files_edited as u64;
        self.created += d.files_created as u64;
        self.deleted += d.files_deleted as u64;
        self.added += d.added_lines as i64;
        self.removed += d.deleted_lines as i64;
        self.code += d.code_lines as u64;
        self.doc += d.doc_lines as u64;
    }
}

/// Per-record statistics, in input order.
pub fn record_stats(
    records: &[BugRecord],
    tokenizer: &dyn Tokenizer,
    mode: Parallelism,
) -> Result<Vec<(DiffStats, usize)>, StatsError> {
    let per = parallel::map(records, mode, |r| {
        let d = diff_stats(r.patch.as_str(), tokenizer).map_err(|source| StatsError::MalformedDiff {
            instance_id: r.instance_id.clone(),
            source,
        })?;
        Ok((d, tokenizer.count(&r.problem_statement.text)))
    });
    per.into_iter().collect()
}

pub fn corpus_stats(records: &[BugRecord], tokenizer: &dyn Tokenizer) -> Result<DatasetStats, StatsError> {
    corpus_stats_with(records, tokenizer, Parallelism::Workers(0))
}

pub fn corpus_stats_with(
    records: &[BugRecord],
    tokenizer: &dyn Tokenizer,
    mode: Parallelism,
) -> Result<DatasetStats, StatsError> {
    if records.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let mut t = Totals::default();
    for (d, p) in record_stats(records, tokenizer, mode)? {
        t.add(&d, p);
    }
    let mut per_repo: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *per_repo.entry(&r.repo).or_insert(0) += 1;
    }
    let n = records.len() as f64;
    let mean = |x: u64| x as f64 / n;
    Ok(DatasetStats {
        total_tasks: records.len(),
        avg_problem_tokens: mean(t.problem_tokens),
        avg_diff_patch_tokens: mean(t.patch_tokens),
        avg_files_modified: mean(t.edited + t.created),
        avg_net_lines_changed: (t.added - t.removed) as f64 / n,
        unique_repositories: per_repo.len(),
        avg_tasks_per_repo: n / per_repo.len() as f64,
        avg_lines_of_code: mean(t.code),
        avg_lines_of_documentation: mean(t.doc),
        avg_files_edited: mean(t.edited),
        avg_files_created: mean(t.created),
        avg_files_deleted: mean(t.deleted),
        tokenizer: tokenizer.name().to_string(),
    })
}

impl DatasetStats {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let f = |x: f64| format!("{x:.2}");
        vec![
            ("Total tasks", self.total_tasks.to_string()),
            ("Unique repositories", self.unique_repositories.to_string()),
            ("Avg tasks per repo", f(self.avg_tasks_per_repo)),
            ("Avg problem tokens", f(self.avg_problem_tokens)),
            ("Avg diff patch tokens", f(self.avg_diff_patch_tokens)),
            ("Avg files modified", f(self.avg_files_modified)),
            ("Avg files edited", f(self.avg_files_edited)),
            ("Avg files created", f(self.avg_files_created)),
            ("Avg files deleted", f(self.avg_files_deleted)),
            ("Avg net lines changed", f(self.avg_net_lines_changed)),
            ("Avg lines of code", f(self.avg_lines_of_code)),
            ("Avg lines of documentation", f(self.avg_lines_of_documentation)),
        ]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Statistic | Value |\n|---|---|\n");
        for (k, v) in self.rows() {
            s.push_str(&format!("| {k} | {v} |\n"));
        }
        s.push_str(&format!("\nTokens counted with `{}`.\n", self.tokenizer));
        s
    }
}
