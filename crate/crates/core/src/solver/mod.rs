//! k-attempt solving runs over a bug dataset, their metrics, and the
//! selection of successful trajectories for supervised fine-tuning.

mod metrics;
mod sft;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{Episode, EpisodeConfig, Termination, Trajectory};
use crate::buggen::Env;
use crate::dataset::{parse_diff, BugRecord, HunkLine};
use crate::parallel::{self, Parallelism};
use crate::prompts;
use crate::sandbox::{ResourceLimits, SandboxHandle};
use crate::testkit::{run_tests, RepoProfile, TestStatus};

pub use metrics::{compute_metrics, trajectory_stats, InstanceResult, ShortBy, SolveMetrics, TrajectoryStats};
pub use sft::{select_for_sft, write_chat_jsonl, ChatTurn, SftExample};

pub const ATTEMPTS_FILE: &str = "attempts.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub episode: EpisodeConfig,
    pub k: usize,
    /// One seed per attempt. Empty means `1..=k`.
    pub seeds: Vec<u64>,
    pub sft_budget: usize,
    pub short_by: ShortBy,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            k: 4,
            seeds: Vec::new(),
            sft_budget: 32_768,
            short_by: ShortBy::Steps,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SolveError {
    #[error("k must be at least 1")]
    NoAttempts,
    #[error("k is {k} but {seeds} seeds were given")]
    SeedCount { k: usize, seeds: usize },
}

impl SolveConfig {
    /// Seed of every attempt index.
    pub fn attempt_seeds(&self) -> Result<Vec<u64>, SolveError> {
        if self.k == 0 {
            return Err(SolveError::NoAttempts);
        }
        if self.seeds.is_empty() {
            return Ok((1..=self.k as u64).collect());
        }
        if self.seeds.len() != self.k {
            return Err(SolveError::SeedCount {
                k: self.k,
                seeds: self.seeds.len(),
            });
        }
        Ok(self.seeds.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub instance_id: String,
    pub attempt_index: usize,
    pub seed: u64,
    pub trajectory: Trajectory,
    pub resolved: bool,
    pub steps: usize,
    pub total_tokens: usize,
    /// Why the attempt could not be judged normally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// The task prompt a solver sees: the workdir and the problem statement.
pub fn solve_prompt(bug: &BugRecord, working_dir: &str) -> String {
    prompts::render(
        prompts::SOLVE,
        &[
            ("working_dir", working_dir),
            ("problem_statement", &bug.problem_statement.text),
        ],
    )
}

/// Lines of `bug.patch` or test ids of `bug.fail_to_pass` found in `prompt`.
/// Very short changed lines (closing brackets and the like) are ignored.
pub fn prompt_leaks(prompt: &str, bug: &BugRecord) -> Vec<String> {
    let mut found = BTreeSet::new();
    for t in &bug.fail_to_pass {
        if prompt.contains(t.as_str()) {
            found.insert(t.as_str().to_string());
        }
    }
    if let Ok(files) = parse_diff(bug.patch.as_str()) {
        for h in files.iter().flat_map(|f| &f.hunks) {
            for line in &h.lines {
                let (HunkLine::Added(l) | HunkLine::Removed(l)) = line else {
                    continue;
                };
                let l = l.trim();
                if l.chars().filter(|c| !c.is_whitespace()).count() >= 12 && prompt.contains(l) {
                    found.insert(l.to_string());
                }
            }
        }
    }
    found.into_iter().collect()
}

pub fn episode_key(instance_id: &str, attempt_index: usize) -> String {
    format!("{instance_id}/solve/{attempt_index}")
}

fn failed_attempt(bug: &BugRecord, index: usize, seed: u64, prompt: String, detail: String) -> AttemptOutcome {
    AttemptOutcome {
        instance_id: bug.instance_id.clone(),
        attempt_index: index,
        seed,
        trajectory: Trajectory {
            instance_id: bug.instance_id.clone(),
            system_prompt: prompts::SYSTEM.to_string(),
            instance_prompt: prompt,
            steps: Vec::new(),
            termination: Termination::BackendError,
            success: Some(false),
            seed,
            total_prompt_tokens: 0,
            total_completion_tokens: 0,
            error: Some(detail.clone()),
        },
        resolved: false,
        steps: 0,
        total_tokens: 0,
        detail: Some(detail),
    }
}

/// One solving attempt: fresh sandbox at the buggy state, an agent
/// episode on the problem statement, then the record's tests.
pub fn solve_instance(
    env: &Env<'_>,
    bug: &BugRecord,
    profile: &RepoProfile,
    attempt_index: usize,
    seed: u64,
    config: &SolveConfig,
) -> AttemptOutcome {
    let fail = |prompt: String, detail: String| {
        tracing::warn!(instance = %bug.instance_id, attempt = attempt_index, %detail, "attempt failed");
        failed_attempt(bug, attempt_index, seed, prompt, detail)
    };
    let parser = match profile.parser_profile() {
        Ok(p) => p,
        Err(e) => return fail(String::new(), e.to_string()),
    };
    let mut sb = match SandboxHandle::create(env.runtime, &bug.image_ref, &ResourceLimits::default()) {
        Ok(sb) => sb,
        Err(e) => return fail(String::new(), e.to_string()),
    };
    let prompt = solve_prompt(bug, sb.workdir());
    let leaks = prompt_leaks(&prompt, bug);
    if !leaks.is_empty() {
        return fail(prompt, format!("solve prompt reveals the bug: {}", leaks.join(" | ")));
    }
    if let Err(e) = sb.checkout(&bug.base_ref).and_then(|_| sb.apply_patch(&bug.patch)) {
        return fail(prompt, e.to_string());
    }
    let mut episode = match Episode::new(
        env.backend,
        env.tokenizer.clone(),
        &episode_key(&bug.instance_id, attempt_index),
        &bug.instance_id,
        prompts::SYSTEM,
        &prompt,
        &config.episode,
        seed,
    ) {
        Ok(e) => e,
        Err(e) => return fail(prompt, e.to_string()),
    };
    episode.run(&mut sb);
    let mut trajectory = episode.into_trajectory();
    let (resolved, detail) = match run_tests(&mut sb, &profile.test_command, &parser, profile.test_timeout_ms, "") {
        Ok(report) if report.collection_error => (false, Some("test collection failed".to_string())),
        Ok(report) => {
            let passed = |t| report.status(t) == Some(TestStatus::Passed);
            (
                bug.fail_to_pass.iter().all(passed) && bug.pass_to_pass.iter().all(passed),
                None,
            )
        }
        Err(e) => (false, Some(e.to_string())),
    };
    sb.destroy();
    trajectory.success = Some(resolved);
    tracing::info!(instance = %bug.instance_id, attempt = attempt_index, resolved, steps = trajectory.steps.len(), "attempt done");
    AttemptOutcome {
        instance_id: bug.instance_id.clone(),
        attempt_index,
        seed,
        steps: trajectory.steps.len(),
        total_tokens: trajectory.total_prompt_tokens + trajectory.total_completion_tokens,
        trajectory,
        resolved,
        detail,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Ordered by instance, then attempt index.
    pub outcomes: Vec<AttemptOutcome>,
    pub metrics: SolveMetrics,
    /// Attempts not run because of cancellation.
    pub skipped: usize,
}

/// Runs `config.k` attempts on every bug and folds them into metrics.
pub fn evaluate(
    env: &Env<'_>,
    bugs: &[BugRecord],
    profile_for: impl Fn(&BugRecord) -> RepoProfile + Sync + Send,
    config: &SolveConfig,
    mode: Parallelism,
) -> Result<Evaluation, SolveError> {
    let seeds = config.attempt_seeds()?;
    let jobs: Vec<(&BugRecord, usize, u64)> = bugs
        .iter()
        .flat_map(|b| seeds.iter().enumerate().map(move |(i, s)| (b, i, *s)))
        .collect();
    let results = parallel::map(&jobs, mode, |(bug, i, seed)| {
        if env.cancelled() {
            return None;
        }
        Some(solve_instance(env, bug, &profile_for(bug), *i, *seed, config))
    });
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let outcomes: Vec<AttemptOutcome> = results.into_iter().flatten().collect();
    let metrics = compute_metrics(&outcomes, seeds.len(), config.short_by);
    Ok(Evaluation {
        outcomes,
        metrics,
        skipped,
    })
}

/// Replaces `<dir>/attempts.jsonl` with `outcomes`.
pub fn write_attempts(dir: &Path, outcomes: &[AttemptOutcome]) -> std::io::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    for o in outcomes {
        serde_json::to_writer(&mut tmp, o)?;
        tmp.write_all(b"\n")?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(ATTEMPTS_FILE)).map_err(|e| e.error)?;
    Ok(())
}

pub fn read_attempts(dir: &Path) -> std::io::Result<Vec<AttemptOutcome>> {
    let text = std::fs::read_to_string(dir.join(ATTEMPTS_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::from))
        .collect()
}
