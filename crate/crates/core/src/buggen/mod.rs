//! Bug generation: one episode per attempt, verified by the repository's
//! own tests, resumed with a continuation prompt while nothing fails.

mod campaign;
mod describe;

use std::sync::atomic::AtomicBool;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agent::{Episode, EpisodeConfig, Termination, Trajectory};
use crate::model_client::{ModelBackend, SharedTokenizer};
use crate::prompts;
use crate::sandbox::{ResourceLimits, Runtime, SandboxError, SandboxHandle};
use crate::testkit::{compute_f2p, missing_after, run_baseline, run_tests, RepoProfile, TestReport};

pub use crate::dataset::{BugRecord, ProblemStatement, StrategyKind};
pub use campaign::{run_campaign, CampaignResult, CampaignSummary, RepoSummary};
pub use describe::{changed_files, describe_bug, failing_section, DescribeError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub system_prompt: String,
    pub instance_prompt_template: String,
    pub continuation_prompt: String,
}

impl Strategy {
    pub fn builtin(kind: StrategyKind) -> Self {
        let (instance, cont) = match kind {
            StrategyKind::FeatAdd => (prompts::FEAT_ADD, prompts::CONTINUE_FEAT_ADD),
            StrategyKind::BugInstruct => (prompts::BUG_INSTRUCT, prompts::CONTINUE_BUG_INSTRUCT),
        };
        Self {
            kind,
            system_prompt: prompts::SYSTEM.to_string(),
            instance_prompt_template: instance.to_string(),
            continuation_prompt: cont.to_string(),
        }
    }

    pub fn instance_prompt(&self, working_dir: &str) -> String {
        prompts::render(&self.instance_prompt_template, &[("working_dir", working_dir)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoFailuresAfterMaxRounds,
    CollectionError,
    TestsDeleted,
    EmptyDiff,
    EpisodeError,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::NoFailuresAfterMaxRounds => "no_failures_after_max_rounds",
            RejectReason::CollectionError => "collection_error",
            RejectReason::TestsDeleted => "tests_deleted",
            RejectReason::EmptyDiff => "empty_diff",
            RejectReason::EpisodeError => "episode_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub episode: EpisodeConfig,
    pub max_rounds: usize,
    /// Token cap on the failing test output shown to the report writer.
    pub describe_output_tokens: usize,
    /// Extra attempts at the bug report after a backend failure.
    pub describe_retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            max_rounds: 3,
            describe_output_tokens: 3_000,
            describe_retries: 1,
        }
    }
}

/// Source of `created_at` timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Frozen(DateTime<Utc>),
}

impl Clock {
    pub fn now(&self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Frozen(t) => *t,
        }
    }

    /// The timestamp `--freeze-time` pins to.
    pub fn frozen_default() -> Self {
        Clock::Frozen(DateTime::<Utc>::from_timestamp(1_704_067_200, 0).expect("valid timestamp"))
    }
}

/// Shared collaborators of generation and solving runs.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub runtime: &'a dyn Runtime,
    pub backend: &'a dyn ModelBackend,
    pub tokenizer: &'a SharedTokenizer,
    pub clock: Clock,
    /// Checked between work items; set by a signal handler.
    pub cancel: Option<&'a AtomicBool>,
}

impl Env<'_> {
    pub fn cancelled(&self) -> bool {
        self.cancel
            .is_some_and(|c| c.load(std::sync::atomic::Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub instance_id: String,
    pub repo: String,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub trajectory: Trajectory,
    pub rounds: usize,
    pub bug: Option<BugRecord>,
    pub reject_reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl GenerationOutcome {
    pub fn accepted(&self) -> bool {
        self.bug.is_some()
    }

    pub fn outcome_label(&self) -> &'static str {
        self.reject_reason.map_or("accepted", RejectReason::as_str)
    }
}

fn placeholder_trajectory(instance_id: &str, seed: u64, strategy: &Strategy) -> Trajectory {
    Trajectory {
        instance_id: instance_id.to_string(),
        system_prompt: strategy.system_prompt.clone(),
        instance_prompt: String::new(),
        steps: Vec::new(),
        termination: Termination::BackendError,
        success: Some(false),
        seed,
        total_prompt_tokens: 0,
        total_completion_tokens: 0,
        error: None,
    }
}

/// Checks out `base_ref` if the image is not already there; returns the
/// resolved revision.
pub(crate) fn prepare_base(sb: &mut SandboxHandle, base_ref: Option<&str>) -> Result<String, SandboxError> {
    match base_ref {
        Some(want) => sb.checkout(want),
        None => sb.head_revision(),
    }
}

struct Rejection {
    reason: RejectReason,
    detail: String,
}

fn reject(reason: RejectReason, detail: impl Into<String>) -> Rejection {
    Rejection {
        reason,
        detail: detail.into(),
    }
}

/// Runs one generation attempt end to end. Never fails: every problem
/// becomes a rejection.
pub fn generate_bug(
    env: &Env<'_>,
    repo: &RepoProfile,
    strategy: &Strategy,
    seed: u64,
    config: &GenerationConfig,
) -> GenerationOutcome {
    let instance_id = strategy.kind.instance_id(&repo.name, seed);
    let _span = tracing::info_span!("generate", instance = %instance_id).entered();
    let mut outcome = GenerationOutcome {
        instance_id: instance_id.clone(),
        repo: repo.name.clone(),
        seed,
        strategy: strategy.kind,
        trajectory: placeholder_trajectory(&instance_id, seed, strategy),
        rounds: 0,
        bug: None,
        reject_reason: None,
        detail: None,
    };
    let mut sb = match SandboxHandle::create(env.runtime, &repo.image_ref, &ResourceLimits::default()) {
        Ok(sb) => sb,
        Err(e) => {
            outcome.trajectory.error = Some(e.to_string());
            outcome.reject_reason = Some(RejectReason::EpisodeError);
            outcome.detail = Some(format!("sandbox: {e}"));
            return outcome;
        }
    };
    let result = generate_in(env, &mut sb, repo, strategy, seed, config, &instance_id, &mut outcome);
    sb.destroy();
    match result {
        Ok(bug) => {
            outcome.trajectory.success = Some(true);
            outcome.bug = Some(bug);
            tracing::info!(rounds = outcome.rounds, "bug accepted");
        }
        Err(r) => {
            outcome.trajectory.success = Some(false);
            if outcome.rounds == 0 {
                // Rejected before the episode started.
                outcome.trajectory.error = Some(r.detail.clone());
            }
            outcome.reject_reason = Some(r.reason);
            outcome.detail = (!r.detail.is_empty()).then_some(r.detail);
            tracing::info!(reason = r.reason.as_str(), rounds = outcome.rounds, "attempt rejected");
        }
    }
    outcome
}

#[allow(clippy::too_many_arguments)]
fn generate_in(
    env: &Env<'_>,
    sb: &mut SandboxHandle,
    repo: &RepoProfile,
    strategy: &Strategy,
    seed: u64,
    config: &GenerationConfig,
    instance_id: &str,
    outcome: &mut GenerationOutcome,
) -> Result<BugRecord, Rejection> {
    let sandbox_err = |e: SandboxError| reject(RejectReason::EpisodeError, format!("sandbox: {e}"));
    let parser = repo
        .parser_profile()
        .map_err(|e| reject(RejectReason::EpisodeError, e.to_string()))?;
    let base_ref = prepare_base(sb, repo.base_ref.as_deref()).map_err(sandbox_err)?;
    let baseline = run_baseline(sb, repo, &parser).map_err(sandbox_err)?;
    if baseline.collection_error || baseline.passed().is_empty() {
        return Err(reject(
            RejectReason::EpisodeError,
            "baseline run has a collection error or no passing tests",
        ));
    }

    let prompt = strategy.instance_prompt(sb.workdir());
    let mut episode = Episode::new(
        env.backend,
        env.tokenizer.clone(),
        instance_id,
        instance_id,
        &strategy.system_prompt,
        &prompt,
        &config.episode,
        seed,
    )
    .map_err(|e| reject(RejectReason::EpisodeError, e.to_string()))?;

    let max_rounds = config.max_rounds.max(1);
    let mut rounds = 1;
    let mut termination = episode.run(sb);
    let result = loop {
        outcome.rounds = rounds;
        outcome.trajectory = episode.trajectory().clone();
        if termination == Termination::BackendError {
            let msg = episode.trajectory().error.clone().unwrap_or_default();
            break Err(reject(RejectReason::EpisodeError, msg));
        }
        let after = run_tests(sb, &repo.test_command, &parser, repo.test_timeout_ms, "").map_err(sandbox_err)?;
        if after.collection_error {
            break Err(reject(
                RejectReason::CollectionError,
                after.parse_error.clone().unwrap_or_default(),
            ));
        }
        let f2p = compute_f2p(&baseline, &after)
            .map_err(|e| reject(RejectReason::EpisodeError, e.to_string()))?;
        if !f2p.fail_to_pass.is_empty() {
            break accept(env, sb, repo, strategy, config, instance_id, &base_ref, &after, f2p, rounds);
        }
        let missing = missing_after(&baseline, &after);
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|t| t.as_str()).collect();
            break Err(reject(RejectReason::TestsDeleted, names.join(", ")));
        }
        // Continuation only resumes an episode the model ended itself; a
        // spent step or context budget cannot be extended.
        if rounds < max_rounds && termination == Termination::Submitted {
            rounds += 1;
            tracing::debug!(round = rounds, "no failures, continuing");
            termination = episode.continue_with(sb, &strategy.continuation_prompt);
            continue;
        }
        let diff = sb.snapshot_diff(&base_ref).map_err(sandbox_err)?;
        break Err(if diff.is_empty() {
            reject(RejectReason::EmptyDiff, "")
        } else {
            reject(RejectReason::NoFailuresAfterMaxRounds, format!("{termination:?} after {rounds} rounds"))
        });
    };
    outcome.trajectory = episode.into_trajectory();
    result
}

#[allow(clippy::too_many_arguments)]
fn accept(
    env: &Env<'_>,
    sb: &mut SandboxHandle,
    repo: &RepoProfile,
    strategy: &Strategy,
    config: &GenerationConfig,
    instance_id: &str,
    base_ref: &str,
    after: &TestReport,
    f2p: crate::testkit::F2PResult,
    rounds: usize,
) -> Result<BugRecord, Rejection> {
    let patch = sb
        .snapshot_diff(base_ref)
        .map_err(|e| reject(RejectReason::EpisodeError, format!("sandbox: {e}")))?;
    if patch.is_empty() {
        return Err(reject(RejectReason::EmptyDiff, "tests failed without any change"));
    }
    let failing = failing_section(&after.raw_output);
    let files = changed_files(patch.as_str());
    let problem_statement = describe_bug(
        env.backend,
        env.tokenizer.as_ref(),
        &format!("{instance_id}/describe"),
        failing,
        &files,
        config,
    )
    .map_err(|e| reject(RejectReason::EpisodeError, format!("describe: {e}")))?;
    Ok(BugRecord {
        instance_id: instance_id.to_string(),
        repo: repo.name.clone(),
        image_ref: repo.image_ref.clone(),
        base_ref: base_ref.to_string(),
        patch,
        problem_statement,
        fail_to_pass: f2p.fail_to_pass,
        pass_to_pass: f2p.pass_to_pass,
        strategy: strategy.kind,
        generator_model: env.backend.model_name().to_string(),
        rounds,
        created_at: env.clock.now(),
    })
}
