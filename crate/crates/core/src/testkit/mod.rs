//! Test-suite execution and fail-to-pass bookkeeping.

mod parser;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sandbox::{SandboxError, SandboxHandle};

pub use parser::{parse_runner_output, ParseError, ParserProfile, ParserProfileDef, ProfileError};

/// Canonical test identifier, `<file path>::<test name>[<param>]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestId(pub String);

impl TestId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The file part of the id.
    pub fn file(&self) -> &str {
        self.0.split("::").next().unwrap_or(&self.0)
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatus {
    Passed,
    Skipped,
    Failed,
    Errored,
}

impl TestStatus {
    /// `errored` counts as failing.
    pub fn is_failing(self) -> bool {
        matches!(self, TestStatus::Failed | TestStatus::Errored)
    }

    fn severity(self) -> u8 {
        match self {
            TestStatus::Passed => 0,
            TestStatus::Skipped => 1,
            TestStatus::Failed => 2,
            TestStatus::Errored => 3,
        }
    }

    pub fn worst(self, other: TestStatus) -> TestStatus {
        if other.severity() > self.severity() {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub results: BTreeMap<TestId, TestStatus>,
    pub raw_output: String,
    pub duration_ms: u64,
    /// The run is unusable for fail-to-pass computation.
    pub collection_error: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

impl TestReport {
    pub fn passed(&self) -> BTreeSet<TestId> {
        self.with_status(|s| s == TestStatus::Passed)
    }

    pub fn failing(&self) -> BTreeSet<TestId> {
        self.with_status(TestStatus::is_failing)
    }

    fn with_status(&self, pred: impl Fn(TestStatus) -> bool) -> BTreeSet<TestId> {
        self.results
            .iter()
            .filter(|(_, s)| pred(**s))
            .map(|(t, _)| t.clone())
            .collect()
    }

    pub fn status(&self, id: &TestId) -> Option<TestStatus> {
        self.results.get(id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct F2PResult {
    pub fail_to_pass: BTreeSet<TestId>,
    pub pass_to_pass: BTreeSet<TestId>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("test report unusable for fail-to-pass computation ({which})")]
pub struct UnusableReport {
    pub which: &'static str,
}

/// Fail-to-pass: passed in `baseline`, failing (or errored) in `after`.
/// Pass-to-pass: passed in both. Tests missing from `after` and tests new in
/// `after` belong to neither set.
pub fn compute_f2p(baseline: &TestReport, after: &TestReport) -> Result<F2PResult, UnusableReport> {
    if baseline.collection_error {
        return Err(UnusableReport { which: "baseline" });
    }
    if after.collection_error {
        return Err(UnusableReport { which: "after" });
    }
    let mut out = F2PResult::default();
    for id in baseline.passed() {
        match after.status(&id) {
            Some(s) if s.is_failing() => {
                out.fail_to_pass.insert(id);
            }
            Some(TestStatus::Passed) => {
                out.pass_to_pass.insert(id);
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Baseline-passing tests that no longer appear after an edit.
pub fn missing_after(baseline: &TestReport, after: &TestReport) -> BTreeSet<TestId> {
    baseline
        .passed()
        .into_iter()
        .filter(|id| !after.results.contains_key(id))
        .collect()
}

/// Shell command template with `{workdir}` and `{extra_args}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TestCommand(pub String);

impl TestCommand {
    pub fn render(&self, workdir: &str, extra_args: &str) -> String {
        self.0
            .replace("{workdir}", workdir)
            .replace("{extra_args}", extra_args)
            .trim_end()
            .to_string()
    }
}

impl Default for TestCommand {
    fn default() -> Self {
        TestCommand(
            "cd {workdir} && PYTHONDONTWRITEBYTECODE=1 PYTEST_DISABLE_PLUGIN_AUTOLOAD=1 \
             python3 -m pytest -rA -v -p no:cacheprovider --color=no {extra_args}"
                .to_string(),
        )
    }
}

/// Everything needed to run one seed repository's tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepoProfile {
    pub name: String,
    pub image_ref: String,
    /// Defaults to the image's checked-out revision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_ref: Option<String>,
    #[serde(default)]
    pub test_command: TestCommand,
    #[serde(default = "default_parser")]
    pub parser: String,
    #[serde(default = "default_test_timeout")]
    pub test_timeout_ms: u64,
    #[serde(default = "default_one")]
    pub baseline_runs: usize,
    /// Extra attempts for a validation run that disagrees with its record.
    #[serde(default)]
    pub retries: usize,
}

fn default_parser() -> String {
    "pytest".to_string()
}

fn default_test_timeout() -> u64 {
    300_000
}

fn default_one() -> usize {
    1
}

impl RepoProfile {
    pub fn new(name: &str, image_ref: &str) -> Self {
        Self {
            name: name.to_string(),
            image_ref: image_ref.to_string(),
            base_ref: None,
            test_command: TestCommand::default(),
            parser: default_parser(),
            test_timeout_ms: default_test_timeout(),
            baseline_runs: 1,
            retries: 0,
        }
    }

    pub fn parser_profile(&self) -> Result<ParserProfile, ProfileError> {
        ParserProfile::resolve(&self.parser)
    }
}

/// Runs the suite once and parses the result. Timeouts, collection errors
/// and unparseable output all yield `collection_error = true` with the raw
/// output preserved.
pub fn run_tests(
    sandbox: &mut SandboxHandle,
    cmd: &TestCommand,
    profile: &ParserProfile,
    timeout_ms: u64,
    extra_args: &str,
) -> Result<TestReport, SandboxError> {
    let command = format!("{{ {}\n}} 2>&1", cmd.render(sandbox.workdir(), extra_args));
    let r = sandbox.exec(&command, timeout_ms)?;
    let raw_output = r.combined_text();
    if r.timed_out {
        return Ok(TestReport {
            results: BTreeMap::new(),
            raw_output,
            duration_ms: r.duration_ms,
            collection_error: true,
            parse_error: Some(format!("timed out after {timeout_ms} ms")),
        });
    }
    let collection_error = profile.detect_collection_error(&raw_output);
    let (results, parse_error) = match profile.parse(&raw_output) {
        Ok(m) => (m, None),
        Err(e) => (BTreeMap::new(), Some(e.to_string())),
    };
    Ok(TestReport {
        collection_error: collection_error || parse_error.is_some(),
        results,
        raw_output,
        duration_ms: r.duration_ms,
        parse_error,
    })
}

/// Runs the suite `runs` times and keeps, per test, the status seen in a
/// strict majority of runs; tests without a majority are marked failed.
pub fn run_baseline(
    sandbox: &mut SandboxHandle,
    repo: &RepoProfile,
    profile: &ParserProfile,
) -> Result<TestReport, SandboxError> {
    let runs = repo.baseline_runs.max(1);
    let mut reports = Vec::with_capacity(runs);
    for _ in 0..runs {
        let r = run_tests(sandbox, &repo.test_command, profile, repo.test_timeout_ms, "")?;
        if r.collection_error {
            return Ok(r);
        }
        reports.push(r);
    }
    if runs == 1 {
        return Ok(reports.pop().expect("one run"));
    }
    Ok(majority(reports))
}

fn majority(reports: Vec<TestReport>) -> TestReport {
    let n = reports.len();
    let mut votes: BTreeMap<TestId, BTreeMap<TestStatus, usize>> = BTreeMap::new();
    for r in &reports {
        for (id, s) in &r.results {
            *votes.entry(id.clone()).or_default().entry(*s).or_insert(0) += 1;
        }
    }
    let results = votes
        .into_iter()
        .map(|(id, v)| {
            let status = v
                .into_iter()
                .find(|(_, c)| *c * 2 > n)
                .map_or(TestStatus::Failed, |(s, _)| s);
            (id, status)
        })
        .collect();
    let first = reports.into_iter().next().expect("at least one report");
    TestReport {
        results,
        ..first
    }
}
