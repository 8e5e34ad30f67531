//! End-to-end re-verification of stored records.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::record::BugRecord;
use crate::parallel::{self, Parallelism};
use crate::sandbox::{ResourceLimits, Runtime, SandboxError, SandboxHandle};
use crate::testkit::{run_tests, RepoProfile, TestId, TestReport, TestStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    PatchApplyFailed,
    CollectionError,
    F2pNotFailing,
    P2pRegression,
    SandboxError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordValidation {
    pub instance_id: String,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<InvalidReason>,
    /// fail_to_pass tests that did not fail.
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    pub f2p_not_failing: BTreeSet<TestId>,
    /// pass_to_pass tests that did not pass.
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    pub p2p_not_passing: BTreeSet<TestId>,
    /// Test runs performed.
    pub runs: usize,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total: usize,
    pub valid: usize,
    pub records: Vec<RecordValidation>,
}

impl ValidationReport {
    pub fn all_valid(&self) -> bool {
        self.valid == self.total
    }

    pub fn fraction_valid(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.valid as f64 / self.total as f64
        }
    }
}

/// Compares one test run against the record's expectations.
fn judge(rec: &BugRecord, report: &TestReport) -> (Option<InvalidReason>, BTreeSet<TestId>, BTreeSet<TestId>) {
    if report.collection_error {
        return (Some(InvalidReason::CollectionError), BTreeSet::new(), BTreeSet::new());
    }
    let f2p: BTreeSet<TestId> = rec
        .fail_to_pass
        .iter()
        .filter(|t| !report.status(t).is_some_and(TestStatus::is_failing))
        .cloned()
        .collect();
    let p2p: BTreeSet<TestId> = rec
        .pass_to_pass
        .iter()
        .filter(|t| report.status(t) != Some(TestStatus::Passed))
        .cloned()
        .collect();
    let reason = if !f2p.is_empty() {
        Some(InvalidReason::F2pNotFailing)
    } else if !p2p.is_empty() {
        Some(InvalidReason::P2pRegression)
    } else {
        None
    };
    (reason, f2p, p2p)
}

/// Fresh sandbox, apply, run. A run that disagrees with the record is
/// repeated in the same sandbox up to `profile.retries` more times.
pub fn validate_record(rec: &BugRecord, profile: &RepoProfile, runtime: &dyn Runtime) -> RecordValidation {
    let mut out = RecordValidation {
        instance_id: rec.instance_id.clone(),
        valid: false,
        reason: None,
        f2p_not_failing: BTreeSet::new(),
        p2p_not_passing: BTreeSet::new(),
        runs: 0,
        detail: String::new(),
    };
    let fail = |mut out: RecordValidation, reason, detail: String| {
        out.reason = Some(reason);
        out.detail = detail;
        out
    };
    let parser = match profile.parser_profile() {
        Ok(p) => p,
        Err(e) => return fail(out, InvalidReason::SandboxError, e.to_string()),
    };
    let mut sb = match SandboxHandle::create(runtime, &rec.image_ref, &ResourceLimits::default()) {
        Ok(sb) => sb,
        Err(e) => return fail(out, InvalidReason::SandboxError, e.to_string()),
    };
    if let Err(e) = sb.checkout(&rec.base_ref) {
        return fail(out, InvalidReason::SandboxError, e.to_string());
    }
    match sb.apply_patch(&rec.patch) {
        Ok(()) => {}
        Err(SandboxError::PatchApplyFailed(msg)) => {
            return fail(out, InvalidReason::PatchApplyFailed, msg.trim().to_string())
        }
        Err(e) => return fail(out, InvalidReason::SandboxError, e.to_string()),
    }
    for _ in 0..=profile.retries {
        out.runs += 1;
        let report = match run_tests(&mut sb, &profile.test_command, &parser, profile.test_timeout_ms, "") {
            Ok(r) => r,
            Err(e) => return fail(out, InvalidReason::SandboxError, e.to_string()),
        };
        let (reason, f2p, p2p) = judge(rec, &report);
        out.reason = reason;
        out.f2p_not_failing = f2p;
        out.p2p_not_passing = p2p;
        out.detail = report.parse_error.clone().unwrap_or_default();
        if reason.is_none() {
            out.valid = true;
            break;
        }
    }
    sb.destroy();
    out
}

/// Validates every record; `profile_for` supplies the repository profile
/// (test command, parser, retries) for a record.
pub fn validate<'a>(
    records: &[BugRecord],
    profile_for: impl Fn(&BugRecord) -> RepoProfile + Sync + Send + 'a,
    runtime: &dyn Runtime,
    mode: Parallelism,
) -> ValidationReport {
    let results = parallel::map(records, mode, |r| {
        let v = validate_record(r, &profile_for(r), runtime);
        if v.valid {
            tracing::info!(instance = %r.instance_id, "valid");
        } else {
            tracing::warn!(instance = %r.instance_id, reason = ?v.reason, "invalid");
        }
        v
    });
    ValidationReport {
        total: results.len(),
        valid: results.iter().filter(|v| v.valid).count(),
        records: results,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn report(entries: &[(&str, TestStatus)]) -> TestReport {
        TestReport {
            results: entries.iter().map(|(k, v)| (TestId::new(*k), *v)).collect::<BTreeMap<_, _>>(),
            raw_output: String::new(),
            duration_ms: 0,
            collection_error: false,
            parse_error: None,
        }
    }

    #[test]
    fn judge_orders_reasons() {
        let rec = crate::dataset::record::tests::sample();
        let ok = report(&[("tests/t.py::test_a", TestStatus::Failed), ("tests/t.py::test_b", TestStatus::Passed)]);
        assert_eq!(judge(&rec, &ok).0, None);
        let errored = report(&[("tests/t.py::test_a", TestStatus::Errored), ("tests/t.py::test_b", TestStatus::Passed)]);
        assert_eq!(judge(&rec, &errored).0, None);
        let regress = report(&[("tests/t.py::test_a", TestStatus::Failed), ("tests/t.py::test_b", TestStatus::Failed)]);
        assert_eq!(judge(&rec, &regress).0, Some(InvalidReason::P2pRegression));
        let fixed = report(&[("tests/t.py::test_a", TestStatus::Passed)]);
        let (reason, f2p, p2p) = judge(&rec, &fixed);
        assert_eq!(reason, Some(InvalidReason::F2pNotFailing));
        assert_eq!(f2p.len(), 1);
        assert_eq!(p2p.len(), 1, "a missing P2P test does not pass");
    }
}
