use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{TestId, TestStatus};

/// On-disk definition of a parser profile (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParserProfileDef {
    pub name: String,
    /// Each must define named groups `id` and `status`.
    pub result_patterns: Vec<String>,
    /// Must define a named group `body` with the comma-separated counts.
    pub summary_pattern: String,
    /// Applied repeatedly to the summary body; groups `count` and `kind`.
    pub summary_count_pattern: String,
    pub collection_error_patterns: Vec<String>,
    /// Runner status word → status.
    pub status_map: BTreeMap<String, TestStatus>,
    /// Summary kind word → status. Unlisted kinds are not cross-checked.
    pub summary_kinds: BTreeMap<String, TestStatus>,
}

const PYTEST_PROFILE: &str = r#"
name = "pytest"
result_patterns = [
    '^(?P<id>[^\s:]+(?:::[^\s]+)+) (?P<status>PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS)(?:\s.*)?$',
    '^(?P<status>PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS) (?P<id>[^\s:]+(?:::[^\s]+)+)(?:\s.*)?$',
]
summary_pattern = '^=+ (?P<body>.*?) in [0-9.]+s(?: \([^)]*\))? =+$'
summary_count_pattern = '(?P<count>[0-9]+) (?P<kind>[a-z]+)'
collection_error_patterns = [
    '^_+ ERROR collecting ',
    '^!+ Interrupted: [0-9]+ errors? during collection',
]

[status_map]
PASSED = "passed"
FAILED = "failed"
ERROR = "errored"
SKIPPED = "skipped"
XFAIL = "skipped"
XPASS = "passed"

[summary_kinds]
passed = "passed"
failed = "failed"
error = "errored"
errors = "errored"
skipped = "skipped"
xfailed = "skipped"
xpassed = "passed"
"#;

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("profile {name}: bad regex {pattern:?}: {source}")]
    BadRegex {
        name: String,
        pattern: String,
        source: regex::Error,
    },
    #[error("profile {name}: result pattern {pattern:?} lacks named groups id/status")]
    MissingGroups { name: String, pattern: String },
    #[error("reading profile {path}: {reason}")]
    Load { path: String, reason: String },
    #[error("unknown parser profile {0:?}")]
    Unknown(String),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParseError {
    #[error("summary reports {summary} {status:?} but {parsed} were parsed")]
    SummaryMismatch {
        status: TestStatus,
        summary: usize,
        parsed: usize,
    },
}

/// Compiled parser profile.
#[derive(Debug, Clone)]
pub struct ParserProfile {
    def: ParserProfileDef,
    results: Vec<Regex>,
    summary: Regex,
    summary_count: Regex,
    collection: Vec<Regex>,
}

fn ansi() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\x1b\[[0-9;]*[A-Za-z]").expect("ansi regex"))
}

impl ParserProfile {
    pub fn compile(def: ParserProfileDef) -> Result<Self, ProfileError> {
        let re = |p: &str| {
            Regex::new(p).map_err(|source| ProfileError::BadRegex {
                name: def.name.clone(),
                pattern: p.to_string(),
                source,
            })
        };
        let mut results = Vec::new();
        for p in &def.result_patterns {
            let r = re(p)?;
            let names: Vec<_> = r.capture_names().flatten().collect();
            if !names.contains(&"id") || !names.contains(&"status") {
                return Err(ProfileError::MissingGroups {
                    name: def.name.clone(),
                    pattern: p.clone(),
                });
            }
            results.push(r);
        }
        let summary = re(&def.summary_pattern)?;
        let summary_count = re(&def.summary_count_pattern)?;
        let collection = def
            .collection_error_patterns
            .iter()
            .map(|p| re(p))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            def,
            results,
            summary,
            summary_count,
            collection,
        })
    }

    pub fn pytest() -> Self {
        let def: ParserProfileDef = toml::from_str(PYTEST_PROFILE).expect("bundled pytest profile");
        Self::compile(def).expect("bundled pytest profile compiles")
    }

    pub fn from_file(path: &Path) -> Result<Self, ProfileError> {
        let load = |reason: String| ProfileError::Load {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load(e.to_string()))?;
        let def: ParserProfileDef = toml::from_str(&text).map_err(|e| load(e.to_string()))?;
        Self::compile(def)
    }

    /// Resolves a profile by registered name or by path to a definition.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        match name_or_path {
            "pytest" => Ok(Self::pytest()),
            other if other.ends_with(".toml") => Self::from_file(Path::new(other)),
            other => Err(ProfileError::Unknown(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn definition(&self) -> &ParserProfileDef {
        &self.def
    }

    pub fn detect_collection_error(&self, raw: &str) -> bool {
        raw.lines()
            .map(|l| ansi().replace_all(l, ""))
            .any(|l| self.collection.iter().any(|r| r.is_match(l.trim_end())))
    }

    /// Extracts per-test statuses from runner output.
    ///
    /// When a test appears in several result lines (verbose line plus short
    /// summary, or a call failure plus a teardown error) the most severe
    /// status wins. The summary line's counts are cross-checked against the
    /// parsed statuses unless the output shows a collection error, whose
    /// errors have no per-test lines.
    pub fn parse(&self, raw: &str) -> Result<BTreeMap<TestId, TestStatus>, ParseError> {
        let mut results: BTreeMap<TestId, TestStatus> = BTreeMap::new();
        let mut summary: Option<BTreeMap<TestStatus, usize>> = None;
        for line in raw.lines() {
            let line = ansi().replace_all(line, "");
            let line = line.trim_end();
            if let Some(c) = self.summary.captures(line) {
                let body = c.name("body").map_or("", |m| m.as_str());
                let mut counts = BTreeMap::new();
                for cc in self.summary_count.captures_iter(body) {
                    let kind = &cc["kind"];
                    if let Some(status) = self.def.summary_kinds.get(kind) {
                        let n: usize = cc["count"].parse().unwrap_or(0);
                        *counts.entry(*status).or_insert(0) += n;
                    }
                }
                summary = Some(counts);
                continue;
            }
            for r in &self.results {
                if let Some(c) = r.captures(line) {
                    let Some(status) = self.def.status_map.get(&c["status"]).copied() else {
                        continue;
                    };
                    let id = TestId(c["id"].to_string());
                    results
                        .entry(id)
                        .and_modify(|s| *s = s.worst(status))
                        .or_insert(status);
                    break;
                }
            }
        }
        if let Some(counts) = summary {
            if !self.detect_collection_error(raw) {
                for (&status, &n) in &counts {
                    let parsed = results.values().filter(|s| **s == status).count();
                    if parsed != n {
                        return Err(ParseError::SummaryMismatch {
                            status,
                            summary: n,
                            parsed,
                        });
                    }
                }
            }
        }
        Ok(results)
    }
}

/// Free-function form used throughout the pipeline.
pub fn parse_runner_output(
    raw: &str,
    profile: &ParserProfile,
) -> Result<BTreeMap<TestId, TestStatus>, ParseError> {
    profile.parse(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> TestId {
        TestId(s.to_string())
    }

    #[test]
    fn failed_short_summary_plus_verbose_passes() {
        let raw = "tests/t.py::test_a FAILED [ 33%]\n\
                   tests/t.py::test_b PASSED [ 66%]\n\
                   tests/t.py::test_c PASSED [100%]\n\
                   FAILED tests/t.py::test_a - AssertionError\n\
                   === 1 failed, 2 passed in 0.03s ===";
        let m = ParserProfile::pytest().parse(raw).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[&id("tests/t.py::test_a")], TestStatus::Failed);
        assert_eq!(m[&id("tests/t.py::test_b")], TestStatus::Passed);
    }

    #[test]
    fn no_tests_ran_is_empty() {
        let m = ParserProfile::pytest()
            .parse("=== no tests ran in 0.01s ===")
            .unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn summary_mismatch_detected() {
        let raw = "FAILED tests/t.py::test_a - AssertionError\n=== 2 failed in 0.03s ===";
        assert_eq!(
            ParserProfile::pytest().parse(raw),
            Err(ParseError::SummaryMismatch {
                status: TestStatus::Failed,
                summary: 2,
                parsed: 1
            })
        );
    }

    #[test]
    fn parametrized_and_class_ids() {
        let raw = "tests/t.py::TestX::test_y[1-2] PASSED [ 50%]\n\
                   tests/t.py::test_z[a] SKIPPED (no reason) [100%]\n\
                   ===== 1 passed, 1 skipped in 0.10s =====";
        let m = ParserProfile::pytest().parse(raw).unwrap();
        assert_eq!(m[&id("tests/t.py::TestX::test_y[1-2]")], TestStatus::Passed);
        assert_eq!(m[&id("tests/t.py::test_z[a]")], TestStatus::Skipped);
    }

    #[test]
    fn teardown_error_outranks_pass() {
        let raw = "tests/t.py::test_a PASSED\ntests/t.py::test_a ERROR\n";
        let m = ParserProfile::pytest().parse(raw).unwrap();
        assert_eq!(m[&id("tests/t.py::test_a")], TestStatus::Errored);
    }

    #[test]
    fn parsing_is_idempotent() {
        let raw = "tests/t.py::test_a PASSED\n=== 1 passed in 0.01s ===";
        let p = ParserProfile::pytest();
        assert_eq!(p.parse(raw).unwrap(), p.parse(raw).unwrap());
    }

    #[test]
    fn profile_requires_named_groups() {
        let mut def: ParserProfileDef = toml::from_str(PYTEST_PROFILE).unwrap();
        def.result_patterns = vec!["^(.*) PASSED$".into()];
        assert!(matches!(
            ParserProfile::compile(def),
            Err(ProfileError::MissingGroups { .. })
        ));
    }
}
