use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agent::Trajectory;
use crate::sandbox::UnifiedDiff;
use crate::testkit::TestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FeatAdd,
    BugInstruct,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 2] = [StrategyKind::FeatAdd, StrategyKind::BugInstruct];

    /// Compact form used in instance ids and on the command line.
    pub fn short(self) -> &'static str {
        match self {
            StrategyKind::FeatAdd => "featadd",
            StrategyKind::BugInstruct => "buginstruct",
        }
    }

    pub fn instance_id(self, repo: &str, seed: u64) -> String {
        format!("{repo}__{}__{seed}", self.short())
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown strategy {0:?} (expected featadd or buginstruct)")]
pub struct UnknownStrategy(pub String);

impl FromStr for StrategyKind {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "featadd" | "feat_add" => Ok(StrategyKind::FeatAdd),
            "buginstruct" | "bug_instruct" => Ok(StrategyKind::BugInstruct),
            other => Err(UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemStatement {
    /// Verbatim model output.
    pub text: String,
    pub tokens: usize,
    pub model: String,
}

/// One verified synthetic bug.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BugRecord {
    pub instance_id: String,
    pub repo: String,
    pub image_ref: String,
    pub base_ref: String,
    pub patch: UnifiedDiff,
    pub problem_statement: ProblemStatement,
    pub fail_to_pass: BTreeSet<TestId>,
    pub pass_to_pass: BTreeSet<TestId>,
    pub strategy: StrategyKind,
    pub generator_model: String,
    pub rounds: usize,
    pub created_at: DateTime<Utc>,
}

impl BugRecord {
    /// Schema-level checks a record must pass before it is stored.
    pub fn check(&self) -> Result<(), String> {
        let prefix = format!("{}__{}__", self.repo, self.strategy.short());
        let seed_ok = self
            .instance_id
            .strip_prefix(&prefix)
            .is_some_and(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()));
        if !seed_ok {
            return Err(format!(
                "instance_id {:?} does not match <repo>__<strategy>__<seed> for repo {:?}",
                self.instance_id, self.repo
            ));
        }
        if self.repo.is_empty() || self.repo.contains(char::is_whitespace) {
            return Err(format!("bad repo name {:?}", self.repo));
        }
        for (name, v) in [
            ("image_ref", &self.image_ref),
            ("base_ref", &self.base_ref),
            ("generator_model", &self.generator_model),
        ] {
            if v.trim().is_empty() {
                return Err(format!("{name} is empty"));
            }
        }
        if self.patch.is_empty() {
            return Err("patch is empty".into());
        }
        if self.problem_statement.text.trim().is_empty() {
            return Err("problem statement is empty".into());
        }
        if self.fail_to_pass.is_empty() {
            return Err("fail_to_pass is empty".into());
        }
        if let Some(t) = self.fail_to_pass.intersection(&self.pass_to_pass).next() {
            return Err(format!("{t} is in both fail_to_pass and pass_to_pass"));
        }
        if self.rounds == 0 {
            return Err("rounds must be at least 1".into());
        }
        Ok(())
    }
}

/// A generation episode as stored in `trajectories.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub strategy: StrategyKind,
    pub rounds: usize,
    /// `accepted`, or the rejection reason.
    pub outcome: String,
    #[serde(flatten)]
    pub trajectory: Trajectory,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample() -> BugRecord {
        BugRecord {
            instance_id: "toycalc__featadd__3".into(),
            repo: "toycalc".into(),
            image_ref: "bugpilot-toy/toycalc:1".into(),
            base_ref: "abc123".into(),
            patch: UnifiedDiff("diff --git a/x b/x\n".into()),
            problem_statement: ProblemStatement {
                text: "multiply is wrong".into(),
                tokens: 3,
                model: "replay".into(),
            },
            fail_to_pass: [TestId::new("tests/t.py::test_a")].into(),
            pass_to_pass: [TestId::new("tests/t.py::test_b")].into(),
            strategy: StrategyKind::FeatAdd,
            generator_model: "replay".into(),
            rounds: 1,
            created_at: "2024-01-01T00:00:00Z".parse().unwrap(),
        }
    }

    #[test]
    fn field_names_and_round_trip() {
        let r = sample();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with(r#"{"instance_id":"toycalc__featadd__3","repo":"toycalc""#));
        assert!(json.contains(r#""strategy":"feat_add""#));
        assert!(json.contains(r#""created_at":"2024-01-01T00:00:00Z""#));
        let back: BugRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn check_rejects_bad_records() {
        assert!(sample().check().is_ok());
        let mut r = sample();
        r.fail_to_pass.clear();
        assert!(r.check().is_err());
        let mut r = sample();
        r.instance_id = "toycalc__buginstruct__3".into();
        assert!(r.check().is_err());
        let mut r = sample();
        r.pass_to_pass = r.fail_to_pass.clone();
        assert!(r.check().is_err());
        let mut r = sample();
        r.patch = UnifiedDiff("  \n".into());
        assert!(r.check().is_err());
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("featadd".parse::<StrategyKind>().unwrap(), StrategyKind::FeatAdd);
        assert_eq!("bug_instruct".parse::<StrategyKind>().unwrap(), StrategyKind::BugInstruct);
        assert!("bogus".parse::<StrategyKind>().is_err());
        assert_eq!(StrategyKind::BugInstruct.instance_id("r", 7), "r__buginstruct__7");
    }
}
