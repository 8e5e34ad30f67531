use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AttemptOutcome;
use crate::agent::Trajectory;

/// What "shortest attempt" means for pass@short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortBy {
    #[default]
    Steps,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceResult {
    /// Indexed by attempt.
    pub resolved: Vec<bool>,
    pub steps: Vec<usize>,
    /// Attempt chosen by pass@short.
    pub short_attempt: usize,
}

impl InstanceResult {
    pub fn solved(&self) -> usize {
        self.resolved.iter().filter(|r| **r).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub trajectories: usize,
    pub avg_steps: f64,
    /// Mean over all steps.
    pub avg_observation_tokens: f64,
    /// Mean count of steps with non-empty assistant content.
    pub avg_assistant_content_per_traj: f64,
    /// Mean size of a non-empty assistant content entry.
    pub avg_assistant_content_tokens: f64,
}

fn mean(sum: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

pub fn trajectory_stats<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> TrajectoryStats {
    let (mut n, mut steps, mut obs, mut contents, mut content_tokens) = (0, 0, 0, 0, 0);
    for t in trajectories {
        n += 1;
        steps += t.steps.len();
        for s in &t.steps {
            obs += s.observation_tokens;
            if !s.assistant_content.trim().is_empty() {
                contents += 1;
                content_tokens += s.content_tokens;
            }
        }
    }
    TrajectoryStats {
        trajectories: n,
        avg_steps: mean(steps, n),
        avg_observation_tokens: mean(obs, steps),
        avg_assistant_content_per_traj: mean(contents, n),
        avg_assistant_content_tokens: mean(content_tokens, contents),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveMetrics {
    pub k: usize,
    pub instances: usize,
    pub pass_at_1_avg: f64,
    pub pass_at_k: f64,
    pub pass_all_k: f64,
    pub pass_at_short: f64,
    pub short_by: ShortBy,
    pub per_instance: BTreeMap<String, InstanceResult>,
    #[serde(flatten)]
    pub trajectory: TrajectoryStats,
}

/// Folds attempts into metrics. Only instances with all `k` attempts
/// present are counted.
pub fn compute_metrics(outcomes: &[AttemptOutcome], k: usize, short_by: ShortBy) -> SolveMetrics {
    let mut grouped: BTreeMap<&str, Vec<Option<&AttemptOutcome>>> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.attempt_index < k) {
        grouped.entry(&o.instance_id).or_insert_with(|| vec![None; k])[o.attempt_index] = Some(o);
    }
    let mut per_instance = BTreeMap::new();
    let mut counted = Vec::new();
    let mut per_attempt = vec![0usize; k];
    let (mut any, mut all, mut short) = (0, 0, 0);
    for (id, attempts) in grouped {
        let Some(attempts) = attempts.into_iter().collect::<Option<Vec<_>>>() else {
            tracing::warn!(instance = id, "incomplete attempts, left out of metrics");
            continue;
        };
        let length = |o: &AttemptOutcome| match short_by {
            ShortBy::Steps => o.steps,
            ShortBy::Tokens => o.total_tokens,
        };
        // min_by_key keeps the first minimum, i.e. the lowest attempt index.
        let short_attempt = (0..k).min_by_key(|&i| length(attempts[i])).unwrap_or(0);
        let r = InstanceResult {
            resolved: attempts.iter().map(|o| o.resolved).collect(),
            steps: attempts.iter().map(|o| o.steps).collect(),
            short_attempt,
        };
        for (j, ok) in r.resolved.iter().enumerate() {
            per_attempt[j] += usize::from(*ok);
        }
        any += usize::from(r.solved() > 0);
        all += usize::from(r.solved() == k);
        short += usize::from(r.resolved[short_attempt]);
        counted.extend(attempts.iter().map(|o| &o.trajectory));
        per_instance.insert(id.to_string(), r);
    }
    let n = per_instance.len();
    // The mean of the per-attempt rates, as one division so it is
    // correctly rounded and ordered against pass^k and pass@k.
    let pass_at_1_avg = mean(per_attempt.iter().sum(), n * k);
    SolveMetrics {
        k,
        instances: n,
        pass_at_1_avg,
        pass_at_k: mean(any, n),
        pass_all_k: mean(all, n),
        pass_at_short: mean(short, n),
        short_by,
        per_instance,
        trajectory: trajectory_stats(counted),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::agent::{Step, Termination};

    pub(crate) fn outcome(id: &str, i: usize, resolved: bool, steps: usize) -> AttemptOutcome {
        let trajectory = Trajectory {
            instance_id: id.into(),
            system_prompt: "s".into(),
            instance_prompt: "u".into(),
            steps: (0..steps)
                .map(|index| Step {
                    index,
                    injected_user: None,
                    assistant_content: if index % 2 == 0 { "thinking hard".into() } else { String::new() },
                    tool_call: None,
                    observation: "ok".into(),
                    observation_tokens: 3,
                    content_tokens: if index % 2 == 0 { 2 } else { 0 },
                })
                .collect(),
            termination: Termination::Submitted,
            success: Some(resolved),
            seed: i as u64,
            total_prompt_tokens: 0,
            total_completion_tokens: 0,
            error: None,
        };
        AttemptOutcome {
            instance_id: id.into(),
            attempt_index: i,
            seed: i as u64,
            trajectory,
            resolved,
            steps,
            total_tokens: 100 - steps,
            detail: None,
        }
    }

    #[test]
    fn two_of_three() {
        let o = [outcome("a", 0, true, 5), outcome("a", 1, false, 5), outcome("a", 2, true, 5)];
        let m = compute_metrics(&o, 3, ShortBy::Steps);
        assert!((m.pass_at_1_avg - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((m.pass_at_k, m.pass_all_k), (1.0, 0.0));
    }

    #[test]
    fn shortest_attempt_failed() {
        let o = [outcome("a", 0, true, 50), outcome("a", 1, false, 10), outcome("a", 2, true, 30)];
        let m = compute_metrics(&o, 3, ShortBy::Steps);
        assert_eq!(m.pass_at_short, 0.0);
        assert_eq!(m.per_instance["a"].short_attempt, 1);
        // total_tokens runs the other way in this fixture.
        let m = compute_metrics(&o, 3, ShortBy::Tokens);
        assert_eq!((m.per_instance["a"].short_attempt, m.pass_at_short), (0, 1.0));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let o = [outcome("a", 1, true, 4), outcome("a", 0, false, 4)];
        assert_eq!(compute_metrics(&o, 2, ShortBy::Steps).per_instance["a"].short_attempt, 0);
    }

    #[test]
    fn all_failures_are_zero() {
        let o: Vec<_> = (0..3).map(|i| outcome("a", i, false, 2)).collect();
        let m = compute_metrics(&o, 3, ShortBy::Steps);
        assert_eq!([m.pass_at_1_avg, m.pass_at_k, m.pass_all_k, m.pass_at_short], [0.0; 4]);
    }

    #[test]
    fn incomplete_instances_are_left_out() {
        let o = [outcome("a", 0, true, 1), outcome("b", 0, true, 1), outcome("b", 1, true, 1)];
        let m = compute_metrics(&o, 2, ShortBy::Steps);
        assert_eq!(m.instances, 1);
        assert!(m.per_instance.contains_key("b"));
        assert_eq!(m.trajectory.trajectories, 2);
    }

    #[test]
    fn trajectory_statistics() {
        let o = [outcome("a", 0, true, 4), outcome("a", 1, true, 2)];
        let s = trajectory_stats(o.iter().map(|o| &o.trajectory));
        assert_eq!(s.avg_steps, 3.0);
        assert_eq!(s.avg_observation_tokens, 3.0);
        // Steps 0 and 2 of the first, step 0 of the second.
        assert_eq!(s.avg_assistant_content_per_traj, 1.5);
        assert_eq!(s.avg_assistant_content_tokens, 2.0);
        assert_eq!(trajectory_stats([]), TrajectoryStats::default());
    }
}
