use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{generate_bug, Env, GenerationConfig, GenerationOutcome, Strategy};
use crate::dataset::{Collection, DatasetStore, StoreError, StrategyKind, TrajectoryRecord};
use crate::parallel::{self, Parallelism};
use crate::testkit::RepoProfile;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepoSummary {
    pub attempts: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub rejects: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub strategy: StrategyKind,
    pub attempts_per_repo: usize,
    pub attempts: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// Accepted bugs the store refused because the id was already present.
    pub duplicates: usize,
    /// Attempts skipped after cancellation.
    pub skipped: usize,
    pub per_repo: BTreeMap<String, RepoSummary>,
}

#[derive(Debug)]
pub struct CampaignResult {
    pub outcomes: Vec<GenerationOutcome>,
    pub summary: CampaignSummary,
}

fn rate(a: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a as f64 / n as f64
    }
}

fn persist(store: &Mutex<DatasetStore>, o: &GenerationOutcome) -> Result<bool, StoreError> {
    let mut s = store.lock().unwrap_or_else(|p| p.into_inner());
    let mut duplicate = false;
    if let Some(bug) = &o.bug {
        match s.append_bug(bug) {
            Ok(()) => {}
            Err(StoreError::DuplicateInstance { key, .. }) => {
                tracing::warn!(instance = %key, "instance already in the dataset, not stored");
                duplicate = true;
            }
            Err(e) => return Err(e),
        }
    }
    if !s.contains(Collection::Trajectories, &o.instance_id) {
        s.append(
            Collection::Trajectories,
            &TrajectoryRecord {
                strategy: o.strategy,
                rounds: o.rounds,
                outcome: o.outcome_label().to_string(),
                trajectory: o.trajectory.clone(),
            },
        )?;
    }
    Ok(duplicate)
}

/// Runs `attempts_per_repo` attempts on every repository, with seeds
/// `base_seed..base_seed + attempts_per_repo`. Accepted bugs and all
/// trajectories are appended to `store` as they complete; the store is
/// sealed at the end so its bytes do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_campaign(
    env: &Env<'_>,
    repos: &[RepoProfile],
    strategy: &Strategy,
    attempts_per_repo: usize,
    base_seed: u64,
    config: &GenerationConfig,
    store: Option<&Mutex<DatasetStore>>,
    mode: Parallelism,
) -> Result<CampaignResult, StoreError> {
    let jobs: Vec<(&RepoProfile, u64)> = repos
        .iter()
        .flat_map(|r| (0..attempts_per_repo as u64).map(move |i| (r, base_seed + i)))
        .collect();
    let results = parallel::map(&jobs, mode, |(repo, seed)| {
        if env.cancelled() {
            return None;
        }
        let o = generate_bug(env, repo, strategy, *seed, config);
        let stored = store.map(|s| persist(s, &o));
        Some((o, stored))
    });

    let mut outcomes = Vec::new();
    let mut summary = CampaignSummary {
        strategy: strategy.kind,
        attempts_per_repo,
        attempts: 0,
        accepted: 0,
        acceptance_rate: 0.0,
        duplicates: 0,
        skipped: 0,
        per_repo: repos
            .iter()
            .map(|r| (r.name.clone(), RepoSummary::default()))
            .collect(),
    };
    let mut first_err = None;
    for r in results {
        let Some((o, stored)) = r else {
            summary.skipped += 1;
            continue;
        };
        match stored {
            Some(Ok(true)) => summary.duplicates += 1,
            Some(Err(e)) if first_err.is_none() => first_err = Some(e),
            _ => {}
        }
        let rs = summary.per_repo.entry(o.repo.clone()).or_default();
        rs.attempts += 1;
        summary.attempts += 1;
        if o.accepted() {
            rs.accepted += 1;
            summary.accepted += 1;
        } else {
            *rs.rejects.entry(o.outcome_label().to_string()).or_insert(0) += 1;
        }
        outcomes.push(o);
    }
    for rs in summary.per_repo.values_mut() {
        rs.acceptance_rate = rate(rs.accepted, rs.attempts);
    }
    summary.acceptance_rate = rate(summary.accepted, summary.attempts);
    if let Some(s) = store {
        s.lock().unwrap_or_else(|p| p.into_inner()).seal()?;
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(CampaignResult { outcomes, summary })
}
