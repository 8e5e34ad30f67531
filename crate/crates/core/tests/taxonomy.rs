mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use bugpilot::dataset::BugRecord;
use bugpilot::model_client::{default_tokenizer, CompletionRequest, ModelBackend, ModelError, ModelReply};
use bugpilot::parallel::Parallelism;
use bugpilot::taxonomy::{
    classify, classify_all, derive_taxonomy, distribution, CategoryGuide, CategoryLabel, TaxonomyConfig,
    TaxonomyError, STATE_FILE,
};
use proptest::prelude::*;

fn bug(n: usize) -> BugRecord {
    serde_json::from_value(serde_json::json!({
        "instance_id": format!("toycalc__featadd__{n}"),
        "repo": "toycalc",
        "image_ref": "bugpilot-toy/toycalc:1",
        "base_ref": "abc",
        "patch": format!("diff --git a/calc/ops.py b/calc/ops.py\n--- a/calc/ops.py\n+++ b/calc/ops.py\n@@ -1,1 +1,1 @@\n-    return a * b\n+    return a * b + {n}\n"),
        "problem_statement": {"text": format!("multiply is off by {n}"), "tokens": 4, "model": "replay"},
        "fail_to_pass": ["tests/test_ops.py::test_multiply"],
        "pass_to_pass": ["tests/test_ops.py::test_add"],
        "strategy": "feat_add",
        "generator_model": "replay",
        "rounds": 1,
        "created_at": "2024-01-01T00:00:00Z",
    }))
    .unwrap()
}

/// Counts calls and fails those whose key starts with `fail_prefix`.
struct Probe<B> {
    inner: B,
    calls: AtomicUsize,
    fail_prefix: Option<&'static str>,
}

impl<B: ModelBackend> Probe<B> {
    fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0), fail_prefix: None }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ModelBackend> ModelBackend for Probe<B> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelReply, ModelError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_prefix.is_some_and(|p| request.episode.starts_with(p)) {
            return Err(ModelError::BackendExhausted { attempts: 3, last_error: "HTTP 503".into() });
        }
        self.inner.complete(request)
    }
}

fn taxonomy_backend() -> Probe<bugpilot::model_client::ReplayBackend> {
    Probe::new(common::replay_bundled("taxonomy.jsonl"))
}

fn scripted_guide_text() -> String {
    let entries = bugpilot::model_client::parse_script(bugpilot::toycorpus::script("taxonomy.jsonl").unwrap()).unwrap();
    let guide = entries.iter().find(|e| e.episode == "taxonomy/guide").unwrap();
    guide.content.clone()
}

#[test]
fn classify_reads_the_category() {
    let backend = common::replay_bundled("classify.jsonl");
    let l = classify(&backend, default_tokenizer().as_ref(), &bug(1), &CategoryGuide::builtin(), &TaxonomyConfig::default());
    assert_eq!(l.code, Some('B'));
    assert_eq!(l.reasoning, "The rounding branch changes results for fractional inputs.");
    assert_eq!(l.model, backend.model_name());
    assert!(l.error.is_none());
}

#[test]
fn malformed_replies_are_retried_once_then_unlabeled() {
    let backend = Probe::new(common::replay_bundled("classify_malformed.jsonl"));
    let l = classify(&backend, default_tokenizer().as_ref(), &bug(1), &CategoryGuide::builtin(), &TaxonomyConfig::default());
    assert_eq!(backend.calls(), 2);
    assert_eq!(l.code, None);
    assert!(l.error.unwrap().contains("not in the guide"));

    let backend = Probe::new(common::replay_bundled("classify_malformed.jsonl"));
    let config = TaxonomyConfig { classify_retries: 0, ..TaxonomyConfig::default() };
    let l = classify(&backend, default_tokenizer().as_ref(), &bug(1), &CategoryGuide::builtin(), &config);
    assert_eq!(backend.calls(), 1);
    assert!(l.error.unwrap().contains("<category>"));
}

#[test]
fn classify_all_keeps_order() {
    let backend = common::replay_bundled("classify.jsonl");
    let bugs: Vec<BugRecord> = (0..5).map(bug).collect();
    let labels = classify_all(&backend, default_tokenizer().as_ref(), &bugs, &CategoryGuide::builtin(), &TaxonomyConfig::default(), Parallelism::Workers(3));
    let ids: Vec<&str> = labels.iter().map(|l| l.instance_id.as_str()).collect();
    assert_eq!(ids, bugs.iter().map(|b| b.instance_id.as_str()).collect::<Vec<_>>());
    assert!(labels.iter().all(|l| l.code == Some('B')));
    assert_eq!(distribution(&labels).fractions[&'B'], 1.0);
}

#[test]
fn four_bugs_fanout_two_takes_seven_calls() {
    let tok = default_tokenizer();
    let bugs: Vec<BugRecord> = (0..4).map(bug).collect();
    let backend = taxonomy_backend();
    let d = derive_taxonomy(&backend, tok.as_ref(), &bugs, 2, &TaxonomyConfig::default(), None, Parallelism::Workers(4)).unwrap();
    assert_eq!((backend.calls(), d.calls, d.rounds), (7, 7, 2));
    let scripted = scripted_guide_text();
    assert_eq!(d.guide_reply, scripted);
    assert_eq!(d.guide.to_string(), scripted);
    assert_eq!(d.guide.codes().collect::<String>(), "AB");

    let again = derive_taxonomy(&taxonomy_backend(), tok.as_ref(), &bugs, 2, &TaxonomyConfig::default(), None, Parallelism::Sequential).unwrap();
    assert_eq!(again.guide.to_string(), d.guide.to_string());
}

#[test]
fn single_bug_is_one_summary_and_one_guide() {
    let backend = taxonomy_backend();
    let d = derive_taxonomy(&backend, default_tokenizer().as_ref(), &[bug(0)], 8, &TaxonomyConfig::default(), None, Parallelism::Sequential).unwrap();
    assert_eq!((backend.calls(), d.rounds), (2, 1));
}

#[test]
fn bad_inputs_are_refused() {
    let tok = default_tokenizer();
    let backend = taxonomy_backend();
    let c = TaxonomyConfig::default();
    assert!(matches!(derive_taxonomy(&backend, tok.as_ref(), &[], 2, &c, None, Parallelism::Sequential), Err(TaxonomyError::NoBugs)));
    assert!(matches!(derive_taxonomy(&backend, tok.as_ref(), &[bug(0)], 1, &c, None, Parallelism::Sequential), Err(TaxonomyError::Fanout(1))));
    assert_eq!(backend.calls(), 0);
}

#[test]
fn failed_derivation_resumes_from_saved_rounds() {
    let tok = default_tokenizer();
    let bugs: Vec<BugRecord> = (0..4).map(bug).collect();
    let dir = tempfile::tempdir().unwrap();
    let c = TaxonomyConfig::default();

    let mut broken = taxonomy_backend();
    broken.fail_prefix = Some("taxonomy/merge/");
    let err = derive_taxonomy(&broken, tok.as_ref(), &bugs, 2, &c, Some(dir.path()), Parallelism::Workers(2)).unwrap_err();
    assert!(matches!(err, TaxonomyError::Model { ref key, .. } if key.starts_with("taxonomy/merge/1/")));
    let state: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(STATE_FILE)).unwrap()).unwrap();
    assert_eq!(state["summaries"].as_object().unwrap().len(), 4);

    let backend = taxonomy_backend();
    let d = derive_taxonomy(&backend, tok.as_ref(), &bugs, 2, &c, Some(dir.path()), Parallelism::Workers(2)).unwrap();
    assert_eq!((backend.calls(), d.calls), (3, 3));
    assert_eq!(d.guide.to_string(), scripted_guide_text());

    // Completed: nothing left to call.
    let backend = taxonomy_backend();
    let d2 = derive_taxonomy(&backend, tok.as_ref(), &bugs, 2, &c, Some(dir.path()), Parallelism::Sequential).unwrap();
    assert_eq!((backend.calls(), d2.guide), (0, d.guide));

    // Different inputs start over.
    let backend = taxonomy_backend();
    derive_taxonomy(&backend, tok.as_ref(), &bugs[..3], 2, &c, Some(dir.path()), Parallelism::Sequential).unwrap();
    assert_eq!(backend.calls(), 3 + 2 + 1);
}

#[test]
fn builtin_guide_matches_the_bundled_text() {
    let g = CategoryGuide::builtin();
    assert_eq!(g.entries.len(), 10);
    assert_eq!(g.to_string(), bugpilot::prompts::DEFAULT_GUIDE);
    let f = g.get('F').unwrap();
    assert!(!f.description.is_empty() && !f.signals.is_empty() && !f.common_fixes.is_empty());
}

fn label(i: usize, code: Option<char>) -> CategoryLabel {
    CategoryLabel { instance_id: format!("b{i}"), code, reasoning: String::new(), model: "m".into(), error: None }
}

proptest! {
    #[test]
    fn distribution_sums_to_one_and_ignores_order(
        codes in prop::collection::vec(prop::option::weighted(0.8, prop::sample::select(('A'..='J').collect::<Vec<_>>())), 0..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<CategoryLabel> = codes.iter().enumerate().map(|(i, c)| label(i, *c)).collect();
        let d = distribution(&labels);
        prop_assert_eq!(d.labeled + d.unlabeled, labels.len());
        if d.labeled > 0 {
            prop_assert!((d.fractions.values().sum::<f64>() - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(d.fractions.is_empty());
        }
        let mut shuffled = labels.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(distribution(&shuffled), d);
    }
}
