mod common;

use std::collections::BTreeMap;

use bugpilot::testkit::{
    compute_f2p, run_baseline, run_tests, ParseError, ParserProfile, RepoProfile, TestCommand,
    TestId, TestStatus,
};
use bugpilot::toycorpus;

fn run(h: &mut bugpilot::sandbox::SandboxHandle) -> bugpilot::testkit::TestReport {
    run_tests(h, &TestCommand::default(), &ParserProfile::pytest(), 60_000, "").unwrap()
}

#[test]
fn clean_fixtures_are_green() {
    let f = common::fixtures();
    for repo in toycorpus::repos() {
        let mut h = f.sandbox(repo.name);
        let r = run(&mut h);
        assert!(!r.collection_error, "{}", r.raw_output);
        assert_eq!(r.results.len(), repo.test_count, "{}", repo.name);
        assert!(r.results.values().all(|s| *s == TestStatus::Passed));
    }
}

#[test]
fn each_documented_mutation_breaks_exactly_its_test() {
    let f = common::fixtures();
    for m in toycorpus::mutations() {
        let mut h = f.sandbox(&m.repo);
        let baseline = run(&mut h);
        let text = String::from_utf8(h.read_file(&m.file).unwrap()).unwrap();
        h.write_file(&m.file, text.replacen(&m.find, &m.replace, 1).as_bytes()).unwrap();
        let after = run(&mut h);
        let f2p = compute_f2p(&baseline, &after).unwrap();
        assert_eq!(f2p.fail_to_pass, [TestId::new(&m.breaks)].into(), "{m:?}");
        assert_eq!(f2p.pass_to_pass.len(), baseline.results.len() - 1);
    }
}

#[test]
fn planted_import_error_is_collection_error() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    h.exec("echo 'import calc.nope' >> calc/__init__.py", 5_000).unwrap();
    let r = run(&mut h);
    assert!(r.collection_error);
    assert!(r.results.is_empty());
    assert!(r.raw_output.contains("ModuleNotFoundError"));
}

#[test]
fn timeout_is_collection_error_with_output() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let cmd = TestCommand("cd {workdir} && echo started && sleep 5".into());
    let r = run_tests(&mut h, &cmd, &ParserProfile::pytest(), 500, "").unwrap();
    assert!(r.collection_error);
    assert!(r.raw_output.contains("started"));
    assert!(r.parse_error.unwrap().contains("timed out"));
}

#[test]
fn extra_args_reach_the_runner() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let r = run_tests(&mut h, &TestCommand::default(), &ParserProfile::pytest(), 60_000, "tests/test_stats.py").unwrap();
    assert_eq!(r.results.len(), 4);
}

#[test]
fn majority_baseline_matches_single_run_on_stable_suite() {
    let f = common::fixtures();
    let mut h = f.sandbox("toyinventory");
    let mut profile = RepoProfile::new("toyinventory", toycorpus::TOYINVENTORY.image_ref);
    profile.baseline_runs = 3;
    let r = run_baseline(&mut h, &profile, &ParserProfile::pytest()).unwrap();
    assert_eq!(r.results.len(), 9);
    assert!(r.results.values().all(|s| *s == TestStatus::Passed));
}

fn golden_map(name: &str) -> BTreeMap<TestId, TestStatus> {
    serde_json::from_str(toycorpus::expected(&format!("parser/{name}.json")).unwrap()).unwrap()
}

#[test]
fn parser_goldens() {
    let p = ParserProfile::pytest();
    for name in ["all_pass", "mixed", "error", "skipped", "collection_error"] {
        let raw = toycorpus::expected(&format!("parser/{name}.txt")).unwrap();
        assert_eq!(p.parse(raw).unwrap(), golden_map(name), "{name}");
        assert_eq!(p.detect_collection_error(raw), name == "collection_error", "{name}");
    }
    let raw = toycorpus::expected("parser/summary_mismatch.txt").unwrap();
    assert!(matches!(p.parse(raw), Err(ParseError::SummaryMismatch { status: TestStatus::Failed, summary: 2, parsed: 1 })));
}

#[test]
fn custom_profile_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tap.toml");
    std::fs::write(
        &path,
        r#"
name = "tap"
result_patterns = ['^(?P<status>ok|not ok) [0-9]+ - (?P<id>\S+)$']
summary_pattern = '^# (?P<body>pass [0-9]+ fail [0-9]+)$'
summary_count_pattern = '(?P<kind>pass|fail) (?P<count>[0-9]+)'
collection_error_patterns = ['^Bail out!']
[status_map]
ok = "passed"
"not ok" = "failed"
[summary_kinds]
pass = "passed"
fail = "failed"
"#,
    )
    .unwrap();
    let p = ParserProfile::resolve(path.to_str().unwrap()).unwrap();
    let m = p.parse("ok 1 - t/a\nnot ok 2 - t/b\n# pass 1 fail 1\n").unwrap();
    assert_eq!(m[&TestId::new("t/b")], TestStatus::Failed);
    assert!(p.parse("ok 1 - t/a\n# pass 2 fail 0\n").is_err());
}
