mod common;

use bugpilot::agent::{run_episode, EpisodeConfig, Termination, TRUNCATION_MARKER};
use bugpilot::model_client::{default_tokenizer, ScriptEntry, ToolCall};
use bugpilot::sandbox::SandboxHandle;

fn tool(step: usize, call: ToolCall) -> ScriptEntry {
    ScriptEntry::tool("ep", step, call)
}

fn bash(cmd: &str) -> ToolCall {
    ToolCall::new("execute_bash").arg("command", cmd)
}

fn editor(command: &str, path: &str) -> ToolCall {
    ToolCall::new("file_editor").arg("command", command).arg("path", path)
}

fn finish() -> ToolCall {
    ToolCall::new("finish")
}

fn run(
    h: &mut SandboxHandle,
    script: Vec<ScriptEntry>,
    config: &EpisodeConfig,
) -> bugpilot::agent::Trajectory {
    let backend = common::replay(script);
    run_episode(&backend, default_tokenizer(), h, "ep", "inst", "system", "task", config, 0).unwrap()
}

fn observations(script: Vec<ScriptEntry>) -> Vec<String> {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    run(&mut h, script, &EpisodeConfig::default())
        .steps
        .into_iter()
        .map(|s| s.observation)
        .collect()
}

#[test]
fn immediate_submit() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let t = run(&mut h, vec![tool(0, ToolCall::new("submit"))], &EpisodeConfig::default());
    assert_eq!(t.steps.len(), 1);
    assert_eq!(t.termination, Termination::Submitted);
}

#[test]
fn bash_then_submit() {
    let obs = observations(vec![tool(0, bash("echo hi")), tool(1, finish())]);
    assert_eq!(obs.len(), 2);
    assert_eq!(obs[0], "hi\nexit_code=0");
}

#[test]
fn step_limit_without_submit() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let script = (0..150).map(|i| tool(i, bash("true"))).collect();
    let t = run(&mut h, script, &EpisodeConfig::default());
    assert_eq!(t.steps.len(), 100);
    assert_eq!(t.termination, Termination::StepLimit);
    assert!(t.steps.iter().enumerate().all(|(i, s)| s.index == i));
}

#[test]
fn finish_mid_episode() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let mut script: Vec<_> = (0..3).map(|i| tool(i, bash("true"))).collect();
    script.push(tool(3, finish().arg("message", "all done")));
    script.push(tool(4, bash("true")));
    let t = run(&mut h, script, &EpisodeConfig::default());
    assert_eq!(t.steps.len(), 4);
    assert_eq!(t.termination, Termination::Submitted);
    assert_eq!(t.steps[3].observation, "all done");
}

#[test]
fn create_then_view() {
    let obs = observations(vec![
        tool(0, editor("create", "new.py").arg("file_text", "x=1")),
        tool(1, editor("view", "new.py")),
        tool(2, editor("create", "new.py").arg("file_text", "y")),
        tool(3, finish()),
    ]);
    assert_eq!(obs[1], "1\tx=1");
    assert!(obs[2].starts_with("ERROR:") && obs[2].contains("exists"), "{}", obs[2]);
}

#[test]
fn view_window_and_directory() {
    let obs = observations(vec![
        tool(0, editor("view", "calc/ops.py").arg("start_line", 4).arg("end_line", 5)),
        tool(1, editor("view", "calc")),
        tool(2, editor("view", "missing.py")),
        tool(3, finish()),
    ]);
    assert_eq!(obs[0], "4\tdef add(a, b):\n5\t    \"\"\"Return the sum of a and b.\"\"\"");
    assert!(obs[1].contains("calc/ops.py") && obs[1].contains("calc/stats.py"), "{}", obs[1]);
    assert!(obs[2].starts_with("ERROR:"), "{}", obs[2]);
}

#[test]
fn str_replace_uniqueness() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let t = run(
        &mut h,
        vec![
            tool(0, editor("str_replace", "calc/ops.py").arg("old_str", "    return").arg("new_str", "x")),
            tool(1, editor("str_replace", "calc/ops.py").arg("old_str", "no such text").arg("new_str", "x")),
            tool(2, editor("str_replace", "calc/ops.py").arg("old_str", "return a - b").arg("new_str", "return b - a")),
            tool(3, finish()),
        ],
        &EpisodeConfig::default(),
    );
    assert!(t.steps[0].observation.starts_with("ERROR:") && t.steps[0].observation.contains("not unique"));
    assert!(t.steps[1].observation.starts_with("ERROR:"));
    assert!(!t.steps[2].observation.starts_with("ERROR:"));
    let text = String::from_utf8(h.read_file("calc/ops.py").unwrap()).unwrap();
    assert!(text.contains("return b - a"));
}

#[test]
fn insert_into_empty_file() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    h.write_file("empty.py", b"").unwrap();
    run(
        &mut h,
        vec![
            tool(0, editor("insert", "empty.py").arg("insert_line", 0).arg("new_str", "import os\n")),
            tool(1, finish()),
        ],
        &EpisodeConfig::default(),
    );
    let text = String::from_utf8(h.read_file("empty.py").unwrap()).unwrap();
    assert!(text.starts_with("import os"));
}

#[test]
fn paths_outside_workdir_are_errors() {
    let obs = observations(vec![
        tool(0, editor("view", "/etc/passwd")),
        tool(1, editor("create", "../escape.py").arg("file_text", "x")),
        tool(2, finish()),
    ]);
    assert!(obs[0].starts_with("ERROR:") && obs[0].contains("escapes"), "{}", obs[0]);
    assert!(obs[1].starts_with("ERROR:"), "{}", obs[1]);
}

#[test]
fn bash_exit_codes_and_truncation() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let config = EpisodeConfig::default();
    let t = run(
        &mut h,
        vec![
            tool(0, bash("exit 2")),
            tool(1, bash("python3 -c \"print('x ' * 1000000)\"")),
            tool(2, finish()),
        ],
        &config,
    );
    assert_eq!(t.steps[0].observation, "exit_code=2");
    let big = &t.steps[1].observation;
    let tok = default_tokenizer();
    assert!(tok.count(big) <= config.max_observation_tokens);
    assert!(big.contains(TRUNCATION_MARKER));
    assert!(big.ends_with("exit_code=0"));
    for s in &t.steps {
        assert_eq!(s.observation_tokens, tok.count(&s.observation));
        assert_eq!(s.content_tokens, tok.count(&s.assistant_content));
    }
}

#[test]
fn bash_timeout_is_observation() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let config = EpisodeConfig { command_timeout_ms: 300, ..EpisodeConfig::default() };
    let t = run(&mut h, vec![tool(0, bash("sleep 5")), tool(1, finish())], &config);
    assert!(t.steps[0].observation.contains("timed out"));
    assert_eq!(t.termination, Termination::Submitted);
}

#[test]
fn search_results() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    for i in 0..101 {
        h.write_file(&format!("planted/f{i:03}.txt"), b"needle_xyz\n").unwrap();
    }
    let search = |term: &str| ToolCall::new("search").arg("search_term", term);
    let t = run(
        &mut h,
        vec![
            tool(0, search("def median")),
            tool(1, search("zzz_not_there")),
            tool(2, search("needle_xyz").arg("path", "planted")),
            tool(3, search("([unclosed")),
            tool(4, finish()),
        ],
        &EpisodeConfig::default(),
    );
    // Oracle: grep on the same tree.
    let grep = h.exec("grep -rn 'def median' --include=*.py .", 5_000).unwrap().stdout_text();
    let (file, rest) = grep.trim().split_once(':').unwrap();
    let line = rest.split(':').next().unwrap();
    let f_ = file.trim_start_matches("./");
    assert_eq!(t.steps[0].observation, format!("{f_}:{line}: def median(values):"));
    assert_eq!(t.steps[1].observation, "No matches found");
    let capped = &t.steps[2].observation;
    assert_eq!(capped.lines().count(), 101);
    assert!(capped.lines().take(100).all(|l| l.starts_with("planted/f")));
    assert!(!capped.contains("planted/f100.txt"));
    assert!(capped.lines().last().unwrap().contains("1 more"));
    assert!(t.steps[3].observation.starts_with("ERROR:"));
}

#[test]
fn malformed_calls_consume_steps() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let t = run(
        &mut h,
        vec![
            tool(0, ToolCall::new("teleport")),
            tool(1, ToolCall::new("execute_bash")),
            ScriptEntry::text("ep", 2, "thinking out loud"),
            tool(3, finish()),
        ],
        &EpisodeConfig::default(),
    );
    assert_eq!(t.steps.len(), 4);
    for s in &t.steps[..3] {
        assert!(s.observation.starts_with("ERROR: malformed tool call"), "{}", s.observation);
    }
}

#[test]
fn context_budget_stops_episode() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let config = EpisodeConfig { context_budget: 300, max_observation_tokens: 100, ..EpisodeConfig::default() };
    let script = (0..50).map(|i| tool(i, bash("seq 1 1000"))).collect();
    let t = run(&mut h, script, &config);
    assert_eq!(t.termination, Termination::ContextLimit);
    assert!(!t.steps.is_empty() && t.steps.len() < 50);
    let tok = default_tokenizer();
    // The history sent at the last step fits the budget.
    let mut m = t.messages();
    m.truncate(m.len() - 2);
    assert!(bugpilot::model_client::history_tokens(&m, tok.as_ref()) <= 300);
}

#[test]
fn backend_failure_returns_partial_trajectory() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let t = run(&mut h, vec![tool(0, bash("true"))], &EpisodeConfig::default());
    assert_eq!(t.termination, Termination::BackendError);
    assert_eq!(t.steps.len(), 1);
    assert!(t.error.unwrap().contains("step 1"));
    let t = run(&mut h, vec![], &EpisodeConfig::default());
    assert_eq!(t.termination, Termination::BackendError);
    assert!(t.steps.is_empty());
}

#[test]
fn edits_remain_for_diffing() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let base = h.head_revision().unwrap();
    run(
        &mut h,
        vec![tool(0, editor("create", "notes.md").arg("file_text", "hello\n")), tool(1, finish())],
        &EpisodeConfig::default(),
    );
    assert!(h.snapshot_diff(&base).unwrap().as_str().contains("+++ b/notes.md"));
}

#[test]
fn replay_episodes_are_deterministic() {
    let f = common::fixtures();
    let script = || {
        vec![
            tool(0, editor("view", "calc/stats.py")),
            tool(1, bash("ls calc")),
            tool(2, finish()),
        ]
    };
    let mut a = f.sandbox("toycalc");
    let mut b = f.sandbox("toycalc");
    let ta = serde_json::to_string(&run(&mut a, script(), &EpisodeConfig::default())).unwrap();
    let tb = serde_json::to_string(&run(&mut b, script(), &EpisodeConfig::default())).unwrap();
    assert_eq!(ta, tb);
}
