use std::path::Path;
use std::process::{Command, Output};

fn bugpilot(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bugpilot"));
    for var in ["BUGPILOT_BACKEND", "BUGPILOT_MODEL", "BUGPILOT_BASE_URL", "BUGPILOT_RUNTIME_SOCKET", "RUST_LOG"] {
        c.env_remove(var);
    }
    c.args(args).envs(env.iter().copied()).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config_value(o: &Output) -> toml::Value {
    toml::from_str(&stdout(o)).unwrap()
}

#[test]
fn printed_config_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let first = bugpilot(&["--print-config"], &[]);
    assert!(first.status.success());
    let path = dir.path().join("c.toml");
    std::fs::write(&path, first.stdout.clone()).unwrap();
    let second = bugpilot(&["--config", path.to_str().unwrap(), "--print-config"], &[]);
    assert_eq!(stdout(&second), stdout(&first));
}

#[test]
fn layers_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 3\n[backend]\nmodel = \"from-file\"\n[episode]\nmax_steps = 40\n").unwrap();
    let p = path.to_str().unwrap();

    let v = config_value(&bugpilot(&["--config", p, "--print-config"], &[]));
    assert_eq!((v["seed"].as_integer(), v["backend"]["model"].as_str()), (Some(3), Some("from-file")));
    assert_eq!(v["episode"]["max_steps"].as_integer(), Some(40));

    let v = config_value(&bugpilot(&["--config", p, "--model", "from-flag", "--seed", "5", "--print-config"], &[]));
    assert_eq!((v["seed"].as_integer(), v["backend"]["model"].as_str()), (Some(5), Some("from-flag")));

    let v = config_value(&bugpilot(
        &["--config", p, "--model", "from-flag", "--print-config"],
        &[("BUGPILOT_MODEL", "from-env"), ("BUGPILOT_BACKEND", "replay")],
    ));
    assert_eq!((v["backend"]["model"].as_str(), v["backend"]["kind"].as_str()), (Some("from-env"), Some("replay")));
}

#[test]
fn subcommand_flags_reach_the_config() {
    let v = config_value(&bugpilot(&["solve", "--k", "2", "--print-config"], &[]));
    assert_eq!(v["solver"]["k"].as_integer(), Some(2));
    assert_eq!(v["solver"]["seeds"].as_array().unwrap().len(), 2);
    let v = config_value(&bugpilot(&["solve", "--seeds", "5,6,7", "--print-config"], &[]));
    assert_eq!(v["solver"]["k"].as_integer(), Some(3));
}

#[test]
fn usage_errors_exit_with_two() {
    let o = bugpilot(&["generate", "--strategy", "bogus", "--repos", "toycalc"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    let o = bugpilot(&["generate", "--strategy", "featadd", "--repos", "nope", "--backend", "replay", "--script", "x"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));

    let o = bugpilot(&["solve", "--k", "2", "--seeds", "1,2,3", "--print-config"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("solver.seeds"));

    let o = bugpilot(&["--print-config"], &[("BUGPILOT_BACKEND", "pigeon")]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[episode]\nmax_stepz = 3\n").unwrap();
    let o = bugpilot(&["--config", bad.to_str().unwrap(), "--print-config"], &[]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(bugpilot(&[], &[]).status.code(), Some(2));
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-dataset");
    let o = bugpilot(&["stats", "--dataset", missing.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn replay_needs_a_script() {
    let dir = tempfile::tempdir().unwrap();
    let o = bugpilot(
        &["generate", "--strategy", "featadd", "--repos", "toycalc", "--backend", "replay", "--runtime", "local", "--images-dir", dir.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--script"));
}

#[test]
fn fixtures_and_dataset_commands() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let o = bugpilot(&["fixtures", "--dir", fx.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fx.join("repos.toml").is_file());
    assert!(fx.join("scripts/featadd_break.jsonl").is_file());
    let images = fx.join("images");
    let ds = dir.path().join("ds");
    let common = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = ["--runtime", "local", "--images-dir", images.to_str().unwrap(), "--backend", "replay", "--freeze-time"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(common(extra));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        bugpilot(&refs, &[])
    };
    let script = |name: &str| fx.join("scripts").join(name).to_str().unwrap().to_string();
    let repos = fx.join("repos.toml");

    let o = run(
        "generate",
        &["--script", &script("featadd_break.jsonl"), "--strategy", "featadd", "--repos", repos.to_str().unwrap(), "--out", ds.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ds.join("campaign_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["attempts"], 2);
    assert_eq!(summary["per_repo"]["toycalc"]["accepted"], 1);
    let manifest = stderr(&o).lines().find(|l| l.starts_with("{\"run\"")).map(String::from).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["run"]["command"], "generate");
    assert_eq!(manifest["run"]["started_at"], "2024-01-01T00:00:00+00:00");

    let d = ds.to_str().unwrap();
    let o = run("stats", &["--dataset", d, "--table", "json"]);
    let stats: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(stats["total_tasks"], 1);
    let o = run("stats", &["--dataset", d]);
    assert!(stdout(&o).starts_with("| Statistic | Value |"));

    let o = run("categorize", &["--dataset", d, "--script", &script("classify.jsonl")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = std::fs::read_to_string(ds.join("labels.jsonl")).unwrap();
    assert!(labels.contains("\"code\":\"B\""));

    let o = run("taxonomy", &["--dataset", d, "--script", &script("taxonomy.jsonl")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let guide = std::fs::read_to_string(ds.join("guide.txt")).unwrap();
    let guide_file = ds.join("guide.txt");
    let o = run("categorize", &["--dataset", d, "--script", &script("classify.jsonl"), "--guide", guide_file.to_str().unwrap(), "--out", dir.path().join("l2.jsonl").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(guide.starts_with("A: "));

    let o = run("describe", &["--dataset", d, "--script", &script("featadd_break.jsonl"), "--instance", "toycalc__featadd__0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ps: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(ps["text"].as_str().unwrap().starts_with("multiply() rounds"));

    let o = run("solve", &["--dataset", d, "--script", &script("solve_revert.jsonl"), "--k", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ds.join("metrics.json")).unwrap()).unwrap();
    assert_eq!((metrics["k"].clone(), metrics["pass_at_k"].clone()), (2.into(), 1.0.into()));

    let out = dir.path().join("sft.jsonl");
    let o = run("export-sft", &["--dataset", d, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);

    // A record whose patch no longer applies makes validate fail.
    let bugs = std::fs::read_to_string(ds.join("bugs.jsonl")).unwrap();
    std::fs::write(ds.join("bugs.jsonl"), bugs.replace("Plain product", "Fancy product")).unwrap();
    let o = run("validate", &["--dataset", d]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("\"valid\":false"));
    assert!(Path::new(&ds).join("manifest.json").is_file());
}
