mod common;

use std::time::{Duration, Instant};

use bugpilot::sandbox::{ResourceLimits, SandboxError, SandboxHandle, SandboxState};
use proptest::prelude::*;

#[test]
fn create_gives_running_checkout() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    assert_eq!(h.state(), SandboxState::Running);
    assert_eq!(h.workdir(), "/testbed");
    let r = h.exec(&format!("test -d {}", h.workdir()), 5_000).unwrap();
    assert_eq!(r.exit_code, Some(0));
    let r = h.exec("pwd", 5_000).unwrap();
    assert_eq!(r.stdout_text().trim(), "/testbed");
}

#[test]
fn missing_image() {
    let f = common::fixtures();
    let err = SandboxHandle::create(&f.runtime, "no-such-image", &ResourceLimits::default()).unwrap_err();
    assert!(matches!(err, SandboxError::ImageNotFound(_)), "{err}");
}

#[test]
fn sandboxes_are_isolated() {
    let f = common::fixtures();
    let mut a = f.sandbox("toycalc");
    let mut b = f.sandbox("toycalc");
    assert_ne!(a.id(), b.id());
    let before = b.read_file("calc/ops.py").unwrap();
    a.write_file("calc/ops.py", b"changed\n").unwrap();
    a.write_file("probe.txt", b"a").unwrap();
    assert_eq!(b.read_file("calc/ops.py").unwrap(), before);
    assert!(matches!(b.read_file("probe.txt"), Err(SandboxError::FileNotFound(_))));
}

#[test]
fn exec_exit_codes_and_output() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let r = h.exec("true", 5_000).unwrap();
    assert_eq!(r.exit_code, Some(0));
    assert!(r.stdout.is_empty() && r.stderr.is_empty());
    assert_eq!(h.exec("exit 3", 5_000).unwrap().exit_code, Some(3));
    let r = h.exec("echo out; echo err >&2", 5_000).unwrap();
    assert_eq!(r.stdout_text(), "out\n");
    assert_eq!(String::from_utf8_lossy(&r.stderr), "err\n");
}

#[test]
fn exec_timeout_kills_tree() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let start = Instant::now();
    let r = h.exec("sleep 10 & sleep 10; echo never", 1_000).unwrap();
    let wall = start.elapsed();
    assert!(r.timed_out);
    assert_eq!(r.exit_code, None);
    assert!(r.duration_ms >= 1_000);
    assert!(wall < Duration::from_millis(1_000 + 1_500), "{wall:?}");
    assert!(!r.stdout_text().contains("never"));
}

#[test]
fn destroy_is_idempotent_and_closes() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    h.destroy();
    h.destroy();
    assert_eq!(h.state(), SandboxState::Stopped);
    assert!(matches!(h.exec("true", 1_000), Err(SandboxError::SandboxClosed(_))));
    assert!(matches!(h.read_file("README.md"), Err(SandboxError::SandboxClosed(_))));
    assert!(matches!(h.snapshot_diff("HEAD"), Err(SandboxError::SandboxClosed(_))));
}

#[test]
fn destroy_reaps_background_processes() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let r = h.exec("sleep 300 >/dev/null 2>&1 & echo $!", 5_000).unwrap();
    let pid: i32 = r.stdout_text().trim().parse().unwrap();
    let alive = |pid: i32| std::path::Path::new(&format!("/proc/{pid}")).exists()
        && !std::fs::read_to_string(format!("/proc/{pid}/stat")).unwrap_or_default().contains(") Z ");
    assert!(alive(pid));
    h.destroy();
    let deadline = Instant::now() + Duration::from_secs(5);
    while alive(pid) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(!alive(pid), "background process {pid} survived destroy");
}

#[test]
fn untouched_workdir_has_empty_diff() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let base = h.head_revision().unwrap();
    h.exec("python3 -c 'import calc'", 10_000).unwrap();
    assert!(h.snapshot_diff(&base).unwrap().is_empty());
}

#[test]
fn edit_diff_round_trips() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let base = h.head_revision().unwrap();
    let text = String::from_utf8(h.read_file("calc/ops.py").unwrap()).unwrap();
    // One line removed, two added, in one hunk.
    let edited = text.replacen("    return a - b\n", "    # swapped\n    return a - b  # same\n", 1);
    h.write_file("calc/ops.py", edited.as_bytes()).unwrap();
    let diff = h.snapshot_diff(&base).unwrap();
    let text = diff.as_str();
    assert_eq!(text.matches("\n@@ ").count() + usize::from(text.starts_with("@@ ")), 1, "{text}");
    assert!(text.contains("--- a/calc/ops.py\n+++ b/calc/ops.py\n"));
    let added = text.lines().filter(|l| l.starts_with('+') && !l.starts_with("+++")).count();
    let removed = text.lines().filter(|l| l.starts_with('-') && !l.starts_with("---")).count();
    assert_eq!((added, removed), (2, 1));
    let want = common::tree_hash(&mut h);
    let mut clean = f.sandbox("toycalc");
    clean.apply_patch(&diff).unwrap();
    assert_eq!(common::tree_hash(&mut clean), want);
}

#[test]
fn created_file_uses_dev_null_source() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let base = h.head_revision().unwrap();
    h.write_file("calc/extra/new_mod.py", b"X = 1\n").unwrap();
    let diff = h.snapshot_diff(&base).unwrap();
    assert!(diff.as_str().contains("--- /dev/null\n+++ b/calc/extra/new_mod.py\n"), "{}", diff.as_str());
    let want = common::tree_hash(&mut h);
    let mut clean = f.sandbox("toycalc");
    clean.apply_patch(&diff).unwrap();
    assert_eq!(common::tree_hash(&mut clean), want);
}

#[test]
fn binary_files_are_declared() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let base = h.head_revision().unwrap();
    h.write_file("blob.bin", &[0u8, 1, 2, 0, 255]).unwrap();
    let diff = h.snapshot_diff(&base).unwrap();
    assert!(diff.as_str().contains("Binary files /dev/null and b/blob.bin differ"), "{}", diff.as_str());
}

#[test]
fn non_repository_is_reported() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    h.exec("rm -rf .git", 5_000).unwrap();
    assert!(matches!(h.snapshot_diff("HEAD"), Err(SandboxError::NotARepository(_))));
}

#[test]
fn corrupt_patch_is_rejected() {
    let f = common::fixtures();
    let mut h = f.sandbox("toycalc");
    let bad = bugpilot::sandbox::UnifiedDiff(
        "--- a/calc/ops.py\n+++ b/calc/ops.py\n@@ -1,1 +1,1 @@\n-no such line\n+x\n".into(),
    );
    assert!(matches!(h.apply_patch(&bad), Err(SandboxError::PatchApplyFailed(_))));
}

#[derive(Debug, Clone)]
enum Edit {
    Append(usize, String),
    Create(String, String),
    Delete(usize),
}

fn edit() -> impl Strategy<Value = Edit> {
    prop_oneof![
        (0usize..8, "[a-z =+0-9]{0,12}").prop_map(|(i, s)| Edit::Append(i, s)),
        ("[a-z]{1,6}", "[a-z\n ]{0,20}").prop_map(|(n, s)| Edit::Create(format!("gen/{n}.txt"), s)),
        (0usize..8).prop_map(Edit::Delete),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn snapshot_round_trip(edits in proptest::collection::vec(edit(), 1..5)) {
        let f = common::fixtures();
        let mut h = f.sandbox("toycalc");
        let base = h.head_revision().unwrap();
        let files = bugpilot::toycorpus::TOYCALC.files;
        for e in &edits {
            match e {
                Edit::Append(i, s) => {
                    let path = files[i % files.len()].0;
                    if let Ok(mut data) = h.read_file(path) {
                        data.extend_from_slice(format!("{s}\n").as_bytes());
                        h.write_file(path, &data).unwrap();
                    }
                }
                Edit::Create(p, s) => h.write_file(p, s.as_bytes()).unwrap(),
                Edit::Delete(i) => {
                    let path = files[i % files.len()].0;
                    h.exec(&format!("rm -f {path}"), 5_000).unwrap();
                }
            }
        }
        let diff = h.snapshot_diff(&base).unwrap();
        let want = common::tree_hash(&mut h);
        let mut clean = f.sandbox("toycalc");
        clean.apply_patch(&diff).unwrap();
        prop_assert_eq!(common::tree_hash(&mut clean), want);
    }
}
