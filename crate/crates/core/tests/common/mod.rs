#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use bugpilot::model_client::{default_tokenizer, ReplayBackend, ScriptEntry};
use bugpilot::sandbox::{LocalRuntime, ResourceLimits, SandboxHandle};
use bugpilot::toycorpus;

pub struct Fixtures {
    pub dir: tempfile::TempDir,
    pub runtime: LocalRuntime,
}

pub fn fixtures() -> Fixtures {
    let dir = tempfile::tempdir().unwrap();
    toycorpus::materialize_local(&dir.path().join("images")).unwrap();
    let runtime =
        LocalRuntime::new(dir.path().join("images")).with_scratch_dir(dir.path().join("scratch"));
    Fixtures { dir, runtime }
}

impl Fixtures {
    pub fn sandbox(&self, repo: &str) -> SandboxHandle {
        let image = toycorpus::repo(repo).unwrap().image_ref;
        SandboxHandle::create(&self.runtime, image, &ResourceLimits::default()).unwrap()
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }
}

pub fn replay(entries: Vec<ScriptEntry>) -> ReplayBackend {
    ReplayBackend::new(entries, default_tokenizer(), 1 << 20)
}

pub fn replay_bundled(name: &str) -> ReplayBackend {
    let entries = bugpilot::model_client::parse_script(toycorpus::script(name).unwrap()).unwrap();
    replay(entries)
}

pub fn shared<T>(t: T) -> Arc<T> {
    Arc::new(t)
}

/// Hash of every file outside `.git`, for byte-comparing trees.
pub fn tree_hash(h: &mut SandboxHandle) -> String {
    let r = h
        .exec(
            "find . -path ./.git -prune -o -type f -print | LC_ALL=C sort | xargs -r sha256sum",
            30_000,
        )
        .unwrap();
    assert!(r.success(), "{}", r.combined_text());
    r.stdout_text()
}
