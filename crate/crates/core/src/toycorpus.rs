//! Bundled fixture repositories, image recipes, replay scripts and goldens.
//!
//! Two small Python projects stand in for seed repositories. Both are
//! committed with pinned identity and dates, so a materialized fixture has
//! the same base revision everywhere.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Deserialize;

use crate::sandbox::{sanitize_image_ref, DockerRuntime, SandboxError};
use crate::testkit::RepoProfile;

pub struct FixtureRepo {
    pub name: &'static str,
    pub image_ref: &'static str,
    pub test_count: usize,
    pub files: &'static [(&'static str, &'static str)],
    pub dockerfile: &'static str,
}

macro_rules! repo_files {
    ($repo:literal: $($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!("../toycorpus/repos/", $repo, "/", $path)))),*]
    };
}

pub static TOYCALC: FixtureRepo = FixtureRepo {
    name: "toycalc",
    image_ref: "bugpilot-toy/toycalc:1",
    test_count: 11,
    files: repo_files!("toycalc":
        "README.md",
        "pytest.ini",
        "calc/__init__.py",
        "calc/ops.py",
        "calc/stats.py",
        "tests/__init__.py",
        "tests/test_ops.py",
        "tests/test_stats.py",
    ),
    dockerfile: include_str!("../toycorpus/docker/toycalc.Dockerfile"),
};

pub static TOYINVENTORY: FixtureRepo = FixtureRepo {
    name: "toyinventory",
    image_ref: "bugpilot-toy/toyinventory:1",
    test_count: 9,
    files: repo_files!("toyinventory":
        "README.md",
        "pytest.ini",
        "inventory/__init__.py",
        "inventory/store.py",
        "inventory/pricing.py",
        "tests/__init__.py",
        "tests/test_store.py",
        "tests/test_pricing.py",
    ),
    dockerfile: include_str!("../toycorpus/docker/toyinventory.Dockerfile"),
};

pub fn repos() -> [&'static FixtureRepo; 2] {
    [&TOYCALC, &TOYINVENTORY]
}

pub fn repo(name: &str) -> Option<&'static FixtureRepo> {
    repos().into_iter().find(|r| r.name == name)
}

impl FixtureRepo {
    pub fn profile(&self) -> RepoProfile {
        RepoProfile::new(self.name, self.image_ref)
    }
}

/// A documented edit that breaks exactly one named test.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mutation {
    pub repo: String,
    pub file: String,
    pub find: String,
    pub replace: String,
    pub breaks: String,
}

const MUTATIONS: &str = include_str!("../toycorpus/mutations.toml");

pub fn mutations() -> Vec<Mutation> {
    #[derive(Deserialize)]
    struct File {
        mutation: Vec<Mutation>,
    }
    toml::from_str::<File>(MUTATIONS)
        .expect("bundled mutations parse")
        .mutation
}

macro_rules! bundle {
    ($dir:literal: $($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../toycorpus/", $dir, "/", $name)))),*]
    };
}

/// Replay scripts, one per scenario.
pub static SCRIPTS: &[(&str, &str)] = bundle!("scripts":
    "featadd_break.jsonl",
    "buginstruct_two_phase.jsonl",
    "featadd_benign.jsonl",
    "delete_tests.jsonl",
    "empty_submit.jsonl",
    "collection_error.jsonl",
    "solve_revert.jsonl",
    "solve_submit.jsonl",
    "solve_regress.jsonl",
    "solve_mixed.jsonl",
    "campaign.jsonl",
    "classify.jsonl",
    "classify_malformed.jsonl",
    "taxonomy.jsonl",
    "isolation_probe.jsonl",
);

/// Golden files: runner-output fixtures with their expected status maps,
/// and the documented outcome of every scenario.
pub static EXPECTED: &[(&str, &str)] = bundle!("expected":
    "scenarios.toml",
    "parser/all_pass.txt",
    "parser/all_pass.json",
    "parser/mixed.txt",
    "parser/mixed.json",
    "parser/error.txt",
    "parser/error.json",
    "parser/skipped.txt",
    "parser/skipped.json",
    "parser/collection_error.txt",
    "parser/collection_error.json",
    "parser/summary_mismatch.txt",
);

pub fn script(name: &str) -> Option<&'static str> {
    SCRIPTS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn expected(name: &str) -> Option<&'static str> {
    EXPECTED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Documented outcome of one replay scenario.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub script: String,
    pub repo: String,
    pub strategy: String,
    pub max_rounds: usize,
    pub rounds: usize,
    #[serde(default)]
    pub reject_reason: Option<String>,
    #[serde(default)]
    pub fail_to_pass: Vec<String>,
}

pub fn scenarios() -> Vec<Scenario> {
    #[derive(Deserialize)]
    struct File {
        scenario: Vec<Scenario>,
    }
    toml::from_str::<File>(expected("scenarios.toml").expect("bundled scenarios"))
        .expect("bundled scenarios parse")
        .scenario
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("git {args}: {stderr}")]
    Git { args: String, stderr: String },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

const GIT_DATE: &str = "2024-01-01T00:00:00Z";

fn git(dir: &Path, args: &[&str]) -> Result<String, FixtureError> {
    let out = Command::new("git")
        .args(["-c", "safe.directory=*", "-c", "core.autocrlf=false"])
        .args(["-c", "user.name=bugpilot", "-c", "user.email=fixtures@bugpilot.invalid"])
        .args(args)
        .current_dir(dir)
        .env("GIT_AUTHOR_DATE", GIT_DATE)
        .env("GIT_COMMITTER_DATE", GIT_DATE)
        .env_remove("GIT_DIR")
        .env_remove("GIT_INDEX_FILE")
        .output()?;
    if !out.status.success() {
        return Err(FixtureError::Git {
            args: args.join(" "),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Writes the repository's files under `dest` and commits them. Returns
/// the commit id, which is stable across machines.
pub fn write_repo(repo: &FixtureRepo, dest: &Path) -> Result<String, FixtureError> {
    if dest.exists() {
        std::fs::remove_dir_all(dest)?;
    }
    std::fs::create_dir_all(dest)?;
    for (path, content) in repo.files {
        let p = dest.join(path);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, content)?;
    }
    git(dest, &["init", "-q", "-b", "main"])?;
    git(dest, &["add", "-A"])?;
    git(dest, &["commit", "-q", "-m", &format!("{} baseline", repo.name)])?;
    git(dest, &["rev-parse", "HEAD"])
}

/// Materializes both fixtures as local images under `images_dir`, in the
/// layout [`crate::sandbox::LocalRuntime`] expects.
pub fn materialize_local(images_dir: &Path) -> Result<Vec<(String, String)>, FixtureError> {
    let mut out = Vec::new();
    for repo in repos() {
        let dir: PathBuf = images_dir.join(sanitize_image_ref(repo.image_ref));
        let head = write_repo(repo, &dir)?;
        tracing::info!(image = repo.image_ref, %head, "materialized fixture");
        out.push((repo.image_ref.to_string(), head));
    }
    Ok(out)
}

/// Docker build context: the recipe plus the repository under `repo/`.
/// Entries carry fixed metadata so the tarball is byte-stable.
pub fn build_context(repo: &FixtureRepo) -> Result<Vec<u8>, std::io::Error> {
    let mut builder = tar::Builder::new(Vec::new());
    let mut add = |path: &str, data: &[u8]| -> std::io::Result<()> {
        let mut h = tar::Header::new_gnu();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_uid(0);
        h.set_gid(0);
        h.set_cksum();
        builder.append_data(&mut h, path, data)
    };
    add("Dockerfile", repo.dockerfile.as_bytes())?;
    for (path, content) in repo.files {
        add(&format!("repo/{path}"), content.as_bytes())?;
    }
    builder.into_inner()
}

/// Builds both fixture images with a docker-compatible daemon and returns
/// `(image_ref, content digest)` pairs.
pub fn build_fixture_images(runtime: &DockerRuntime) -> Result<Vec<(String, String)>, FixtureError> {
    let mut out = Vec::new();
    for repo in repos() {
        let ctx = build_context(repo)?;
        let digest = runtime.build_image(repo.image_ref, &ctx)?;
        out.push((repo.image_ref.to_string(), digest));
    }
    Ok(out)
}
