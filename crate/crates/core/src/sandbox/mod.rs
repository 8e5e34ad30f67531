//! Isolated execution environments, one per task instance.
//!
//! A [`Runtime`] turns an image reference into a running sandbox. Two
//! runtimes ship: [`DockerRuntime`] talks to an OCI/docker-compatible daemon
//! over its socket API, [`LocalRuntime`] gives each sandbox a private clone
//! of a seed repository on the host and runs commands in their own process
//! group. Everything above this module only sees [`SandboxHandle`].

mod docker;
mod http;
mod local;

use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use docker::DockerRuntime;
pub use local::{sanitize_image_ref, LocalRuntime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceLimits {
    pub cpus: f64,
    pub memory_mb: u64,
    pub pids: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self {
            cpus: 2.0,
            memory_mb: 4096,
            pids: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxState {
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    /// `None` when the command was killed on timeout.
    pub exit_code: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration_ms: u64,
    pub timed_out: bool,
}

impl ExecResult {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0)
    }

    pub fn stdout_text(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn combined_text(&self) -> String {
        let mut s = self.stdout_text();
        s.push_str(&String::from_utf8_lossy(&self.stderr));
        s
    }
}

/// Unified diff text as produced by the sandbox's version-control tool.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnifiedDiff(pub String);

impl UnifiedDiff {
    pub fn is_empty(&self) -> bool {
        self.0.trim().is_empty()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("image not found: {0}")]
    ImageNotFound(String),
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("sandbox {0} is closed")]
    SandboxClosed(String),
    #[error("workdir is not a repository: {0}")]
    NotARepository(String),
    #[error("path escapes the workdir: {0}")]
    PathOutsideWorkdir(String),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("patch does not apply: {0}")]
    PatchApplyFailed(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Creates sandboxes. Implementations are safe for concurrent use.
pub trait Runtime: Send + Sync {
    fn name(&self) -> &str;

    fn create(
        &self,
        image_ref: &str,
        limits: &ResourceLimits,
    ) -> Result<Box<dyn SandboxBackend>, SandboxError>;
}

/// Runtime-specific half of a sandbox. Paths handed to file operations are
/// already normalized and relative to the workdir.
pub trait SandboxBackend: Send {
    fn id(&self) -> &str;
    fn workdir(&self) -> &str;
    fn exec(&mut self, command: &str, timeout_ms: u64) -> Result<ExecResult, SandboxError>;
    fn read_file(&mut self, rel: &Path) -> Result<Vec<u8>, SandboxError>;
    fn write_file(&mut self, rel: &Path, data: &[u8]) -> Result<(), SandboxError>;
    /// Best effort; must be idempotent.
    fn destroy(&mut self);
}

/// A live sandbox. Single owner: move it between threads, never share it.
pub struct SandboxHandle {
    id: String,
    image_ref: String,
    workdir: String,
    state: SandboxState,
    backend: Box<dyn SandboxBackend>,
}

impl std::fmt::Debug for SandboxHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SandboxHandle")
            .field("id", &self.id)
            .field("image_ref", &self.image_ref)
            .field("workdir", &self.workdir)
            .field("state", &self.state)
            .finish()
    }
}

/// Timeout for internal housekeeping commands (git plumbing).
const PLUMBING_TIMEOUT_MS: u64 = 120_000;

const SNAPSHOT_EXCLUDES: &[&str] = &[
    ":(exclude,glob)**/__pycache__/**",
    ":(exclude,glob)**/*.pyc",
    ":(exclude,glob)**/.pytest_cache/**",
];

impl SandboxHandle {
    pub fn create(
        runtime: &dyn Runtime,
        image_ref: &str,
        limits: &ResourceLimits,
    ) -> Result<Self, SandboxError> {
        let backend = runtime.create(image_ref, limits)?;
        tracing::debug!(id = backend.id(), image_ref, "sandbox created");
        Ok(Self {
            id: backend.id().to_string(),
            workdir: backend.workdir().to_string(),
            image_ref: image_ref.to_string(),
            state: SandboxState::Running,
            backend,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image_ref(&self) -> &str {
        &self.image_ref
    }

    pub fn workdir(&self) -> &str {
        &self.workdir
    }

    pub fn state(&self) -> SandboxState {
        self.state
    }

    fn ensure_running(&self) -> Result<(), SandboxError> {
        match self.state {
            SandboxState::Running => Ok(()),
            SandboxState::Stopped => Err(SandboxError::SandboxClosed(self.id.clone())),
        }
    }

    pub fn exec(&mut self, command: &str, timeout_ms: u64) -> Result<ExecResult, SandboxError> {
        self.ensure_running()?;
        self.backend.exec(command, timeout_ms)
    }

    /// Resolves `path` (absolute inside the workdir, or relative to it) to
    /// a normalized workdir-relative path.
    pub fn resolve(&self, path: &str) -> Result<PathBuf, SandboxError> {
        resolve_in_workdir(&self.workdir, path)
    }

    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>, SandboxError> {
        self.ensure_running()?;
        let rel = self.resolve(path)?;
        self.backend.read_file(&rel)
    }

    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), SandboxError> {
        self.ensure_running()?;
        let rel = self.resolve(path)?;
        if rel.as_os_str().is_empty() {
            return Err(SandboxError::PathOutsideWorkdir(path.to_string()));
        }
        self.backend.write_file(&rel, data)
    }

    fn plumbing(&mut self, script: &str) -> Result<ExecResult, SandboxError> {
        self.exec(script, PLUMBING_TIMEOUT_MS)
    }

    pub fn head_revision(&mut self) -> Result<String, SandboxError> {
        let r = self.plumbing("git -c safe.directory='*' rev-parse HEAD")?;
        if !r.success() {
            return Err(SandboxError::NotARepository(r.combined_text()));
        }
        Ok(r.stdout_text().trim().to_string())
    }

    /// Checks out `rev` unless HEAD is already there; returns the new HEAD.
    pub fn checkout(&mut self, rev: &str) -> Result<String, SandboxError> {
        let head = self.head_revision()?;
        if head == rev {
            return Ok(head);
        }
        validate_ref(rev)?;
        let r = self.plumbing(&format!("git -c safe.directory='*' checkout -q {}", shell_quote(rev)))?;
        if !r.success() {
            return Err(SandboxError::Runtime(format!("checkout {rev}: {}", r.combined_text())));
        }
        self.head_revision()
    }

    /// Diff of every tracked and newly created file against `base_ref`.
    /// Untracked files are force-added to a throwaway index so the real
    /// index is left alone.
    pub fn snapshot_diff(&mut self, base_ref: &str) -> Result<UnifiedDiff, SandboxError> {
        self.ensure_running()?;
        validate_ref(base_ref)?;
        let excludes: Vec<String> = SNAPSHOT_EXCLUDES.iter().map(|e| shell_quote(e)).collect();
        let script = format!(
            r#"g() {{ git -c safe.directory='*' -c core.quotepath=false "$@"; }}
gd=$(g rev-parse --git-dir 2>/dev/null) || exit 97
idx="$gd/bugpilot-snapshot.index"
rm -f "$idx"
GIT_INDEX_FILE="$idx" g read-tree {base} || {{ rm -f "$idx"; exit 98; }}
GIT_INDEX_FILE="$idx" g add -A -- . {excludes} >/dev/null 2>&1
GIT_INDEX_FILE="$idx" g diff --cached --no-color --no-ext-diff --no-renames --src-prefix=a/ --dst-prefix=b/ {base}
st=$?
rm -f "$idx"
exit $st"#,
            base = shell_quote(base_ref),
            excludes = excludes.join(" ")
        );
        let r = self.plumbing(&script)?;
        match r.exit_code {
            Some(0) => Ok(UnifiedDiff(r.stdout_text())),
            Some(97) => Err(SandboxError::NotARepository(self.workdir.clone())),
            _ => Err(SandboxError::Runtime(format!(
                "snapshot diff failed: {}",
                String::from_utf8_lossy(&r.stderr)
            ))),
        }
    }

    /// Applies a unified diff onto the workdir.
    pub fn apply_patch(&mut self, patch: &UnifiedDiff) -> Result<(), SandboxError> {
        if patch.is_empty() {
            return Ok(());
        }
        self.ensure_running()?;
        let gd = self.plumbing("git -c safe.directory='*' rev-parse --git-dir")?;
        if !gd.success() {
            return Err(SandboxError::NotARepository(self.workdir.clone()));
        }
        let patch_path = format!("{}/bugpilot-apply.patch", gd.stdout_text().trim());
        self.write_file(&patch_path, patch.0.as_bytes())?;
        let r = self.plumbing(&format!(
            "git -c safe.directory='*' apply --whitespace=nowarn {p}; st=$?; rm -f {p}; exit $st",
            p = shell_quote(&patch_path)
        ))?;
        if !r.success() {
            return Err(SandboxError::PatchApplyFailed(r.combined_text()));
        }
        Ok(())
    }

    pub fn destroy(&mut self) {
        if self.state == SandboxState::Running {
            self.backend.destroy();
            self.state = SandboxState::Stopped;
            tracing::debug!(id = %self.id, "sandbox destroyed");
        }
    }
}

impl Drop for SandboxHandle {
    fn drop(&mut self) {
        self.destroy();
    }
}

pub(crate) fn resolve_in_workdir(workdir: &str, path: &str) -> Result<PathBuf, SandboxError> {
    let wd = Path::new(workdir);
    let p = Path::new(path);
    let rel = if p.is_absolute() {
        p.strip_prefix(wd)
            .map_err(|_| SandboxError::PathOutsideWorkdir(path.to_string()))?
    } else {
        p
    };
    let mut out = PathBuf::new();
    for c in rel.components() {
        match c {
            Component::Normal(s) => out.push(s),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return Err(SandboxError::PathOutsideWorkdir(path.to_string()));
                }
            }
            Component::RootDir | Component::Prefix(_) => {
                return Err(SandboxError::PathOutsideWorkdir(path.to_string()))
            }
        }
    }
    Ok(out)
}

fn validate_ref(r: &str) -> Result<(), SandboxError> {
    let ok = !r.is_empty()
        && !r.starts_with('-')
        && r.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '/' | '^' | '~'));
    if ok {
        Ok(())
    } else {
        Err(SandboxError::Runtime(format!("invalid revision {r:?}")))
    }
}

/// Single-quotes `s` for POSIX shells.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) fn next_local_id(prefix: &str) -> String {
    format!(
        "{prefix}-{}-{}",
        std::process::id(),
        NEXT_ID.fetch_add(1, Ordering::Relaxed)
    )
}
