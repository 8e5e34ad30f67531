use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{next_local_id, ExecResult, ResourceLimits, Runtime, SandboxBackend, SandboxError};

/// How long to keep draining pipes after the main process exits. Background
/// children that inherited stdout would otherwise block the call forever.
const DRAIN_GRACE: Duration = Duration::from_millis(200);

/// Host-process runtime for development and tests.
///
/// An image is a directory holding a git repository, found under
/// `images_dir` by its sanitized reference (`toy/calc:1` → `toy_calc_1`).
/// Each sandbox is a fresh clone in `scratch_dir`; commands run with that
/// clone as cwd, in their own process group. The clone's host path is
/// presented to callers as `virtual_workdir`: occurrences in commands are
/// rewritten to the host path and host paths in output are rewritten back,
/// so prompts and transcripts do not depend on where the scratch space is.
///
/// Resource limits are not enforced beyond per-command timeouts.
#[derive(Debug, Clone)]
pub struct LocalRuntime {
    images_dir: PathBuf,
    scratch_dir: PathBuf,
    virtual_workdir: String,
}

impl LocalRuntime {
    pub fn new(images_dir: impl Into<PathBuf>) -> Self {
        Self {
            images_dir: images_dir.into(),
            scratch_dir: std::env::temp_dir(),
            virtual_workdir: "/testbed".to_string(),
        }
    }

    pub fn with_scratch_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.scratch_dir = dir.into();
        self
    }

    pub fn with_virtual_workdir(mut self, workdir: impl Into<String>) -> Self {
        self.virtual_workdir = workdir.into();
        self
    }

    pub fn images_dir(&self) -> &Path {
        &self.images_dir
    }

    pub fn image_path(&self, image_ref: &str) -> PathBuf {
        self.images_dir.join(sanitize_image_ref(image_ref))
    }
}

pub fn sanitize_image_ref(image_ref: &str) -> String {
    image_ref
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

impl Runtime for LocalRuntime {
    fn name(&self) -> &str {
        "local"
    }

    fn create(
        &self,
        image_ref: &str,
        _limits: &ResourceLimits,
    ) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        let image = self.image_path(image_ref);
        if !image.join(".git").exists() {
            return Err(SandboxError::ImageNotFound(image_ref.to_string()));
        }
        std::fs::create_dir_all(&self.scratch_dir)
            .map_err(|e| SandboxError::RuntimeUnavailable(e.to_string()))?;
        let dir = tempfile::Builder::new()
            .prefix("bugpilot-sbx-")
            .tempdir_in(&self.scratch_dir)
            .map_err(|e| SandboxError::RuntimeUnavailable(e.to_string()))?;
        let host_root = dir
            .path()
            .canonicalize()
            .map_err(|e| SandboxError::RuntimeUnavailable(e.to_string()))?;
        let out = Command::new("git")
            .args(["-c", "safe.directory=*", "clone", "--quiet"])
            .arg(&image)
            .arg(&host_root)
            .stdin(Stdio::null())
            .output()
            .map_err(|e| SandboxError::RuntimeUnavailable(format!("git: {e}")))?;
        if !out.status.success() {
            return Err(SandboxError::Runtime(format!(
                "cloning {image_ref}: {}",
                String::from_utf8_lossy(&out.stderr)
            )));
        }
        Ok(Box::new(LocalSandbox {
            id: next_local_id("local"),
            dir: Some(dir),
            host_root_str: host_root.to_string_lossy().into_owned(),
            host_root,
            virtual_workdir: self.virtual_workdir.clone(),
            groups: Vec::new(),
        }))
    }
}

struct LocalSandbox {
    id: String,
    dir: Option<tempfile::TempDir>,
    host_root: PathBuf,
    host_root_str: String,
    virtual_workdir: String,
    /// Process groups that outlived their `exec` call; killed on destroy.
    groups: Vec<i32>,
}

fn spawn_reader(mut src: impl Read + Send + 'static) -> (Arc<Mutex<Vec<u8>>>, JoinHandle<()>) {
    let buf = Arc::new(Mutex::new(Vec::new()));
    let sink = Arc::clone(&buf);
    let handle = std::thread::spawn(move || {
        let mut chunk = [0u8; 8192];
        loop {
            match src.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => sink.lock().expect("pipe buffer").extend_from_slice(&chunk[..n]),
            }
        }
    });
    (buf, handle)
}

fn kill_group(pgid: i32) {
    // SAFETY: kill(2) with a negative pid signals the process group; it
    // has no memory-safety preconditions.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn group_alive(pgid: i32) -> bool {
    // SAFETY: signal 0 only probes for existence.
    unsafe { libc::kill(-pgid, 0) == 0 }
}

fn wait_readers(handles: Vec<JoinHandle<()>>, deadline: Instant) {
    for h in handles {
        while !h.is_finished() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(2));
        }
        if h.is_finished() {
            let _ = h.join();
        }
    }
}

pub(crate) fn replace_bytes(haystack: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
    if from.is_empty() || haystack.len() < from.len() {
        return haystack.to_vec();
    }
    let mut out = Vec::with_capacity(haystack.len());
    let mut i = 0;
    while i < haystack.len() {
        if haystack[i..].starts_with(from) {
            out.extend_from_slice(to);
            i += from.len();
        } else {
            out.push(haystack[i]);
            i += 1;
        }
    }
    out
}

impl LocalSandbox {
    fn host_path(&self, rel: &Path) -> PathBuf {
        self.host_root.join(rel)
    }

    fn virtualize(&self, bytes: &[u8]) -> Vec<u8> {
        replace_bytes(bytes, self.host_root_str.as_bytes(), self.virtual_workdir.as_bytes())
    }

    fn wait(&mut self, child: &mut Child, timeout: Duration, start: Instant) -> Option<i32> {
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    return Some(status.code().unwrap_or_else(|| {
                        use std::os::unix::process::ExitStatusExt;
                        128 + status.signal().unwrap_or(0)
                    }))
                }
                Ok(None) => {}
                Err(_) => return Some(-1),
            }
            if start.elapsed() >= timeout {
                kill_group(child.id() as i32);
                let _ = child.wait();
                return None;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }
}

impl SandboxBackend for LocalSandbox {
    fn id(&self) -> &str {
        &self.id
    }

    fn workdir(&self) -> &str {
        &self.virtual_workdir
    }

    fn exec(&mut self, command: &str, timeout_ms: u64) -> Result<ExecResult, SandboxError> {
        let command = command.replace(&self.virtual_workdir, &self.host_root_str);
        let start = Instant::now();
        let mut child = Command::new("bash")
            .arg("-c")
            .arg(&command)
            .current_dir(&self.host_root)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| SandboxError::RuntimeUnavailable(format!("spawning bash: {e}")))?;
        let pgid = child.id() as i32;
        let (out_buf, out_h) = spawn_reader(child.stdout.take().expect("piped stdout"));
        let (err_buf, err_h) = spawn_reader(child.stderr.take().expect("piped stderr"));
        let timeout = Duration::from_millis(timeout_ms);
        let exit_code = self.wait(&mut child, timeout, start);
        wait_readers(vec![out_h, err_h], Instant::now() + DRAIN_GRACE);
        let duration_ms = start.elapsed().as_millis() as u64;
        if group_alive(pgid) {
            self.groups.push(pgid);
        }
        let stdout = self.virtualize(&out_buf.lock().expect("pipe buffer"));
        let stderr = self.virtualize(&err_buf.lock().expect("pipe buffer"));
        Ok(ExecResult {
            timed_out: exit_code.is_none(),
            exit_code,
            stdout,
            stderr,
            duration_ms,
        })
    }

    fn read_file(&mut self, rel: &Path) -> Result<Vec<u8>, SandboxError> {
        let p = self.host_path(rel);
        if p.is_dir() {
            return Err(SandboxError::Runtime(format!("{} is a directory", rel.display())));
        }
        std::fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SandboxError::FileNotFound(rel.display().to_string()),
            _ => SandboxError::Io(e),
        })
    }

    fn write_file(&mut self, rel: &Path, data: &[u8]) -> Result<(), SandboxError> {
        let p = self.host_path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(p, data)?;
        Ok(())
    }

    fn destroy(&mut self) {
        for pgid in self.groups.drain(..) {
            kill_group(pgid);
        }
        if let Some(dir) = self.dir.take() {
            if let Err(e) = dir.close() {
                tracing::warn!(id = %self.id, error = %e, "removing sandbox dir");
            }
        }
    }
}
