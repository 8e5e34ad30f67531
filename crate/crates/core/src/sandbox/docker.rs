use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::http::{demux, HttpError, Response, UnixHttp};
use super::{ExecResult, ResourceLimits, Runtime, SandboxBackend, SandboxError};

/// Extra time granted to the daemon on top of a command's own timeout.
const EXEC_GRACE: Duration = Duration::from_secs(5);

/// Runtime backed by a docker-compatible daemon's HTTP API on a unix
/// socket. Containers idle on `sleep infinity`; commands are exec'd under
/// `timeout -s KILL` so the whole process tree dies with the deadline.
#[derive(Debug, Clone)]
pub struct DockerRuntime {
    http: UnixHttp,
    workdir: String,
}

fn unavailable(e: HttpError) -> SandboxError {
    SandboxError::RuntimeUnavailable(e.to_string())
}

fn url_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn expect_ok(resp: Response, what: &str) -> Result<Response, SandboxError> {
    if (200..300).contains(&resp.status) {
        Ok(resp)
    } else {
        Err(SandboxError::Runtime(format!(
            "{what}: status {}: {}",
            resp.status,
            resp.text().trim()
        )))
    }
}

impl DockerRuntime {
    pub fn new(socket: impl Into<PathBuf>) -> Self {
        Self {
            http: UnixHttp::new(socket),
            workdir: "/testbed".to_string(),
        }
    }

    pub fn with_workdir(mut self, workdir: impl Into<String>) -> Self {
        self.workdir = workdir.into();
        self
    }

    pub fn socket(&self) -> &Path {
        self.http.socket()
    }

    /// Content digest of a local image.
    pub fn image_digest(&self, image_ref: &str) -> Result<String, SandboxError> {
        let resp = self
            .http
            .json("GET", &format!("/images/{}/json", url_encode(image_ref)), None)
            .map_err(unavailable)?;
        if resp.status == 404 {
            return Err(SandboxError::ImageNotFound(image_ref.to_string()));
        }
        let v = expect_ok(resp, "inspect image")?
            .json()
            .map_err(SandboxError::Runtime)?;
        v.get("Id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| SandboxError::Runtime("image inspect without Id".into()))
    }

    /// Builds `tag` from a tar build context holding a `Dockerfile`.
    pub fn build_image(&self, tag: &str, context_tar: &[u8]) -> Result<String, SandboxError> {
        let resp = self
            .http
            .request(
                "POST",
                &format!("/build?t={}&rm=1&forcerm=1", url_encode(tag)),
                Some("application/x-tar"),
                context_tar,
                None,
            )
            .map_err(unavailable)?;
        let resp = expect_ok(resp, "build")?;
        for line in resp.text().lines() {
            if let Ok(v) = serde_json::from_str::<Value>(line) {
                if let Some(err) = v.get("error").and_then(Value::as_str) {
                    return Err(SandboxError::Runtime(format!("build {tag}: {err}")));
                }
            }
        }
        self.image_digest(tag)
    }
}

impl Runtime for DockerRuntime {
    fn name(&self) -> &str {
        "docker"
    }

    fn create(
        &self,
        image_ref: &str,
        limits: &ResourceLimits,
    ) -> Result<Box<dyn SandboxBackend>, SandboxError> {
        self.image_digest(image_ref)?;
        let body = json!({
            "Image": image_ref,
            "Cmd": ["sleep", "infinity"],
            "WorkingDir": self.workdir,
            "Tty": false,
            "HostConfig": {
                "NanoCpus": (limits.cpus * 1e9) as i64,
                "Memory": limits.memory_mb * 1024 * 1024,
                "PidsLimit": limits.pids,
            },
        });
        let resp = self
            .http
            .json("POST", "/containers/create", Some(&body))
            .map_err(unavailable)?;
        if resp.status == 404 {
            return Err(SandboxError::ImageNotFound(image_ref.to_string()));
        }
        let id = expect_ok(resp, "create container")?
            .json()
            .map_err(SandboxError::Runtime)?
            .get("Id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| SandboxError::Runtime("create without Id".into()))?;
        let mut sandbox = DockerSandbox {
            http: self.http.clone(),
            id,
            workdir: self.workdir.clone(),
            removed: false,
        };
        let resp = self
            .http
            .json("POST", &format!("/containers/{}/start", sandbox.id), None)
            .map_err(unavailable)?;
        if let Err(e) = expect_ok(resp, "start container") {
            sandbox.destroy();
            return Err(e);
        }
        Ok(Box::new(sandbox))
    }
}

struct DockerSandbox {
    http: UnixHttp,
    id: String,
    workdir: String,
    removed: bool,
}

impl DockerSandbox {
    fn archive_path(&self, rel: &Path) -> String {
        format!("{}/{}", self.workdir.trim_end_matches('/'), rel.display())
    }
}

impl SandboxBackend for DockerSandbox {
    fn id(&self) -> &str {
        &self.id
    }

    fn workdir(&self) -> &str {
        &self.workdir
    }

    fn exec(&mut self, command: &str, timeout_ms: u64) -> Result<ExecResult, SandboxError> {
        let secs = format!("{:.3}", timeout_ms as f64 / 1000.0);
        let body = json!({
            "AttachStdout": true,
            "AttachStderr": true,
            "Tty": false,
            "WorkingDir": self.workdir,
            "Env": ["PYTHONDONTWRITEBYTECODE=1"],
            "Cmd": ["timeout", "-s", "KILL", secs, "bash", "-c", command],
        });
        let resp = self
            .http
            .json("POST", &format!("/containers/{}/exec", self.id), Some(&body))
            .map_err(unavailable)?;
        if resp.status == 404 || resp.status == 409 {
            return Err(SandboxError::SandboxClosed(self.id.clone()));
        }
        let exec_id = expect_ok(resp, "create exec")?
            .json()
            .map_err(SandboxError::Runtime)?
            .get("Id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| SandboxError::Runtime("exec without Id".into()))?;
        let start = Instant::now();
        let payload = json!({"Detach": false, "Tty": false}).to_string();
        let resp = self
            .http
            .request(
                "POST",
                &format!("/exec/{exec_id}/start"),
                Some("application/json"),
                payload.as_bytes(),
                Some(Duration::from_millis(timeout_ms) + EXEC_GRACE),
            )
            .map_err(unavailable)?;
        let duration_ms = start.elapsed().as_millis() as u64;
        let (stdout, stderr) = demux(&expect_ok(resp, "start exec")?.body);
        let inspect = self
            .http
            .json("GET", &format!("/exec/{exec_id}/json"), None)
            .map_err(unavailable)?;
        let code = expect_ok(inspect, "inspect exec")?
            .json()
            .map_err(SandboxError::Runtime)?
            .get("ExitCode")
            .and_then(Value::as_i64)
            .map(|c| c as i32);
        // `timeout -s KILL` reports the kill as 137.
        let timed_out = code == Some(137) && duration_ms >= timeout_ms;
        Ok(ExecResult {
            exit_code: if timed_out { None } else { code },
            stdout,
            stderr,
            duration_ms,
            timed_out,
        })
    }

    fn read_file(&mut self, rel: &Path) -> Result<Vec<u8>, SandboxError> {
        let path = self.archive_path(rel);
        let resp = self
            .http
            .json(
                "GET",
                &format!("/containers/{}/archive?path={}", self.id, url_encode(&path)),
                None,
            )
            .map_err(unavailable)?;
        if resp.status == 404 {
            return Err(SandboxError::FileNotFound(rel.display().to_string()));
        }
        let resp = expect_ok(resp, "read archive")?;
        let mut archive = tar::Archive::new(resp.body.as_slice());
        for entry in archive.entries()? {
            let mut entry = entry?;
            if entry.header().entry_type().is_file() {
                let mut buf = Vec::new();
                std::io::Read::read_to_end(&mut entry, &mut buf)?;
                return Ok(buf);
            }
            if entry.header().entry_type().is_dir() {
                return Err(SandboxError::Runtime(format!("{} is a directory", rel.display())));
            }
        }
        Err(SandboxError::FileNotFound(rel.display().to_string()))
    }

    fn write_file(&mut self, rel: &Path, data: &[u8]) -> Result<(), SandboxError> {
        let parent = rel.parent().filter(|p| !p.as_os_str().is_empty());
        if let Some(p) = parent {
            let mk = self.exec(
                &format!("mkdir -p {}", super::shell_quote(&p.display().to_string())),
                30_000,
            )?;
            if !mk.success() {
                return Err(SandboxError::Runtime(mk.combined_text()));
            }
        }
        let name = rel
            .file_name()
            .ok_or_else(|| SandboxError::PathOutsideWorkdir(rel.display().to_string()))?;
        let mut builder = tar::Builder::new(Vec::new());
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_cksum();
        builder.append_data(&mut header, name, data)?;
        let tarball = builder.into_inner()?;
        let dir = match parent {
            Some(p) => self.archive_path(p),
            None => self.workdir.clone(),
        };
        let resp = self
            .http
            .request(
                "PUT",
                &format!("/containers/{}/archive?path={}", self.id, url_encode(&dir)),
                Some("application/x-tar"),
                &tarball,
                None,
            )
            .map_err(unavailable)?;
        expect_ok(resp, "write archive").map(|_| ())
    }

    fn destroy(&mut self) {
        if self.removed {
            return;
        }
        self.removed = true;
        match self
            .http
            .json("DELETE", &format!("/containers/{}?force=true", self.id), None)
        {
            Ok(r) if (200..300).contains(&r.status) || r.status == 404 => {}
            Ok(r) => tracing::warn!(id = %self.id, status = r.status, "removing container"),
            Err(e) => tracing::warn!(id = %self.id, error = %e, "removing container"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_socket_is_runtime_unavailable() {
        let rt = DockerRuntime::new("/nonexistent/bugpilot.sock");
        let Err(err) = rt.create("img", &ResourceLimits::default()) else {
            panic!("expected an error");
        };
        assert!(matches!(err, SandboxError::RuntimeUnavailable(_)), "{err}");
    }

    #[test]
    fn encodes_refs() {
        assert_eq!(url_encode("toy/calc:1"), "toy%2Fcalc%3A1");
    }
}
