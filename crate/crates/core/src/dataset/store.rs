//! Line-delimited JSON store, one directory per dataset.
//!
//! Writers hold an advisory lock on `<dir>/.lock` for their lifetime. Each
//! record is one `write` of a full line followed by a data sync, so a crash
//! can only leave a partial final line; the next writer moves such a tail
//! to `<file>.quarantine` and readers skip it.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::record::BugRecord;
use crate::testkit::RepoProfile;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Collection {
    Bugs,
    Trajectories,
    Labels,
}

impl Collection {
    pub const ALL: [Collection; 3] = [Collection::Bugs, Collection::Trajectories, Collection::Labels];

    pub fn file_name(self) -> &'static str {
        match self {
            Collection::Bugs => "bugs.jsonl",
            Collection::Trajectories => "trajectories.jsonl",
            Collection::Labels => "labels.jsonl",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Key every stored line is unique and sorted by.
fn line_key(v: &serde_json::Value) -> Option<&str> {
    v.get("instance_id")?.as_str()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    /// sha256 of the canonical JSON of the generating configuration.
    pub config_fingerprint: String,
    pub tokenizer: String,
    pub generator: String,
    #[serde(default)]
    pub repos: Vec<RepoProfile>,
}

impl Manifest {
    pub fn new(config_fingerprint: String, tokenizer: &str, repos: Vec<RepoProfile>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_fingerprint,
            tokenizer: tokenizer.to_string(),
            generator: concat!("bugpilot ", env!("CARGO_PKG_VERSION")).to_string(),
            repos,
        }
    }

    pub fn repo(&self, name: &str) -> Option<&RepoProfile> {
        self.repos.iter().find(|r| r.name == name)
    }
}

pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no dataset at {0} (missing {MANIFEST_FILE})")]
    NotADataset(PathBuf),
    #[error("dataset {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("duplicate instance {key} in {file}")]
    DuplicateInstance { file: &'static str, key: String },
    #[error("schema violation in {file}{}: {reason}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    SchemaViolation {
        file: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("unsupported schema version {found} (this build reads {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(StoreError::NotADataset(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::SchemaViolation {
        file: path.display().to_string(),
        line: None,
        reason: e.to_string(),
    })?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion {
            found: m.schema_version,
        });
    }
    Ok(m)
}

fn write_atomic(path: &Path, data: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(data).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Splits file content into complete lines and an unterminated tail.
fn split_tail(data: &[u8]) -> (&[u8], &[u8]) {
    match data.iter().rposition(|b| *b == b'\n') {
        Some(i) => data.split_at(i + 1),
        None => (&[], data),
    }
}

fn parse_lines<'a>(file: &str, body: &'a str) -> Result<Vec<(&'a str, serde_json::Value)>, StoreError> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: serde_json::Value = serde_json::from_str(l).map_err(|e| StoreError::SchemaViolation {
                file: file.to_string(),
                line: Some(i + 1),
                reason: e.to_string(),
            })?;
            if line_key(&v).is_none() {
                return Err(StoreError::SchemaViolation {
                    file: file.to_string(),
                    line: Some(i + 1),
                    reason: "missing string field instance_id".into(),
                });
            }
            Ok((l, v))
        })
        .collect()
}

/// Reads a collection's complete lines, ignoring an unterminated tail.
pub fn read_collection<T: DeserializeOwned>(dir: &Path, c: Collection) -> Result<Vec<T>, StoreError> {
    let path = dir.join(c.file_name());
    let data = match fs::read(&path) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let (body, tail) = split_tail(&data);
    if !tail.is_empty() {
        tracing::warn!(file = %path.display(), bytes = tail.len(), "ignoring partial final line");
    }
    let body = String::from_utf8_lossy(body);
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::SchemaViolation {
                file: c.file_name().to_string(),
                line: Some(i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Read-only view of a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub bugs: Vec<BugRecord>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let manifest = read_manifest(dir)?;
        let bugs = read_collection(dir, Collection::Bugs)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            bugs,
        })
    }
}

/// Single-writer handle on a dataset directory.
#[derive(Debug)]
pub struct DatasetStore {
    dir: PathBuf,
    manifest: Manifest,
    _lock: File,
    keys: [BTreeSet<String>; 3],
    quarantined: Vec<PathBuf>,
}

impl DatasetStore {
    /// Opens `dir`, creating it with `manifest` if it holds no dataset yet.
    /// An existing manifest is kept; a differing config fingerprint is
    /// logged.
    pub fn open_or_create(dir: &Path, manifest: Manifest) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let lock = Self::lock(dir)?;
        let manifest = match read_manifest(dir) {
            Ok(existing) => {
                if existing.config_fingerprint != manifest.config_fingerprint {
                    tracing::warn!(
                        dir = %dir.display(),
                        existing = %existing.config_fingerprint,
                        requested = %manifest.config_fingerprint,
                        "appending with a different configuration"
                    );
                }
                existing
            }
            Err(StoreError::NotADataset(_)) => {
                let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
                text.push('\n');
                write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
                manifest
            }
            Err(e) => return Err(e),
        };
        Self::finish_open(dir, manifest, lock)
    }

    /// Opens an existing dataset for appending.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let manifest = read_manifest(dir)?;
        let lock = Self::lock(dir)?;
        Self::finish_open(dir, manifest, lock)
    }

    fn lock(dir: &Path) -> Result<File, StoreError> {
        let path = dir.join(LOCK_FILE);
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        // SAFETY: flock on a descriptor we own; released when `f` closes.
        let rc = unsafe { libc::flock(f.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            let e = std::io::Error::last_os_error();
            if e.raw_os_error() == Some(libc::EWOULDBLOCK) {
                return Err(StoreError::Locked(dir.to_path_buf()));
            }
            return Err(io_err(&path)(e));
        }
        Ok(f)
    }

    fn finish_open(dir: &Path, manifest: Manifest, lock: File) -> Result<Self, StoreError> {
        let mut store = Self {
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
            keys: Default::default(),
            quarantined: Vec::new(),
        };
        for c in Collection::ALL {
            store.recover(c)?;
        }
        Ok(store)
    }

    /// Quarantines a partial tail, then indexes and checks every line.
    fn recover(&mut self, c: Collection) -> Result<(), StoreError> {
        let path = self.path(c);
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (body, tail) = split_tail(&data);
        if !tail.is_empty() {
            let q = PathBuf::from(format!("{}.quarantine", path.display()));
            let mut qf = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&q)
                .map_err(io_err(&q))?;
            qf.write_all(tail).map_err(io_err(&q))?;
            qf.write_all(b"\n").map_err(io_err(&q))?;
            qf.sync_all().map_err(io_err(&q))?;
            let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            f.set_len(body.len() as u64).map_err(io_err(&path))?;
            f.sync_all().map_err(io_err(&path))?;
            tracing::warn!(file = %path.display(), quarantine = %q.display(), "quarantined partial final line");
            self.quarantined.push(q);
        }
        let text = std::str::from_utf8(body).map_err(|e| StoreError::SchemaViolation {
            file: c.file_name().into(),
            line: None,
            reason: e.to_string(),
        })?;
        for (i, (line, v)) in parse_lines(c.file_name(), text)?.into_iter().enumerate() {
            if c == Collection::Bugs {
                let rec: BugRecord = serde_json::from_str(line).map_err(|e| StoreError::SchemaViolation {
                    file: c.file_name().into(),
                    line: Some(i + 1),
                    reason: e.to_string(),
                })?;
                rec.check().map_err(|reason| StoreError::SchemaViolation {
                    file: c.file_name().into(),
                    line: Some(i + 1),
                    reason,
                })?;
            }
            let key = line_key(&v).expect("checked by parse_lines").to_string();
            if !self.keys[c.index()].insert(key.clone()) {
                return Err(StoreError::DuplicateInstance {
                    file: c.file_name(),
                    key,
                });
            }
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Quarantine files written while opening.
    pub fn quarantined(&self) -> &[PathBuf] {
        &self.quarantined
    }

    pub fn path(&self, c: Collection) -> PathBuf {
        self.dir.join(c.file_name())
    }

    pub fn contains(&self, c: Collection, key: &str) -> bool {
        self.keys[c.index()].contains(key)
    }

    pub fn len(&self, c: Collection) -> usize {
        self.keys[c.index()].len()
    }

    pub fn append_bug(&mut self, rec: &BugRecord) -> Result<(), StoreError> {
        rec.check().map_err(|reason| StoreError::SchemaViolation {
            file: Collection::Bugs.file_name().into(),
            line: None,
            reason,
        })?;
        self.append(Collection::Bugs, rec)
    }

    /// Appends one line. The value must serialize to an object with a
    /// string `instance_id` not yet present in the collection.
    pub fn append<T: Serialize>(&mut self, c: Collection, value: &T) -> Result<(), StoreError> {
        let v = serde_json::to_value(value).map_err(|e| StoreError::SchemaViolation {
            file: c.file_name().into(),
            line: None,
            reason: e.to_string(),
        })?;
        let Some(key) = line_key(&v) else {
            return Err(StoreError::SchemaViolation {
                file: c.file_name().into(),
                line: None,
                reason: "missing string field instance_id".into(),
            });
        };
        if self.contains(c, key) {
            return Err(StoreError::DuplicateInstance {
                file: c.file_name(),
                key: key.to_string(),
            });
        }
        let mut line = serde_json::to_string(value).expect("value serialized once already");
        line.push('\n');
        let path = self.path(c);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;
        self.keys[c.index()].insert(key.to_string());
        Ok(())
    }

    /// Rewrites every collection sorted by instance id, so the bytes do
    /// not depend on completion order.
    pub fn seal(&mut self) -> Result<(), StoreError> {
        for c in Collection::ALL {
            let path = self.path(c);
            let Ok(text) = fs::read_to_string(&path) else {
                continue;
            };
            let mut lines = parse_lines(c.file_name(), &text)?;
            lines.sort_by(|a, b| line_key(&a.1).cmp(&line_key(&b.1)));
            let mut out = String::with_capacity(text.len());
            for (l, _) in lines {
                out.push_str(l);
                out.push('\n');
            }
            if out != text {
                write_atomic(&path, out.as_bytes())?;
            }
        }
        Ok(())
    }
}
