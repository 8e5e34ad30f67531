//! Unified diff parsing and per-patch statistics.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model_client::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed diff at line {line}: {reason}")]
pub struct MalformedDiff {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileChange {
    Edited,
    Created,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HunkLine {
    Context(String),
    Added(String),
    Removed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilePatch {
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub binary: bool,
    created: bool,
    deleted: bool,
    pub hunks: Vec<Hunk>,
}

impl FilePatch {
    pub fn change(&self) -> FileChange {
        if self.created || self.old_path.is_none() {
            FileChange::Created
        } else if self.deleted || self.new_path.is_none() {
            FileChange::Deleted
        } else {
            FileChange::Edited
        }
    }

    /// The path the section is about: the new side unless deleted.
    pub fn path(&self) -> &str {
        self.new_path
            .as_deref()
            .or(self.old_path.as_deref())
            .unwrap_or_default()
    }
}

fn hunk_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@").expect("hunk header regex")
    })
}

const EXTENDED_HEADERS: &[&str] = &[
    "index ",
    "old mode ",
    "new mode ",
    "similarity index ",
    "dissimilarity index ",
    "rename from ",
    "rename to ",
    "copy from ",
    "copy to ",
];

/// `a/foo` → `foo`, `/dev/null` → None. Trailing timestamps after a tab
/// are dropped.
fn side_path(raw: &str) -> Option<String> {
    let p = raw.split('\t').next().unwrap_or(raw).trim_end();
    if p == "/dev/null" {
        return None;
    }
    let p = p
        .strip_prefix("a/")
        .or_else(|| p.strip_prefix("b/"))
        .unwrap_or(p);
    Some(p.to_string())
}

fn git_header_paths(rest: &str) -> (Option<String>, Option<String>) {
    match rest.find(" b/") {
        Some(i) => (side_path(&rest[..i]), side_path(&rest[i + 1..])),
        None => (None, None),
    }
}

pub fn parse_diff(text: &str) -> Result<Vec<FilePatch>, MalformedDiff> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    let err = |i: usize, reason: String| MalformedDiff { line: i + 1, reason };
    let mut files: Vec<FilePatch> = Vec::new();
    // Whether the open section already had its ---/+++ pair.
    let mut has_sides = false;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].strip_suffix('\r').unwrap_or(lines[i]);
        if let Some(rest) = line.strip_prefix("diff --git ") {
            let (old, new) = git_header_paths(rest);
            files.push(FilePatch {
                old_path: old,
                new_path: new,
                ..FilePatch::default()
            });
            has_sides = false;
            i += 1;
            continue;
        }
        if let Some(old) = line.strip_prefix("--- ") {
            let Some(new) = lines.get(i + 1).and_then(|l| l.strip_prefix("+++ ")) else {
                return Err(err(i, "'---' header without '+++'".into()));
            };
            let open_fresh = files.last().is_some_and(|f| !has_sides && f.hunks.is_empty());
            if !open_fresh {
                files.push(FilePatch::default());
            }
            let f = files.last_mut().expect("open section");
            f.old_path = side_path(old);
            f.new_path = side_path(new);
            has_sides = true;
            i += 2;
            continue;
        }
        if line.starts_with("@@") {
            let Some(f) = files.last_mut() else {
                return Err(err(i, "hunk outside a file section".into()));
            };
            let c = hunk_header()
                .captures(line)
                .ok_or_else(|| err(i, format!("bad hunk header {line:?}")))?;
            let num = |k: usize, default: usize| {
                c.get(k)
                    .map_or(Ok(default), |m| m.as_str().parse::<usize>())
                    .map_err(|e| err(i, e.to_string()))
            };
            let mut hunk = Hunk {
                old_start: num(1, 0)?,
                old_len: num(2, 1)?,
                new_start: num(3, 0)?,
                new_len: num(4, 1)?,
                lines: Vec::new(),
            };
            let (mut old_left, mut new_left) = (hunk.old_len, hunk.new_len);
            i += 1;
            while old_left > 0 || new_left > 0 {
                let Some(raw) = lines.get(i) else {
                    return Err(err(i, "hunk ends before its line counts are met".into()));
                };
                let body = raw.strip_suffix('\r').unwrap_or(raw);
                let (kind, text) = match body.chars().next() {
                    Some('\\') => {
                        i += 1;
                        continue;
                    }
                    Some(c) => (c, &body[1..]),
                    // Some tools strip the space of empty context lines.
                    None => (' ', ""),
                };
                let out = match kind {
                    '+' if new_left > 0 => {
                        new_left -= 1;
                        HunkLine::Added(text.to_string())
                    }
                    '-' if old_left > 0 => {
                        old_left -= 1;
                        HunkLine::Removed(text.to_string())
                    }
                    ' ' if old_left > 0 && new_left > 0 => {
                        old_left -= 1;
                        new_left -= 1;
                        HunkLine::Context(text.to_string())
                    }
                    _ => return Err(err(i, format!("unexpected hunk line {body:?}"))),
                };
                hunk.lines.push(out);
                i += 1;
            }
            // A marker may trail the final line.
            while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                i += 1;
            }
            f.hunks.push(hunk);
            continue;
        }
        if line.is_empty() {
            i += 1;
            continue;
        }
        let Some(f) = files.last_mut() else {
            return Err(err(i, format!("unexpected line before any file header: {line:?}")));
        };
        if line.starts_with("new file mode ") {
            f.created = true;
        } else if line.starts_with("deleted file mode ") {
            f.deleted = true;
        } else if let Some(rest) = line.strip_prefix("Binary files ") {
            f.binary = true;
            if let Some(body) = rest.strip_suffix(" differ") {
                if body.starts_with("/dev/null and ") {
                    f.created = true;
                }
                if body.ends_with(" and /dev/null") {
                    f.deleted = true;
                }
            }
        } else if line == "GIT binary patch" {
            f.binary = true;
            i += 1;
            // Base85 payload runs until the next section.
            while i < lines.len() && !lines[i].starts_with("diff --git ") {
                i += 1;
            }
            continue;
        } else if !EXTENDED_HEADERS.iter().any(|h| line.starts_with(h)) {
            return Err(err(i, format!("unrecognized line {line:?}")));
        }
        i += 1;
    }
    Ok(files)
}

/// Line-start comment markers and docstring-style block delimiters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocProfile {
    pub name: &'static str,
    pub line_markers: &'static [&'static str],
    /// Delimiters that open a documentation block when they start a line
    /// and close it at their next occurrence.
    pub block_delimiters: &'static [&'static str],
    /// Every line is documentation (prose files).
    pub prose: bool,
}

pub const PYTHON: DocProfile = DocProfile {
    name: "python",
    line_markers: &["#"],
    block_delimiters: &["\"\"\"", "'''"],
    prose: false,
};

pub const PROSE: DocProfile = DocProfile {
    name: "prose",
    line_markers: &[],
    block_delimiters: &[],
    prose: true,
};

pub const GENERIC: DocProfile = DocProfile {
    name: "generic",
    line_markers: &["#", "//"],
    block_delimiters: &[],
    prose: false,
};

pub fn doc_profile_for(path: &str) -> &'static DocProfile {
    let ext = path.rsplit_once('.').map_or("", |(_, e)| e);
    match ext {
        "py" | "pyi" => &PYTHON,
        "md" | "rst" | "txt" => &PROSE,
        _ => &GENERIC,
    }
}

/// Classifies the new-side lines of one hunk. Returns, per line of
/// `hunk.lines`, whether it is documentation (removed lines map to false).
/// Block state starts closed at each hunk since the surrounding file is
/// not available.
pub fn classify_hunk(profile: &DocProfile, hunk: &Hunk) -> Vec<bool> {
    let mut open: Option<&str> = None;
    hunk.lines
        .iter()
        .map(|l| {
            let text = match l {
                HunkLine::Removed(_) => return false,
                HunkLine::Added(t) | HunkLine::Context(t) => t,
            };
            if profile.prose {
                return true;
            }
            let s = text.trim();
            if let Some(d) = open {
                if s.matches(d).count() % 2 == 1 {
                    open = None;
                }
                return true;
            }
            if profile.line_markers.iter().any(|m| s.starts_with(m)) {
                return true;
            }
            if let Some(d) = profile.block_delimiters.iter().find(|d| s.starts_with(*d)) {
                if s.matches(d).count() % 2 == 1 {
                    open = Some(d);
                }
                return true;
            }
            false
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiffStats {
    pub files_edited: usize,
    pub files_created: usize,
    pub files_deleted: usize,
    pub added_lines: usize,
    pub deleted_lines: usize,
    pub code_lines: usize,
    pub doc_lines: usize,
    pub patch_tokens: usize,
}

impl DiffStats {
    pub fn files_modified(&self) -> usize {
        self.files_edited + self.files_created
    }

    pub fn net_lines(&self) -> i64 {
        self.added_lines as i64 - self.deleted_lines as i64
    }
}

pub fn diff_stats(patch: &str, tokenizer: &dyn Tokenizer) -> Result<DiffStats, MalformedDiff> {
    let mut st = DiffStats {
        patch_tokens: tokenizer.count(patch),
        ..DiffStats::default()
    };
    for f in parse_diff(patch)? {
        match f.change() {
            FileChange::Edited => st.files_edited += 1,
            FileChange::Created => st.files_created += 1,
            FileChange::Deleted => st.files_deleted += 1,
        }
        let profile = doc_profile_for(f.path());
        for h in &f.hunks {
            for (line, doc) in h.lines.iter().zip(classify_hunk(profile, h)) {
                match line {
                    HunkLine::Added(_) if doc => st.doc_lines += 1,
                    HunkLine::Added(_) => st.code_lines += 1,
                    HunkLine::Removed(_) => st.deleted_lines += 1,
                    HunkLine::Context(_) => {}
                }
            }
        }
    }
    st.added_lines = st.code_lines + st.doc_lines;
    Ok(st)
}
