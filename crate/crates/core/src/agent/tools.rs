//! The four scaffold tools: `file_editor`, `execute_bash`, `search`, `finish`.

use std::collections::BTreeMap;

use serde_json::Value;

use crate::model_client::{truncate_with_marker, ParamSpec, ToolCall, ToolSchema, Tokenizer};
use crate::sandbox::{shell_quote, SandboxError, SandboxHandle};

pub const FILE_EDITOR: &str = "file_editor";
pub const EXECUTE_BASH: &str = "execute_bash";
pub const SEARCH: &str = "search";
pub const FINISH: &str = "finish";
/// Accepted as a synonym of `finish`.
pub const SUBMIT: &str = "submit";

pub const TRUNCATION_MARKER: &str = "\n[... output truncated ...]";

/// Knobs the tools need from the episode configuration.
#[derive(Debug, Clone)]
pub struct ToolLimits {
    pub max_observation_tokens: usize,
    pub command_timeout_ms: u64,
    pub search_max_results: usize,
}

/// What dispatching one call produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub observation: String,
    pub terminal: bool,
}

/// Body plus a trailer that survives truncation of the body.
struct Rendered {
    out: ToolOutput,
    trailer: String,
}

impl From<ToolOutput> for Rendered {
    fn from(out: ToolOutput) -> Self {
        Rendered {
            out,
            trailer: String::new(),
        }
    }
}

impl ToolOutput {
    fn text(observation: impl Into<String>) -> Self {
        Self {
            observation: observation.into(),
            terminal: false,
        }
    }

    fn error(msg: impl std::fmt::Display) -> Self {
        Self::text(format!("ERROR: {msg}"))
    }
}

fn param(kind: &str, required: bool, description: &str) -> ParamSpec {
    ParamSpec {
        kind: kind.to_string(),
        required,
        description: description.to_string(),
    }
}

/// Schemas offered to the model, in a fixed order.
pub fn scaffold_tools() -> Vec<ToolSchema> {
    let editor = ToolSchema {
        name: FILE_EDITOR.to_string(),
        description: "View, create and edit files. `view` prints numbered lines (or lists a \
                      directory), `create` writes a new file, `str_replace` replaces one unique \
                      occurrence of `old_str`, `insert` adds `new_str` after line `insert_line` \
                      (0 inserts at the top)."
            .to_string(),
        parameters: BTreeMap::from([
            ("command".into(), param("string", true, "one of view, create, str_replace, insert")),
            ("path".into(), param("string", true, "file or directory path inside the workdir")),
            ("file_text".into(), param("string", false, "content for create")),
            ("old_str".into(), param("string", false, "text to replace for str_replace")),
            ("new_str".into(), param("string", false, "replacement or inserted text")),
            ("insert_line".into(), param("integer", false, "line after which to insert")),
            ("start_line".into(), param("integer", false, "first line shown by view (1-based)")),
            ("end_line".into(), param("integer", false, "last line shown by view (-1 for end)")),
        ]),
    };
    let bash = ToolSchema {
        name: EXECUTE_BASH.to_string(),
        description: "Run a bash command in the workdir. Output is stdout and stderr followed by \
                      the exit code."
            .to_string(),
        parameters: BTreeMap::from([(
            "command".into(),
            param("string", true, "the command to run"),
        )]),
    };
    let search = ToolSchema {
        name: SEARCH.to_string(),
        description: "Search file contents for a regular expression. Prints path:line: text for \
                      each match."
            .to_string(),
        parameters: BTreeMap::from([
            ("search_term".into(), param("string", true, "extended regular expression")),
            ("path".into(), param("string", false, "directory or file to search (default workdir)")),
        ]),
    };
    let finish = ToolSchema {
        name: FINISH.to_string(),
        description: "End the task.".to_string(),
        parameters: BTreeMap::from([(
            "message".into(),
            param("string", false, "optional closing message"),
        )]),
    };
    vec![editor, bash, search, finish]
}

#[derive(Debug)]
struct Malformed(String);

fn str_arg<'a>(call: &'a ToolCall, key: &str) -> Result<Option<&'a str>, Malformed> {
    match call.arguments.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Malformed(format!("argument {key:?} must be a string, got {other}"))),
    }
}

fn required_str<'a>(call: &'a ToolCall, key: &str) -> Result<&'a str, Malformed> {
    str_arg(call, key)?.ok_or_else(|| Malformed(format!("missing argument {key:?}")))
}

fn int_arg(call: &ToolCall, key: &str) -> Result<Option<i64>, Malformed> {
    match call.arguments.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Number(n)) => n
            .as_i64()
            .map(Some)
            .ok_or_else(|| Malformed(format!("argument {key:?} must be an integer"))),
        Some(Value::String(s)) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Malformed(format!("argument {key:?} must be an integer"))),
        Some(other) => Err(Malformed(format!("argument {key:?} must be an integer, got {other}"))),
    }
}

/// Executes one tool call. Never fails: every problem becomes an
/// `ERROR:` observation. Observations are capped to the token limit.
pub fn dispatch(
    sandbox: &mut SandboxHandle,
    call: &ToolCall,
    limits: &ToolLimits,
    tokenizer: &dyn Tokenizer,
) -> ToolOutput {
    let rendered = match call.name.as_str() {
        FILE_EDITOR => file_editor(sandbox, call).map(Rendered::from),
        EXECUTE_BASH => execute_bash(sandbox, call, limits),
        SEARCH => search(sandbox, call, limits).map(Rendered::from),
        FINISH | SUBMIT => finish(call).map(Rendered::from),
        other => Err(Malformed(format!("unknown tool {other:?}"))),
    };
    let Rendered { mut out, trailer } = rendered.unwrap_or_else(|Malformed(m)| {
        ToolOutput::text(format!("ERROR: malformed tool call ({m})")).into()
    });
    let max = limits.max_observation_tokens;
    let room = max.saturating_sub(tokenizer.count(&trailer));
    let body = truncate_with_marker(tokenizer, &out.observation, room, TRUNCATION_MARKER);
    out.observation = truncate_with_marker(tokenizer, &(body + &trailer), max, TRUNCATION_MARKER);
    out
}

fn file_editor(sandbox: &mut SandboxHandle, call: &ToolCall) -> Result<ToolOutput, Malformed> {
    let command = required_str(call, "command")?;
    let path = required_str(call, "path")?;
    let rel = match sandbox.resolve(path) {
        Ok(r) => r,
        Err(e) => return Ok(ToolOutput::error(e)),
    };
    let rel = rel.to_string_lossy().into_owned();
    let shown = if rel.is_empty() { ".".to_string() } else { rel.clone() };
    Ok(match command {
        "view" => {
            let start = int_arg(call, "start_line")?;
            let end = int_arg(call, "end_line")?;
            view(sandbox, &shown, start, end)
        }
        "create" => {
            let text = required_str(call, "file_text")?;
            match sandbox.read_file(&shown) {
                Ok(_) => ToolOutput::error(format!("file already exists: {shown}")),
                Err(SandboxError::FileNotFound(_)) => match sandbox.write_file(&shown, text.as_bytes()) {
                    Ok(()) => ToolOutput::text(format!("File created: {shown}")),
                    Err(e) => ToolOutput::error(e),
                },
                Err(e) => ToolOutput::error(e),
            }
        }
        "str_replace" => {
            let old = required_str(call, "old_str")?;
            let new = str_arg(call, "new_str")?.unwrap_or("");
            if old.is_empty() {
                return Err(Malformed("old_str must not be empty".into()));
            }
            match read_text(sandbox, &shown) {
                Err(o) => o,
                Ok(content) => match content.matches(old).count() {
                    0 => ToolOutput::error(format!("no occurrence of old_str in {shown}")),
                    1 => {
                        let updated = content.replacen(old, new, 1);
                        match sandbox.write_file(&shown, updated.as_bytes()) {
                            Ok(()) => ToolOutput::text(format!("Replaced 1 occurrence in {shown}")),
                            Err(e) => ToolOutput::error(e),
                        }
                    }
                    n => ToolOutput::error(format!("old_str is not unique in {shown} ({n} occurrences)")),
                },
            }
        }
        "insert" => {
            let line = int_arg(call, "insert_line")?
                .ok_or_else(|| Malformed("missing argument \"insert_line\"".into()))?;
            let new = required_str(call, "new_str")?;
            match read_text(sandbox, &shown) {
                Err(o) => o,
                Ok(content) => match insert_after(&content, line, new) {
                    Err(n) => ToolOutput::error(format!(
                        "insert_line {line} out of range for {shown} ({n} lines)"
                    )),
                    Ok(updated) => match sandbox.write_file(&shown, updated.as_bytes()) {
                        Ok(()) => ToolOutput::text(format!("Inserted after line {line} of {shown}")),
                        Err(e) => ToolOutput::error(e),
                    },
                },
            }
        }
        other => return Err(Malformed(format!("unknown file_editor command {other:?}"))),
    })
}

fn read_text(sandbox: &mut SandboxHandle, path: &str) -> Result<String, ToolOutput> {
    match sandbox.read_file(path) {
        Ok(bytes) => String::from_utf8(bytes)
            .map_err(|_| ToolOutput::error(format!("{path} is not a text file"))),
        Err(e) => Err(ToolOutput::error(e)),
    }
}

/// Inserts `text` as whole lines after line `after` (0 = top). Errors with
/// the line count when `after` is out of range.
pub(crate) fn insert_after(content: &str, after: i64, text: &str) -> Result<String, usize> {
    let lines: Vec<&str> = content.split_inclusive('\n').collect();
    if after < 0 || after as usize > lines.len() {
        return Err(lines.len());
    }
    let at = after as usize;
    let mut out = String::with_capacity(content.len() + text.len() + 2);
    for l in &lines[..at] {
        out.push_str(l);
    }
    if at > 0 && !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(text);
    if !text.ends_with('\n') && (at < lines.len() || !content.is_empty()) {
        out.push('\n');
    }
    for l in &lines[at..] {
        out.push_str(l);
    }
    Ok(out)
}

fn view(sandbox: &mut SandboxHandle, path: &str, start: Option<i64>, end: Option<i64>) -> ToolOutput {
    let is_dir = sandbox.exec(&format!("test -d {}", shell_quote(path)), 10_000);
    match is_dir {
        Ok(r) if r.success() => {
            let cmd = format!(
                "find {} -maxdepth 2 -not -path '*/.*' -not -name '__pycache__' | LC_ALL=C sort",
                shell_quote(path)
            );
            return match sandbox.exec(&cmd, 30_000) {
                Ok(r) => ToolOutput::text(r.stdout_text().trim_end().to_string()),
                Err(e) => ToolOutput::error(e),
            };
        }
        Ok(_) => {}
        Err(e) => return ToolOutput::error(e),
    }
    let content = match read_text(sandbox, path) {
        Ok(c) => c,
        Err(o) => return o,
    };
    let lines: Vec<&str> = content.lines().collect();
    let first = start.unwrap_or(1).max(1) as usize;
    let last = match end {
        None | Some(-1) => lines.len(),
        Some(n) if n < 0 => lines.len(),
        Some(n) => (n as usize).min(lines.len()),
    };
    if !lines.is_empty() && first > lines.len() {
        return ToolOutput::error(format!(
            "start_line {first} out of range for {path} ({} lines)",
            lines.len()
        ));
    }
    let body: Vec<String> = lines
        .iter()
        .enumerate()
        .skip(first - 1)
        .take(last.saturating_sub(first - 1))
        .map(|(i, l)| format!("{}\t{l}", i + 1))
        .collect();
    ToolOutput::text(body.join("\n"))
}

fn execute_bash(
    sandbox: &mut SandboxHandle,
    call: &ToolCall,
    limits: &ToolLimits,
) -> Result<Rendered, Malformed> {
    let command = required_str(call, "command")?;
    // 2>&1 inside the shell keeps stdout and stderr in write order.
    let wrapped = format!("{{ {command}\n}} 2>&1");
    Ok(match sandbox.exec(&wrapped, limits.command_timeout_ms) {
        Ok(r) => {
            let mut text = r.combined_text();
            if !text.is_empty() && !text.ends_with('\n') {
                text.push('\n');
            }
            let trailer = match r.exit_code {
                Some(code) if !r.timed_out => format!("exit_code={code}"),
                _ => format!(
                    "[command timed out after {} ms]\nexit_code=-1",
                    limits.command_timeout_ms
                ),
            };
            Rendered {
                out: ToolOutput::text(text),
                trailer,
            }
        }
        Err(e) => ToolOutput::error(e).into(),
    })
}

fn search(
    sandbox: &mut SandboxHandle,
    call: &ToolCall,
    limits: &ToolLimits,
) -> Result<ToolOutput, Malformed> {
    let term = required_str(call, "search_term")
        .or_else(|_| required_str(call, "query"))?;
    if let Err(e) = regex::Regex::new(term) {
        return Ok(ToolOutput::error(format!("invalid regex: {e}")));
    }
    let path = str_arg(call, "path")?.unwrap_or(".");
    let rel = match sandbox.resolve(path) {
        Ok(r) if r.as_os_str().is_empty() => ".".to_string(),
        Ok(r) => r.to_string_lossy().into_owned(),
        Err(e) => return Ok(ToolOutput::error(e)),
    };
    let cmd = format!(
        "grep -rnIE --exclude-dir=.git --exclude-dir=__pycache__ -e {} -- {}",
        shell_quote(term),
        shell_quote(&rel)
    );
    let r = match sandbox.exec(&cmd, limits.command_timeout_ms) {
        Ok(r) => r,
        Err(e) => return Ok(ToolOutput::error(e)),
    };
    match r.exit_code {
        Some(0) => {}
        Some(1) => return Ok(ToolOutput::text("No matches found")),
        _ => {
            return Ok(ToolOutput::error(format!(
                "search failed: {}",
                String::from_utf8_lossy(&r.stderr).trim()
            )))
        }
    }
    let mut hits: Vec<(String, u64, String)> = r
        .stdout_text()
        .lines()
        .filter_map(|l| {
            let (file, rest) = l.split_once(':')?;
            let (num, text) = rest.split_once(':')?;
            let file = file.strip_prefix("./").unwrap_or(file).to_string();
            Some((file, num.parse().ok()?, text.to_string()))
        })
        .collect();
    hits.sort();
    let total = hits.len();
    let mut out: Vec<String> = hits
        .into_iter()
        .take(limits.search_max_results)
        .map(|(f, n, t)| format!("{f}:{n}: {}", t.trim()))
        .collect();
    if total > limits.search_max_results {
        out.push(format!(
            "[... {} more matches not shown; showing first {} of {total} ...]",
            total - limits.search_max_results,
            limits.search_max_results
        ));
    }
    Ok(ToolOutput::text(out.join("\n")))
}

fn finish(call: &ToolCall) -> Result<ToolOutput, Malformed> {
    let message = str_arg(call, "message")?.unwrap_or("").trim();
    Ok(ToolOutput {
        observation: if message.is_empty() {
            "Finished.".to_string()
        } else {
            message.to_string()
        },
        terminal: true,
    })
}
