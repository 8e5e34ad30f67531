use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    check_request, CompletionRequest, ModelBackend, ModelError, ModelReply, SharedTokenizer,
    ToolCall,
};

/// One scripted reply. `episode` is an exact key or a glob where `*`
/// matches any run of characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub episode: String,
    pub step: usize,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, serde_json::Value>,
}

impl ScriptEntry {
    pub fn tool(episode: &str, step: usize, call: ToolCall) -> Self {
        Self {
            episode: episode.to_string(),
            step,
            content: String::new(),
            tool: Some(call.name),
            args: call.arguments,
        }
    }

    pub fn text(episode: &str, step: usize, content: &str) -> Self {
        Self {
            episode: episode.to_string(),
            step,
            content: content.to_string(),
            tool: None,
            args: BTreeMap::new(),
        }
    }
}

/// Deterministic backend serving scripted replies.
///
/// Each episode key has its own step counter; the n-th call for an episode
/// is answered by the entry for step n. Exact keys win over patterns,
/// patterns are tried in file order.
#[derive(Debug)]
pub struct ReplayBackend {
    exact: HashMap<(String, usize), ScriptEntry>,
    patterns: Vec<ScriptEntry>,
    counters: Mutex<HashMap<String, usize>>,
    tokenizer: SharedTokenizer,
    context_window: usize,
    name: String,
}

impl ReplayBackend {
    pub fn new(entries: Vec<ScriptEntry>, tokenizer: SharedTokenizer, context_window: usize) -> Self {
        let mut exact = HashMap::new();
        let mut patterns = Vec::new();
        for e in entries {
            if e.episode.contains('*') {
                patterns.push(e);
            } else {
                exact.entry((e.episode.clone(), e.step)).or_insert(e);
            }
        }
        Self {
            exact,
            patterns,
            counters: Mutex::new(HashMap::new()),
            tokenizer,
            context_window,
            name: "replay".to_string(),
        }
    }

    /// Loads a script: either a JSON array of entries or one entry per line.
    pub fn from_file(
        path: &Path,
        tokenizer: SharedTokenizer,
        context_window: usize,
    ) -> Result<Self, ModelError> {
        let err = |reason: String| ModelError::Script {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let entries = parse_script(&text).map_err(err)?;
        Ok(Self::new(entries, tokenizer, context_window))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Clears all per-episode counters.
    pub fn reset(&self) {
        self.counters.lock().expect("replay counters").clear();
    }

    fn lookup(&self, episode: &str, step: usize) -> Option<&ScriptEntry> {
        self.exact
            .get(&(episode.to_string(), step))
            .or_else(|| {
                self.patterns
                    .iter()
                    .find(|e| e.step == step && glob_match(&e.episode, episode))
            })
    }
}

/// Parses a script: a JSON array of entries or one entry per line.
pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).map_err(|e| e.to_string());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

impl ModelBackend for ReplayBackend {
    fn model_name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelReply, ModelError> {
        let prompt_tokens = check_request(request, self.tokenizer.as_ref(), self.context_window)?;
        let step = {
            let mut counters = self.counters.lock().expect("replay counters");
            let c = counters.entry(request.episode.to_string()).or_insert(0);
            let step = *c;
            *c += 1;
            step
        };
        let entry = self
            .lookup(request.episode, step)
            .ok_or_else(|| ModelError::ScriptExhausted {
                episode: request.episode.to_string(),
                step,
            })?;
        let tool_call = entry.tool.as_ref().map(|name| ToolCall {
            name: name.clone(),
            arguments: entry.args.clone(),
        });
        let tok = self.tokenizer.as_ref();
        let reply = ModelReply {
            completion_tokens: tok.count(&entry.content)
                + tool_call.as_ref().map_or(0, |c| c.token_count(tok)),
            assistant_content: entry.content.clone(),
            tool_call,
            prompt_tokens,
        };
        if !reply.is_valid() {
            return Err(ModelError::InvalidReply(format!(
                "script entry for {:?} step {step} has neither content nor tool",
                request.episode
            )));
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_client::{default_tokenizer, ChatMessage, SamplingParams};

    fn call(backend: &ReplayBackend, episode: &str) -> Result<ModelReply, ModelError> {
        let history = [ChatMessage::system("sys"), ChatMessage::user("go")];
        let params = SamplingParams::default();
        backend.complete(&CompletionRequest {
            episode,
            history: &history,
            tools: &[],
            params: &params,
        })
    }

    #[test]
    fn scripted_submit_passes_through() {
        let b = ReplayBackend::new(
            vec![ScriptEntry::tool("ep", 0, ToolCall::new("submit"))],
            default_tokenizer(),
            1000,
        );
        let r = call(&b, "ep").unwrap();
        assert_eq!(r.tool_call.unwrap().name, "submit");
        assert!(matches!(
            call(&b, "ep"),
            Err(ModelError::ScriptExhausted { step: 1, .. })
        ));
    }

    #[test]
    fn context_overflow_is_reported() {
        let b = ReplayBackend::new(
            vec![ScriptEntry::text("ep", 0, "x")],
            default_tokenizer(),
            2,
        );
        let history = [
            ChatMessage::system("one two"),
            ChatMessage::user("three"),
        ];
        let params = SamplingParams::default();
        let err = b
            .complete(&CompletionRequest {
                episode: "ep",
                history: &history,
                tools: &[],
                params: &params,
            })
            .unwrap_err();
        assert!(matches!(err, ModelError::ContextOverflow { tokens: 3, window: 2 }));
    }

    #[test]
    fn patterns_have_independent_counters() {
        let b = ReplayBackend::new(
            vec![
                ScriptEntry::text("calc__*", 0, "first"),
                ScriptEntry::text("calc__*", 1, "second"),
                ScriptEntry::text("calc__featadd__3", 0, "exact"),
            ],
            default_tokenizer(),
            1000,
        );
        assert_eq!(call(&b, "calc__featadd__1").unwrap().assistant_content, "first");
        assert_eq!(call(&b, "calc__featadd__2").unwrap().assistant_content, "first");
        assert_eq!(call(&b, "calc__featadd__1").unwrap().assistant_content, "second");
        assert_eq!(call(&b, "calc__featadd__3").unwrap().assistant_content, "exact");
        assert_eq!(call(&b, "calc__featadd__3").unwrap().assistant_content, "second");
    }

    #[test]
    fn replay_is_deterministic() {
        let script = vec![
            ScriptEntry::tool("e", 0, ToolCall::new("execute_bash").arg("command", "ls")),
            ScriptEntry::tool("e", 1, ToolCall::new("finish")),
        ];
        let run = || {
            let b = ReplayBackend::new(script.clone(), default_tokenizer(), 1000);
            (0..2)
                .map(|_| serde_json::to_string(&call(&b, "e").unwrap()).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn globs() {
        assert!(glob_match("*", "anything"));
        assert!(glob_match("a*c", "abc"));
        assert!(glob_match("a*b*c", "a1b2c"));
        assert!(!glob_match("a*c", "ab"));
        assert!(!glob_match("*/describe", "x/classify"));
        assert!(glob_match("*/describe", "x/describe"));
    }

    #[test]
    fn parses_both_script_layouts() {
        let arr = r#"[{"episode":"e","step":0,"tool":"finish"}]"#;
        let lines = "{\"episode\":\"e\",\"step\":0,\"tool\":\"finish\"}\n\n";
        assert_eq!(parse_script(arr).unwrap(), parse_script(lines).unwrap());
        assert!(parse_script(r#"[{"episode":"e","step":0,"bogus":1}]"#).is_err());
    }
}
