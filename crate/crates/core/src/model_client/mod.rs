//! Chat-with-tools interface over model backends.
//!
//! Two backends ship: [`LiveBackend`] speaks the OpenAI-style chat
//! completions protocol over HTTP, [`ReplayBackend`] serves scripted replies
//! keyed by `(episode, step)` and drives every test in this workspace.

mod live;
mod replay;
mod tokenizer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use live::{LiveBackend, LiveConfig};
pub use replay::{parse_script, ReplayBackend, ScriptEntry};
pub use tokenizer::{default_tokenizer, truncate_with_marker, ApproxTokenizer, SharedTokenizer, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// A single tool invocation. Argument values are JSON scalars or strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, serde_json::Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            arguments: BTreeMap::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.arguments.insert(key.to_string(), value.into());
        self
    }

    pub fn token_count(&self, tokenizer: &dyn Tokenizer) -> usize {
        let mut n = tokenizer.count(&self.name);
        for (k, v) in &self.arguments {
            n += tokenizer.count(k);
            n += match v {
                serde_json::Value::String(s) => tokenizer.count(s),
                other => tokenizer.count(&other.to_string()),
            };
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>, tool_call: Option<ToolCall>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            tool_call,
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_call: None,
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
            tool_call_id: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self.role {
            Role::Tool if self.tool_call_id.is_none() => Err(ModelError::InvalidRequest(
                "tool message without tool_call_id".into(),
            )),
            Role::System | Role::User | Role::Tool if self.tool_call.is_some() => Err(
                ModelError::InvalidRequest(format!("{:?} message carries a tool call", self.role)),
            ),
            _ => Ok(()),
        }
    }

    pub fn token_count(&self, tokenizer: &dyn Tokenizer) -> usize {
        tokenizer.count(&self.content)
            + self
                .tool_call
                .as_ref()
                .map_or(0, |c| c.token_count(tokenizer))
    }
}

pub fn history_tokens(history: &[ChatMessage], tokenizer: &dyn Tokenizer) -> usize {
    history.iter().map(|m| m.token_count(tokenizer)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub required: bool,
    pub description: String,
}

/// Tool description offered to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: BTreeMap<String, ParamSpec>,
}

impl ToolSchema {
    /// JSON-schema rendering used by the live protocol.
    pub fn json_schema(&self) -> serde_json::Value {
        let mut props = serde_json::Map::new();
        let mut required = Vec::new();
        for (name, p) in &self.parameters {
            props.insert(
                name.clone(),
                serde_json::json!({"type": p.kind, "description": p.description}),
            );
            if p.required {
                required.push(serde_json::Value::String(name.clone()));
            }
        }
        serde_json::json!({"type": "object", "properties": props, "required": required})
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_tokens: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub assistant_content: String,
    pub tool_call: Option<ToolCall>,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

impl ModelReply {
    pub fn is_valid(&self) -> bool {
        !self.assistant_content.is_empty() || self.tool_call.is_some()
    }
}

/// One call to [`ModelBackend::complete`]. `episode` keys replay lookups and
/// is otherwise only used for logging.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub episode: &'a str,
    pub history: &'a [ChatMessage],
    pub tools: &'a [ToolSchema],
    pub params: &'a SamplingParams,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("backend exhausted after {attempts} attempts: {last_error}")]
    BackendExhausted { attempts: u32, last_error: String },
    #[error("replay script has no reply for episode {episode:?} step {step}")]
    ScriptExhausted { episode: String, step: usize },
    #[error("prompt of {tokens} tokens exceeds context window of {window}")]
    ContextOverflow { tokens: usize, window: usize },
    #[error("request rejected by backend (status {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid reply: {0}")]
    InvalidReply(String),
    #[error("replay script {path}: {reason}")]
    Script { path: String, reason: String },
}

pub trait ModelBackend: Send + Sync {
    /// Name recorded as `generator_model` / label provenance.
    fn model_name(&self) -> &str;

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelReply, ModelError>;
}

/// Shared precondition checks for every backend.
pub(crate) fn check_request(
    request: &CompletionRequest<'_>,
    tokenizer: &dyn Tokenizer,
    context_window: usize,
) -> Result<usize, ModelError> {
    let first = request
        .history
        .first()
        .ok_or_else(|| ModelError::InvalidRequest("empty history".into()))?;
    if first.role != Role::System {
        return Err(ModelError::InvalidRequest(
            "history must start with a system message".into(),
        ));
    }
    for m in request.history {
        m.validate()?;
    }
    let tokens = history_tokens(request.history, tokenizer);
    if tokens > context_window {
        return Err(ModelError::ContextOverflow {
            tokens,
            window: context_window,
        });
    }
    Ok(tokens)
}

/// Convenience for single-turn prompts (bug reports, classification,
/// summaries): system + user, no tools, content only.
pub fn ask(
    backend: &dyn ModelBackend,
    episode: &str,
    system: &str,
    prompt: &str,
    params: &SamplingParams,
) -> Result<ModelReply, ModelError> {
    let history = [ChatMessage::system(system), ChatMessage::user(prompt)];
    backend.complete(&CompletionRequest {
        episode,
        history: &history,
        tools: &[],
        params,
    })
}
