use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_request, ChatMessage, CompletionRequest, ModelBackend, ModelError, ModelReply, Role,
    SharedTokenizer, ToolCall,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub context_window: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub request_timeout_ms: u64,
}

/// OpenAI-style chat-completions client.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
    tokenizer: SharedTokenizer,
}

impl LiveBackend {
    pub fn new(config: LiveConfig, tokenizer: SharedTokenizer) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build();
        Self {
            config,
            agent,
            tokenizer,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

pub(crate) fn wire_message(m: &ChatMessage, index: usize) -> Value {
    let role = match m.role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
        Role::Tool => "tool",
    };
    let mut v = json!({"role": role, "content": m.content});
    if let Some(call) = &m.tool_call {
        v["tool_calls"] = json!([{
            "id": format!("call_{index}"),
            "type": "function",
            "function": {
                "name": call.name,
                "arguments": serde_json::to_string(&call.arguments).unwrap_or_default(),
            }
        }]);
    }
    if let Some(id) = &m.tool_call_id {
        v["tool_call_id"] = json!(id);
    }
    v
}

pub(crate) fn request_body(model: &str, request: &CompletionRequest<'_>) -> Value {
    // Assistant tool calls are numbered by their position among assistant
    // turns, matching the ids the agent gives tool replies.
    let mut assistant_index = 0;
    let messages: Vec<Value> = request
        .history
        .iter()
        .map(|m| {
            let v = wire_message(m, assistant_index);
            if m.role == Role::Assistant {
                assistant_index += 1;
            }
            v
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": request.params.temperature,
        "seed": request.params.seed,
    });
    if let Some(max) = request.params.max_tokens {
        body["max_tokens"] = json!(max);
    }
    if !request.tools.is_empty() {
        body["tools"] = Value::Array(
            request
                .tools
                .iter()
                .map(|t| {
                    json!({"type": "function", "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.json_schema(),
                    }})
                })
                .collect(),
        );
    }
    body
}

pub(crate) fn parse_reply(body: &Value) -> Result<ModelReply, ModelError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| ModelError::InvalidReply("missing choices[0].message".into()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let tool_call = match message.pointer("/tool_calls/0/function") {
        Some(f) => {
            let name = f
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| ModelError::InvalidReply("tool call without name".into()))?;
            let raw = f.get("arguments").and_then(Value::as_str).unwrap_or("{}");
            let arguments = match serde_json::from_str::<Value>(raw) {
                Ok(Value::Object(map)) => map.into_iter().collect(),
                // Unparseable arguments reach the scaffold as a malformed call.
                _ => [("_unparsed".to_string(), Value::String(raw.to_string()))]
                    .into_iter()
                    .collect(),
            };
            Some(ToolCall {
                name: name.to_string(),
                arguments,
            })
        }
        None => None,
    };
    let usage = |k: &str| {
        body.pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0) as usize
    };
    let reply = ModelReply {
        assistant_content: content,
        tool_call,
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
    };
    if !reply.is_valid() {
        return Err(ModelError::InvalidReply(
            "reply has neither content nor tool call".into(),
        ));
    }
    Ok(reply)
}

impl ModelBackend for LiveBackend {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<ModelReply, ModelError> {
        check_request(request, self.tokenizer.as_ref(), self.config.context_window)?;
        let body = request_body(&self.config.model, request);
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            let mut req = self
                .agent
                .post(&self.endpoint())
                .set("Content-Type", "application/json");
            if let Some(key) = &self.config.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body.clone()) {
                Ok(resp) => {
                    let value: Value = resp
                        .into_json()
                        .map_err(|e| ModelError::InvalidReply(e.to_string()))?;
                    return parse_reply(&value);
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    if status == 429 || status >= 500 {
                        tracing::warn!(status, attempt, "transient backend failure");
                        last_error = format!("status {status}: {text}");
                        continue;
                    }
                    return Err(ModelError::Rejected { status, body: text });
                }
                Err(ureq::Error::Transport(t)) => {
                    tracing::warn!(attempt, error = %t, "transport failure");
                    last_error = t.to_string();
                }
            }
        }
        Err(ModelError::BackendExhausted {
            attempts,
            last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_client::{SamplingParams, ToolSchema};

    #[test]
    fn body_carries_tools_and_params() {
        let history = [
            ChatMessage::system("s"),
            ChatMessage::user("u"),
            ChatMessage::assistant("", Some(ToolCall::new("finish"))),
            ChatMessage::tool("call_0", "done"),
        ];
        let tools = [ToolSchema {
            name: "finish".into(),
            description: "end".into(),
            parameters: Default::default(),
        }];
        let params = SamplingParams {
            temperature: 1.0,
            max_tokens: Some(64),
            seed: 3,
        };
        let body = request_body(
            "m",
            &CompletionRequest {
                episode: "e",
                history: &history,
                tools: &tools,
                params: &params,
            },
        );
        assert_eq!(body["messages"][2]["tool_calls"][0]["id"], "call_0");
        assert_eq!(body["messages"][3]["tool_call_id"], "call_0");
        assert_eq!(body["tools"][0]["function"]["name"], "finish");
        assert_eq!(body["max_tokens"], 64);
        assert_eq!(body["temperature"], 1.0);
    }

    #[test]
    fn parses_tool_call_reply() {
        let body = json!({
            "choices": [{"message": {"content": "thinking", "tool_calls": [{
                "id": "x", "type": "function",
                "function": {"name": "execute_bash", "arguments": "{\"command\": \"ls\"}"}
            }]}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 4}
        });
        let r = parse_reply(&body).unwrap();
        assert_eq!(r.assistant_content, "thinking");
        assert_eq!(r.tool_call.unwrap().arguments["command"], "ls");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (10, 4));
    }

    #[test]
    fn empty_reply_is_invalid() {
        let body = json!({"choices": [{"message": {"content": null}}]});
        assert!(matches!(parse_reply(&body), Err(ModelError::InvalidReply(_))));
    }
}
