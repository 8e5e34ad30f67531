use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::AttemptOutcome;
use crate::model_client::{ChatMessage, Role, ToolCall, Tokenizer};

/// One exported chat turn. Tool call ids are not part of the format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
}

impl From<ChatMessage> for ChatTurn {
    fn from(m: ChatMessage) -> Self {
        Self {
            role: m.role,
            content: m.content,
            tool_call: m.tool_call,
        }
    }
}

/// A resolved trajectory cut to the training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub messages: Vec<ChatTurn>,
    pub instance_id: String,
    /// Tokens in `messages`.
    pub tokens: usize,
}

/// Keeps resolved attempts and cuts each transcript to the longest run of
/// whole leading messages that fits in `budget_tokens`. A transcript whose
/// first message alone is over budget is dropped.
pub fn select_for_sft(outcomes: &[AttemptOutcome], budget_tokens: usize, tokenizer: &dyn Tokenizer) -> Vec<SftExample> {
    let mut out = Vec::new();
    for o in outcomes.iter().filter(|o| o.resolved) {
        let mut tokens = 0;
        let mut messages = Vec::new();
        for m in o.trajectory.messages() {
            let n = m.token_count(tokenizer);
            if tokens + n > budget_tokens {
                break;
            }
            tokens += n;
            messages.push(ChatTurn::from(m));
        }
        if messages.is_empty() {
            tracing::warn!(instance = %o.instance_id, attempt = o.attempt_index, "first message exceeds the budget, dropped");
            continue;
        }
        out.push(SftExample {
            messages,
            instance_id: o.instance_id.clone(),
            tokens,
        });
    }
    out
}

pub fn write_chat_jsonl(mut w: impl Write, examples: &[SftExample]) -> io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
