//! The tool-calling episode loop.
//!
//! Each iteration sends the full history to the model, dispatches the one
//! tool call in the reply and appends a [`Step`]. An episode ends on
//! `finish`, on the step budget, on the context budget, or when the backend
//! gives up. [`Episode::continue_with`] resumes a finished episode with a
//! new user message and the same history.

pub mod tools;

use serde::{Deserialize, Serialize};

use crate::model_client::{
    history_tokens, truncate_with_marker, ChatMessage, CompletionRequest, ModelBackend, ModelError,
    SamplingParams, SharedTokenizer, ToolCall, ToolSchema,
};
use crate::sandbox::SandboxHandle;

pub use tools::{dispatch, scaffold_tools, ToolLimits, ToolOutput, TRUNCATION_MARKER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    pub temperature: f64,
    pub context_budget: usize,
    /// Cap on the instance prompt; longer prompts are cut with a marker.
    pub max_prompt_tokens: usize,
    pub max_observation_tokens: usize,
    pub command_timeout_ms: u64,
    pub search_max_results: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 100,
            temperature: 1.0,
            context_budget: 65_536,
            max_prompt_tokens: 10_240,
            max_observation_tokens: 2_000,
            command_timeout_ms: 120_000,
            search_max_results: 100,
        }
    }
}

impl EpisodeConfig {
    pub fn tool_limits(&self) -> ToolLimits {
        ToolLimits {
            max_observation_tokens: self.max_observation_tokens,
            command_timeout_ms: self.command_timeout_ms,
            search_max_results: self.search_max_results,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Submitted,
    StepLimit,
    ContextLimit,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    /// User message sent right before this step, if a continuation
    /// prompt resumed the episode here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_user: Option<String>,
    pub assistant_content: String,
    pub tool_call: Option<ToolCall>,
    pub observation: String,
    pub observation_tokens: usize,
    pub content_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: String,
    pub system_prompt: String,
    pub instance_prompt: String,
    pub steps: Vec<Step>,
    pub termination: Termination,
    pub success: Option<bool>,
    pub seed: u64,
    pub total_prompt_tokens: usize,
    pub total_completion_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    /// Rebuilds the chat transcript the model saw, ending with the last
    /// observation.
    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut out = vec![
            ChatMessage::system(&self.system_prompt),
            ChatMessage::user(&self.instance_prompt),
        ];
        for s in &self.steps {
            push_step_messages(&mut out, s);
        }
        out
    }

    pub fn non_empty_content_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| !s.assistant_content.trim().is_empty())
            .count()
    }
}

fn tool_call_id(step: usize) -> String {
    format!("call_{step}")
}

fn push_step_messages(history: &mut Vec<ChatMessage>, s: &Step) {
    if let Some(u) = &s.injected_user {
        history.push(ChatMessage::user(u));
    }
    history.push(ChatMessage::assistant(&s.assistant_content, s.tool_call.clone()));
    if s.tool_call.is_some() {
        history.push(ChatMessage::tool(tool_call_id(s.index), &s.observation));
    } else {
        history.push(ChatMessage::user(&s.observation));
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("max_steps must be at least 1")]
    NoSteps,
    #[error("initial prompt needs {tokens} tokens, context budget is {budget}")]
    PromptExceedsBudget { tokens: usize, budget: usize },
}

/// A resumable episode.
pub struct Episode<'a> {
    backend: &'a dyn ModelBackend,
    tokenizer: SharedTokenizer,
    key: String,
    config: EpisodeConfig,
    tools: Vec<ToolSchema>,
    history: Vec<ChatMessage>,
    trajectory: Trajectory,
    pending_user: Option<String>,
}

pub const PROMPT_TRUNCATION_MARKER: &str = "\n[... prompt truncated ...]";

impl<'a> Episode<'a> {
    /// `key` selects replay script entries; `instance_id` is recorded.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backend: &'a dyn ModelBackend,
        tokenizer: SharedTokenizer,
        key: &str,
        instance_id: &str,
        system_prompt: &str,
        instance_prompt: &str,
        config: &EpisodeConfig,
        seed: u64,
    ) -> Result<Self, AgentError> {
        if config.max_steps == 0 {
            return Err(AgentError::NoSteps);
        }
        let instance_prompt = truncate_with_marker(
            tokenizer.as_ref(),
            instance_prompt,
            config.max_prompt_tokens,
            PROMPT_TRUNCATION_MARKER,
        );
        let history = vec![
            ChatMessage::system(system_prompt),
            ChatMessage::user(&instance_prompt),
        ];
        let tokens = history_tokens(&history, tokenizer.as_ref());
        if tokens >= config.context_budget {
            return Err(AgentError::PromptExceedsBudget {
                tokens,
                budget: config.context_budget,
            });
        }
        Ok(Self {
            backend,
            tokenizer,
            key: key.to_string(),
            tools: scaffold_tools(),
            trajectory: Trajectory {
                instance_id: instance_id.to_string(),
                system_prompt: system_prompt.to_string(),
                instance_prompt,
                steps: Vec::new(),
                termination: Termination::StepLimit,
                success: None,
                seed,
                total_prompt_tokens: 0,
                total_completion_tokens: 0,
                error: None,
            },
            config: config.clone(),
            history,
            pending_user: None,
        })
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn steps_left(&self) -> usize {
        self.config.max_steps - self.trajectory.steps.len()
    }

    /// Runs until a terminal condition and returns it. The step budget is
    /// shared by all rounds of the episode.
    pub fn run(&mut self, sandbox: &mut SandboxHandle) -> Termination {
        let tok = self.tokenizer.clone();
        let limits = self.config.tool_limits();
        let params = SamplingParams {
            temperature: self.config.temperature,
            max_tokens: None,
            seed: self.trajectory.seed,
        };
        let termination = loop {
            if self.trajectory.steps.len() >= self.config.max_steps {
                break Termination::StepLimit;
            }
            let mut attempt = self.history.clone();
            if let Some(u) = &self.pending_user {
                attempt.push(ChatMessage::user(u));
            }
            if history_tokens(&attempt, tok.as_ref()) > self.config.context_budget {
                break Termination::ContextLimit;
            }
            let reply = match self.backend.complete(&CompletionRequest {
                episode: &self.key,
                history: &attempt,
                tools: &self.tools,
                params: &params,
            }) {
                Ok(r) => r,
                Err(ModelError::ContextOverflow { .. }) => break Termination::ContextLimit,
                Err(e) => {
                    tracing::warn!(episode = %self.key, error = %e, "model call failed");
                    self.trajectory.error = Some(e.to_string());
                    break Termination::BackendError;
                }
            };
            self.history = attempt;
            self.trajectory.total_prompt_tokens += reply.prompt_tokens;
            self.trajectory.total_completion_tokens += reply.completion_tokens;
            let index = self.trajectory.steps.len();
            let output = match &reply.tool_call {
                Some(call) => dispatch(sandbox, call, &limits, tok.as_ref()),
                None => ToolOutput {
                    observation: "ERROR: malformed tool call (reply contains no tool call)".into(),
                    terminal: false,
                },
            };
            let step = Step {
                index,
                injected_user: self.pending_user.take(),
                content_tokens: tok.count(&reply.assistant_content),
                observation_tokens: tok.count(&output.observation),
                assistant_content: reply.assistant_content,
                tool_call: reply.tool_call,
                observation: output.observation,
            };
            tracing::debug!(episode = %self.key, step = index, tool = ?step.tool_call.as_ref().map(|c| &c.name), "step");
            let mut tail = Vec::new();
            push_step_messages(&mut tail, &Step { injected_user: None, ..step.clone() });
            self.history.extend(tail);
            self.trajectory.steps.push(step);
            if output.terminal {
                break Termination::Submitted;
            }
        };
        self.trajectory.termination = termination;
        termination
    }

    /// Appends `message` as a user turn and runs again.
    pub fn continue_with(&mut self, sandbox: &mut SandboxHandle, message: &str) -> Termination {
        self.pending_user = Some(message.to_string());
        let t = self.run(sandbox);
        // A continuation that never reached the model leaves no trace.
        self.pending_user = None;
        t
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }
}

/// One-shot episode.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    backend: &dyn ModelBackend,
    tokenizer: SharedTokenizer,
    sandbox: &mut SandboxHandle,
    key: &str,
    instance_id: &str,
    system_prompt: &str,
    instance_prompt: &str,
    config: &EpisodeConfig,
    seed: u64,
) -> Result<Trajectory, AgentError> {
    let mut ep = Episode::new(
        backend,
        tokenizer,
        key,
        instance_id,
        system_prompt,
        instance_prompt,
        config,
        seed,
    )?;
    ep.run(sandbox);
    Ok(ep.into_trajectory())
}
