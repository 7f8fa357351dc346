//! Chat-completions wire types with tool calling, plus endpoints.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Environment variable holding the chat endpoint key.
pub const API_KEY_VAR: &str = "MCFORGE_API_KEY";

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("request to {url} failed: {reason}")]
    Transport { url: String, reason: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("scripted endpoint has no reply for this turn")]
    ScriptExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub name: String,
    /// JSON-encoded argument object.
    #[serde(default)]
    pub arguments: String,
}

/// One tool invocation requested by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    #[serde(rename = "type", default = "function_kind")]
    pub kind: String,
    pub function: FunctionCall,
}

fn function_kind() -> String {
    "function".into()
}

impl ToolCall {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: Value) -> Self {
        ToolCall {
            id: id.into(),
            kind: function_kind(),
            function: FunctionCall {
                name: name.into(),
                arguments: arguments.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    fn text(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: Some(content.into()),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::text(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::text(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::text(Role::Assistant, content)
    }

    pub fn assistant_calls(calls: Vec<ToolCall>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: None,
            tool_calls: calls,
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Tool,
            content: Some(content.into()),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    pub fn content_text(&self) -> &str {
        self.content.as_deref().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    #[serde(rename = "type")]
    pub kind: String,
    pub function: FunctionSchema,
}

impl ToolSchema {
    pub fn new(name: &str, description: &str, parameters: Value) -> Self {
        ToolSchema {
            kind: function_kind(),
            function: FunctionSchema {
                name: name.into(),
                description: description.into(),
                parameters,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolSchema>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// Something that answers a chat request with one assistant message.
pub trait ChatEndpoint {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatMessage, ChatError>;
}

/// An OpenAI-compatible `/chat/completions` service.
#[derive(Debug, Clone)]
pub struct HttpChatEndpoint {
    pub url: String,
    api_key: Option<String>,
}

impl HttpChatEndpoint {
    /// Reads the key from `MCFORGE_API_KEY` when set.
    pub fn from_env(url: impl Into<String>) -> Self {
        HttpChatEndpoint {
            url: url.into(),
            api_key: std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty()),
        }
    }
}

pub(crate) fn post_json<T: serde::de::DeserializeOwned>(
    url: &str,
    api_key: Option<&str>,
    body: &impl Serialize,
) -> Result<T, ChatError> {
    let transport = |reason: String| ChatError::Transport {
        url: url.to_string(),
        reason,
    };
    let mut req = ureq::post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req.send_json(body).map_err(|e| transport(e.to_string()))?;
    resp.body_mut()
        .read_json::<T>()
        .map_err(|e| ChatError::Malformed(e.to_string()))
}

impl ChatEndpoint for HttpChatEndpoint {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatMessage, ChatError> {
        let resp: ChatResponse = post_json(&self.url, self.api_key.as_deref(), request)?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message)
            .ok_or_else(|| ChatError::Malformed("response has no choices".into()))
    }
}

/// Replies with the content of the last user message.
#[derive(Debug, Default, Clone)]
pub struct EchoEndpoint {
    pub requests: Vec<ChatRequest>,
}

impl ChatEndpoint for EchoEndpoint {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatMessage, ChatError> {
        self.requests.push(request.clone());
        let last = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content_text().to_string())
            .unwrap_or_default();
        Ok(ChatMessage::assistant(last))
    }
}

/// Replies computed by a closure over the message history; keeps every
/// request for inspection.
pub struct ScriptedEndpoint<F> {
    script: F,
    pub requests: Vec<ChatRequest>,
}

impl<F> ScriptedEndpoint<F>
where
    F: FnMut(&[ChatMessage]) -> Option<ChatMessage>,
{
    pub fn new(script: F) -> Self {
        ScriptedEndpoint {
            script,
            requests: Vec::new(),
        }
    }
}

impl<F> ChatEndpoint for ScriptedEndpoint<F>
where
    F: FnMut(&[ChatMessage]) -> Option<ChatMessage>,
{
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatMessage, ChatError> {
        self.requests.push(request.clone());
        (self.script)(&request.messages).ok_or(ChatError::ScriptExhausted)
    }
}
