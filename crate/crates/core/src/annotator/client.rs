use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Text in, text out.
pub trait TextCompletion: Send + Sync {
    fn name(&self) -> String;
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub const ENDPOINT_ENV: &str = "EMCOT_ANNOTATOR_ENDPOINT";
pub const API_KEY_ENV: &str = "EMCOT_ANNOTATOR_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Cap on concurrent requests when annotating many trajectories.
    pub max_in_flight: usize,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "annotator".into(),
            timeout_secs: 60.0,
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

/// Chat-completions style HTTP client. The endpoint and key may be overridden
/// from the environment.
#[derive(Debug, Clone)]
pub struct HttpCompletion {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    api_key: Option<String>,
}

impl HttpCompletion {
    pub fn from_config(cfg: &ExternalConfig) -> Self {
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| cfg.endpoint.clone());
        Self {
            endpoint,
            model: cfg.model.clone(),
            timeout: Duration::from_secs_f64(cfg.timeout_secs.max(0.001)),
            api_key: std::env::var(API_KEY_ENV).ok(),
        }
    }
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct Reply {
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    text: Option<String>,
}

/// Pulls the reply text from either a chat-completions body or `{"text": ..}`.
pub fn parse_reply_body(body: &str) -> Result<String> {
    let reply: Reply = serde_json::from_str(body).map_err(|e| Error::Parse {
        message: format!("reply body is not valid JSON: {e}"),
        raw: body.to_string(),
    })?;
    if let Some(t) = reply.text {
        return Ok(t);
    }
    reply
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| Error::Parse {
            message: "reply has no choices".into(),
            raw: body.to_string(),
        })
}

impl TextCompletion for HttpCompletion {
    fn name(&self) -> String {
        format!("external:{}", self.model)
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(serde_json::to_string(&body)?.as_bytes())
            .map_err(|e| Error::Backend(format!("request to {} failed: {e}", self.endpoint)))?;
        let status = resp.status();
        let mut text = String::new();
        resp.body_mut()
            .as_reader()
            .read_to_string(&mut text)
            .map_err(|e| Error::Backend(format!("reading reply: {e}")))?;
        if !status.is_success() {
            return Err(Error::Backend(format!("endpoint returned {status}: {text}")));
        }
        parse_reply_body(&text)
    }
}

/// Replays canned replies in order; the last one repeats. For tests and
/// offline dry runs of the external path.
#[derive(Debug)]
pub struct ScriptedCompletion {
    replies: Vec<Result<String>>,
    calls: std::sync::atomic::AtomicUsize,
}

impl ScriptedCompletion {
    pub fn new(replies: Vec<Result<String>>) -> Self {
        Self {
            replies,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn ok(replies: &[&str]) -> Self {
        Self::new(replies.iter().map(|s| Ok(s.to_string())).collect())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl TextCompletion for ScriptedCompletion {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, _prompt: &str) -> Result<String> {
        let i = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        let idx = i.min(self.replies.len().saturating_sub(1));
        match self.replies.get(idx) {
            Some(Ok(s)) => Ok(s.clone()),
            Some(Err(e)) => Err(Error::Backend(e.to_string())),
            None => Err(Error::Backend("no scripted replies".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_shapes() {
        let chat = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#;
        assert_eq!(parse_reply_body(chat).unwrap(), "hello");
        assert_eq!(parse_reply_body(r#"{"text":"hi"}"#).unwrap(), "hi");
        assert!(matches!(parse_reply_body("nope"), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_reply_body(r#"{"choices":[]}"#),
            Err(Error::Parse { .. })
        ));
    }
}
