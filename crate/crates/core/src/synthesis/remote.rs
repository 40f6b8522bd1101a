//! Chat-completion client: role/content messages in, `choices[0].message.content` out.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{Error, Result};

/// Repair requests allowed after the first reply of a candidate.
pub const MAX_REPAIRS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub url: String,
    pub model: String,
    /// Never written to manifests.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig { url: String::new(), model: String::new(), api_key: None, temperature: 0.7, timeout_secs: 120 }
    }
}

impl RemoteConfig {
    /// Reads `ESDS_LLM_URL`, `ESDS_LLM_MODEL`, `ESDS_LLM_KEY` and
    /// `ESDS_LLM_TEMPERATURE`.
    pub fn from_env() -> Result<Self> {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut cfg = RemoteConfig {
            url: get("ESDS_LLM_URL").ok_or_else(|| Error::Config("ESDS_LLM_URL is not set".into()))?,
            model: get("ESDS_LLM_MODEL").ok_or_else(|| Error::Config("ESDS_LLM_MODEL is not set".into()))?,
            api_key: get("ESDS_LLM_KEY"),
            ..RemoteConfig::default()
        };
        if let Some(t) = get("ESDS_LLM_TEMPERATURE") {
            cfg.temperature = t
                .parse()
                .map_err(|_| Error::Config(format!("ESDS_LLM_TEMPERATURE is not a number: {t}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.url.trim().is_empty() || self.model.trim().is_empty() {
            return Err(Error::Config("remote backend needs an endpoint URL and a model name".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        Ok(())
    }
}

pub fn chat_request_body(model: &str, temperature: f64, messages: &[(String, String)]) -> Value {
    let msgs: Vec<Value> = messages.iter().map(|(role, content)| json!({"role": role, "content": content})).collect();
    json!({"model": model, "temperature": temperature, "messages": msgs})
}

/// `choices[0].message.content` of a chat-completion reply, if present.
pub fn extract_content(reply: &Value) -> Option<String> {
    reply.pointer("/choices/0/message/content")?.as_str().map(str::to_string)
}

pub(super) struct Reply {
    pub raw: String,
    pub content: Option<String>,
}

pub(super) struct Client {
    cfg: RemoteConfig,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(cfg: &RemoteConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| Error::RemoteUnreachable(e.to_string()))?;
        Ok(Client { cfg: cfg.clone(), http })
    }

    pub fn request_body(&self, messages: &[(String, String)]) -> Value {
        chat_request_body(&self.cfg.model, self.cfg.temperature, messages)
    }

    /// Transport failures and non-success statuses are errors; a reply that
    /// arrives but is not usable JSON is returned with `content: None`.
    pub fn send(&self, body: &Value) -> Result<Reply> {
        let mut req = self.http.post(&self.cfg.url).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::RemoteUnreachable(e.to_string()))?;
        let status = resp.status();
        let raw = resp.text().map_err(|e| Error::RemoteUnreachable(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::RemoteUnreachable(format!("HTTP {status}: {}", raw.chars().take(200).collect::<String>())));
        }
        let content = serde_json::from_str::<Value>(&raw).ok().and_then(|v| extract_content(&v));
        Ok(Reply { raw, content })
    }
}
