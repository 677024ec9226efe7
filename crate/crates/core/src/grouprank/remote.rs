use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::prompt::{parse_response, serialize_prompt};
use super::{RankBackend, RankGroup, RankResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteBackendConfig {
    /// Endpoint root; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry")]
    pub retry: usize,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_in_flight() -> usize {
    4
}

fn default_retry() -> usize {
    2
}

impl RemoteBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteBackendConfig {
            base_url: base_url.into(),
            model: model.into(),
            token_env: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retry: default_retry(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!("timeout_secs {} must be positive", self.timeout_secs)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
}

enum Failure {
    Transport(String),
    Timeout,
    Response { reason: String, raw: String },
}

/// Chat-completions client: one user message per group, scores read from
/// the first JSON array of the reply.
#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteBackendConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteBackendConfig) -> Result<Self> {
        config.validate()?;
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend { config, agent, token })
    }

    pub fn config(&self) -> &RemoteBackendConfig {
        &self.config
    }

    /// Request body for `group`; identical groups give identical bytes.
    pub fn request_body(&self, group: &RankGroup) -> Result<Vec<u8>> {
        let prompt = serialize_prompt(group)?;
        let request = ChatRequest {
            model: &self.config.model,
            messages: [Message {
                role: "user",
                content: &prompt,
            }],
            temperature: 0.0,
        };
        Ok(serde_json::to_vec(&request)?)
    }

    fn post(&self, body: &[u8]) -> std::result::Result<String, Failure> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let classify = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => Failure::Timeout,
            other => Failure::Transport(other.to_string()),
        };
        let mut resp = req.send(body).map_err(classify)?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if !status.is_success() {
            return Err(Failure::Response {
                reason: format!("HTTP {}", status.as_u16()),
                raw: text,
            });
        }
        Ok(text)
    }

    fn attempt(&self, body: &[u8], n: usize) -> std::result::Result<(Vec<f64>, bool, String), Failure> {
        let raw = self.post(body)?;
        let content = serde_json::from_str::<Value>(&raw)
            .ok()
            .and_then(|v| v["choices"][0]["message"]["content"].as_str().map(str::to_owned));
        let Some(content) = content else {
            return Err(Failure::Response {
                reason: "response lacks choices[0].message.content".into(),
                raw,
            });
        };
        match parse_response(&content, n) {
            Ok(p) => Ok((p.scores, p.clamped, content)),
            Err(e) => Err(Failure::Response {
                reason: e.to_string(),
                raw: content,
            }),
        }
    }
}

impl RankBackend for RemoteBackend {
    fn tag(&self) -> &str {
        "remote"
    }

    fn rank(&self, group: &RankGroup) -> Result<RankResult> {
        let body = self.request_body(group)?;
        let attempts = self.config.retry + 1;
        let mut last_reason = String::new();
        let mut last_raw = None;
        let mut timed_out = false;
        for attempt in 1..=attempts {
            match self.attempt(&body, group.len()) {
                Ok((scores, clamped, raw)) => {
                    if clamped {
                        warn!("remote scores clamped into [0, 1]");
                    }
                    return Ok(RankResult {
                        scores,
                        backend: self.tag().to_string(),
                        raw_response: Some(raw),
                        clamped,
                        attempts: attempt,
                    });
                }
                Err(Failure::Timeout) => {
                    timed_out = true;
                    last_reason = "timeout".into();
                }
                Err(Failure::Transport(reason)) => {
                    timed_out = false;
                    last_reason = reason;
                }
                Err(Failure::Response { reason, raw }) => {
                    timed_out = false;
                    last_reason = reason;
                    last_raw = Some(raw);
                }
            }
            warn!("remote attempt {attempt}/{attempts} failed: {last_reason}");
        }
        if timed_out {
            return Err(Error::Timeout { attempts });
        }
        Err(Error::Remote {
            attempts,
            reason: last_reason,
            last_response: last_raw,
        })
    }

    /// Up to `max_in_flight` groups are in flight at once.
    fn rank_all(&self, groups: &[RankGroup]) -> Result<Vec<RankResult>> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<RankResult>>>> = Mutex::new((0..groups.len()).map(|_| None).collect());
        let workers = self.config.max_in_flight.min(groups.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= groups.len() {
                        break;
                    }
                    let r = self.rank(&groups[i]);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every group ranked"))
            .collect()
    }
}
