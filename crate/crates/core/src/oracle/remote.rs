//! Adapter for a chat-completion HTTP endpoint.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{exact_match_metric, Oracle, OracleVerdict};
use crate::dataset::{CandidatePool, ExampleSequence, Query};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. Unset means no Authorization header.
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub max_attempts: usize,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub retry_backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "SEQSEL_API_KEY".into(),
            max_in_flight: 4,
            max_attempts: 3,
            timeout_secs: 60,
            max_tokens: 64,
            retry_backoff_ms: 250,
        }
    }
}

/// How demonstrations and the query are laid out in the prompt. `{input}` and `{label}`
/// are substituted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub example: String,
    pub query: String,
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            example: "{input} → {label}".into(),
            query: "{input} →".into(),
            separator: "\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<String> {
        let mut lines = Vec::with_capacity(seq.len() + 1);
        for &id in seq.elements() {
            let e = pool.get(id)?;
            lines.push(self.example.replace("{input}", &e.input).replace("{label}", &e.label));
        }
        lines.push(self.query.replace("{input}", &query.input).replace("{label}", ""));
        Ok(lines.join(&self.separator))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteOracle {
    config: RemoteConfig,
    template: PromptTemplate,
    agent: ureq::Agent,
    token: Option<String>,
    slots: Slots,
}

impl RemoteOracle {
    pub fn new(config: RemoteConfig, template: PromptTemplate) -> Result<Self> {
        if config.max_in_flight == 0 || config.max_attempts == 0 {
            return Err(Error::Config("max_in_flight and max_attempts must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = std::env::var(&config.api_key_env).ok().filter(|t| !t.is_empty());
        let slots = Slots {
            free: Mutex::new(config.max_in_flight),
            cv: Condvar::new(),
        };
        Ok(Self {
            config,
            template,
            agent,
            token,
            slots,
        })
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<(String, Option<u64>), (bool, String)> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let retryable = status == 429 || status >= 500;
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((retryable, format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| (false, format!("malformed response: {e}")))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))?;
        let tokens = value["usage"]["total_tokens"].as_u64();
        Ok((content.to_string(), tokens))
    }
}

impl Oracle for RemoteOracle {
    fn evaluate(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<OracleVerdict> {
        let label = query.label.as_deref().ok_or_else(|| {
            Error::Config(format!("query {} has no label; exact match is undefined", query.id))
        })?;
        let prompt = self.template.render(query, seq, pool)?;
        let _slot = self.slots.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.request_once(&prompt) {
                Ok((generation, cost_hint)) => {
                    let quality = exact_match_metric(&generation, label);
                    return Ok(OracleVerdict {
                        generation,
                        quality,
                        cost_hint,
                    });
                }
                Err((retryable, message)) => {
                    if !retryable || attempts >= self.config.max_attempts {
                        return Err(Error::Transport { attempts, message });
                    }
                    std::thread::sleep(Duration::from_millis(
                        self.config.retry_backoff_ms * attempts as u64,
                    ));
                }
            }
        }
    }

    fn name(&self) -> String {
        format!("remote:{}", self.config.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Example, ExampleId};

    #[test]
    fn renders_examples_then_query() {
        let pool = CandidatePool::new(vec![
            Example {
                id: ExampleId(0),
                input: "2+2".into(),
                label: "4".into(),
                skills: vec![],
            },
            Example {
                id: ExampleId(1),
                input: "3+3".into(),
                label: "6".into(),
                skills: vec![],
            },
        ])
        .unwrap();
        let q = Query {
            id: ExampleId(5),
            input: "1+1".into(),
            label: Some("2".into()),
            skills: vec![],
        };
        let seq = ExampleSequence::from_ids(&[ExampleId(1), ExampleId(0)], 7).unwrap();
        let prompt = PromptTemplate::default().render(&q, &seq, &pool).unwrap();
        assert_eq!(prompt, "3+3 → 6\n2+2 → 4\n1+1 →");
    }
}
