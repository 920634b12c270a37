//! Judge backed by an OpenAI-compatible chat-completion endpoint.
//!
//! Requests go through a [`ChatTransport`] so the whole path can be exercised
//! offline against recorded fixtures.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::rewards::{
    normalize_emotion, normalize_yes_no, EmotionTaxonomy, EmotionVerdict, Judge, JudgeError,
    SceneRef, Verdict, COHERENCE_PROMPT, CONSISTENCY_PROMPT,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Send the scene caption as a text surrogate for the image.
    #[default]
    Caption,
    /// Send `image_url` as an image part (falls back to the caption if absent).
    ImageUrl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteJudgeConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub temperature: f64,
    pub image_mode: ImageMode,
    pub max_in_flight: usize,
    /// Linear backoff between attempts: `retry_backoff_ms * attempt`.
    pub retry_backoff_ms: u64,
}

impl Default for RemoteJudgeConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "judge".into(),
            api_key_env: "JUDGE_API_KEY".into(),
            timeout_ms: 30_000,
            max_retries: 2,
            temperature: 0.0,
            image_mode: ImageMode::Caption,
            max_in_flight: 4,
            retry_backoff_ms: 250,
        }
    }
}

impl RemoteJudgeConfig {
    pub fn validate(&self) -> Result<(), JudgeError> {
        let bad = |m: &str| Err(JudgeError::Config(m.to_string()));
        if self.base_url.trim().is_empty() {
            return bad("base_url must not be empty");
        }
        if self.model_name.trim().is_empty() {
            return bad("model_name must not be empty");
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be > 0");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be finite and >= 0");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be >= 1");
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Moves one JSON request to the endpoint. `Err` means no HTTP reply at all
/// (connection refused, timeout, ...).
pub trait ChatTransport: Send + Sync {
    fn post(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl ChatTransport for UreqTransport {
    fn post(&self, url: &str, api_key: Option<&str>, body: &Value) -> Result<HttpReply, String> {
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// One recorded exchange. `response.body` is stored as JSON for readability
/// and serialized back to text when served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub request: Value,
    pub response: FixtureResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureResponse {
    pub status: u16,
    pub body: Value,
}

/// Replays fixtures whose recorded request body equals the outgoing one.
/// Matching fixtures are consumed in file order; once all are used the last
/// match keeps being served. Every outgoing request is recorded.
#[derive(Debug, Default)]
pub struct FixtureTransport {
    fixtures: Vec<Fixture>,
    state: Mutex<FixtureState>,
}

#[derive(Debug, Default)]
struct FixtureState {
    used: Vec<bool>,
    requests: Vec<Value>,
}

impl FixtureTransport {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        let used = vec![false; fixtures.len()];
        Self {
            fixtures,
            state: Mutex::new(FixtureState {
                used,
                requests: Vec::new(),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self, JudgeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JudgeError::Config(format!("{}: {e}", path.display())))?;
        let fixtures: Vec<Fixture> = serde_json::from_str(&text)
            .map_err(|e| JudgeError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(fixtures))
    }

    pub fn requests(&self) -> Vec<Value> {
        self.state.lock().unwrap().requests.clone()
    }
}

impl ChatTransport for FixtureTransport {
    fn post(&self, _url: &str, _api_key: Option<&str>, body: &Value) -> Result<HttpReply, String> {
        let mut st = self.state.lock().unwrap();
        st.requests.push(body.clone());
        let matching: Vec<usize> = (0..self.fixtures.len())
            .filter(|&i| &self.fixtures[i].request == body)
            .collect();
        let pick = matching
            .iter()
            .copied()
            .find(|&i| !st.used[i])
            .or_else(|| matching.last().copied())
            .ok_or_else(|| "no fixture matches the request".to_string())?;
        st.used[pick] = true;
        let resp = &self.fixtures[pick].response;
        let body = match &resp.body {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        Ok(HttpReply {
            status: resp.status,
            body,
        })
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    count: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteJudge {
    config: RemoteJudgeConfig,
    api_key: Option<String>,
    transport: Box<dyn ChatTransport>,
    in_flight: InFlight,
}

impl RemoteJudge {
    /// Live judge over HTTP; reads the API key from `config.api_key_env`.
    pub fn new(config: RemoteJudgeConfig) -> Result<Self, JudgeError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!(
                "{} is not set; sending unauthenticated requests",
                config.api_key_env
            );
        }
        let transport = Box::new(UreqTransport::new(Duration::from_millis(config.timeout_ms)));
        Self::with_transport(config, api_key, transport)
    }

    pub fn with_transport(
        config: RemoteJudgeConfig,
        api_key: Option<String>,
        transport: Box<dyn ChatTransport>,
    ) -> Result<Self, JudgeError> {
        config.validate()?;
        let in_flight = InFlight {
            limit: config.max_in_flight,
            count: Mutex::new(0),
            cv: Condvar::new(),
        };
        Ok(Self {
            config,
            api_key,
            transport,
            in_flight,
        })
    }

    pub fn config(&self) -> &RemoteJudgeConfig {
        &self.config
    }

    /// Sends `body` up to `1 + max_retries` times. `accept` turns the reply
    /// text into a value, or `None` to retry.
    fn exchange<T>(
        &self,
        body: &Value,
        accept: impl Fn(&str) -> Option<T>,
    ) -> Result<T, JudgeError> {
        let attempts = 1 + self.config.max_retries as usize;
        let url = self.config.endpoint();
        let mut last = String::new();
        let mut unparseable = None;
        for attempt in 1..=attempts {
            if attempt > 1 && self.config.retry_backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.retry_backoff_ms * (attempt as u64 - 1),
                ));
            }
            let reply = {
                let _permit = self.in_flight.acquire();
                self.transport.post(&url, self.api_key.as_deref(), body)
            };
            match reply {
                Err(e) => last = format!("transport error: {e}"),
                Ok(r) if r.status == 429 || r.status >= 500 => last = format!("HTTP {}", r.status),
                Ok(r) if !(200..300).contains(&r.status) => {
                    return Err(JudgeError::Unavailable {
                        attempts: attempt,
                        reason: format!("HTTP {}: {}", r.status, r.body),
                    });
                }
                Ok(r) => match reply_content(&r.body) {
                    None => last = "response has no message content".into(),
                    Some(text) => match accept(&text) {
                        Some(v) => return Ok(v),
                        None => {
                            last = format!("unparseable reply {text:?}");
                            unparseable = Some(text);
                        }
                    },
                },
            }
            log::warn!("judge attempt {attempt}/{attempts} failed: {last}");
        }
        Err(match unparseable {
            Some(text) if last.starts_with("unparseable") => JudgeError::Unparseable(text),
            _ => JudgeError::Unavailable {
                attempts,
                reason: last,
            },
        })
    }
}

fn reply_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?
        .as_str()
        .map(str::to_string)
}

fn image_part(config: &RemoteJudgeConfig, scene: &SceneRef) -> Result<Value, JudgeError> {
    if config.image_mode == ImageMode::ImageUrl {
        if let Some(url) = &scene.image_url {
            return Ok(json!({"type": "image_url", "image_url": {"url": url}}));
        }
    }
    match &scene.caption {
        Some(c) => Ok(json!({"type": "text", "text": format!("Image: {c}")})),
        None => Err(JudgeError::Config(format!(
            "scene {:?} has neither a caption nor a usable image url",
            scene.id
        ))),
    }
}

/// Request for the consistency question: image part, then step 1 followed by
/// the prompt.
pub fn yes_no_request(
    config: &RemoteJudgeConfig,
    scene: &SceneRef,
    step1: &str,
) -> Result<Value, JudgeError> {
    let image = image_part(config, scene)?;
    Ok(json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [{
            "role": "user",
            "content": [
                image,
                {"type": "text", "text": format!("{step1}\n{CONSISTENCY_PROMPT} Answer Yes or No.")},
            ],
        }],
    }))
}

/// Request for the coherence question: steps 1–2, the prompt, and the
/// taxonomy as a numbered option list.
pub fn emotion_request(
    config: &RemoteJudgeConfig,
    steps12: &str,
    taxonomy: &EmotionTaxonomy,
) -> Value {
    let options: String = taxonomy
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("\n{}. {l}", i + 1))
        .collect();
    json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [{
            "role": "user",
            "content": format!("{steps12}\n{COHERENCE_PROMPT}\nOptions:{options}\nAnswer with one option."),
        }],
    })
}

pub fn remote_yes_no(
    judge: &RemoteJudge,
    scene: &SceneRef,
    step1: &str,
) -> Result<Verdict, JudgeError> {
    let body = yes_no_request(&judge.config, scene, step1)?;
    judge.exchange(&body, normalize_yes_no)
}

/// Unmappable replies come back as [`EmotionVerdict::Unmatched`], not errors.
pub fn remote_emotion(
    judge: &RemoteJudge,
    steps12: &str,
    taxonomy: &EmotionTaxonomy,
) -> Result<EmotionVerdict, JudgeError> {
    let body = emotion_request(&judge.config, steps12, taxonomy);
    judge.exchange(&body, |text| Some(normalize_emotion(text, taxonomy)))
}

impl Judge for RemoteJudge {
    fn judge_yes_no(
        &self,
        scene: &SceneRef,
        text: &str,
        prompt: &str,
    ) -> Result<Verdict, JudgeError> {
        if prompt != CONSISTENCY_PROMPT {
            return Err(JudgeError::WrongPrompt(prompt.to_string()));
        }
        remote_yes_no(self, scene, text)
    }

    fn judge_emotion(
        &self,
        text: &str,
        prompt: &str,
        taxonomy: &EmotionTaxonomy,
    ) -> Result<EmotionVerdict, JudgeError> {
        if prompt != COHERENCE_PROMPT {
            return Err(JudgeError::WrongPrompt(prompt.to_string()));
        }
        remote_emotion(self, text, taxonomy)
    }
}
