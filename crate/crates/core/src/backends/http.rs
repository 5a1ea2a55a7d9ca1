//! Blocking HTTP clients for the model wire protocols.
//!
//! The chat client speaks the OpenAI-compatible chat-completions API. Grounding,
//! tracking and embedding use the small JSON protocols documented in
//! `schemas/` at the repository root.

use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::geometry::{BBox, Image};

use super::{
    BackendError, ChatRequest, Embedder, FeatureVector, Grounder, GroundingResult, Mllm, SessionHandle,
    TrackerPrediction, VisualTracker,
};

/// Attempts and exponential backoff for transport failures and timeouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.attempts => {
                    log::warn!("attempt {attempt}/{} failed: {e}; retrying in {delay:?}", self.attempts);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone)]
struct JsonClient {
    base_url: String,
    client: Client,
    retry: RetryPolicy,
    bearer: Option<String>,
}

impl JsonClient {
    fn new(base_url: &str, timeout: Duration, retry: RetryPolicy) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(JsonClient { base_url: base_url.trim_end_matches('/').to_string(), client, retry, bearer: None })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: &Value) -> Result<T, BackendError> {
        self.retry.run(|| {
            let mut req = self.client.post(self.url(path)).json(body);
            if let Some(key) = &self.bearer {
                req = req.bearer_auth(key);
            }
            decode(req.send().map_err(transport)?)
        })
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, BackendError> {
        self.retry.run(|| decode(self.client.get(self.url(path)).send().map_err(transport)?))
    }
}

fn transport(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, BackendError> {
    let status = resp.status();
    let text = resp.text().map_err(transport)?;
    if status.is_server_error() {
        return Err(BackendError::Transport(format!("HTTP {}: {}", status.as_u16(), snippet(&text))));
    }
    if !status.is_success() {
        return Err(BackendError::Rejected { status: Some(status.as_u16()), message: snippet(&text) });
    }
    serde_json::from_str(&text).map_err(|e| BackendError::ProtocolViolation(format!("malformed response body: {e}")))
}

fn snippet(s: &str) -> String {
    s.chars().take(300).collect()
}

fn b64(img: &Image) -> Result<String, BackendError> {
    img.to_png_base64().map_err(|e| BackendError::Rejected { status: None, message: e.to_string() })
}

/// Connection settings shared by the JSON-protocol backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

impl HttpEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpEndpoint { base_url: base_url.into(), timeout_secs: default_timeout_secs() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpMllmConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; the key itself is never stored.
    #[serde(default = "default_key_env")]
    pub api_key_env: Option<String>,
    /// Longest image side sent to the model; larger frames are downscaled to fit.
    #[serde(default = "default_max_side")]
    pub max_image_side: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_key_env() -> Option<String> {
    Some("OPENAI_API_KEY".into())
}

fn default_max_side() -> u32 {
    2048
}

/// OpenAI-compatible `/v1/chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpMllm {
    http: JsonClient,
    model: String,
    max_image_side: u32,
}

impl HttpMllm {
    pub fn new(cfg: &HttpMllmConfig, retry: RetryPolicy) -> Result<Self, BackendError> {
        let mut http = JsonClient::new(&cfg.base_url, Duration::from_secs(cfg.timeout_secs), retry)?;
        if let Some(var) = &cfg.api_key_env {
            http.bearer = std::env::var(var).ok().filter(|k| !k.is_empty());
        }
        Ok(HttpMllm { http, model: cfg.model.clone(), max_image_side: cfg.max_image_side })
    }

    /// Request body for `req`, after fitting the image to the size limit.
    pub fn request_body(&self, req: &ChatRequest) -> Result<Value, BackendError> {
        let mut content = vec![json!({ "type": "text", "text": req.prompt })];
        if let Some(img) = &req.image {
            let url = format!("data:image/png;base64,{}", b64(&img.fit_within(self.max_image_side))?);
            content.push(json!({ "type": "image_url", "image_url": { "url": url } }));
        }
        Ok(json!({
            "model": self.model,
            "temperature": req.temperature,
            "messages": [{ "role": "user", "content": content }],
        }))
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

impl Mllm for HttpMllm {
    fn complete(&mut self, req: &ChatRequest) -> Result<String, BackendError> {
        let body = self.request_body(req)?;
        let reply: Completion = self.http.post("/v1/chat/completions", &body)?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::ProtocolViolation("no choices[0].message.content in reply".into()))
    }
}

#[derive(Deserialize)]
struct GroundReply {
    tokens: Vec<String>,
    boxes: Vec<[f64; 4]>,
    scores: Vec<Vec<f64>>,
}

/// Client for `POST /ground`.
#[derive(Debug, Clone)]
pub struct HttpGrounder {
    http: JsonClient,
}

impl HttpGrounder {
    pub fn new(ep: &HttpEndpoint, retry: RetryPolicy) -> Result<Self, BackendError> {
        Ok(HttpGrounder { http: JsonClient::new(&ep.base_url, Duration::from_secs(ep.timeout_secs), retry)? })
    }
}

impl Grounder for HttpGrounder {
    fn ground(&mut self, img: &Image, caption: &str) -> Result<GroundingResult, BackendError> {
        if caption.trim().is_empty() {
            return Err(BackendError::Rejected { status: None, message: "empty caption".into() });
        }
        let reply: GroundReply = self.http.post("/ground", &json!({ "image_b64": b64(img)?, "caption": caption }))?;
        let proposals = reply
            .boxes
            .iter()
            .map(|&[x0, y0, x1, y1]| {
                BBox::from_corners(x0, y0, x1, y1).map_err(|e| BackendError::ProtocolViolation(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        GroundingResult::new(reply.tokens, proposals, reply.scores)
    }
}

#[derive(Deserialize)]
struct InitReply {
    session: String,
}

/// Client for `POST /init` and `POST /predict`.
#[derive(Debug, Clone)]
pub struct HttpTracker {
    http: JsonClient,
}

impl HttpTracker {
    pub fn new(ep: &HttpEndpoint, retry: RetryPolicy) -> Result<Self, BackendError> {
        Ok(HttpTracker { http: JsonClient::new(&ep.base_url, Duration::from_secs(ep.timeout_secs), retry)? })
    }
}

impl VisualTracker for HttpTracker {
    fn init(&mut self, frame: &Image, bbox: BBox) -> Result<SessionHandle, BackendError> {
        let reply: InitReply = self.http.post("/init", &json!({ "image_b64": b64(frame)?, "box": bbox }))?;
        Ok(SessionHandle(reply.session))
    }

    fn predict(&mut self, session: &SessionHandle, frame: &Image) -> Result<TrackerPrediction, BackendError> {
        let body = json!({ "session": session, "image_b64": b64(frame)? });
        let reply: Value = match self.http.post("/predict", &body) {
            Err(BackendError::Rejected { status: Some(s), .. })
                if s == StatusCode::NOT_FOUND.as_u16() || s == StatusCode::GONE.as_u16() =>
            {
                return Err(BackendError::SessionLost)
            }
            other => other?,
        };
        let pred: TrackerPrediction = serde_json::from_value(reply)
            .map_err(|e| BackendError::ProtocolViolation(format!("predict reply: {e}")))?;
        if !(0.0..=1.0).contains(&pred.score) {
            return Err(BackendError::ProtocolViolation(format!("tracker score {} outside [0, 1]", pred.score)));
        }
        Ok(pred)
    }
}

#[derive(Deserialize)]
struct InfoReply {
    dim: usize,
}

#[derive(Deserialize)]
struct VectorReply {
    vector: Vec<f64>,
}

/// Client for `GET /info`, `POST /embed_image` and `POST /embed_text`.
///
/// The `/info` handshake runs before the first embedding call and fixes the
/// dimension every later vector must have.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    http: JsonClient,
    dim: Option<usize>,
}

impl HttpEmbedder {
    pub fn new(ep: &HttpEndpoint, retry: RetryPolicy) -> Result<Self, BackendError> {
        Ok(HttpEmbedder {
            http: JsonClient::new(&ep.base_url, Duration::from_secs(ep.timeout_secs), retry)?,
            dim: None,
        })
    }

    pub fn dim(&mut self) -> Result<usize, BackendError> {
        if let Some(d) = self.dim {
            return Ok(d);
        }
        let info: InfoReply = self.http.get("/info")?;
        if info.dim == 0 {
            return Err(BackendError::ProtocolViolation("/info declared dim 0".into()));
        }
        self.dim = Some(info.dim);
        Ok(info.dim)
    }

    fn embed(&mut self, path: &str, body: Value) -> Result<FeatureVector, BackendError> {
        let dim = self.dim()?;
        let reply: VectorReply = self.http.post(path, &body)?;
        FeatureVector(reply.vector).check(Some(dim))
    }
}

impl Embedder for HttpEmbedder {
    fn embed_image(&mut self, img: &Image) -> Result<FeatureVector, BackendError> {
        let body = json!({ "image_b64": b64(img)? });
        self.embed("/embed_image", body)
    }

    fn embed_text(&mut self, text: &str) -> Result<FeatureVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Rejected { status: None, message: "empty text".into() });
        }
        self.embed("/embed_text", json!({ "text": text }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_stops_after_attempts() {
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        let n = Cell::new(0);
        let r: Result<(), _> = policy.run(|| {
            n.set(n.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(n.get(), 3);
    }

    #[test]
    fn rejected_is_not_retried() {
        let policy = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(1) };
        let n = Cell::new(0);
        let _: Result<(), _> = policy.run(|| {
            n.set(n.get() + 1);
            Err(BackendError::Rejected { status: Some(400), message: "bad".into() })
        });
        assert_eq!(n.get(), 1);
    }

    #[test]
    fn chat_body_shape() {
        let cfg = HttpMllmConfig {
            base_url: "http://localhost:1".into(),
            model: "m".into(),
            api_key_env: None,
            max_image_side: 8,
            timeout_secs: 1,
        };
        let m = HttpMllm::new(&cfg, RetryPolicy::default()).unwrap();
        let req = ChatRequest::new(Some(Image::filled(16, 4, [1, 1, 1])), "hi", 0.0).unwrap();
        let body = m.request_body(&req).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["text"], "hi");
        let url = body["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap();
        let sent = Image::from_base64(url.strip_prefix("data:image/png;base64,").unwrap()).unwrap();
        assert_eq!((sent.width(), sent.height()), (8, 2));
    }
}
