//! HTTP backends: OpenAI-compatible chat completions with image content
//! parts, and a minimal `POST /embed` endpoint returning `{"embedding": [..]}`.

use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, DimensionGuard, EmbedBackend, EmbeddingVector, GatewayError, ImagePayload,
    RetryPolicy, Slots, DEFAULT_IMAGE_LIMIT, DEFAULT_PARALLELISM,
};

pub const ENV_CHAT_URL: &str = "VERA_CHAT_URL";
pub const ENV_CHAT_KEY: &str = "VERA_CHAT_KEY";
pub const ENV_EMBED_URL: &str = "VERA_EMBED_URL";

#[derive(Debug, Clone)]
pub struct HttpChatConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub image_limit: usize,
    pub parallelism: usize,
}

impl HttpChatConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            image_limit: DEFAULT_IMAGE_LIMIT,
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpEmbedConfig {
    /// Base URL; requests go to `{base_url}/embed`.
    pub base_url: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub parallelism: usize,
}

impl HttpEmbedConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout: Duration::from_secs(30),
            retry: RetryPolicy::default(),
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fail(GatewayError),
}

/// POSTs `body` with retries on transport errors, 429 and 5xx.
fn post_json(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    retry: &RetryPolicy,
    images: usize,
    image_limit: usize,
) -> Result<Value, GatewayError> {
    let attempts = retry.attempts.max(1);
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        if attempt > 1 {
            thread::sleep(retry.delay(attempt - 1));
        }
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let outcome = match req.send_json(body) {
            Err(e) => Attempt::Retry(e.to_string()),
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                match status {
                    200..=299 => match serde_json::from_str(&text) {
                        Ok(v) => Attempt::Done(v),
                        Err(e) => Attempt::Fail(GatewayError::BadResponse(format!("invalid JSON: {e}"))),
                    },
                    413 => Attempt::Fail(GatewayError::PayloadTooLarge {
                        images,
                        limit: image_limit,
                    }),
                    429 | 500..=599 => Attempt::Retry(format!("HTTP {status}: {}", snippet(&text))),
                    _ => Attempt::Fail(GatewayError::BadResponse(format!("HTTP {status}: {}", snippet(&text)))),
                }
            }
        };
        match outcome {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(msg) => {
                log::warn!("{url}: attempt {attempt}/{attempts} failed: {msg}");
                last_error = msg;
            }
        }
    }
    Err(GatewayError::BackendUnavailable { attempts, last_error })
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}

pub struct HttpChatBackend {
    config: HttpChatConfig,
    agent: ureq::Agent,
    slots: Slots,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Self {
        Self {
            agent: agent(config.timeout),
            slots: Slots::new(config.parallelism),
            config,
        }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        chat_body(&self.config.model, request)
    }
}

/// OpenAI-compatible request body: one user message with a text part
/// followed by one `image_url` part per image.
pub fn chat_body(model: &str, request: &ChatRequest) -> Value {
    let mut content = vec![json!({ "type": "text", "text": request.prompt })];
    content.extend(request.images.iter().map(|img: &ImagePayload| {
        json!({ "type": "image_url", "image_url": { "url": img.data_uri() } })
    }));
    json!({
        "model": model,
        "messages": [{ "role": "user", "content": content }],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

/// Reply text from a chat-completions response.
pub fn reply_text(response: &Value) -> Result<String, GatewayError> {
    let content = &response["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let text: Vec<&str> = parts.iter().filter_map(|p| p["text"].as_str()).collect();
            if text.is_empty() {
                Err(GatewayError::BadResponse("no text content in reply".into()))
            } else {
                Ok(text.join(""))
            }
        }
        _ => Err(GatewayError::BadResponse("missing choices[0].message.content".into())),
    }
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        if request.images.len() > self.config.image_limit {
            return Err(GatewayError::PayloadTooLarge {
                images: request.images.len(),
                limit: self.config.image_limit,
            });
        }
        let body = self.request_body(request);
        let _slot = self.slots.acquire();
        let response = post_json(
            &self.agent,
            &endpoint(&self.config.base_url, "chat/completions"),
            self.config.api_key.as_deref(),
            &body,
            &self.config.retry,
            request.images.len(),
            self.config.image_limit,
        )?;
        reply_text(&response)
    }

    fn image_limit(&self) -> usize {
        self.config.image_limit
    }
}

pub struct HttpEmbedBackend {
    config: HttpEmbedConfig,
    agent: ureq::Agent,
    slots: Slots,
    dims: DimensionGuard,
}

impl HttpEmbedBackend {
    pub fn new(config: HttpEmbedConfig) -> Self {
        Self {
            agent: agent(config.timeout),
            slots: Slots::new(config.parallelism),
            dims: DimensionGuard::default(),
            config,
        }
    }
}

impl EmbedBackend for HttpEmbedBackend {
    fn embed(&self, frames: &[ImagePayload]) -> Result<EmbeddingVector, GatewayError> {
        if frames.is_empty() {
            return Err(GatewayError::BadRequest("embedding needs at least one frame".into()));
        }
        let body = Value::Array(frames.iter().map(|f| Value::String(f.base64())).collect());
        let _slot = self.slots.acquire();
        let response = post_json(
            &self.agent,
            &endpoint(&self.config.base_url, "embed"),
            None,
            &body,
            &self.config.retry,
            frames.len(),
            usize::MAX,
        )?;
        let values: Vec<f64> = response["embedding"]
            .as_array()
            .ok_or_else(|| GatewayError::BadResponse("missing `embedding` array".into()))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| GatewayError::BadResponse("non-numeric embedding entry".into()))
            })
            .collect::<Result<_, _>>()?;
        self.dims.check(values.len())?;
        EmbeddingVector::normalized(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves one canned response per connection and reports each request body.
    fn mock_server(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((request_line.trim().to_string(), String::from_utf8(buf).unwrap())).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), rx)
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(5),
        }
    }

    fn request(images: usize) -> ChatRequest {
        ChatRequest {
            prompt: "Is it anomalous?".into(),
            images: (0..images).map(|i| ImagePayload::new(vec![i as u8], "image/jpeg")).collect(),
            temperature: 0.0,
            max_tokens: 64,
        }
    }

    #[test]
    fn chat_wire_format() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"Answer: 1"}}]}"#;
        let (url, rx) = mock_server(vec![(200, reply.into())]);
        let mut cfg = HttpChatConfig::new(format!("{url}/v1"), "internvl2-8b");
        cfg.api_key = Some("k".into());
        cfg.retry = fast_retry();
        let backend = HttpChatBackend::new(cfg);
        assert_eq!(backend.chat(&request(2)).unwrap(), "Answer: 1");
        let (line, body) = rx.recv().unwrap();
        assert!(line.starts_with("POST /v1/chat/completions"), "{line}");
        let v: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["model"], "internvl2-8b");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["max_tokens"], 64);
        let parts = v["messages"][0]["content"].as_array().unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0]["type"], "text");
        assert_eq!(parts[1]["image_url"]["url"], "data:image/jpeg;base64,AA==");
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":[{"type":"text","text":"Answer: 0"}]}}]}"#;
        let (url, rx) = mock_server(vec![(503, "{}".into()), (200, ok.into())]);
        let mut cfg = HttpChatConfig::new(url, "m");
        cfg.retry = fast_retry();
        assert_eq!(HttpChatBackend::new(cfg).chat(&request(0)).unwrap(), "Answer: 0");
        assert_eq!(rx.try_iter().count(), 2);
    }

    #[test]
    fn unreachable_endpoint_exhausts_retries() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = HttpChatConfig::new(format!("http://127.0.0.1:{port}"), "m");
        cfg.retry = fast_retry();
        match HttpChatBackend::new(cfg).chat(&request(0)) {
            Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected BackendUnavailable, got {other:?}"),
        }
    }

    #[test]
    fn oversized_payload_rejected_before_sending() {
        let mut cfg = HttpChatConfig::new("http://127.0.0.1:9", "m");
        cfg.image_limit = 4;
        assert!(matches!(
            HttpChatBackend::new(cfg).chat(&request(5)),
            Err(GatewayError::PayloadTooLarge { images: 5, limit: 4 })
        ));
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, rx) = mock_server(vec![(400, r#"{"error":"bad"}"#.into())]);
        let mut cfg = HttpChatConfig::new(url, "m");
        cfg.retry = fast_retry();
        assert!(matches!(HttpChatBackend::new(cfg).chat(&request(0)), Err(GatewayError::BadResponse(_))));
        assert_eq!(rx.try_iter().count(), 1);
    }

    #[test]
    fn embed_wire_format_and_normalization() {
        let (url, rx) = mock_server(vec![
            (200, r#"{"embedding":[3.0,4.0]}"#.into()),
            (200, r#"{"embedding":[1.0,0.0,0.0]}"#.into()),
        ]);
        let mut cfg = HttpEmbedConfig::new(url);
        cfg.retry = fast_retry();
        let backend = HttpEmbedBackend::new(cfg);
        let frames = [ImagePayload::new(b"ab".to_vec(), "image/png")];
        let v = backend.embed(&frames).unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-12 && (v.values()[1] - 0.8).abs() < 1e-12);
        let (line, body) = rx.recv().unwrap();
        assert!(line.starts_with("POST /embed"));
        let sent: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(sent, serde_json::json!(["YWI="]));
        assert!(matches!(
            backend.embed(&frames),
            Err(GatewayError::BackendInconsistent { expected: 2, got: 3 })
        ));
    }
}
