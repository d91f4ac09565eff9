//! Chat-completion adapter for a remote multimodal model.

use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use vapdiff_core::vaps::{MllmClient, MllmRequest, Part};

use crate::config::MllmConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpMllmClient {
    agent: ureq::Agent,
    pub endpoint: String,
    pub model: String,
    token: Option<String>,
    pub attempts: u32,
    pub backoff: Duration,
}

enum Failure {
    Retry(String),
    Fatal(vapdiff_core::Error),
}

impl HttpMllmClient {
    pub fn new(endpoint: &str, model: &str, token: Option<String>, attempts: u32, backoff: Duration, timeout: Duration) -> Self {
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        Self { agent, endpoint: endpoint.into(), model: model.into(), token, attempts: attempts.max(1), backoff }
    }

    /// Reads the bearer token from the configured environment variable.
    pub fn from_config(cfg: &MllmConfig) -> Result<Self> {
        let endpoint = cfg.endpoint.as_deref().ok_or_else(|| Error::config("mllm.endpoint is required for the http provider"))?;
        let model = cfg.model.as_deref().ok_or_else(|| Error::config("mllm.model is required for the http provider"))?;
        let token = std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!("{} is not set; calling {endpoint} without credentials", cfg.token_env);
        }
        Ok(Self::new(
            endpoint,
            model,
            token,
            cfg.attempts,
            Duration::from_millis(cfg.backoff_ms),
            Duration::from_secs(cfg.timeout_s),
        ))
    }

    pub fn request_body(&self, request: &MllmRequest) -> Value {
        let content: Vec<Value> = request
            .parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => json!({ "type": "text", "text": t }),
                Part::Image(img) => {
                    let data = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
                    json!({ "type": "image_url", "image_url": { "url": format!("data:{};base64,{data}", img.media_type) } })
                }
            })
            .collect();
        json!({ "model": self.model, "messages": [{ "role": "user", "content": content }] })
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, Failure> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Failure::Retry(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(Failure::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Failure::Fatal(vapdiff_core::Error::Transport(format!("HTTP {status}: {}", text.trim()))));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(vapdiff_core::Error::Protocol(format!("response is not JSON: {e}"))))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Failure::Fatal(vapdiff_core::Error::Protocol("response has no choices[0].message.content".into())))
    }
}

impl MllmClient for HttpMllmClient {
    fn complete(&self, request: &MllmRequest) -> vapdiff_core::Result<String> {
        let body = self.request_body(request).to_string();
        let mut last = String::new();
        for k in 0..self.attempts {
            if k > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(k - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(reason)) => {
                    log::warn!("{} attempt {} of {} failed: {reason}", self.endpoint, k + 1, self.attempts);
                    last = reason;
                }
            }
        }
        Err(vapdiff_core::Error::Transport(format!("{} failed after {} attempts: {last}", self.endpoint, self.attempts)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use vapdiff_core::vaps::{ImageAttachment, Turn};

    /// Serves one canned response per connection and returns the raw requests.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push(format!("{head}{}", String::from_utf8(buf).unwrap()));
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn request() -> MllmRequest {
        MllmRequest {
            turn: Turn::Impression,
            parts: vec![
                Part::Image(ImageAttachment { id: "a".into(), media_type: "image/png".into(), bytes: vec![1, 2, 3] }),
                Part::Text("describe".into()),
            ],
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"a round lesion"}}]}"#.to_string();
        let (url, handle) = serve(vec![(503, "{}".into()), (200, ok)]);
        let c = HttpMllmClient::new(&url, "m", Some("secret".into()), 3, Duration::from_millis(5), Duration::from_secs(5));
        assert_eq!(c.complete(&request()).unwrap(), "a round lesion");
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].to_ascii_lowercase().contains("authorization: bearer secret"));
        assert!(seen[1].contains("data:image/png;base64,AQID"));
        assert!(seen[1].contains("\"describe\""));
    }

    #[test]
    fn exhausted_retries_are_transport_errors() {
        let (url, handle) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
        let c = HttpMllmClient::new(&url, "m", None, 2, Duration::from_millis(1), Duration::from_secs(5));
        assert!(matches!(c.complete(&request()), Err(vapdiff_core::Error::Transport(_))));
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn malformed_reply_is_protocol_error() {
        let (url, handle) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
        let c = HttpMllmClient::new(&url, "m", None, 3, Duration::from_millis(1), Duration::from_secs(5));
        assert!(matches!(c.complete(&request()), Err(vapdiff_core::Error::Protocol(_))));
        handle.join().unwrap();
    }
}
