use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, Completion, PromptRequest};
use crate::error::{Error, Result};

pub const ENV_API_URL: &str = "FASTRAG_API_URL";
pub const ENV_API_KEY: &str = "FASTRAG_API_KEY";
pub const ENV_MODEL: &str = "FASTRAG_MODEL";

/// Chat-completions client (OpenAI-compatible wire format).
#[derive(Debug)]
pub struct LiveBackend {
    url: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(LiveBackend {
            url: url.into(),
            api_key,
            model: model.into(),
            client,
        })
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_API_URL)
            .map_err(|_| Error::Config(format!("{ENV_API_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL)
            .map_err(|_| Error::Config(format!("{ENV_MODEL} is not set")))?;
        Self::new(url, std::env::var(ENV_API_KEY).ok(), model)
    }

    fn body(&self, request: &PromptRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": 0,
        })
    }
}

impl Backend for LiveBackend {
    fn complete(&self, request: &PromptRequest) -> Result<Completion> {
        let started = Instant::now();
        let mut req = self.client.post(&self.url).json(&self.body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| Error::Transport(format!("unreadable response ({status}): {e}")))?;
        if !status.is_success() {
            return Err(Error::Transport(format!("HTTP {status}: {body}")));
        }
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Transport(format!("no message content in response: {body}")))?;
        Ok(Completion {
            text: text.to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Gateway, Stage};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response and returns the request body it saw.
    fn serve_once(status: &str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let status = status.to_string();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            format!("{auth}\n{}", String::from_utf8(buf).unwrap())
        });
        (url, handle)
    }

    #[test]
    fn posts_chat_completion_and_reads_content() {
        let (url, handle) = serve_once(
            "200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#,
        );
        let g = Gateway::new(LiveBackend::new(url, Some("k".into()), "m").unwrap());
        let r = g
            .complete(&PromptRequest::new(Stage::Synthesize, "sys", "question"))
            .unwrap();
        assert_eq!(r.text, "hello");
        let seen = handle.join().unwrap();
        assert!(seen.contains("Bearer k"));
        assert!(seen.contains("\"question\""));
        assert!(seen.contains("\"model\":\"m\""));
    }

    #[test]
    fn http_error_is_retryable_transport_error() {
        let (url, handle) = serve_once("500 Internal Server Error", r#"{"error":"boom"}"#);
        let b = LiveBackend::new(url, None, "m").unwrap();
        let err = b
            .complete(&PromptRequest::new(Stage::Synthesize, "", ""))
            .unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
        handle.join().unwrap();
    }
}
