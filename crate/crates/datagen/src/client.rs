//! Teacher-model client: a chat-completion HTTP client with retry and an
//! offline content-addressed mock for hermetic runs.

use std::cell::Cell;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use base64::Engine;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Where answers come from: a live HTTP endpoint or a directory of canned
/// answers keyed by content hash. In mock mode no network activity occurs.
#[derive(Debug, Clone)]
pub enum ClientMode {
    Live,
    Mock(PathBuf),
}

/// Client for a chat-completion-style teacher API.
pub struct TeacherClient {
    endpoint: String,
    model: String,
    api_key_env: String,
    timeout: Duration,
    max_retries: u32,
    backoff: Duration,
    mode: ClientMode,
    last_retries: Cell<u32>,
}

/// Content-addressed mock key: hex(SHA-256(image bytes || 0x00 || question)).
pub fn mock_key(image: &[u8], question: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image);
    hasher.update([0u8]);
    hasher.update(question.as_bytes());
    hex::encode(hasher.finalize())
}

impl TeacherClient {
    /// Live client against `endpoint`; the API key is read from the
    /// environment variable named `api_key_env` at request time.
    pub fn live(endpoint: &str, model: &str, api_key_env: &str) -> Self {
        TeacherClient {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key_env: api_key_env.to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            mode: ClientMode::Live,
            last_retries: Cell::new(0),
        }
    }

    /// Offline client answering from files in `dir`, keyed by [`mock_key`].
    pub fn mock(dir: impl Into<PathBuf>) -> Self {
        TeacherClient {
            endpoint: String::new(),
            model: "mock".to_string(),
            api_key_env: String::new(),
            timeout: Duration::from_secs(60),
            max_retries: 0,
            backoff: Duration::ZERO,
            mode: ClientMode::Mock(dir.into()),
            last_retries: Cell::new(0),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    /// Base delay for exponential backoff (doubles per retry).
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn mode(&self) -> &ClientMode {
        &self.mode
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.mode, ClientMode::Mock(_))
    }

    /// Number of retries spent by the most recent `request_qa` call.
    pub fn last_retries(&self) -> u32 {
        self.last_retries.get()
    }

    /// Ask the teacher one question about one image and return the answer
    /// text. Retries only transport errors and 5xx responses, with
    /// exponential backoff.
    pub fn request_qa(&self, image: &[u8], question: &str) -> Result<String> {
        if question.trim().is_empty() {
            return Err(Error::EmptyQuestion);
        }
        self.last_retries.set(0);
        match &self.mode {
            ClientMode::Mock(dir) => {
                let key = mock_key(image, question);
                let path = dir.join(&key);
                match std::fs::read_to_string(&path) {
                    Ok(answer) => Ok(answer),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        Err(Error::MockMiss { key })
                    }
                    Err(e) => Err(e.into()),
                }
            }
            ClientMode::Live => self.request_live(image, question),
        }
    }

    fn request_live(&self, image: &[u8], question: &str) -> Result<String> {
        let api_key = std::env::var(&self.api_key_env)
            .map_err(|_| Error::MissingApiKey(self.api_key_env.clone()))?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    { "type": "text", "text": question },
                    { "type": "image_base64",
                      "data": base64::engine::general_purpose::STANDARD.encode(image) },
                ],
            }],
        });
        let http = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;

        let mut attempt = 0u32;
        loop {
            let outcome = http
                .post(&self.endpoint)
                .header("Authorization", format!("Bearer {api_key}"))
                .json(&body)
                .send();
            let retryable = match outcome {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        let value: serde_json::Value =
                            resp.json().map_err(|e| Error::BadResponse(e.to_string()))?;
                        return extract_answer(&value);
                    }
                    let err = Error::HttpStatus {
                        code: status,
                        body: resp.text().unwrap_or_default(),
                    };
                    if status >= 500 {
                        Some(err)
                    } else {
                        return Err(err);
                    }
                }
                Err(e) if e.is_timeout() => Some(Error::Timeout),
                Err(e) => Some(Error::Transport(e.to_string())),
            };
            let err = retryable.expect("non-retryable outcomes returned above");
            if attempt >= self.max_retries {
                return Err(err);
            }
            let delay = self.backoff * 2u32.saturating_pow(attempt);
            eprintln!(
                "teacher request failed ({err}); retry {} of {} after {delay:?}",
                attempt + 1,
                self.max_retries
            );
            thread::sleep(delay);
            attempt += 1;
            self.last_retries.set(attempt);
        }
    }
}

/// Pull the first text reply out of a chat-completion response. Accepts
/// `content` as a plain string or as a list of typed parts.
fn extract_answer(value: &serde_json::Value) -> Result<String> {
    let content = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .ok_or_else(|| Error::BadResponse("missing choices[0].message.content".into()))?;
    if let Some(s) = content.as_str() {
        return Ok(s.to_string());
    }
    if let Some(parts) = content.as_array() {
        for part in parts {
            if part.get("type").and_then(|t| t.as_str()) == Some("text") {
                if let Some(text) = part.get("text").and_then(|t| t.as_str()) {
                    return Ok(text.to_string());
                }
            }
        }
    }
    Err(Error::BadResponse("no text part in reply".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_key_is_content_addressed() {
        let k1 = mock_key(b"img", "q");
        let k2 = mock_key(b"img", "q");
        assert_eq!(k1, k2);
        assert_eq!(k1.len(), 64);
        assert_ne!(k1, mock_key(b"img2", "q"));
        assert_ne!(k1, mock_key(b"img", "q2"));
        // the separator byte keeps (image, question) framing unambiguous
        assert_ne!(mock_key(b"ab", "c"), mock_key(b"a", "bc"));
    }

    #[test]
    fn empty_question_rejected() {
        let client = TeacherClient::mock("/nonexistent");
        match client.request_qa(b"img", "  ") {
            Err(Error::EmptyQuestion) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn extract_answer_handles_both_content_shapes() {
        let plain = serde_json::json!({
            "choices": [{ "message": { "content": "hello" } }]
        });
        assert_eq!(extract_answer(&plain).unwrap(), "hello");
        let parts = serde_json::json!({
            "choices": [{ "message": { "content": [
                { "type": "image_base64", "data": "x" },
                { "type": "text", "text": "world" },
            ] } }]
        });
        assert_eq!(extract_answer(&parts).unwrap(), "world");
        assert!(extract_answer(&serde_json::json!({})).is_err());
    }
}
