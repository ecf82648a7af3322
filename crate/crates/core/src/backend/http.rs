//! OpenAI-compatible chat-completion backend.
//!
//! Wire format: a single user turn posted to `{endpoint}/chat/completions`
//! with `temperature`, `max_tokens` and a `logprobs` flag. No streaming, no
//! tool calling, no multi-turn conversations.

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, CompletionRequest, RawCompleter, RawCompletion, StageTag};

/// Backend configuration: endpoint URL, model name, optional credential.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Build a backend for `endpoint` (base URL, e.g. `http://host:port/v1`).
    ///
    /// The credential is taken from `api_key` if given, otherwise from the
    /// `IUQ_API_KEY` or `OPENAI_API_KEY` environment variables.
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        if endpoint.is_empty() {
            return Err(BackendError::Config("empty endpoint URL".into()));
        }
        let api_key = api_key
            .or_else(|| std::env::var("IUQ_API_KEY").ok())
            .or_else(|| std::env::var("OPENAI_API_KEY").ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint,
            model: model.into(),
            api_key,
            client,
        })
    }

    fn map_status(stage: StageTag, status: reqwest::StatusCode, body: String) -> BackendError {
        if status.as_u16() == 429 || status.is_server_error() {
            BackendError::Transport {
                stage,
                attempts: 1,
                message: format!("status {status}"),
            }
        } else {
            BackendError::Decode {
                stage,
                message: format!("status {status}: {}", body.chars().take(200).collect::<String>()),
            }
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl RawCompleter for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn model_name(&self) -> String {
        self.model.clone()
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
        }
        if let Some(seed) = req.seed_hint {
            body["seed"] = json!(seed);
        }

        let mut http = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| BackendError::Transport {
            stage: req.stage_tag,
            attempts: 1,
            message: e.to_string(),
        })?;

        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport {
            stage: req.stage_tag,
            attempts: 1,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(Self::map_status(req.stage_tag, status, text));
        }

        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| BackendError::Decode {
            stage: req.stage_tag,
            message: format!("{e}"),
        })?;
        let choice = wire.choices.into_iter().next().ok_or(BackendError::Decode {
            stage: req.stage_tag,
            message: "empty choices array".into(),
        })?;
        let token_logprobs = choice.logprobs.map(|lp| {
            lp.content
                .into_iter()
                .map(|t| (t.token, t.logprob))
                .collect::<Vec<_>>()
        });
        Ok(RawCompletion {
            text: choice.message.content,
            token_logprobs: token_logprobs.filter(|v| !v.is_empty()),
            usage: wire.usage.map(|u| (u.prompt_tokens, u.completion_tokens)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Client, ClientOptions};
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serve canned HTTP responses on a local port, one per connection.
    fn spawn_mock(replies: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for reply in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 65536];
                let mut request = Vec::new();
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    request.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&request);
                    if let Some(header_end) = text.find("\r\n\r\n") {
                        let content_length = text
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if request.len() >= header_end + 4 + content_length {
                            break;
                        }
                    }
                }
                seen.push(String::from_utf8_lossy(&request).to_string());
                stream.write_all(reply.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn http_reply(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    #[test]
    fn posts_single_turn_chat_completion_and_parses_reply() {
        let body = r#"{"choices":[{"message":{"content":"Paris."},"logprobs":{"content":[{"token":"Paris","logprob":-0.05},{"token":".","logprob":-0.01}]}}],"usage":{"prompt_tokens":9,"completion_tokens":2}}"#;
        let (endpoint, handle) = spawn_mock(vec![http_reply("200 OK", body)]);
        let backend = HttpBackend::new(endpoint, "test-model", Some("sk-test".into())).unwrap();
        let client = Client::new(Box::new(backend));
        let req = CompletionRequest::new(StageTag::AnswerGen, "What is the capital of France?")
            .temperature(1.0)
            .logprobs(true)
            .seed(7);
        let result = client.complete(&req).unwrap();
        assert_eq!(result.text, "Paris.");
        assert_eq!(result.prompt_tokens, 9);
        assert_eq!(result.completion_tokens, 2);
        assert_eq!(
            result.token_logprobs.as_deref(),
            Some(&[("Paris".to_string(), -0.05), (".".to_string(), -0.01)][..])
        );

        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 1);
        let request = &seen[0];
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.contains("authorization: Bearer sk-test") || request.contains("Authorization: Bearer sk-test"));
        let json_start = request.find("\r\n\r\n").unwrap() + 4;
        let payload: serde_json::Value = serde_json::from_str(&request[json_start..]).unwrap();
        assert_eq!(payload["model"], "test-model");
        assert_eq!(payload["messages"][0]["role"], "user");
        assert_eq!(payload["messages"][0]["content"], "What is the capital of France?");
        assert_eq!(payload["temperature"], 1.0);
        assert_eq!(payload["logprobs"], true);
        assert_eq!(payload["seed"], 7);
    }

    #[test]
    fn server_errors_are_retried_then_succeed() {
        let ok = r#"{"choices":[{"message":{"content":"fine"}}]}"#;
        let (endpoint, handle) = spawn_mock(vec![
            http_reply("503 Service Unavailable", "{}"),
            http_reply("200 OK", ok),
        ]);
        let backend = HttpBackend::new(endpoint, "m", None).unwrap();
        let client = Client::with_options(
            Box::new(backend),
            ClientOptions {
                max_retries: 2,
                backoff_base_ms: 0,
                max_in_flight: 1,
            },
        );
        let result = client
            .complete(&CompletionRequest::new(StageTag::EntailmentEval, "judge this"))
            .unwrap();
        assert_eq!(result.text, "fine");
        // Usage absent from the reply: whitespace fallback kicks in.
        assert!(result.approximate_usage);
        assert_eq!(client.ledger().stage(StageTag::EntailmentEval).requests, 1);
        handle.join().unwrap();
    }

    #[test]
    fn malformed_body_is_a_decode_error() {
        let (endpoint, handle) = spawn_mock(vec![http_reply("200 OK", "not json")]);
        let backend = HttpBackend::new(endpoint, "m", None).unwrap();
        let client = Client::new(Box::new(backend));
        let err = client
            .complete(&CompletionRequest::new(StageTag::EntailmentEval, "judge"))
            .unwrap_err();
        assert!(matches!(err, BackendError::Decode { .. }));
        handle.join().unwrap();
    }
}
