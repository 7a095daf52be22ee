//! Blocking JSON-over-HTTP with bounded retries, shared by the remote
//! embedder, re-ranker and chat backend.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("request to {url} failed after {attempts} attempts: {last}")]
    Exhausted {
        url: String,
        attempts: u32,
        last: String,
    },
    #[error("request to {url} rejected with status {status}: {body}")]
    Rejected { url: String, status: u16, body: String },
    #[error("unexpected response from {url}: {reason}")]
    BadResponse { url: String, reason: String },
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles on every further attempt.
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

/// Read a bearer token from the environment. An empty variable name means
/// the endpoint needs no credential.
pub fn credential_from_env(var: &str) -> Result<Option<String>, HttpError> {
    if var.is_empty() {
        return Ok(None);
    }
    std::env::var(var)
        .map(Some)
        .map_err(|_| HttpError::MissingCredential(var.to_string()))
}

/// Bearer token from an inline value (already interpolated from the
/// environment by the config loader) or else from the named variable.
pub fn resolve_credential(inline: Option<&str>, var: &str) -> Result<Option<String>, HttpError> {
    match inline {
        Some(key) => Ok(Some(key.to_string())),
        None => credential_from_env(var),
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    policy: RetryPolicy,
    bearer: Option<String>,
}

impl JsonClient {
    pub fn new(policy: RetryPolicy, bearer: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(policy.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            agent,
            policy,
            bearer,
        }
    }

    /// POST `body` and decode the JSON reply. Transport errors, 429 and 5xx
    /// are retried with exponential backoff; other statuses fail at once.
    pub fn post<B: Serialize, T: DeserializeOwned>(&self, url: &str, body: &B) -> Result<T, HttpError> {
        let attempts = self.policy.max_attempts.max(1);
        let mut backoff = Duration::from_millis(self.policy.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(token) = &self.bearer {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            let mut resp = match req.send_json(body) {
                Ok(resp) => resp,
                Err(e) => {
                    log::warn!("{url}: attempt {attempt} failed: {e}");
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if status == 429 || status >= 500 {
                last = format!("status {status}");
                log::warn!("{url}: attempt {attempt} got {last}");
                continue;
            }
            if !(200..300).contains(&status) {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(HttpError::Rejected {
                    url: url.to_string(),
                    status,
                    body,
                });
            }
            return resp.body_mut().read_json::<T>().map_err(|e| HttpError::BadResponse {
                url: url.to_string(),
                reason: e.to_string(),
            });
        }
        Err(HttpError::Exhausted {
            url: url.to_string(),
            attempts,
            last,
        })
    }
}

/// Minimal scripted HTTP server for exercising the remote clients in tests.
#[cfg(test)]
pub(crate) mod testing {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    #[derive(Debug, Clone)]
    pub struct Captured {
        pub path: String,
        pub authorization: Option<String>,
        pub body: serde_json::Value,
    }

    pub struct StubServer {
        pub url: String,
        pub requests: Arc<Mutex<Vec<Captured>>>,
        handle: Option<JoinHandle<()>>,
    }

    impl StubServer {
        /// Serve one scripted `(status, body)` per incoming request, then stop.
        /// `respond` may inspect the parsed request body.
        pub fn start<F>(count: usize, respond: F) -> StubServer
        where
            F: Fn(usize, &serde_json::Value) -> (u16, String) + Send + 'static,
        {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let url = format!("http://{}", listener.local_addr().unwrap());
            let requests = Arc::new(Mutex::new(Vec::new()));
            let log = Arc::clone(&requests);
            let handle = std::thread::spawn(move || {
                for i in 0..count {
                    let (stream, _) = match listener.accept() {
                        Ok(s) => s,
                        Err(_) => return,
                    };
                    let mut reader = BufReader::new(stream);
                    let mut request_line = String::new();
                    reader.read_line(&mut request_line).unwrap();
                    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                    let mut length = 0usize;
                    let mut authorization = None;
                    loop {
                        let mut line = String::new();
                        reader.read_line(&mut line).unwrap();
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        let (k, v) = line.split_once(':').unwrap();
                        match k.to_ascii_lowercase().as_str() {
                            "content-length" => length = v.trim().parse().unwrap(),
                            "authorization" => authorization = Some(v.trim().to_string()),
                            _ => {}
                        }
                    }
                    let mut body = vec![0u8; length];
                    reader.read_exact(&mut body).unwrap();
                    let body: serde_json::Value =
                        serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                    let (status, reply) = respond(i, &body);
                    log.lock().unwrap().push(Captured {
                        path,
                        authorization,
                        body,
                    });
                    let mut stream = reader.into_inner();
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                        reply.len()
                    );
                }
            });
            StubServer {
                url,
                requests,
                handle: Some(handle),
            }
        }

        pub fn captured(&self) -> Vec<Captured> {
            self.requests.lock().unwrap().clone()
        }
    }

    impl Drop for StubServer {
        fn drop(&mut self) {
            if let Some(h) = self.handle.take() {
                if h.is_finished() {
                    let _ = h.join();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::StubServer;
    use super::*;

    fn quick() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1,
            timeout_secs: 5,
        }
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let server = StubServer::start(3, |i, _| {
            if i < 2 {
                (503, "{}".into())
            } else {
                (200, r#"{"ok":true}"#.into())
            }
        });
        let client = JsonClient::new(quick(), Some("k".into()));
        let v: serde_json::Value = client
            .post(&join_url(&server.url, "/x"), &serde_json::json!({"a": 1}))
            .unwrap();
        assert_eq!(v["ok"], true);
        let reqs = server.captured();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer k"));
        assert_eq!(reqs[0].path, "/x");
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let server = StubServer::start(3, |_, _| (500, "{}".into()));
        let client = JsonClient::new(quick(), None);
        let err = client
            .post::<_, serde_json::Value>(&server.url, &serde_json::json!({}))
            .unwrap_err();
        assert!(matches!(err, HttpError::Exhausted { attempts: 3, .. }));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let server = StubServer::start(1, |_, _| (401, "nope".into()));
        let client = JsonClient::new(quick(), None);
        let err = client
            .post::<_, serde_json::Value>(&server.url, &serde_json::json!({}))
            .unwrap_err();
        assert!(matches!(err, HttpError::Rejected { status: 401, .. }));
    }

    #[test]
    fn url_joining() {
        assert_eq!(join_url("http://h/v1/", "/embeddings"), "http://h/v1/embeddings");
        assert_eq!(join_url("http://h/v1", "embeddings"), "http://h/v1/embeddings");
    }
}
