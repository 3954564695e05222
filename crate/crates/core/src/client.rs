//! Chat-client plumbing shared by the planner and the judge: a minimal
//! messages-in/text-out trait, a disk cache keyed by content hash, and three
//! implementations — a remote HTTP client, a fixture client that replays
//! recorded responses from the cache layout, and a scripted client for tests.
//!
//! Credentials are read from an environment variable at call time and are
//! never persisted anywhere.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("no fixture recorded for request hash {0}")]
    MissingFixture(String),
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Messages in, completion text out. Implementations must be safe to call
/// from several threads at once; rate limiting is the caller's job.
pub trait ChatClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError>;
}

/// Content hash of a prompt, used as the cache filename.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_vec(messages).expect("chat messages always serialize");
    sha256_hex(&canonical)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// One file per request: filename = hex content hash, body = raw response
/// bytes. Writes go through a temp file and rename so concurrent writers
/// never expose a torn entry.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.dir.join(hash)
    }

    pub fn lookup(&self, hash: &str) -> std::io::Result<Option<Vec<u8>>> {
        match fs::read(self.path_for(hash)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn store(&self, hash: &str, bytes: &[u8]) -> std::io::Result<()> {
        let tmp = self.dir.join(format!(".{hash}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path_for(hash))
    }
}

/// Wraps any client with the response cache: hits skip the network entirely,
/// misses are forwarded and recorded.
pub struct CachingChatClient<C> {
    inner: C,
    cache: ResponseCache,
}

impl<C: ChatClient> CachingChatClient<C> {
    pub fn new(inner: C, cache: ResponseCache) -> Self {
        Self { inner, cache }
    }
}

impl<C: ChatClient> ChatClient for CachingChatClient<C> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let hash = prompt_hash(messages);
        if let Ok(Some(bytes)) = self.cache.lookup(&hash) {
            return String::from_utf8(bytes)
                .map_err(|e| ClientError::BadResponse(format!("cached entry is not UTF-8: {e}")));
        }
        let response = self.inner.complete(messages)?;
        if let Err(e) = self.cache.store(&hash, response.as_bytes()) {
            log::warn!("failed to write response cache entry {hash}: {e}");
        }
        Ok(response)
    }
}

/// Replays recorded responses from a cache directory. Requests without a
/// recorded response fail with [`ClientError::MissingFixture`].
pub struct FixtureChatClient {
    cache: ResponseCache,
}

impl FixtureChatClient {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        Ok(Self {
            cache: ResponseCache::new(dir)?,
        })
    }

    /// Records a response under the hash of `messages`, for building fixtures.
    pub fn record(&self, messages: &[ChatMessage], response: &str) -> std::io::Result<()> {
        self.cache.store(&prompt_hash(messages), response.as_bytes())
    }
}

impl ChatClient for FixtureChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let hash = prompt_hash(messages);
        match self.cache.lookup(&hash) {
            Ok(Some(bytes)) => String::from_utf8(bytes)
                .map_err(|e| ClientError::BadResponse(format!("fixture is not UTF-8: {e}"))),
            Ok(None) => Err(ClientError::MissingFixture(hash)),
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }
}

/// Pops canned responses in order, regardless of the request. Test helper.
pub struct ScriptedChatClient {
    responses: Mutex<VecDeque<String>>,
}

impl ScriptedChatClient {
    pub fn new(responses: impl IntoIterator<Item = String>) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().collect()),
        }
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, _messages: &[ChatMessage]) -> Result<String, ClientError> {
        self.responses
            .lock()
            .expect("script queue poisoned")
            .pop_front()
            .ok_or_else(|| ClientError::Transport("scripted client ran out of responses".into()))
    }
}

/// Remote chat-completions client (OpenAI-style wire format). The API key is
/// read from `api_key_env` on every call and sent as a bearer token.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key_env: String,
    max_retries: u32,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key_env: impl Into<String>,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
            max_retries: 2,
            http: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    fn request_once(&self, key: &str, body: &serde_json::Value) -> Result<String, ClientError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(ClientError::Status { code, body: text });
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ClientError::BadResponse(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| {
                ClientError::BadResponse("missing choices[0].message.content".into())
            })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let key = std::env::var(&self.api_key_env)
            .map_err(|_| ClientError::MissingCredentials(self.api_key_env.clone()))?;
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
        });
        let mut last = None;
        for attempt in 0..=self.max_retries {
            match self.request_once(&key, &body) {
                Ok(text) => return Ok(text),
                // Client-side errors won't improve on retry.
                Err(e @ ClientError::Status { code, .. }) if code < 500 => return Err(e),
                Err(e) => {
                    log::warn!("chat request attempt {attempt} failed: {e}");
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| ClientError::Transport("no attempts made".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_hash_is_stable_and_sensitive() {
        let a = vec![ChatMessage::system("s"), ChatMessage::user("u")];
        let b = vec![ChatMessage::system("s"), ChatMessage::user("u")];
        let c = vec![ChatMessage::system("s"), ChatMessage::user("v")];
        assert_eq!(prompt_hash(&a), prompt_hash(&b));
        assert_ne!(prompt_hash(&a), prompt_hash(&c));
        // Role matters, not just the concatenated text.
        let d = vec![ChatMessage::user("s"), ChatMessage::user("u")];
        assert_ne!(prompt_hash(&a), prompt_hash(&d));
    }

    #[test]
    fn cache_round_trip_and_fixture_replay() {
        let dir = tempfile::tempdir().unwrap();
        let messages = vec![ChatMessage::user("hello")];
        let fixture = FixtureChatClient::new(dir.path()).unwrap();
        assert!(matches!(
            fixture.complete(&messages),
            Err(ClientError::MissingFixture(_))
        ));
        fixture.record(&messages, "world").unwrap();
        assert_eq!(fixture.complete(&messages).unwrap(), "world");
    }

    #[test]
    fn caching_client_short_circuits_after_first_call() {
        let dir = tempfile::tempdir().unwrap();
        let inner = ScriptedChatClient::new(["only once".to_string()]);
        let client =
            CachingChatClient::new(inner, ResponseCache::new(dir.path()).unwrap());
        let messages = vec![ChatMessage::user("q")];
        assert_eq!(client.complete(&messages).unwrap(), "only once");
        // The scripted inner client is now empty; a cache hit must answer.
        assert_eq!(client.complete(&messages).unwrap(), "only once");
    }

    #[test]
    fn http_client_without_credentials_fails_fast() {
        let client = HttpChatClient::new(
            "http://localhost:9/never",
            "test-model",
            "STEPWEAVE_TEST_KEY_THAT_IS_UNSET",
        );
        assert!(matches!(
            client.complete(&[ChatMessage::user("x")]),
            Err(ClientError::MissingCredentials(_))
        ));
    }
}
