//! JSON-over-HTTP backends for chat completion, embedding and rerank
//! services.
//!
//! Chat uses the chat-completions shape (`choices[0].message.content`).
//! Embedding posts `{model, texts}` and expects `{vectors}`; rerank posts
//! `{model, query, documents}` and expects `{scores}`.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dense_index::EmbeddingBackend;
use crate::error::{Error, Result};
use crate::llm_gateway::{ChatBackend, ChatMessage, ChatRequest};
use crate::rerank::RerankBackend;

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub url: String,
    /// Header name and full value, e.g. `("Authorization", "Bearer …")`.
    pub auth: Option<(String, String)>,
    pub timeout: Duration,
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), auth: None, timeout: Duration::from_secs(120) }
    }

    pub fn with_auth(mut self, header: impl Into<String>, value: impl Into<String>) -> Self {
        self.auth = Some((header.into(), value.into()));
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

struct JsonClient {
    endpoint: HttpEndpoint,
    client: Client,
}

impl JsonClient {
    fn new(endpoint: HttpEndpoint) -> Result<Self> {
        let client = Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| Error::backend(&endpoint.url, e.to_string()))?;
        Ok(Self { endpoint, client })
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, body: &B) -> Result<T> {
        let url = &self.endpoint.url;
        let mut req = self.client.post(url).json(body);
        if let Some((name, value)) = &self.endpoint.auth {
            req = req.header(name.as_str(), value.as_str());
        }
        let resp = req.send().map_err(|e| Error::backend(url, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::backend(url, e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(Error::backend(url, format!("HTTP {status}: {snippet}")));
        }
        serde_json::from_str(&text).map_err(|e| Error::backend(url, format!("bad response body: {e}")))
    }
}

pub struct HttpChatBackend {
    inner: JsonClient,
}

impl HttpChatBackend {
    pub fn new(endpoint: HttpEndpoint) -> Result<Self> {
        Ok(Self { inner: JsonClient::new(endpoint)? })
    }
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: Option<String>,
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> String {
        format!("http:{}", self.inner.endpoint.url)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let reply: ChatReply = self.inner.post(&ChatBody {
            model: &request.model_id,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        })?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::backend(self.id(), "response has no message content"))
    }
}

pub struct HttpEmbeddingBackend {
    inner: JsonClient,
    model: String,
}

impl HttpEmbeddingBackend {
    pub fn new(endpoint: HttpEndpoint, model: impl Into<String>) -> Result<Self> {
        Ok(Self { inner: JsonClient::new(endpoint)?, model: model.into() })
    }
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn id(&self) -> String {
        format!("http:{}", self.inner.endpoint.url)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let reply: EmbedReply = self.inner.post(&EmbedBody { model: &self.model, texts })?;
        Ok(reply.vectors)
    }
}

pub struct HttpRerankBackend {
    inner: JsonClient,
    model: String,
}

impl HttpRerankBackend {
    pub fn new(endpoint: HttpEndpoint, model: impl Into<String>) -> Result<Self> {
        Ok(Self { inner: JsonClient::new(endpoint)?, model: model.into() })
    }
}

#[derive(Serialize)]
struct RerankBody<'a> {
    model: &'a str,
    query: &'a str,
    documents: &'a [String],
}

#[derive(Deserialize)]
struct RerankReply {
    scores: Vec<f64>,
}

impl RerankBackend for HttpRerankBackend {
    fn id(&self) -> String {
        format!("http:{}", self.inner.endpoint.url)
    }

    fn score_pairs(&self, query: &str, docs: &[String]) -> Result<Vec<f64>> {
        let reply: RerankReply = self.inner.post(&RerankBody { model: &self.model, query, documents: docs })?;
        Ok(reply.scores)
    }
}
