//! Typed HTTP client for the agent endpoints.

use std::collections::BTreeSet;
use std::time::Duration;

use bytes::Bytes;
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use taskmesh_core::access::TaskStatus;
use taskmesh_core::store::ObjectMeta;
use taskmesh_core::trace::{parse_trace, TraceRecord};
use taskmesh_core::{AgentId, ApplicationId, DataVersion, DepGraph, ResourceDelta, ResourceView, TaskId, TaskSpec};
use thiserror::Error;

use crate::protocol::{
    AppStatus, CompletionAck, CompletionReport, ErrorBody, ExecutionRequest, Health, RegisterTask, Registration,
    ResourcesSnapshot, StartApplication, Started,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("{endpoint} unreachable: {reason}")]
    Unreachable { endpoint: String, reason: String },
    #[error("{status}: {kind}: {message}")]
    Status { status: u16, kind: String, message: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn kind(&self) -> Option<&str> {
        match self {
            ClientError::Status { kind, .. } => Some(kind),
            _ => None,
        }
    }

    pub fn is_unreachable(&self) -> bool {
        matches!(self, ClientError::Unreachable { .. })
    }
}

/// Normalizes `host:port` or a URL to a base URL without trailing slash.
pub fn base_url(endpoint: &str) -> String {
    let e = endpoint.trim_end_matches('/');
    if e.starts_with("http://") || e.starts_with("https://") {
        e.to_string()
    } else {
        format!("http://{e}")
    }
}

#[derive(Debug, Clone)]
pub struct AgentClient {
    base: String,
    http: reqwest::Client,
}

/// A shared HTTP client with no global timeout; callers set per-request ones.
pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .connect_timeout(Duration::from_secs(2))
        .pool_idle_timeout(Duration::from_secs(30))
        .build()
        .expect("HTTP client")
}

impl AgentClient {
    pub fn new(endpoint: &str) -> Self {
        Self::with_http(endpoint, http_client())
    }

    pub fn with_http(endpoint: &str, http: reqwest::Client) -> Self {
        Self { base: base_url(endpoint), http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{}", self.base, path))
    }

    async fn send(&self, rb: RequestBuilder) -> Result<reqwest::Response, ClientError> {
        let resp = rb
            .send()
            .await
            .map_err(|e| ClientError::Unreachable { endpoint: self.base.clone(), reason: error_chain(&e) })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let body = resp.bytes().await.unwrap_or_default();
        let (kind, message) = match serde_json::from_slice::<ErrorBody>(&body) {
            Ok(e) => (e.error, e.message),
            Err(_) => (status_kind(status), String::from_utf8_lossy(&body).into_owned()),
        };
        Err(ClientError::Status { status: status.as_u16(), kind, message })
    }

    async fn json<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T, ClientError> {
        let resp = self.send(rb).await?;
        let body = resp
            .bytes()
            .await
            .map_err(|e| ClientError::Unreachable { endpoint: self.base.clone(), reason: error_chain(&e) })?;
        serde_json::from_slice(&body).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn health(&self, timeout: Option<Duration>) -> Result<Health, ClientError> {
        let mut rb = self.req(Method::GET, "/health");
        if let Some(t) = timeout {
            rb = rb.timeout(t);
        }
        self.json(rb).await
    }

    pub async fn start_application(&self, body: &StartApplication) -> Result<ApplicationId, ClientError> {
        let s: Started = self.json(self.req(Method::POST, "/applications").json(body)).await?;
        Ok(s.app)
    }

    pub async fn application(&self, app: ApplicationId) -> Result<AppStatus, ClientError> {
        self.json(self.req(Method::GET, &format!("/applications/{app}"))).await
    }

    /// Long-polls until the application finished or `timeout` passed; returns the last status.
    pub async fn wait_application(&self, app: ApplicationId, timeout: Duration) -> Result<AppStatus, ClientError> {
        let rb = self
            .req(Method::GET, &format!("/applications/{app}"))
            .query(&[("wait", "true".to_string()), ("timeout_ms", timeout.as_millis().to_string())])
            .timeout(timeout + Duration::from_secs(10));
        self.json(rb).await
    }

    pub async fn graph(&self, app: ApplicationId) -> Result<DepGraph, ClientError> {
        self.json(self.req(Method::GET, &format!("/applications/{app}/graph"))).await
    }

    pub async fn graph_text(&self, app: ApplicationId, format: &str) -> Result<String, ClientError> {
        let rb = self.req(Method::GET, &format!("/applications/{app}/graph")).query(&[("format", format)]);
        let resp = self.send(rb).await?;
        resp.text().await.map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn register_task(&self, spec: TaskSpec) -> Result<Registration, ClientError> {
        self.json(self.req(Method::POST, "/tasks").json(&RegisterTask { spec })).await
    }

    /// Worker intake. Returns once the target accepted the request.
    pub async fn execute(&self, req: &ExecutionRequest, timeout: Duration) -> Result<(), ClientError> {
        self.send(self.req(Method::POST, "/tasks").json(req).timeout(timeout)).await.map(|_| ())
    }

    pub async fn task_status(&self, task: TaskId) -> Result<TaskStatus, ClientError> {
        self.json(self.req(Method::GET, &format!("/tasks/{task}"))).await
    }

    pub async fn report_completion(&self, report: &CompletionReport) -> Result<CompletionAck, ClientError> {
        let path = format!("/tasks/{}/completion", report.task_id);
        self.json(self.req(Method::POST, &path).json(report).timeout(Duration::from_secs(30))).await
    }

    pub async fn update_resources(&self, delta: &ResourceDelta) -> Result<ResourceView, ClientError> {
        self.json(self.req(Method::PUT, "/resources").json(delta)).await
    }

    pub async fn resources(&self) -> Result<ResourcesSnapshot, ClientError> {
        self.json(self.req(Method::GET, "/resources")).await
    }

    pub async fn trace(&self, app: Option<ApplicationId>) -> Result<Vec<TraceRecord>, ClientError> {
        let mut rb = self.req(Method::GET, "/trace");
        if let Some(app) = app {
            rb = rb.query(&[("app", app.to_string())]);
        }
        let text = self.send(rb).await?.text().await.map_err(|e| ClientError::Decode(e.to_string()))?;
        parse_trace(&text).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn data_path(v: DataVersion) -> String {
        format!("/data/{}/{}", v.data, v.version)
    }

    pub async fn put_data(&self, v: DataVersion, payload: Bytes, query: &DataQuery) -> Result<ObjectMeta, ClientError> {
        let rb = self
            .req(Method::POST, &Self::data_path(v))
            .query(query)
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(payload);
        self.json(rb).await
    }

    pub async fn get_data(&self, v: DataVersion, query: &DataQuery) -> Result<Bytes, ClientError> {
        let resp = self.send(self.req(Method::GET, &Self::data_path(v)).query(query)).await?;
        resp.bytes()
            .await
            .map_err(|e| ClientError::Unreachable { endpoint: self.base.clone(), reason: error_chain(&e) })
    }

    pub async fn locations(&self, v: DataVersion) -> Result<ObjectMeta, ClientError> {
        self.json(self.req(Method::GET, &format!("{}/locations", Self::data_path(v)))).await
    }

    pub async fn replicate(&self, v: DataVersion, target: AgentId) -> Result<BTreeSet<AgentId>, ClientError> {
        self.json(self.req(Method::POST, &format!("{}/replicas/{target}", Self::data_path(v)))).await
    }

    pub async fn drop_replica(
        &self,
        v: DataVersion,
        agent: AgentId,
        query: &DataQuery,
    ) -> Result<BTreeSet<AgentId>, ClientError> {
        let rb = self.req(Method::DELETE, &format!("{}/replicas/{agent}", Self::data_path(v))).query(query);
        self.json(rb).await
    }

    pub async fn purge_agent(&self, agent: AgentId) -> Result<(), ClientError> {
        self.send(self.req(Method::DELETE, &format!("/data/agents/{agent}"))).await.map(|_| ())
    }
}

/// Query parameters of the `/data` endpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DataQuery {
    /// Agent on whose behalf the bytes are read; it becomes a replica.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requester: Option<AgentId>,
    /// With `requester`: the requester stores the bytes itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached: Option<bool>,
    /// Agent that keeps the first replica of a new version.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home: Option<AgentId>,
    /// Registers the version as an explicit put of this application.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<ApplicationId>,
    /// Operate on the receiving agent's own bytes only, bypassing location metadata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local: Option<bool>,
}

impl DataQuery {
    pub fn local() -> Self {
        Self { local: Some(true), ..Self::default() }
    }

    pub fn is_local(&self) -> bool {
        self.local.unwrap_or(false)
    }
}

fn status_kind(s: StatusCode) -> String {
    s.canonical_reason().unwrap_or("error").replace(' ', "")
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut src = e.source();
    while let Some(inner) = src {
        s.push_str(": ");
        s.push_str(&inner.to_string());
        src = inner.source();
    }
    s
}
