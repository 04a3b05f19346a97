//! REST interface of an agent.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use taskmesh_core::access::AccessError;
use taskmesh_core::scheduler::SchedulerError;
use taskmesh_core::store::StoreError;
use taskmesh_core::{AgentId, ApplicationId, DataId, DataVersion, ResourceDelta, TaskId};

use crate::agent::{Agent, IntakeError};
use crate::client::DataQuery;
use crate::demos::DemoError;
use crate::protocol::{CompletionAck, CompletionReport, ErrorBody, StartApplication, Started, TaskPost};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self { status, kind: kind.to_string(), message: message.into() }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", what)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.kind, message: self.message })).into_response()
    }
}

impl From<AccessError> for ApiError {
    fn from(e: AccessError) -> Self {
        let msg = e.to_string();
        match e {
            AccessError::UnknownApplication(_) | AccessError::UnknownTask(_) => Self::new(StatusCode::NOT_FOUND, "NotFound", msg),
            AccessError::UnknownData(_) => Self::new(StatusCode::BAD_REQUEST, "UnknownData", msg),
            AccessError::InvalidSpec(_) => Self::new(StatusCode::BAD_REQUEST, "InvalidSpec", msg),
            AccessError::VersionMismatch { .. } => Self::new(StatusCode::CONFLICT, "VersionMismatch", msg),
            AccessError::DuplicateApplication(_) => Self::new(StatusCode::CONFLICT, "Duplicate", msg),
            AccessError::ApplicationClosed(_) => Self::new(StatusCode::CONFLICT, "ApplicationClosed", msg),
            AccessError::IllegalTransition(_) => Self::new(StatusCode::CONFLICT, "IllegalTransition", msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "NotFound", msg),
            StoreError::VersionConflict(_) => Self::new(StatusCode::CONFLICT, "VersionConflict", msg),
            StoreError::LastReplica(_) => Self::new(StatusCode::CONFLICT, "LastReplica", msg),
            StoreError::TargetUnreachable { .. } => Self::new(StatusCode::BAD_GATEWAY, "TargetUnreachable", msg),
            StoreError::Unavailable(_) => Self::new(StatusCode::SERVICE_UNAVAILABLE, "Unavailable", msg),
        }
    }
}

impl From<SchedulerError> for ApiError {
    fn from(e: SchedulerError) -> Self {
        let msg = e.to_string();
        match e {
            SchedulerError::UnknownAgent(_) => Self::new(StatusCode::NOT_FOUND, "NotFound", msg),
            SchedulerError::DuplicateAgent(_) => Self::new(StatusCode::CONFLICT, "Duplicate", msg),
            SchedulerError::BelowReservation { .. } => Self::new(StatusCode::CONFLICT, "BelowReservation", msg),
            SchedulerError::ZeroCores => Self::new(StatusCode::BAD_REQUEST, "ZeroCores", msg),
        }
    }
}

impl From<DemoError> for ApiError {
    fn from(e: DemoError) -> Self {
        match e {
            DemoError::UnknownDemo(_) => Self::new(StatusCode::BAD_REQUEST, "UnknownDemo", e.to_string()),
            DemoError::InvalidArgs(_) => Self::bad_request(e.to_string()),
            DemoError::Access(a) => a.into(),
            DemoError::Store(s) => s.into(),
        }
    }
}

impl From<IntakeError> for ApiError {
    fn from(e: IntakeError) -> Self {
        let msg = e.to_string();
        match e {
            IntakeError::NoCapacity => Self::new(StatusCode::CONFLICT, "NoCapacity", msg),
            IntakeError::Draining => Self::new(StatusCode::SERVICE_UNAVAILABLE, "Draining", msg),
            IntakeError::Invalid(_) => Self::new(StatusCode::BAD_REQUEST, "InvalidSpec", msg),
            IntakeError::Unreachable(_) => Self::new(StatusCode::BAD_GATEWAY, "TargetUnreachable", msg),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> ApiResult<T> {
    s.parse().map_err(|_| ApiError::bad_request(format!("malformed {what} {s:?}")))
}

fn version(data: &str, v: u64) -> ApiResult<DataVersion> {
    Ok(DataVersion::new(parse::<DataId>("data id", data)?, v))
}

pub fn router(agent: Arc<Agent>) -> Router {
    Router::new()
        .route("/applications", post(start_application))
        .route("/applications/{app}", get(application))
        .route("/applications/{app}/graph", get(graph))
        .route("/tasks", post(post_task))
        .route("/tasks/{id}", get(task_status))
        .route("/tasks/{id}/completion", post(completion))
        .route("/resources", get(resources).put(update_resources))
        .route("/data/agents/{agent}", delete(purge_agent))
        .route("/data/{data}/{version}", get(get_data).post(put_data))
        .route("/data/{data}/{version}/locations", get(locations))
        .route("/data/{data}/{version}/replicas/{agent}", post(replicate).delete(drop_replica))
        .route("/health", get(health))
        .route("/trace", get(trace))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(agent)
}

/// Serves `agent` on `listener` and runs its scheduling and probe loops.
pub async fn serve(agent: Arc<Agent>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tokio::spawn(agent.clone().scheduler_loop());
    tokio::spawn(agent.clone().probe_loop());
    axum::serve(listener, router(agent)).await
}

async fn start_application(State(agent): State<Arc<Agent>>, Json(req): Json<StartApplication>) -> ApiResult<Response> {
    if agent.is_draining() {
        return Err(IntakeError::Draining.into());
    }
    let app = agent.start_application(req)?;
    Ok((StatusCode::CREATED, Json(Started { app })).into_response())
}

#[derive(Debug, Deserialize)]
struct WaitQuery {
    #[serde(default)]
    wait: bool,
    #[serde(default)]
    timeout_ms: Option<u64>,
}

async fn application(
    State(agent): State<Arc<Agent>>,
    Path(app): Path<String>,
    Query(q): Query<WaitQuery>,
) -> ApiResult<Response> {
    let app: ApplicationId = parse("application id", &app)?;
    let deadline = Instant::now() + Duration::from_millis(q.timeout_ms.unwrap_or(30_000));
    loop {
        let status = agent.app_status(app).ok_or_else(|| ApiError::not_found(format!("application {app}")))?;
        if !q.wait || status.finished || Instant::now() >= deadline {
            return Ok(Json(status).into_response());
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[derive(Debug, Deserialize)]
struct GraphQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn graph(State(agent): State<Arc<Agent>>, Path(app): Path<String>, Query(q): Query<GraphQuery>) -> ApiResult<Response> {
    let app: ApplicationId = parse("application id", &app)?;
    let g = agent.access().graph_snapshot(app)?;
    Ok(match q.format.as_deref().unwrap_or("json") {
        "json" => Json(g).into_response(),
        "dot" => ([(header::CONTENT_TYPE, "text/vnd.graphviz")], g.to_dot()).into_response(),
        "listing" | "text" => ([(header::CONTENT_TYPE, "text/plain")], g.to_listing()).into_response(),
        other => return Err(ApiError::bad_request(format!("unknown graph format {other:?}"))),
    })
}

async fn post_task(State(agent): State<Arc<Agent>>, Json(body): Json<TaskPost>) -> ApiResult<Response> {
    match body {
        TaskPost::Execute(req) => {
            agent.intake(*req)?;
            Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "accepted": true }))).into_response())
        }
        TaskPost::Register(r) => {
            let reg = agent.register_task(r.spec)?;
            Ok((StatusCode::CREATED, Json(reg)).into_response())
        }
    }
}

async fn task_status(State(agent): State<Arc<Agent>>, Path(id): Path<String>) -> ApiResult<Response> {
    let id: TaskId = parse("task id", &id)?;
    Ok(Json(agent.access().task_status(id)?).into_response())
}

async fn completion(
    State(agent): State<Arc<Agent>>,
    Path(id): Path<String>,
    Json(report): Json<CompletionReport>,
) -> ApiResult<Json<CompletionAck>> {
    let id: TaskId = parse("task id", &id)?;
    if id != report.task_id {
        return Err(ApiError::bad_request("task id in path and body differ"));
    }
    Ok(Json(CompletionAck { accepted: agent.on_completion(report).await }))
}

async fn resources(State(agent): State<Arc<Agent>>) -> Response {
    Json(agent.resources_snapshot()).into_response()
}

async fn update_resources(State(agent): State<Arc<Agent>>, Json(delta): Json<ResourceDelta>) -> ApiResult<Response> {
    Ok(Json(agent.update_resources(delta)?).into_response())
}

async fn put_data(
    State(agent): State<Arc<Agent>>,
    Path((data, v)): Path<(String, u64)>,
    Query(q): Query<DataQuery>,
    body: Bytes,
) -> ApiResult<Response> {
    let v = version(&data, v)?;
    if q.is_local() {
        agent.local_put(v, body.clone());
        let meta = taskmesh_core::store::ObjectMeta {
            version: v,
            size_bytes: body.len() as u64,
            replicas: [agent.id()].into(),
        };
        return Ok((StatusCode::CREATED, Json(meta)).into_response());
    }
    if let Some(app) = q.app {
        agent.access().put_version(app, v)?;
    }
    let home = q.home.unwrap_or(agent.id());
    let meta = agent.persist(v, body, home).await?;
    Ok((StatusCode::CREATED, Json(meta)).into_response())
}

async fn get_data(
    State(agent): State<Arc<Agent>>,
    Path((data, v)): Path<(String, u64)>,
    Query(q): Query<DataQuery>,
) -> ApiResult<Response> {
    let v = version(&data, v)?;
    let bytes = if q.is_local() {
        agent.local_get(&v).ok_or(StoreError::NotFound(v))?
    } else {
        let requester = q.requester.unwrap_or(agent.id());
        agent.read_for(v, requester, q.cached.unwrap_or(false)).await?
    };
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn locations(State(agent): State<Arc<Agent>>, Path((data, v)): Path<(String, u64)>) -> ApiResult<Response> {
    let v = version(&data, v)?;
    let meta = agent.metadata(v).ok_or(StoreError::NotFound(v))?;
    Ok(Json(meta).into_response())
}

async fn replicate(
    State(agent): State<Arc<Agent>>,
    Path((data, v, target)): Path<(String, u64, String)>,
) -> ApiResult<Response> {
    let v = version(&data, v)?;
    let target: AgentId = parse("agent id", &target)?;
    Ok(Json(agent.replicate(v, target).await?).into_response())
}

async fn drop_replica(
    State(agent): State<Arc<Agent>>,
    Path((data, v, target)): Path<(String, u64, String)>,
    Query(q): Query<DataQuery>,
) -> ApiResult<Response> {
    let v = version(&data, v)?;
    let target: AgentId = parse("agent id", &target)?;
    if q.is_local() {
        agent.local_drop(&v);
        return Ok(Json(std::collections::BTreeSet::<AgentId>::new()).into_response());
    }
    Ok(Json(agent.drop_replica(v, target).await?).into_response())
}

async fn purge_agent(State(agent): State<Arc<Agent>>, Path(target): Path<String>) -> ApiResult<StatusCode> {
    let target: AgentId = parse("agent id", &target)?;
    agent.purge(target);
    Ok(StatusCode::NO_CONTENT)
}

async fn health(State(agent): State<Arc<Agent>>) -> Response {
    Json(agent.health().await).into_response()
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    #[serde(default)]
    app: Option<String>,
}

async fn trace(State(agent): State<Arc<Agent>>, Query(q): Query<TraceQuery>) -> ApiResult<Response> {
    let records = match q.app {
        Some(app) => agent.trace().records_for(parse("application id", &app)?),
        None => agent.trace().records(),
    };
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}
