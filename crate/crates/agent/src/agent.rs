//! The agent: one process that serves the REST interface, executes tasks
//! against its own resource pool, and masters the applications started on it.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use taskmesh_core::recovery::{LivenessTracker, RecoveryConfig};
use taskmesh_core::scheduler::AuditEntry;
use taskmesh_core::store::{ObjectMeta, StoreError};
use taskmesh_core::{
    AccessProcessor, AgentDescriptor, AgentId, ApplicationId, DataVersion, Policy, ProcessorKind, ResourcePool,
    Scheduler, TaskId, Value,
};
use thiserror::Error;
use tokio::sync::Notify;

use crate::catalog::{Catalog, Recorded};
use crate::client::{AgentClient, ClientError, DataQuery};
use crate::demos::AppRecord;
use crate::executor::ExecutorRegistry;
use crate::protocol::{CompletionReport, ExecutionRequest, FailureKind, Health, ManifestEntry, Outcome};
use crate::sink::TraceSink;
use taskmesh_core::trace::TraceEvent;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub name: String,
    #[serde(default = "default_host")]
    pub host: String,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
    pub cores: u32,
    #[serde(default)]
    pub memory_mb: u64,
    #[serde(default)]
    pub software_tags: BTreeSet<String>,
    #[serde(default = "default_kinds")]
    pub processor_kinds: BTreeSet<ProcessorKind>,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub policy: Policy,
    /// Keep every reservation decision for audit replay.
    #[serde(default)]
    pub audit: bool,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_kinds() -> BTreeSet<ProcessorKind> {
    BTreeSet::from([ProcessorKind::Cpu])
}

impl AgentConfig {
    pub fn new(name: impl Into<String>, cores: u32, memory_mb: u64) -> Self {
        Self {
            name: name.into(),
            host: default_host(),
            port: 0,
            cores,
            memory_mb,
            software_tags: BTreeSet::new(),
            processor_kinds: default_kinds(),
            recovery: RecoveryConfig::default(),
            policy: Policy::default(),
            audit: false,
            trace_path: None,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.software_tags.insert(tag.into());
        self
    }

    pub fn with_processors(mut self, kinds: impl IntoIterator<Item = ProcessorKind>) -> Self {
        self.processor_kinds = kinds.into_iter().collect();
        self
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.name.trim().is_empty() {
            return Err(AgentError::InvalidConfig("agent name is empty".into()));
        }
        if self.cores == 0 {
            return Err(AgentError::InvalidConfig(format!("agent {}: cores must be at least 1", self.name)));
        }
        if self.processor_kinds.is_empty() {
            return Err(AgentError::InvalidConfig(format!("agent {}: no processor kinds", self.name)));
        }
        if self.recovery.probe_period_ms == 0 || self.recovery.max_misses == 0 || self.recovery.max_attempts == 0 {
            return Err(AgentError::InvalidConfig("recovery constants must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("startup timed out: {0}")]
    StartupTimeout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binds the configured address, mapping "address in use" to [`AgentError::PortInUse`].
pub fn bind(config: &AgentConfig) -> Result<std::net::TcpListener, AgentError> {
    let addr = format!("{}:{}", config.host, config.port);
    let listener = std::net::TcpListener::bind(&addr).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => AgentError::PortInUse(config.port),
        _ => AgentError::Io(e),
    })?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IntakeError {
    #[error("no capacity for the requested reservation")]
    NoCapacity,
    #[error("agent is draining")]
    Draining,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("target unreachable: {0}")]
    Unreachable(String),
}

/// Called on every execution request right before it leaves the master,
/// with a predicate telling whether a version is persisted.
pub type DispatchInterceptor = Arc<dyn Fn(&ExecutionRequest, &dyn Fn(&DataVersion) -> bool) + Send + Sync>;

pub struct Agent {
    pub(crate) id: AgentId,
    pub(crate) config: AgentConfig,
    pub(crate) endpoint: String,
    pub(crate) started: Instant,
    pub(crate) http: reqwest::Client,
    pub(crate) registry: ExecutorRegistry,
    pub(crate) shard: Mutex<HashMap<DataVersion, Bytes>>,
    pub(crate) pool: Mutex<ResourcePool>,
    pub(crate) draining: AtomicBool,
    pub(crate) health_paused_until: Mutex<Option<Instant>>,
    // Master role.
    pub(crate) ap: Arc<AccessProcessor>,
    pub(crate) sched: Mutex<Scheduler>,
    pub(crate) catalog: Mutex<Catalog>,
    /// Values put by main programs and not yet persisted anywhere.
    pub(crate) pending: Mutex<HashMap<DataVersion, Bytes>>,
    pub(crate) peers: Mutex<HashMap<AgentId, String>>,
    pub(crate) liveness: Mutex<LivenessTracker>,
    pub(crate) gangs: Mutex<HashMap<(TaskId, u32), GangProgress>>,
    pub(crate) seen_reports: Mutex<HashSet<(TaskId, u32, u32)>>,
    pub(crate) unsat_reported: Mutex<HashSet<(TaskId, u32)>>,
    pub(crate) apps: Mutex<HashMap<ApplicationId, Arc<AppRecord>>>,
    pub(crate) trace: TraceSink,
    pub(crate) wake: Notify,
    pub(crate) interceptor: Mutex<Option<DispatchInterceptor>>,
}

#[derive(Debug, Default)]
pub(crate) struct GangProgress {
    pub ranks: BTreeSet<u32>,
    pub bytes_local: u64,
    pub bytes_fetched: u64,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("id", &self.id).field("name", &self.config.name).field("endpoint", &self.endpoint).finish()
    }
}

impl Agent {
    pub fn new(config: AgentConfig, addr: SocketAddr) -> Result<Arc<Self>, AgentError> {
        Self::with_registry(config, addr, ExecutorRegistry::with_builtins())
    }

    pub fn with_registry(config: AgentConfig, addr: SocketAddr, registry: ExecutorRegistry) -> Result<Arc<Self>, AgentError> {
        config.validate()?;
        let trace = match &config.trace_path {
            Some(p) => TraceSink::with_file(p)?,
            None => TraceSink::new(),
        };
        let mut sched = Scheduler::new(config.policy);
        if config.audit {
            sched = sched.with_audit();
        }
        let host = if addr.ip().is_unspecified() { "127.0.0.1".to_string() } else { addr.ip().to_string() };
        Ok(Arc::new(Self {
            id: AgentId::new(),
            endpoint: format!("{host}:{}", addr.port()),
            started: Instant::now(),
            http: crate::client::http_client(),
            registry,
            shard: Mutex::default(),
            pool: Mutex::new(ResourcePool::new(config.cores, config.memory_mb)),
            draining: AtomicBool::new(false),
            health_paused_until: Mutex::new(None),
            ap: Arc::new(AccessProcessor::new()),
            sched: Mutex::new(sched),
            catalog: Mutex::default(),
            pending: Mutex::default(),
            peers: Mutex::default(),
            liveness: Mutex::new(LivenessTracker::new(config.recovery.max_misses)),
            gangs: Mutex::default(),
            seen_reports: Mutex::default(),
            unsat_reported: Mutex::default(),
            apps: Mutex::default(),
            trace,
            wake: Notify::new(),
            interceptor: Mutex::new(None),
            config,
        }))
    }

    pub fn id(&self) -> AgentId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn access(&self) -> &AccessProcessor {
        &self.ap
    }

    pub fn trace(&self) -> &TraceSink {
        &self.trace
    }

    pub fn descriptor(&self) -> AgentDescriptor {
        let mut d = AgentDescriptor::new(self.id, self.endpoint.clone(), self.config.cores, self.config.memory_mb)
            .with_processors(self.config.processor_kinds.iter().copied());
        for t in &self.config.software_tags {
            d = d.with_tag(t.clone());
        }
        d
    }

    pub fn pool(&self) -> ResourcePool {
        *self.pool.lock().unwrap()
    }

    pub fn is_draining(&self) -> bool {
        self.draining.load(Ordering::SeqCst)
    }

    pub fn set_draining(&self, draining: bool) {
        self.draining.store(draining, Ordering::SeqCst);
    }

    /// Delays `/health` answers until `d` from now: a controlled stall.
    pub fn pause_health(&self, d: Duration) {
        *self.health_paused_until.lock().unwrap() = Some(Instant::now() + d);
    }

    pub fn set_interceptor(&self, f: Option<DispatchInterceptor>) {
        *self.interceptor.lock().unwrap() = f;
    }

    /// Every reservation made so far, as it looked when made. Empty unless auditing.
    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.sched.lock().unwrap().audit_log().to_vec()
    }

    pub(crate) fn emit(&self, e: TraceEvent) {
        self.trace.emit(e);
    }

    pub async fn health(&self) -> Health {
        let until = *self.health_paused_until.lock().unwrap();
        if let Some(until) = until {
            let now = Instant::now();
            if until > now {
                tokio::time::sleep(until - now).await;
            }
        }
        Health {
            agent_id: self.id,
            name: self.config.name.clone(),
            uptime_ms: self.started.elapsed().as_millis() as u64,
            pool: self.pool(),
            draining: self.is_draining(),
            descriptor: self.descriptor(),
        }
    }

    pub(crate) fn peer_client(&self, agent: AgentId) -> Option<AgentClient> {
        let ep = if agent == self.id {
            self.endpoint.clone()
        } else {
            self.peers.lock().unwrap().get(&agent).cloned()?
        };
        Some(AgentClient::with_http(&ep, self.http.clone()))
    }

    // ---- local shard -------------------------------------------------------

    pub fn holds(&self, v: &DataVersion) -> bool {
        self.shard.lock().unwrap().contains_key(v)
    }

    pub fn local_get(&self, v: &DataVersion) -> Option<Bytes> {
        self.shard.lock().unwrap().get(v).cloned()
    }

    pub fn local_put(&self, v: DataVersion, payload: Bytes) {
        self.shard.lock().unwrap().insert(v, payload);
    }

    pub fn local_drop(&self, v: &DataVersion) -> bool {
        self.shard.lock().unwrap().remove(v).is_some()
    }

    // ---- location metadata (master role) -----------------------------------

    pub fn metadata(&self, v: DataVersion) -> Option<ObjectMeta> {
        self.catalog.lock().unwrap().meta(v)
    }

    fn unreachable(agent: AgentId, e: impl std::fmt::Display) -> StoreError {
        StoreError::TargetUnreachable { agent, reason: e.to_string() }
    }

    async fn push_to(&self, agent: AgentId, v: DataVersion, payload: Bytes) -> Result<(), StoreError> {
        if agent == self.id {
            self.local_put(v, payload);
            return Ok(());
        }
        let client = self.peer_client(agent).ok_or_else(|| Self::unreachable(agent, "unknown agent"))?;
        client.put_data(v, payload, &DataQuery::local()).await.map(|_| ()).map_err(|e| Self::unreachable(agent, e))
    }

    /// Bytes of `v` from this agent's shard or from any recorded replica.
    async fn fetch(&self, v: DataVersion) -> Result<Bytes, StoreError> {
        if let Some(b) = self.local_get(&v) {
            return Ok(b);
        }
        let replicas = self.catalog.lock().unwrap().get(&v).map(|e| e.replicas.clone()).ok_or(StoreError::NotFound(v))?;
        let mut last = None;
        for r in replicas {
            if r == self.id {
                continue;
            }
            let Some(client) = self.peer_client(r) else { continue };
            match client.get_data(v, &DataQuery::local()).await {
                Ok(b) => return Ok(b),
                Err(e) => last = Some(Self::unreachable(r, e)),
            }
        }
        Err(last.unwrap_or(StoreError::NotFound(v)))
    }

    /// Persists a version still held only in master memory. Returns whether it was pending.
    pub(crate) async fn persist_pending(&self, v: DataVersion) -> Result<bool, StoreError> {
        let Some(bytes) = self.pending.lock().unwrap().get(&v).cloned() else {
            return Ok(false);
        };
        self.persist(v, bytes, self.id).await?;
        self.pending.lock().unwrap().remove(&v);
        Ok(true)
    }

    /// Records `payload` as `v` with a first replica on `home`.
    pub async fn persist(&self, v: DataVersion, payload: Bytes, home: AgentId) -> Result<ObjectMeta, StoreError> {
        let check = self.catalog.lock().unwrap().check(&v, &payload);
        match check {
            Recorded::Conflict => return Err(StoreError::VersionConflict(v)),
            Recorded::Existing(e) => {
                return Ok(ObjectMeta { version: v, size_bytes: e.size_bytes, replicas: e.replicas });
            }
            Recorded::New => {}
        }
        self.push_to(home, v, payload.clone()).await?;
        let size = payload.len() as u64;
        self.catalog.lock().unwrap().record(v, &payload, [home]);
        self.emit(TraceEvent::Persist { version: v, home, size_bytes: size });
        Ok(self.metadata(v).expect("just recorded"))
    }

    /// Reads `v` for `requester`, which becomes a replica. With `cached` the
    /// requester stores the bytes itself; otherwise they are pushed to it.
    pub async fn read_for(&self, v: DataVersion, requester: AgentId, cached: bool) -> Result<Bytes, StoreError> {
        self.persist_pending(v).await?;
        let replicas = self.catalog.lock().unwrap().get(&v).map(|e| e.replicas.clone()).ok_or(StoreError::NotFound(v))?;
        if requester != self.id && replicas.contains(&requester) {
            if let Some(c) = self.peer_client(requester) {
                if let Ok(b) = c.get_data(v, &DataQuery::local()).await {
                    return Ok(b);
                }
            }
        }
        let bytes = self.fetch(v).await?;
        if !replicas.contains(&requester) {
            if requester == self.id {
                self.local_put(v, bytes.clone());
            } else if !cached {
                self.push_to(requester, v, bytes.clone()).await?;
            }
            self.catalog.lock().unwrap().add_replica(&v, requester);
        }
        Ok(bytes)
    }

    pub async fn replicate(&self, v: DataVersion, target: AgentId) -> Result<BTreeSet<AgentId>, StoreError> {
        self.persist_pending(v).await?;
        let replicas = self.catalog.lock().unwrap().get(&v).map(|e| e.replicas.clone()).ok_or(StoreError::NotFound(v))?;
        if replicas.contains(&target) {
            return Ok(replicas);
        }
        let bytes = self.fetch(v).await?;
        self.push_to(target, v, bytes).await?;
        Ok(self.catalog.lock().unwrap().add_replica(&v, target).unwrap_or_default())
    }

    pub async fn drop_replica(&self, v: DataVersion, agent: AgentId) -> Result<BTreeSet<AgentId>, StoreError> {
        let remaining = {
            let mut c = self.catalog.lock().unwrap();
            let e = c.get(&v).ok_or(StoreError::NotFound(v))?;
            if !e.replicas.contains(&agent) {
                return Err(StoreError::NotFound(v));
            }
            if e.replicas.len() == 1 {
                return Err(StoreError::LastReplica(v));
            }
            c.remove_replica(&v, agent).unwrap_or_default()
        };
        if agent == self.id {
            self.local_drop(&v);
        } else if let Some(client) = self.peer_client(agent) {
            // The location table is authoritative; a stale copy is harmless.
            let _ = client.drop_replica(v, agent, &DataQuery::local()).await;
        }
        Ok(remaining)
    }

    pub fn purge(&self, agent: AgentId) -> Vec<DataVersion> {
        self.catalog.lock().unwrap().purge(agent)
    }

    // ---- worker role -------------------------------------------------------

    /// Accepts an execution request if the pool can hold it, then runs it in the background.
    pub fn intake(self: &Arc<Self>, req: ExecutionRequest) -> Result<(), IntakeError> {
        if self.is_draining() {
            return Err(IntakeError::Draining);
        }
        req.spec.validate().map_err(|e| IntakeError::Invalid(e.to_string()))?;
        if req.outputs.len() != req.spec.outputs().count() || req.input_manifest.len() != req.spec.inputs().count() {
            return Err(IntakeError::Invalid("manifest does not match the parameter list".into()));
        }
        let c = &req.spec.constraints;
        self.pool.lock().unwrap().reserve(c.cores, c.memory_mb).map_err(|_| IntakeError::NoCapacity)?;
        let me = self.clone();
        let fut: std::pin::Pin<Box<dyn std::future::Future<Output = ()> + Send>> = Box::pin(me.execute(req));
        tokio::spawn(fut);
        Ok(())
    }

    async fn fetch_input(&self, req: &ExecutionRequest, v: DataVersion) -> Result<Bytes, String> {
        let bytes = if req.master_id == self.id {
            self.read_for(v, self.id, true).await.map_err(|e| e.to_string())?
        } else {
            let master = AgentClient::with_http(&req.reply_to, self.http.clone());
            let q = DataQuery { requester: Some(self.id), cached: Some(true), ..DataQuery::default() };
            master.get_data(v, &q).await.map_err(|e| e.to_string())?
        };
        self.local_put(v, bytes.clone());
        Ok(bytes)
    }

    async fn execute(self: Arc<Self>, req: ExecutionRequest) {
        let (mut bytes_local, mut bytes_fetched) = (0, 0);
        let outcome = 'run: {
            let mut inputs = Vec::with_capacity(req.input_manifest.len());
            for m in &req.input_manifest {
                let payload = match self.local_get(&m.version) {
                    Some(b) => {
                        bytes_local += b.len() as u64;
                        b
                    }
                    None => match self.fetch_input(&req, m.version).await {
                        Ok(b) => {
                            bytes_fetched += b.len() as u64;
                            b
                        }
                        Err(e) => {
                            break 'run Outcome::Failure {
                                kind: FailureKind::MissingInput,
                                error: format!("input {}: {e}", m.version),
                            };
                        }
                    },
                };
                match Value::decode(&payload) {
                    Ok(v) => inputs.push(v),
                    Err(e) => {
                        break 'run Outcome::Failure { kind: FailureKind::Executor, error: format!("input {}: {e}", m.version) };
                    }
                }
            }
            let result = self
                .registry
                .run(&req.spec.kind, inputs, req.spec.literals.clone(), req.outputs.len(), req.rank, req.gang_size, &self.http)
                .await;
            match result {
                Err(e) => Outcome::Failure { kind: FailureKind::Executor, error: e.to_string() },
                Ok(values) => {
                    let mut outputs = Vec::with_capacity(values.len());
                    for (v, value) in req.outputs.iter().zip(values) {
                        let payload = Bytes::from(value.encode());
                        outputs.push(ManifestEntry { version: *v, size_bytes: payload.len() as u64 });
                        if req.rank == 0 {
                            self.local_put(*v, payload);
                        }
                    }
                    Outcome::Success { outputs: if req.rank == 0 { outputs } else { Vec::new() } }
                }
            }
        };
        let c = &req.spec.constraints;
        if let Err(e) = self.pool.lock().unwrap().release(c.cores, c.memory_mb) {
            log::error!("{}: pool release after {}: {e}", self.config.name, req.task_id);
        }
        let report = CompletionReport {
            task_id: req.task_id,
            attempt: req.attempt,
            agent_id: self.id,
            rank: req.rank,
            outcome,
            bytes_local,
            bytes_fetched,
        };
        if req.master_id == self.id {
            self.on_completion(report).await;
        } else {
            self.send_report(&req.reply_to, report).await;
        }
    }

    /// At-least-once delivery of a completion report.
    async fn send_report(&self, reply_to: &str, report: CompletionReport) {
        let master = AgentClient::with_http(reply_to, self.http.clone());
        let mut delay = Duration::from_millis(100);
        for _ in 0..8 {
            match master.report_completion(&report).await {
                Ok(_) => return,
                Err(ClientError::Status { status, .. }) if status < 500 => return,
                Err(e) => log::warn!("{}: completion of {} not delivered: {e}", self.config.name, report.task_id),
            }
            tokio::time::sleep(delay).await;
            delay = (delay * 3).min(Duration::from_secs(5));
        }
        log::error!("{}: giving up on completion of {} attempt {}", self.config.name, report.task_id, report.attempt);
    }
}
