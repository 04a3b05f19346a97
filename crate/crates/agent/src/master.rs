//! Application-master role: registration, the scheduling loop, dispatch,
//! completion handling and failure recovery.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use taskmesh_core::access::{AccessError, Failure, FailureCause, Registered};
use taskmesh_core::recovery::{reclaim, Liveness, Probe};
use taskmesh_core::scheduler::{filter_candidates, is_satisfiable, Assignment, DeferReason, SchedulerError, ViewChange};
use taskmesh_core::trace::TraceEvent;
use taskmesh_core::{AgentId, ApplicationId, ResourceDelta, ResourceView, TaskId, TaskSpec, TaskState};
use tokio::task::JoinSet;

use crate::agent::{Agent, IntakeError};
use crate::client::{AgentClient, ClientError};
use crate::protocol::{CompletionReport, ExecutionRequest, ManifestEntry, Outcome, Registration, ResourcesSnapshot};
use crate::sink::now_ms;

type BoxFuture = std::pin::Pin<Box<dyn std::future::Future<Output = ()> + Send>>;

impl Agent {
    pub fn register_task(self: &Arc<Self>, spec: TaskSpec) -> Result<Registration, AccessError> {
        let app = spec.app;
        let constraints = spec.constraints.clone();
        let (task_id, outcome) = self.ap.register_task(spec)?;
        match outcome {
            Registered::Ready => {
                self.emit(TraceEvent::Ready { app, task_id, attempt: 1 });
                if !is_satisfiable(&constraints, self.sched.lock().unwrap().view()) {
                    self.report_defer(task_id, 1, DeferReason::Unsatisfiable);
                }
                self.wake.notify_one();
            }
            Registered::Cancelled => self.emit(TraceEvent::Cancel { task_id }),
            Registered::Waiting => {}
        }
        let state = match outcome {
            Registered::Ready => TaskState::Ready,
            Registered::Waiting => TaskState::Registered,
            Registered::Cancelled => TaskState::Cancelled,
        };
        Ok(Registration { task_id, state })
    }

    fn report_defer(&self, task_id: TaskId, attempt: u32, reason: DeferReason) {
        if self.unsat_reported.lock().unwrap().insert((task_id, attempt)) {
            self.emit(TraceEvent::Defer { task_id, reason });
        }
    }

    fn emit_ready(&self, task_id: TaskId) {
        if let Ok(s) = self.ap.task_status(task_id) {
            self.emit(TraceEvent::Ready { app: s.app, task_id, attempt: s.attempt });
        }
    }

    /// READY tasks of `app` that no agent in the current view could ever host.
    pub fn unschedulable(&self, app: ApplicationId) -> Vec<TaskId> {
        let Ok(g) = self.ap.graph_snapshot(app) else { return Vec::new() };
        let sched = self.sched.lock().unwrap();
        let mut out: Vec<(u64, TaskId)> = g
            .nodes
            .values()
            .filter(|n| n.state == TaskState::Ready && !is_satisfiable(&n.spec.constraints, sched.view()))
            .map(|n| (n.seq, n.task_id))
            .collect();
        out.sort();
        out.into_iter().map(|(_, t)| t).collect()
    }

    pub fn view(&self) -> ResourceView {
        self.sched.lock().unwrap().view().clone()
    }

    pub fn resources_snapshot(&self) -> ResourcesSnapshot {
        ResourcesSnapshot {
            agent_id: self.id,
            pool: self.pool(),
            view: self.view(),
            liveness: self.liveness.lock().unwrap().records().cloned().collect(),
        }
    }

    /// One greedy pass; returns the assignments to dispatch.
    pub(crate) fn schedule_pass(&self) -> Vec<Assignment> {
        let mut sched = self.sched.lock().unwrap();
        let free = sched.view().total_free_cores();
        if free == 0 {
            return Vec::new();
        }
        let view = sched.view().clone();
        let ready = self.ap.ready_tasks(|c| filter_candidates(c, &view).len() >= c.nodes as usize, free as usize);
        if ready.is_empty() {
            return Vec::new();
        }
        let placement = {
            let catalog = self.catalog.lock().unwrap();
            let mut p = catalog.placement(ready.iter().flat_map(|t| t.inputs.iter()));
            let pending = self.pending.lock().unwrap();
            for v in ready.iter().flat_map(|t| t.inputs.iter()) {
                if let Some(b) = pending.get(v) {
                    p.insert(*v, b.len() as u64, [self.id].into());
                }
            }
            p
        };
        let outcome = sched.assign(&ready, &placement);
        let attempts: BTreeMap<TaskId, u32> = ready.iter().map(|t| (t.task_id, t.attempt)).collect();
        let mut out = Vec::with_capacity(outcome.assignments.len());
        for a in outcome.assignments {
            if let Err(e) = self.ap.mark_scheduled(a.task_id, &a.agent_ids) {
                log::error!("{}: mark_scheduled {}: {e}", self.config.name, a.task_id);
                sched.release(a.task_id, a.attempt);
                continue;
            }
            self.emit(TraceEvent::Assign {
                task_id: a.task_id,
                attempt: a.attempt,
                agents: a.agent_ids.clone(),
                locality: a.locality,
            });
            out.push(a);
        }
        drop(sched);
        for (task_id, reason) in outcome.deferred {
            self.report_defer(task_id, attempts.get(&task_id).copied().unwrap_or(1), reason);
        }
        out
    }

    pub(crate) async fn scheduler_loop(self: Arc<Self>) {
        loop {
            tokio::select! {
                _ = self.wake.notified() => {}
                _ = tokio::time::sleep(Duration::from_millis(100)) => {}
            }
            for a in self.schedule_pass() {
                let me = self.clone();
                let fut: BoxFuture = Box::pin(me.dispatch(a));
                tokio::spawn(fut);
            }
        }
    }

    fn wake_later(self: &Arc<Self>, d: Duration) {
        let me = self.clone();
        tokio::spawn(async move {
            tokio::time::sleep(d).await;
            me.wake.notify_one();
        });
    }

    async fn send_request(self: &Arc<Self>, agent: AgentId, req: ExecutionRequest) -> Result<(), IntakeError> {
        if agent == self.id {
            return self.intake(req);
        }
        let Some(client) = self.peer_client(agent) else {
            return Err(IntakeError::Unreachable(format!("no endpoint for {agent}")));
        };
        let mut last = String::new();
        for delay in [100u64, 300, 900, 0] {
            match client.execute(&req, Duration::from_secs(10)).await {
                Ok(()) => return Ok(()),
                Err(ClientError::Status { status: 409, .. }) => return Err(IntakeError::NoCapacity),
                Err(ClientError::Status { status: 503, .. }) => return Err(IntakeError::Draining),
                Err(ClientError::Status { status, message, .. }) if status < 500 => {
                    return Err(IntakeError::Invalid(message));
                }
                Err(e) => last = e.to_string(),
            }
            if delay > 0 {
                tokio::time::sleep(Duration::from_millis(delay)).await;
            }
        }
        Err(IntakeError::Unreachable(last))
    }

    /// Sends one assignment to its agents. Inputs still held only in master
    /// memory are persisted before any request leaves.
    pub(crate) async fn dispatch(self: Arc<Self>, a: Assignment) {
        let node = match self.ap.node(a.task_id) {
            Ok(n) if n.attempt == a.attempt && n.state == TaskState::Scheduled => n,
            _ => {
                self.sched.lock().unwrap().release(a.task_id, a.attempt);
                return;
            }
        };
        for v in &node.reads {
            if let Err(e) = self.persist_pending(*v).await {
                self.fail_assignment(&a, FailureCause::Executor, format!("persisting {v}: {e}"), None);
                return;
            }
        }
        let manifest: Vec<ManifestEntry> = {
            let catalog = self.catalog.lock().unwrap();
            node.reads
                .iter()
                .map(|v| ManifestEntry { version: *v, size_bytes: catalog.get(v).map_or(0, |e| e.size_bytes) })
                .collect()
        };
        let inputs_persisted = {
            let catalog = self.catalog.lock().unwrap();
            node.reads.iter().all(|v| catalog.contains(v))
        };
        let interceptor = self.interceptor.lock().unwrap().clone();
        let gang_size = a.agent_ids.len() as u32;
        for (rank, agent) in a.agent_ids.iter().copied().enumerate() {
            let req = ExecutionRequest {
                task_id: a.task_id,
                spec: node.spec.clone(),
                attempt: a.attempt,
                input_manifest: manifest.clone(),
                outputs: node.writes.clone(),
                reply_to: self.endpoint.clone(),
                master_id: self.id,
                rank: rank as u32,
                gang_size,
            };
            self.emit(TraceEvent::Dispatch { task_id: a.task_id, attempt: a.attempt, agent_id: agent, inputs_persisted });
            if let Some(f) = &interceptor {
                let catalog = self.catalog.lock().unwrap();
                f(&req, &|v| catalog.contains(v));
            }
            match self.send_request(agent, req).await {
                Ok(()) => {}
                Err(IntakeError::NoCapacity | IntakeError::Draining) if rank == 0 => {
                    let released = self.sched.lock().unwrap().release(a.task_id, a.attempt);
                    if let Some(r) = released {
                        self.emit(TraceEvent::Release { task_id: a.task_id, attempt: a.attempt, agents: r.agent_ids });
                        let _ = self.ap.mark_rejected(a.task_id, a.attempt);
                    }
                    self.wake_later(Duration::from_millis(50));
                    return;
                }
                Err(e @ (IntakeError::NoCapacity | IntakeError::Draining)) => {
                    self.fail_assignment(&a, FailureCause::Executor, format!("gang rank {rank} rejected: {e}"), Some(agent));
                    return;
                }
                Err(IntakeError::Unreachable(reason)) => {
                    log::warn!("{}: {agent} unreachable on dispatch: {reason}", self.config.name);
                    self.declare_dead(agent);
                    return;
                }
                Err(IntakeError::Invalid(reason)) => {
                    self.fail_assignment(&a, FailureCause::Executor, reason, Some(agent));
                    return;
                }
            }
        }
        let _ = self.ap.mark_running(a.task_id, a.attempt);
    }

    /// Handles a worker's report. Returns whether it was accepted.
    pub async fn on_completion(self: &Arc<Self>, r: CompletionReport) -> bool {
        let Some(a) = self.sched.lock().unwrap().assignment(r.task_id, r.attempt).cloned() else {
            return false;
        };
        if a.agent_ids.get(r.rank as usize) != Some(&r.agent_id) {
            return false;
        }
        if !self.seen_reports.lock().unwrap().insert((r.task_id, r.attempt, r.rank)) {
            return false;
        }
        let outputs = match r.outcome {
            Outcome::Failure { kind, error } => {
                self.fail_assignment(&a, FailureCause::Executor, format!("{kind:?}: {error}"), Some(r.agent_id));
                return true;
            }
            Outcome::Success { outputs } => outputs,
        };
        if r.rank == 0 {
            for o in &outputs {
                let bytes = if r.agent_id == self.id {
                    self.local_get(&o.version).ok_or_else(|| "output missing from own shard".to_string())
                } else {
                    match self.peer_client(r.agent_id) {
                        Some(c) => c.get_data(o.version, &crate::client::DataQuery::local()).await.map_err(|e| e.to_string()),
                        None => Err("worker left the view".to_string()),
                    }
                };
                let bytes = match bytes {
                    Ok(b) => b,
                    Err(e) => {
                        self.fail_assignment(&a, FailureCause::AgentLost, format!("collecting {}: {e}", o.version), Some(r.agent_id));
                        return true;
                    }
                };
                let holders = if r.agent_id == self.id { vec![self.id] } else { vec![r.agent_id, self.id] };
                self.local_put(o.version, bytes.clone());
                self.catalog.lock().unwrap().record(o.version, &bytes, holders);
                if r.agent_id != self.id {
                    self.emit(TraceEvent::Replicate { version: o.version, to: self.id, size_bytes: bytes.len() as u64 });
                }
            }
        }
        let (bytes_local, bytes_fetched) = {
            let mut gangs = self.gangs.lock().unwrap();
            let g = gangs.entry((r.task_id, r.attempt)).or_default();
            g.ranks.insert(r.rank);
            g.bytes_local += r.bytes_local;
            g.bytes_fetched += r.bytes_fetched;
            if g.ranks.len() < a.agent_ids.len() {
                return true;
            }
            let done = gangs.remove(&(r.task_id, r.attempt)).expect("present");
            (done.bytes_local, done.bytes_fetched)
        };
        let (completion, released) = {
            let mut sched = self.sched.lock().unwrap();
            if sched.assignment(r.task_id, r.attempt).is_none() {
                return false;
            }
            let c = self.ap.notify_completion(r.task_id, r.attempt);
            (c, sched.release(r.task_id, r.attempt))
        };
        let completion = match completion {
            Ok(c) => c,
            Err(e) => {
                log::error!("{}: completion of {}: {e}", self.config.name, r.task_id);
                return false;
            }
        };
        if !completion.ignored {
            self.emit(TraceEvent::Complete {
                task_id: r.task_id,
                attempt: r.attempt,
                agent_id: a.agent_ids[0],
                bytes_local,
                bytes_fetched,
            });
        }
        if let Some(rel) = released {
            self.emit(TraceEvent::Release { task_id: r.task_id, attempt: r.attempt, agents: rel.agent_ids });
        }
        for t in completion.newly_ready {
            self.emit_ready(t);
        }
        self.wake.notify_one();
        !completion.ignored
    }

    /// Releases an active assignment and records the failure of its attempt.
    pub(crate) fn fail_assignment(&self, a: &Assignment, cause: FailureCause, error: String, agent: Option<AgentId>) {
        let (failure, released) = {
            let mut sched = self.sched.lock().unwrap();
            let Some(rel) = sched.release(a.task_id, a.attempt) else { return };
            let f = self.ap.notify_failure(a.task_id, a.attempt, cause, self.config.recovery.max_attempts);
            (f, rel)
        };
        self.gangs.lock().unwrap().remove(&(a.task_id, a.attempt));
        self.emit(TraceEvent::Release { task_id: a.task_id, attempt: a.attempt, agents: released.agent_ids });
        match failure {
            Ok(Failure::Resubmitted { .. }) => {
                self.emit(TraceEvent::Fail { task_id: a.task_id, attempt: a.attempt, agent_id: agent, error, resubmitted: true });
                self.emit_ready(a.task_id);
            }
            Ok(Failure::Terminal { cancelled }) => {
                self.emit(TraceEvent::Fail { task_id: a.task_id, attempt: a.attempt, agent_id: agent, error, resubmitted: false });
                for t in cancelled {
                    self.emit(TraceEvent::Cancel { task_id: t });
                }
            }
            Ok(Failure::Ignored) => {}
            Err(e) => log::error!("{}: failure of {}: {e}", self.config.name, a.task_id),
        }
        self.wake.notify_one();
    }

    fn liveness_transition(&self, t: taskmesh_core::recovery::LivenessTransition) {
        self.emit(TraceEvent::Liveness { agent_id: t.agent_id, from: t.from, to: t.to });
    }

    /// Treats `agent` as failed: its tasks are resubmitted and its replicas forgotten.
    pub fn declare_dead(&self, agent: AgentId) {
        {
            let mut l = self.liveness.lock().unwrap();
            let now = now_ms();
            for _ in 0..self.config.recovery.max_misses {
                if let Some(t) = l.observe(agent, Probe::Missed, now) {
                    self.liveness_transition(t);
                }
            }
        }
        let outcome = {
            let mut sched = self.sched.lock().unwrap();
            if sched.view().get(&agent).is_none() {
                None
            } else {
                Some(reclaim(agent, &self.ap, &mut sched, self.config.recovery.max_attempts))
            }
        };
        if let Some(o) = outcome {
            let attempts: BTreeMap<TaskId, u32> = o.released.iter().map(|a| (a.task_id, a.attempt)).collect();
            for a in &o.released {
                self.emit(TraceEvent::Release { task_id: a.task_id, attempt: a.attempt, agents: a.agent_ids.clone() });
                self.gangs.lock().unwrap().remove(&(a.task_id, a.attempt));
            }
            let error = format!("agent {agent} lost");
            for t in &o.resubmitted {
                let attempt = attempts.get(t).copied().unwrap_or(0);
                self.emit(TraceEvent::Fail { task_id: *t, attempt, agent_id: Some(agent), error: error.clone(), resubmitted: true });
                self.emit_ready(*t);
            }
            for t in &o.failed {
                let attempt = attempts.get(t).copied().unwrap_or(0);
                self.emit(TraceEvent::Fail { task_id: *t, attempt, agent_id: Some(agent), error: error.clone(), resubmitted: false });
            }
            for t in &o.cancelled {
                self.emit(TraceEvent::Cancel { task_id: *t });
            }
            self.emit(TraceEvent::Resources { change: ViewChange::Removed(agent) });
        }
        self.purge(agent);
        self.peers.lock().unwrap().remove(&agent);
        self.wake.notify_one();
    }

    /// Probes every other agent in the view once per period.
    pub(crate) async fn probe_loop(self: Arc<Self>) {
        let period = self.config.recovery.probe_period();
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tick.tick().await;
            let targets: Vec<(AgentId, String)> = {
                let sched = self.sched.lock().unwrap();
                let peers = self.peers.lock().unwrap();
                sched
                    .view()
                    .agents
                    .keys()
                    .filter(|a| **a != self.id)
                    .filter_map(|a| peers.get(a).map(|ep| (*a, ep.clone())))
                    .collect()
            };
            let mut probes = JoinSet::new();
            for (agent, ep) in targets {
                let client = AgentClient::with_http(&ep, self.http.clone());
                probes.spawn(async move {
                    let ok = client.health(Some(period)).await.is_ok_and(|h| h.agent_id == agent);
                    (agent, ok)
                });
            }
            while let Some(res) = probes.join_next().await {
                let Ok((agent, ok)) = res else { continue };
                let t = {
                    let probe = if ok { Probe::Answered } else { Probe::Missed };
                    self.liveness.lock().unwrap().observe(agent, probe, now_ms())
                };
                if let Some(t) = t {
                    self.liveness_transition(t);
                    if t.to == Liveness::Dead {
                        self.declare_dead(agent);
                    }
                }
            }
        }
    }

    pub fn update_resources(&self, delta: ResourceDelta) -> Result<ResourceView, SchedulerError> {
        let (change, view) = {
            let mut sched = self.sched.lock().unwrap();
            let change = sched.update_resources(delta.clone())?;
            (change, sched.view().clone())
        };
        match &delta {
            ResourceDelta::Add(d) => {
                if d.agent_id != self.id {
                    self.peers.lock().unwrap().insert(d.agent_id, d.endpoint.clone());
                }
                self.liveness.lock().unwrap().track(d.agent_id, now_ms());
            }
            ResourceDelta::Remove { agent_id } => {
                if *agent_id == self.id {
                    self.set_draining(true);
                }
                if matches!(change, ViewChange::Removed(_)) {
                    self.liveness.lock().unwrap().forget(*agent_id);
                }
            }
            ResourceDelta::Resize { agent_id, cores, memory_mb } => {
                if *agent_id == self.id {
                    let mut pool = self.pool.lock().unwrap();
                    pool.total_cores = (*cores).max(pool.reserved_cores);
                    pool.total_memory_mb = (*memory_mb).max(pool.reserved_memory_mb);
                }
            }
        }
        self.emit(TraceEvent::Resources { change });
        self.wake.notify_one();
        Ok(view)
    }
}
