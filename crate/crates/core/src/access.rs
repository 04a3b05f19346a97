//! Access processing: turns registered task accesses into a dependency DAG.
//!
//! Writes never mutate a datum in place. Every OUT/INOUT access allocates
//! the next [`DataVersion`], so the only edges in the graph are
//! read-after-write edges from the producer of a version to its readers.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AgentId, ApplicationId, DataId, TaskId};
use crate::model::{
    transition, IllegalTransition, LifecycleEvent, ResourceConstraints, SpecError, TaskSpec,
    TaskState,
};
use crate::model::DataVersion;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("unknown application {0}")]
    UnknownApplication(ApplicationId),
    #[error("application {0} is closed")]
    ApplicationClosed(ApplicationId),
    #[error("application {0} already exists")]
    DuplicateApplication(ApplicationId),
    #[error("data {0} was never written nor put")]
    UnknownData(DataId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("put of {data} expected version {expected}, got {got}")]
    VersionMismatch { data: DataId, expected: u64, got: u64 },
    #[error(transparent)]
    InvalidSpec(#[from] SpecError),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub task_id: TaskId,
    pub spec: TaskSpec,
    pub state: TaskState,
    pub reads: Vec<DataVersion>,
    pub writes: Vec<DataVersion>,
    pub preds: BTreeSet<TaskId>,
    pub succs: BTreeSet<TaskId>,
    pub assigned_agent: Option<AgentId>,
    /// Every agent of a gang reservation, leader first. Empty for single-node tasks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gang_agents: Vec<AgentId>,
    pub attempt: u32,
    /// Global registration sequence number; orders scheduling.
    pub seq: u64,
}

/// Producer of the highest version of a datum. `task` is `None` for explicit puts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastWriter {
    pub task: Option<TaskId>,
    pub version: DataVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepGraph {
    pub app: ApplicationId,
    pub nodes: BTreeMap<TaskId, TaskNode>,
    pub last_writer: BTreeMap<DataId, LastWriter>,
    pub registration_order: Vec<TaskId>,
    #[serde(default = "default_open")]
    pub open: bool,
    #[serde(skip)]
    ready: BTreeSet<(u64, TaskId)>,
}

fn default_open() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registered {
    Ready,
    Waiting,
    /// An input comes from a task that can no longer produce it.
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Completion {
    pub newly_ready: Vec<TaskId>,
    /// The report belonged to an older attempt or repeated an accepted one.
    pub ignored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    Executor,
    AgentLost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Resubmitted { attempt: u32 },
    Terminal { cancelled: Vec<TaskId> },
    Ignored,
}

impl DepGraph {
    pub fn new(app: ApplicationId) -> Self {
        Self {
            app,
            nodes: BTreeMap::new(),
            last_writer: BTreeMap::new(),
            registration_order: Vec::new(),
            open: true,
            ready: BTreeSet::new(),
        }
    }

    fn ensure_open(&self) -> Result<(), AccessError> {
        if self.open {
            Ok(())
        } else {
            Err(AccessError::ApplicationClosed(self.app))
        }
    }

    /// Explicit put by the main program. A fresh datum starts at version 0.
    pub fn put(&mut self, data: DataId) -> Result<DataVersion, AccessError> {
        self.ensure_open()?;
        let version = match self.last_writer.get(&data) {
            Some(lw) => lw.version.next(),
            None => DataVersion::new(data, 0),
        };
        self.last_writer.insert(data, LastWriter { task: None, version });
        Ok(version)
    }

    pub fn next_put_version(&self, data: DataId) -> DataVersion {
        match self.last_writer.get(&data) {
            Some(lw) => lw.version.next(),
            None => DataVersion::new(data, 0),
        }
    }

    pub fn register(&mut self, task_id: TaskId, seq: u64, spec: TaskSpec) -> Result<Registered, AccessError> {
        self.ensure_open()?;
        spec.validate()?;
        // Validate every read before touching any state so a failed
        // registration leaves nothing behind.
        for p in spec.inputs() {
            if !self.last_writer.contains_key(&p.data) {
                return Err(AccessError::UnknownData(p.data));
            }
        }

        let mut reads = Vec::new();
        let mut writes = Vec::new();
        let mut preds = BTreeSet::new();
        let mut doomed = false;
        for p in &spec.params {
            if p.mode.reads() {
                let lw = self.last_writer[&p.data];
                reads.push(lw.version);
                if let Some(producer) = lw.task {
                    match self.nodes[&producer].state {
                        TaskState::Completed => {}
                        TaskState::Failed | TaskState::Cancelled => {
                            doomed = true;
                            preds.insert(producer);
                        }
                        _ => {
                            preds.insert(producer);
                        }
                    }
                }
            }
        }
        for p in &spec.params {
            if p.mode.writes() {
                let version = match self.last_writer.get(&p.data) {
                    Some(lw) => lw.version.next(),
                    None => DataVersion::new(p.data, 1),
                };
                writes.push(version);
                self.last_writer.insert(p.data, LastWriter { task: Some(task_id), version });
            }
        }

        for pred in &preds {
            self.nodes.get_mut(pred).expect("pred exists").succs.insert(task_id);
        }
        let (state, outcome) = if doomed {
            (transition(TaskState::Registered, LifecycleEvent::Cancel)?, Registered::Cancelled)
        } else if preds.is_empty() {
            (transition(TaskState::Registered, LifecycleEvent::DepsSatisfied)?, Registered::Ready)
        } else {
            (TaskState::Registered, Registered::Waiting)
        };
        if state == TaskState::Ready {
            self.ready.insert((seq, task_id));
        }
        self.nodes.insert(
            task_id,
            TaskNode {
                task_id,
                spec,
                state,
                reads,
                writes,
                preds,
                succs: BTreeSet::new(),
                assigned_agent: None,
                gang_agents: Vec::new(),
                attempt: 1,
                seq,
            },
        );
        self.registration_order.push(task_id);
        Ok(outcome)
    }

    pub fn node(&self, task: TaskId) -> Result<&TaskNode, AccessError> {
        self.nodes.get(&task).ok_or(AccessError::UnknownTask(task))
    }

    fn node_mut(&mut self, task: TaskId) -> Result<&mut TaskNode, AccessError> {
        self.nodes.get_mut(&task).ok_or(AccessError::UnknownTask(task))
    }

    fn apply(&mut self, task: TaskId, event: LifecycleEvent) -> Result<TaskState, AccessError> {
        let node = self.node_mut(task)?;
        let next = transition(node.state, event)?;
        let was_ready = node.state == TaskState::Ready;
        node.state = next;
        let seq = node.seq;
        if was_ready && next != TaskState::Ready {
            self.ready.remove(&(seq, task));
        } else if next == TaskState::Ready {
            self.ready.insert((seq, task));
        }
        Ok(next)
    }

    pub fn mark_scheduled(&mut self, task: TaskId, agents: &[AgentId]) -> Result<(), AccessError> {
        self.apply(task, LifecycleEvent::Assigned)?;
        let node = self.node_mut(task)?;
        node.assigned_agent = agents.first().copied();
        node.gang_agents = if agents.len() > 1 { agents.to_vec() } else { Vec::new() };
        Ok(())
    }

    /// Capacity rejection by the target: back to READY, same attempt.
    pub fn mark_rejected(&mut self, task: TaskId, attempt: u32) -> Result<bool, AccessError> {
        let node = self.node(task)?;
        if node.attempt != attempt || node.state != TaskState::Scheduled {
            return Ok(false);
        }
        self.apply(task, LifecycleEvent::Rejected)?;
        let node = self.node_mut(task)?;
        node.assigned_agent = None;
        node.gang_agents.clear();
        Ok(true)
    }

    pub fn mark_running(&mut self, task: TaskId, attempt: u32) -> Result<bool, AccessError> {
        let node = self.node(task)?;
        if node.attempt != attempt || node.state != TaskState::Scheduled {
            return Ok(false);
        }
        self.apply(task, LifecycleEvent::Started)?;
        Ok(true)
    }

    pub fn complete(&mut self, task: TaskId, attempt: u32) -> Result<Completion, AccessError> {
        let node = self.node(task)?;
        if node.attempt != attempt {
            return Ok(Completion { newly_ready: Vec::new(), ignored: true });
        }
        match node.state {
            TaskState::Completed | TaskState::Cancelled | TaskState::Failed => {
                return Ok(Completion { newly_ready: Vec::new(), ignored: true });
            }
            TaskState::Scheduled => {
                self.apply(task, LifecycleEvent::Started)?;
            }
            _ => {}
        }
        self.apply(task, LifecycleEvent::ExecutorSuccess)?;

        let mut succs: Vec<TaskId> = self.nodes[&task].succs.iter().copied().collect();
        succs.sort_by_key(|s| self.nodes[s].seq);
        let mut newly_ready = Vec::new();
        for s in succs {
            let node = &self.nodes[&s];
            if node.state != TaskState::Registered {
                continue;
            }
            let satisfied = node.preds.iter().all(|p| self.nodes[p].state == TaskState::Completed);
            if satisfied {
                self.apply(s, LifecycleEvent::DepsSatisfied)?;
                newly_ready.push(s);
            }
        }
        Ok(Completion { newly_ready, ignored: false })
    }

    pub fn fail(
        &mut self,
        task: TaskId,
        attempt: u32,
        cause: FailureCause,
        max_attempts: u32,
    ) -> Result<Failure, AccessError> {
        let node = self.node(task)?;
        if node.attempt != attempt {
            return Ok(Failure::Ignored);
        }
        match (node.state, cause) {
            (TaskState::Scheduled, FailureCause::Executor) => {
                self.apply(task, LifecycleEvent::Started)?;
                self.apply(task, LifecycleEvent::ExecutorFailure)?;
            }
            (TaskState::Running, FailureCause::Executor) => {
                self.apply(task, LifecycleEvent::ExecutorFailure)?;
            }
            (TaskState::Scheduled | TaskState::Running, FailureCause::AgentLost) => {
                self.apply(task, LifecycleEvent::AgentLost)?;
            }
            (TaskState::Completed | TaskState::Failed | TaskState::Cancelled, _) => {
                return Ok(Failure::Ignored);
            }
            (state, _) => {
                let event = match cause {
                    FailureCause::Executor => LifecycleEvent::ExecutorFailure,
                    FailureCause::AgentLost => LifecycleEvent::AgentLost,
                };
                return Err(IllegalTransition { state, event }.into());
            }
        }

        let node = self.node_mut(task)?;
        node.assigned_agent = None;
        node.gang_agents.clear();
        if node.attempt < max_attempts {
            self.apply(task, LifecycleEvent::Resubmit)?;
            self.apply(task, LifecycleEvent::Requeue)?;
            let node = self.node_mut(task)?;
            node.attempt += 1;
            Ok(Failure::Resubmitted { attempt: node.attempt })
        } else {
            Ok(Failure::Terminal { cancelled: self.cancel_successors(task)? })
        }
    }

    /// Cancels every non-terminal transitive successor of `task`.
    fn cancel_successors(&mut self, task: TaskId) -> Result<Vec<TaskId>, AccessError> {
        let mut cancelled = Vec::new();
        let mut queue: VecDeque<TaskId> = self.nodes[&task].succs.iter().copied().collect();
        let mut seen = BTreeSet::new();
        while let Some(t) = queue.pop_front() {
            if !seen.insert(t) {
                continue;
            }
            if !self.nodes[&t].state.is_terminal() {
                self.apply(t, LifecycleEvent::Cancel)?;
                cancelled.push(t);
            }
            queue.extend(self.nodes[&t].succs.iter().copied());
        }
        Ok(cancelled)
    }

    pub fn ready(&self) -> impl Iterator<Item = &TaskNode> {
        self.ready.iter().map(|(_, t)| &self.nodes[t])
    }

    pub fn is_quiescent(&self) -> bool {
        self.nodes.values().all(|n| n.state.is_terminal())
    }

    pub fn counts(&self) -> BTreeMap<TaskState, usize> {
        let mut counts = BTreeMap::new();
        for n in self.nodes.values() {
            *counts.entry(n.state).or_insert(0) += 1;
        }
        counts
    }

    pub fn edges(&self) -> Vec<(TaskId, TaskId)> {
        let mut edges = Vec::new();
        for id in &self.registration_order {
            for s in &self.nodes[id].succs {
                edges.push((*id, *s));
            }
        }
        edges
    }

    /// Kahn's algorithm; `None` means the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<TaskId>> {
        let mut indegree: HashMap<TaskId, usize> =
            self.nodes.iter().map(|(id, n)| (*id, n.preds.len())).collect();
        let mut queue: VecDeque<TaskId> = self
            .registration_order
            .iter()
            .filter(|id| indegree[id] == 0)
            .copied()
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(t) = queue.pop_front() {
            order.push(t);
            for s in &self.nodes[&t].succs {
                let d = indegree.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(*s);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// One line per task in registration order: `#idx id STATE label <- preds`.
    pub fn to_listing(&self) -> String {
        let index: HashMap<TaskId, usize> =
            self.registration_order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let mut out = String::new();
        for (i, id) in self.registration_order.iter().enumerate() {
            let n = &self.nodes[id];
            let preds: Vec<String> = n.preds.iter().map(|p| format!("#{}", index[p])).collect();
            let _ = writeln!(
                out,
                "#{i} {id} {} {} attempt={} <- [{}]",
                n.state,
                n.spec.kind.label(),
                n.attempt,
                preds.join(", ")
            );
        }
        out
    }

    /// Graphviz rendering.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph tasks {\n  rankdir=LR;\n");
        for (i, id) in self.registration_order.iter().enumerate() {
            let n = &self.nodes[id];
            let _ = writeln!(
                out,
                "  \"{id}\" [label=\"#{i} {}\\n{}\"];",
                n.spec.kind.label().replace('"', "'"),
                n.state
            );
        }
        for (a, b) in self.edges() {
            let _ = writeln!(out, "  \"{a}\" -> \"{b}\";");
        }
        out.push_str("}\n");
        out
    }
}

/// Scheduling-relevant view of a READY task.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadyTask {
    pub seq: u64,
    pub task_id: TaskId,
    pub app: ApplicationId,
    pub attempt: u32,
    pub constraints: ResourceConstraints,
    pub inputs: Vec<DataVersion>,
}

impl ReadyTask {
    fn from_node(app: ApplicationId, n: &TaskNode) -> Self {
        Self {
            seq: n.seq,
            task_id: n.task_id,
            app,
            attempt: n.attempt,
            constraints: n.spec.constraints.clone(),
            inputs: n.reads.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicationSummary {
    pub app: ApplicationId,
    pub open: bool,
    pub done: bool,
    pub total: usize,
    pub counts: BTreeMap<TaskState, usize>,
    pub last_writer: BTreeMap<DataId, DataVersion>,
}

impl ApplicationSummary {
    pub fn count(&self, state: TaskState) -> usize {
        self.counts.get(&state).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub task_id: TaskId,
    pub app: ApplicationId,
    pub state: TaskState,
    pub attempt: u32,
    pub assigned_agent: Option<AgentId>,
}

struct AppSlot {
    graph: Mutex<DepGraph>,
    changed: Condvar,
}

/// Thread-safe front of the per-application dependency graphs.
///
/// Registration for one application is serialized by that application's
/// lock; different applications proceed independently.
#[derive(Default)]
pub struct AccessProcessor {
    apps: RwLock<HashMap<ApplicationId, Arc<AppSlot>>>,
    tasks: RwLock<HashMap<TaskId, ApplicationId>>,
    seq: AtomicU64,
}

impl AccessProcessor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_application(&self, app: ApplicationId) -> Result<(), AccessError> {
        let mut apps = self.apps.write().unwrap();
        if apps.contains_key(&app) {
            return Err(AccessError::DuplicateApplication(app));
        }
        apps.insert(
            app,
            Arc::new(AppSlot { graph: Mutex::new(DepGraph::new(app)), changed: Condvar::new() }),
        );
        Ok(())
    }

    pub fn applications(&self) -> Vec<ApplicationId> {
        let mut ids: Vec<_> = self.apps.read().unwrap().keys().copied().collect();
        ids.sort();
        ids
    }

    fn slot(&self, app: ApplicationId) -> Result<Arc<AppSlot>, AccessError> {
        self.apps.read().unwrap().get(&app).cloned().ok_or(AccessError::UnknownApplication(app))
    }

    fn slot_of_task(&self, task: TaskId) -> Result<Arc<AppSlot>, AccessError> {
        let app = *self.tasks.read().unwrap().get(&task).ok_or(AccessError::UnknownTask(task))?;
        self.slot(app)
    }

    fn with_task<R>(
        &self,
        task: TaskId,
        f: impl FnOnce(&mut DepGraph) -> Result<R, AccessError>,
    ) -> Result<R, AccessError> {
        let slot = self.slot_of_task(task)?;
        let mut g = slot.graph.lock().unwrap();
        let r = f(&mut g);
        slot.changed.notify_all();
        r
    }

    pub fn put(&self, app: ApplicationId, data: DataId) -> Result<DataVersion, AccessError> {
        self.slot(app)?.graph.lock().unwrap().put(data)
    }

    /// Version the next explicit put of `data` would create.
    pub fn next_put_version(&self, app: ApplicationId, data: DataId) -> Result<DataVersion, AccessError> {
        Ok(self.slot(app)?.graph.lock().unwrap().next_put_version(data))
    }

    /// Put with a caller-chosen version; it must be the next one.
    pub fn put_version(&self, app: ApplicationId, version: DataVersion) -> Result<(), AccessError> {
        let slot = self.slot(app)?;
        let mut g = slot.graph.lock().unwrap();
        let expected = g.next_put_version(version.data);
        if expected != version {
            return Err(AccessError::VersionMismatch {
                data: version.data,
                expected: expected.version,
                got: version.version,
            });
        }
        g.put(version.data).map(|_| ())
    }

    pub fn register_task(&self, spec: TaskSpec) -> Result<(TaskId, Registered), AccessError> {
        let slot = self.slot(spec.app)?;
        let task_id = TaskId::new();
        let mut g = slot.graph.lock().unwrap();
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let outcome = g.register(task_id, seq, spec)?;
        // Index before releasing the graph lock so the node is never
        // visible without being resolvable.
        self.tasks.write().unwrap().insert(task_id, g.app);
        drop(g);
        slot.changed.notify_all();
        Ok((task_id, outcome))
    }

    /// READY tasks across all applications in registration order.
    ///
    /// Tasks rejected by `eligible` are skipped; at most `limit` tasks are returned.
    pub fn ready_tasks(
        &self,
        mut eligible: impl FnMut(&ResourceConstraints) -> bool,
        limit: usize,
    ) -> Vec<ReadyTask> {
        let slots: Vec<Arc<AppSlot>> = self.apps.read().unwrap().values().cloned().collect();
        let mut out = Vec::new();
        for slot in slots {
            let g = slot.graph.lock().unwrap();
            out.extend(
                g.ready()
                    .filter(|n| eligible(&n.spec.constraints))
                    .take(limit)
                    .map(|n| ReadyTask::from_node(g.app, n)),
            );
        }
        out.sort_by_key(|t| t.seq);
        out.truncate(limit);
        out
    }

    pub fn node(&self, task: TaskId) -> Result<TaskNode, AccessError> {
        let slot = self.slot_of_task(task)?;
        let g = slot.graph.lock().unwrap();
        g.node(task).cloned()
    }

    pub fn task_status(&self, task: TaskId) -> Result<TaskStatus, AccessError> {
        let slot = self.slot_of_task(task)?;
        let g = slot.graph.lock().unwrap();
        let n = g.node(task)?;
        Ok(TaskStatus {
            task_id: task,
            app: g.app,
            state: n.state,
            attempt: n.attempt,
            assigned_agent: n.assigned_agent,
        })
    }

    pub fn mark_scheduled(&self, task: TaskId, agents: &[AgentId]) -> Result<(), AccessError> {
        self.with_task(task, |g| g.mark_scheduled(task, agents))
    }

    pub fn mark_running(&self, task: TaskId, attempt: u32) -> Result<bool, AccessError> {
        self.with_task(task, |g| g.mark_running(task, attempt))
    }

    pub fn mark_rejected(&self, task: TaskId, attempt: u32) -> Result<bool, AccessError> {
        self.with_task(task, |g| g.mark_rejected(task, attempt))
    }

    pub fn notify_completion(&self, task: TaskId, attempt: u32) -> Result<Completion, AccessError> {
        self.with_task(task, |g| g.complete(task, attempt))
    }

    pub fn notify_failure(
        &self,
        task: TaskId,
        attempt: u32,
        cause: FailureCause,
        max_attempts: u32,
    ) -> Result<Failure, AccessError> {
        self.with_task(task, |g| g.fail(task, attempt, cause, max_attempts))
    }

    pub fn summary(&self, app: ApplicationId) -> Result<ApplicationSummary, AccessError> {
        let slot = self.slot(app)?;
        let g = slot.graph.lock().unwrap();
        Ok(summarize(&g))
    }

    /// Blocks until every task of `app` is terminal, then closes it.
    pub fn wait_all(&self, app: ApplicationId) -> Result<ApplicationSummary, AccessError> {
        self.wait_all_timeout(app, None).map(|s| s.expect("no timeout"))
    }

    /// Like [`wait_all`](Self::wait_all); returns `Ok(None)` on timeout and leaves the app open.
    pub fn wait_all_timeout(
        &self,
        app: ApplicationId,
        timeout: Option<Duration>,
    ) -> Result<Option<ApplicationSummary>, AccessError> {
        let slot = self.slot(app)?;
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut g = slot.graph.lock().unwrap();
        while !g.is_quiescent() {
            g = match deadline {
                None => slot.changed.wait(g).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    slot.changed.wait_timeout(g, d - now).unwrap().0
                }
            };
        }
        g.open = false;
        let summary = summarize(&g);
        drop(g);
        slot.changed.notify_all();
        Ok(Some(summary))
    }

    pub fn graph_snapshot(&self, app: ApplicationId) -> Result<DepGraph, AccessError> {
        let slot = self.slot(app)?;
        let g = slot.graph.lock().unwrap();
        Ok(g.clone())
    }
}

fn summarize(g: &DepGraph) -> ApplicationSummary {
    ApplicationSummary {
        app: g.app,
        open: g.open,
        done: g.is_quiescent(),
        total: g.nodes.len(),
        counts: g.counts(),
        last_writer: g.last_writer.iter().map(|(d, lw)| (*d, lw.version)).collect(),
    }
}
