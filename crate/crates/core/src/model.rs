//! Domain types shared by every part of the runtime.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AgentId, ApplicationId, DataId};
use crate::value::Value;

/// An immutable version of a datum. Writes create the next version.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataVersion {
    pub data: DataId,
    pub version: u64,
}

impl DataVersion {
    pub fn new(data: DataId, version: u64) -> Self {
        Self { data, version }
    }

    pub fn next(&self) -> Self {
        Self { data: self.data, version: self.version + 1 }
    }
}

impl fmt::Debug for DataVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@v{}", self.data, self.version)
    }
}

impl fmt::Display for DataVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.data, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AccessMode {
    In,
    Out,
    #[serde(rename = "INOUT")]
    InOut,
}

impl AccessMode {
    pub fn reads(self) -> bool {
        matches!(self, AccessMode::In | AccessMode::InOut)
    }

    pub fn writes(self) -> bool {
        matches!(self, AccessMode::Out | AccessMode::InOut)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ProcessorKind {
    Cpu,
    Gpu,
}

impl std::str::FromStr for ProcessorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CPU" => Ok(ProcessorKind::Cpu),
            "GPU" => Ok(ProcessorKind::Gpu),
            other => Err(format!("unknown processor kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConstraints {
    pub cores: u32,
    pub memory_mb: u64,
    #[serde(default)]
    pub software_tags: BTreeSet<String>,
    pub processor_kind: ProcessorKind,
    /// Gang width; only GANG tasks may ask for more than one node.
    pub nodes: u32,
}

impl Default for ResourceConstraints {
    fn default() -> Self {
        Self {
            cores: 1,
            memory_mb: 0,
            software_tags: BTreeSet::new(),
            processor_kind: ProcessorKind::Cpu,
            nodes: 1,
        }
    }
}

impl ResourceConstraints {
    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cores = cores;
        self
    }

    pub fn with_memory_mb(mut self, memory_mb: u64) -> Self {
        self.memory_mb = memory_mb;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.software_tags.insert(tag.into());
        self
    }

    pub fn with_processor(mut self, kind: ProcessorKind) -> Self {
        self.processor_kind = kind;
        self
    }

    pub fn with_nodes(mut self, nodes: u32) -> Self {
        self.nodes = nodes;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    Builtin { function: String },
    Shell { command: String },
    Service { url: String, method: String },
    Gang { function: String },
}

impl TaskKind {
    pub fn builtin(function: impl Into<String>) -> Self {
        TaskKind::Builtin { function: function.into() }
    }

    pub fn shell(command: impl Into<String>) -> Self {
        TaskKind::Shell { command: command.into() }
    }

    pub fn gang(function: impl Into<String>) -> Self {
        TaskKind::Gang { function: function.into() }
    }

    pub fn label(&self) -> &str {
        match self {
            TaskKind::Builtin { function } | TaskKind::Gang { function } => function,
            TaskKind::Shell { command } => command,
            TaskKind::Service { url, .. } => url,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Param {
    pub data: DataId,
    pub mode: AccessMode,
}

impl Param {
    pub fn new(data: DataId, mode: AccessMode) -> Self {
        Self { data, mode }
    }
}

/// One task invocation as registered by an application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub app: ApplicationId,
    pub kind: TaskKind,
    pub params: Vec<Param>,
    #[serde(default)]
    pub literals: Vec<Value>,
    #[serde(default)]
    pub constraints: ResourceConstraints,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("data {0} appears more than once in the parameter list")]
    DuplicateParam(DataId),
    #[error("constraints must ask for at least one core")]
    ZeroCores,
    #[error("constraints must ask for at least one node")]
    ZeroNodes,
    #[error("only GANG tasks may span more than one node (asked for {0})")]
    MultiNodeNotGang(u32),
    #[error("task kind has an empty name")]
    EmptyName,
}

impl TaskSpec {
    pub fn new(app: ApplicationId, kind: TaskKind) -> Self {
        Self {
            app,
            kind,
            params: Vec::new(),
            literals: Vec::new(),
            constraints: ResourceConstraints::default(),
        }
    }

    pub fn param(mut self, data: DataId, mode: AccessMode) -> Self {
        self.params.push(Param::new(data, mode));
        self
    }

    pub fn literal(mut self, value: impl Into<Value>) -> Self {
        self.literals.push(value.into());
        self
    }

    pub fn constraints(mut self, constraints: ResourceConstraints) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let mut seen = BTreeSet::new();
        for p in &self.params {
            if !seen.insert(p.data) {
                return Err(SpecError::DuplicateParam(p.data));
            }
        }
        if self.constraints.cores == 0 {
            return Err(SpecError::ZeroCores);
        }
        if self.constraints.nodes == 0 {
            return Err(SpecError::ZeroNodes);
        }
        if self.constraints.nodes > 1 && !matches!(self.kind, TaskKind::Gang { .. }) {
            return Err(SpecError::MultiNodeNotGang(self.constraints.nodes));
        }
        if self.kind.label().is_empty() {
            return Err(SpecError::EmptyName);
        }
        Ok(())
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.mode.reads())
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.mode.writes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Registered,
    Ready,
    Scheduled,
    Running,
    Completed,
    Failed,
    Resubmitted,
    Cancelled,
}

impl TaskState {
    pub const ALL: [TaskState; 8] = [
        TaskState::Registered,
        TaskState::Ready,
        TaskState::Scheduled,
        TaskState::Running,
        TaskState::Completed,
        TaskState::Failed,
        TaskState::Resubmitted,
        TaskState::Cancelled,
    ];

    /// FAILED only persists when the retry budget is spent, so it counts as terminal.
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed | TaskState::Cancelled)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        let s = s.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    DepsSatisfied,
    Assigned,
    /// The target agent refused the request for lack of capacity.
    Rejected,
    Started,
    ExecutorSuccess,
    ExecutorFailure,
    /// The agent holding the task disappeared or could not be reached.
    AgentLost,
    Resubmit,
    Requeue,
    Cancel,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 10] = [
        LifecycleEvent::DepsSatisfied,
        LifecycleEvent::Assigned,
        LifecycleEvent::Rejected,
        LifecycleEvent::Started,
        LifecycleEvent::ExecutorSuccess,
        LifecycleEvent::ExecutorFailure,
        LifecycleEvent::AgentLost,
        LifecycleEvent::Resubmit,
        LifecycleEvent::Requeue,
        LifecycleEvent::Cancel,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {event:?} in state {state}")]
pub struct IllegalTransition {
    pub state: TaskState,
    pub event: LifecycleEvent,
}

pub fn transition(state: TaskState, event: LifecycleEvent) -> Result<TaskState, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskState as S;
    let next = match (state, event) {
        (S::Registered, E::DepsSatisfied) => S::Ready,
        (S::Ready, E::Assigned) => S::Scheduled,
        (S::Scheduled, E::Rejected) => S::Ready,
        (S::Scheduled, E::Started) => S::Running,
        (S::Running, E::ExecutorSuccess) => S::Completed,
        (S::Running, E::ExecutorFailure) => S::Failed,
        (S::Scheduled | S::Running, E::AgentLost) => S::Failed,
        (S::Failed, E::Resubmit) => S::Resubmitted,
        (S::Resubmitted, E::Requeue) => S::Ready,
        (S::Registered | S::Ready | S::Scheduled | S::Running | S::Resubmitted, E::Cancel) => {
            S::Cancelled
        }
        _ => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("insufficient capacity: asked {cores} cores / {memory_mb} MB, free {free_cores} cores / {free_memory_mb} MB")]
    Insufficient {
        cores: u32,
        memory_mb: u64,
        free_cores: u32,
        free_memory_mb: u64,
    },
    #[error("release of {cores} cores / {memory_mb} MB exceeds what is reserved")]
    OverRelease { cores: u32, memory_mb: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcePool {
    pub total_cores: u32,
    pub total_memory_mb: u64,
    pub reserved_cores: u32,
    pub reserved_memory_mb: u64,
}

impl ResourcePool {
    pub fn new(total_cores: u32, total_memory_mb: u64) -> Self {
        Self { total_cores, total_memory_mb, reserved_cores: 0, reserved_memory_mb: 0 }
    }

    pub fn free_cores(&self) -> u32 {
        self.total_cores - self.reserved_cores
    }

    pub fn free_memory_mb(&self) -> u64 {
        self.total_memory_mb - self.reserved_memory_mb
    }

    pub fn fits(&self, cores: u32, memory_mb: u64) -> bool {
        cores <= self.free_cores() && memory_mb <= self.free_memory_mb()
    }

    pub fn reserve(&mut self, cores: u32, memory_mb: u64) -> Result<(), PoolError> {
        if !self.fits(cores, memory_mb) {
            return Err(PoolError::Insufficient {
                cores,
                memory_mb,
                free_cores: self.free_cores(),
                free_memory_mb: self.free_memory_mb(),
            });
        }
        self.reserved_cores += cores;
        self.reserved_memory_mb += memory_mb;
        Ok(())
    }

    pub fn release(&mut self, cores: u32, memory_mb: u64) -> Result<(), PoolError> {
        if cores > self.reserved_cores || memory_mb > self.reserved_memory_mb {
            return Err(PoolError::OverRelease { cores, memory_mb });
        }
        self.reserved_cores -= cores;
        self.reserved_memory_mb -= memory_mb;
        Ok(())
    }

    pub fn is_idle(&self) -> bool {
        self.reserved_cores == 0 && self.reserved_memory_mb == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub agent_id: AgentId,
    /// `host:port` of the agent's HTTP interface.
    pub endpoint: String,
    pub capacity: ResourcePool,
    #[serde(default)]
    pub software_tags: BTreeSet<String>,
    pub processor_kinds: BTreeSet<ProcessorKind>,
}

impl AgentDescriptor {
    pub fn new(agent_id: AgentId, endpoint: impl Into<String>, cores: u32, memory_mb: u64) -> Self {
        Self {
            agent_id,
            endpoint: endpoint.into(),
            capacity: ResourcePool::new(cores, memory_mb),
            software_tags: BTreeSet::new(),
            processor_kinds: BTreeSet::from([ProcessorKind::Cpu]),
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

    pub fn base_url(&self) -> String {
        if self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://") {
            self.endpoint.clone()
        } else {
            format!("http://{}", self.endpoint)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::ApplicationId;

    #[test]
    fn defining_transitions() {
        assert_eq!(
            transition(TaskState::Registered, LifecycleEvent::DepsSatisfied),
            Ok(TaskState::Ready)
        );
        assert_eq!(
            transition(TaskState::Running, LifecycleEvent::ExecutorSuccess),
            Ok(TaskState::Completed)
        );
        assert_eq!(
            transition(TaskState::Ready, LifecycleEvent::ExecutorSuccess),
            Err(IllegalTransition { state: TaskState::Ready, event: LifecycleEvent::ExecutorSuccess })
        );
    }

    // Table written out by hand; every pair not listed must be illegal.
    #[test]
    fn transition_table_is_closed() {
        use LifecycleEvent as E;
        use TaskState as S;
        let legal: &[(S, E, S)] = &[
            (S::Registered, E::DepsSatisfied, S::Ready),
            (S::Registered, E::Cancel, S::Cancelled),
            (S::Ready, E::Assigned, S::Scheduled),
            (S::Ready, E::Cancel, S::Cancelled),
            (S::Scheduled, E::Started, S::Running),
            (S::Scheduled, E::Rejected, S::Ready),
            (S::Scheduled, E::AgentLost, S::Failed),
            (S::Scheduled, E::Cancel, S::Cancelled),
            (S::Running, E::ExecutorSuccess, S::Completed),
            (S::Running, E::ExecutorFailure, S::Failed),
            (S::Running, E::AgentLost, S::Failed),
            (S::Running, E::Cancel, S::Cancelled),
            (S::Failed, E::Resubmit, S::Resubmitted),
            (S::Resubmitted, E::Requeue, S::Ready),
            (S::Resubmitted, E::Cancel, S::Cancelled),
        ];
        let mut count = 0;
        for s in S::ALL {
            for e in E::ALL {
                let expected = legal.iter().find(|(a, b, _)| *a == s && *b == e).map(|t| t.2);
                match (transition(s, e), expected) {
                    (Ok(got), Some(want)) => {
                        assert_eq!(got, want);
                        count += 1;
                    }
                    (Err(err), None) => assert_eq!(err, IllegalTransition { state: s, event: e }),
                    (got, want) => panic!("({s:?}, {e:?}): got {got:?}, want {want:?}"),
                }
            }
        }
        assert_eq!(count, legal.len());
    }

    #[test]
    fn nothing_reaches_scheduled_without_ready() {
        for s in TaskState::ALL {
            for e in LifecycleEvent::ALL {
                if transition(s, e) == Ok(TaskState::Scheduled) {
                    assert_eq!(s, TaskState::Ready);
                }
            }
        }
    }

    #[test]
    fn terminal_states_are_sinks_except_failed_resubmit() {
        for s in [TaskState::Completed, TaskState::Cancelled] {
            for e in LifecycleEvent::ALL {
                assert!(transition(s, e).is_err());
            }
        }
    }

    #[test]
    fn spec_validation() {
        let app = ApplicationId::new();
        let x = DataId::new();
        let dup = TaskSpec::new(app, TaskKind::builtin("f"))
            .param(x, AccessMode::In)
            .param(x, AccessMode::Out);
        assert_eq!(dup.validate(), Err(SpecError::DuplicateParam(x)));

        let wide = TaskSpec::new(app, TaskKind::builtin("f"))
            .constraints(ResourceConstraints::default().with_nodes(2));
        assert_eq!(wide.validate(), Err(SpecError::MultiNodeNotGang(2)));

        let gang = TaskSpec::new(app, TaskKind::gang("g"))
            .constraints(ResourceConstraints::default().with_nodes(2));
        assert_eq!(gang.validate(), Ok(()));

        let zero = TaskSpec::new(app, TaskKind::builtin("f"))
            .constraints(ResourceConstraints::default().with_cores(0));
        assert_eq!(zero.validate(), Err(SpecError::ZeroCores));
    }

    #[test]
    fn pool_reserve_release() {
        let mut pool = ResourcePool::new(8, 1024);
        pool.reserve(4, 512).unwrap();
        assert_eq!(pool.free_cores(), 4);
        assert!(pool.reserve(5, 0).is_err());
        pool.release(4, 512).unwrap();
        assert_eq!(pool, ResourcePool::new(8, 1024));
        assert!(pool.release(1, 0).is_err());
    }

    #[test]
    fn canonical_field_names() {
        let app = ApplicationId::from_u128(1);
        let x = DataId::from_u128(2);
        let spec = TaskSpec::new(app, TaskKind::builtin("add")).param(x, AccessMode::InOut);
        let v = serde_json::to_value(&spec).unwrap();
        assert_eq!(v["kind"]["BUILTIN"]["function"], "add");
        assert_eq!(v["params"][0]["mode"], "INOUT");
        assert_eq!(v["constraints"]["processor_kind"], "CPU");
        assert_eq!(serde_json::to_value(TaskState::Resubmitted).unwrap(), "RESUBMITTED");
    }
}
