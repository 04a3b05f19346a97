//! Request and response bodies exchanged between agents.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use taskmesh_core::access::{ApplicationSummary, TaskStatus};
use taskmesh_core::recovery::LivenessRecord;
use taskmesh_core::{
    AgentDescriptor, AgentId, ApplicationId, DataId, DataVersion, ResourcePool, ResourceView, TaskId, TaskKind,
    TaskSpec, TaskState, Value,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub version: DataVersion,
    pub size_bytes: u64,
}

/// Work order sent by an application master to the agent that runs the task.
/// Data parameters travel by reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub task_id: TaskId,
    pub spec: TaskSpec,
    pub attempt: u32,
    pub input_manifest: Vec<ManifestEntry>,
    /// Versions this execution must produce, in parameter order.
    pub outputs: Vec<DataVersion>,
    /// Endpoint (`host:port`) of the master.
    pub reply_to: String,
    pub master_id: AgentId,
    #[serde(default)]
    pub rank: u32,
    #[serde(default = "one")]
    pub gang_size: u32,
}

fn one() -> u32 {
    1
}

/// Task registration against a master, the other body `POST /tasks` accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterTask {
    pub spec: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskPost {
    Execute(Box<ExecutionRequest>),
    Register(RegisterTask),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub task_id: TaskId,
    pub state: TaskState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The function raised, the command exited nonzero, or the service answered non-2xx.
    Executor,
    /// An input version could not be fetched.
    MissingInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success { outputs: Vec<ManifestEntry> },
    Failure { kind: FailureKind, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub task_id: TaskId,
    pub attempt: u32,
    pub agent_id: AgentId,
    #[serde(default)]
    pub rank: u32,
    pub outcome: Outcome,
    pub bytes_local: u64,
    pub bytes_fetched: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionAck {
    /// False when the report was stale or a duplicate.
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppHints {
    /// Seed for demos that draw random numbers.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartApplication {
    /// The main program; `BUILTIN` names a bundled demo.
    pub main: TaskKind,
    #[serde(default)]
    pub literals: Vec<Value>,
    #[serde(default)]
    pub hints: AppHints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Started {
    pub app: ApplicationId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum MainState {
    Running,
    Finished,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppStatus {
    pub summary: ApplicationSummary,
    pub main: MainState,
    /// Main program returned and every task is terminal.
    pub finished: bool,
    /// Named data items of the main program.
    pub data: BTreeMap<String, DataId>,
    /// Scalar results the main program published.
    pub values: BTreeMap<String, Value>,
    /// READY tasks no agent in the current view could ever host.
    pub unschedulable: Vec<TaskId>,
}

impl AppStatus {
    pub fn failed_tasks(&self) -> usize {
        self.summary.count(TaskState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub agent_id: AgentId,
    pub name: String,
    pub uptime_ms: u64,
    pub pool: ResourcePool,
    pub draining: bool,
    pub descriptor: AgentDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourcesSnapshot {
    pub agent_id: AgentId,
    /// This agent's own execution pool.
    pub pool: ResourcePool,
    /// Schedulable view of the applications this agent masters.
    pub view: ResourceView,
    pub liveness: Vec<LivenessRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub type Locations = BTreeSet<AgentId>;
pub type Status = TaskStatus;
