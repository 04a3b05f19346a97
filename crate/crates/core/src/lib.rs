//! Core logic of the taskmesh workflow runtime.
//!
//! Applications register tasks with annotated data accesses. The
//! [`access`] module turns those accesses into a dependency DAG, the
//! [`scheduler`] places READY tasks on agents by constraints and data
//! locality, [`store`] defines the persistent object interface, and
//! [`recovery`] resubmits work lost with a failed agent. Everything here is
//! transport-free; the HTTP agent lives in `taskmesh-agent`.

pub mod access;
pub mod ids;
pub mod model;
pub mod recovery;
pub mod scheduler;
pub mod store;
pub mod trace;
pub mod value;

pub use access::{AccessError, AccessProcessor, ApplicationSummary, DepGraph, TaskNode};
pub use ids::{AgentId, ApplicationId, DataId, TaskId};
pub use model::{
    AccessMode, AgentDescriptor, DataVersion, ProcessorKind, ResourceConstraints, ResourcePool,
    TaskKind, TaskSpec, TaskState,
};
pub use scheduler::{Policy, ResourceDelta, ResourceView, Scheduler};
pub use store::{MemoryStore, StoreClient, StoreError, StoredObject};
pub use value::Value;
