//! HTTP agent of the taskmesh runtime.
//!
//! Every agent executes tasks against its own resource pool and can act as
//! the master of applications started on it: it tracks their dependency
//! graphs, schedules READY tasks over the agents in its view, keeps the
//! location metadata of their data and recovers work from failed agents.

pub mod agent;
pub mod catalog;
pub mod client;
pub mod demos;
pub mod executor;
pub mod harness;
pub mod master;
pub mod protocol;
pub mod server;
pub mod sink;
pub mod store;

pub use agent::{bind, Agent, AgentConfig, AgentError, DispatchInterceptor, IntakeError};
pub use client::{AgentClient, ClientError, DataQuery};
pub use demos::{Script, ScriptData, ScriptTask};
pub use executor::{ExecutorError, ExecutorRegistry, Invocation};
pub use harness::{ClusterOptions, LocalAgent, LocalCluster};
pub use server::{router, serve};
pub use store::AgentStore;
