//! Scheduling trace records and their aggregation.
//!
//! A trace is line-delimited JSON, one [`TraceRecord`] per line. Field names
//! are stable; `kind` selects the record type.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AgentId, ApplicationId, TaskId};
use crate::model::DataVersion;
use crate::recovery::Liveness;
use crate::scheduler::{DeferReason, ViewChange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Ready { app: ApplicationId, task_id: TaskId, attempt: u32 },
    Assign { task_id: TaskId, attempt: u32, agents: Vec<AgentId>, locality: f64 },
    Defer { task_id: TaskId, reason: DeferReason },
    Persist { version: DataVersion, home: AgentId, size_bytes: u64 },
    Dispatch { task_id: TaskId, attempt: u32, agent_id: AgentId, inputs_persisted: bool },
    Complete { task_id: TaskId, attempt: u32, agent_id: AgentId, bytes_local: u64, bytes_fetched: u64 },
    Fail { task_id: TaskId, attempt: u32, agent_id: Option<AgentId>, error: String, resubmitted: bool },
    Cancel { task_id: TaskId },
    Release { task_id: TaskId, attempt: u32, agents: Vec<AgentId> },
    Replicate { version: DataVersion, to: AgentId, size_bytes: u64 },
    Liveness { agent_id: AgentId, from: Liveness, to: Liveness },
    Resources { change: ViewChange },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Microseconds since the Unix epoch.
    pub ts_us: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

#[derive(Debug, Error)]
#[error("malformed trace at line {line}: {reason}")]
pub struct MalformedTrace {
    pub line: usize,
    pub reason: String,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, MalformedTrace> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MalformedTrace { line: i + 1, reason: e.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    pub tasks: u64,
    pub bytes_local: u64,
    pub bytes_fetched: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub per_agent: BTreeMap<AgentId, AgentStats>,
    pub completed: u64,
    pub failed: u64,
    pub resubmitted: u64,
    pub cancelled: u64,
    /// Fraction of task input bytes that were already on the executing agent.
    pub locality_hit_rate: f64,
    /// Task input bytes fetched from another agent.
    pub transfer_bytes: u64,
    /// First READY to last terminal record.
    pub makespan_ms: f64,
}

pub fn trace_stats(records: &[TraceRecord]) -> TraceStats {
    let mut stats = TraceStats::default();
    let mut first_ready: Option<u64> = None;
    let mut last_terminal: Option<u64> = None;
    let mut local = 0u64;
    let mut fetched = 0u64;
    for r in records {
        match &r.event {
            TraceEvent::Ready { .. } => {
                first_ready = Some(first_ready.map_or(r.ts_us, |t| t.min(r.ts_us)));
            }
            TraceEvent::Complete { agent_id, bytes_local, bytes_fetched, .. } => {
                let a = stats.per_agent.entry(*agent_id).or_default();
                a.tasks += 1;
                a.bytes_local += bytes_local;
                a.bytes_fetched += bytes_fetched;
                local += bytes_local;
                fetched += bytes_fetched;
                stats.completed += 1;
                last_terminal = Some(last_terminal.map_or(r.ts_us, |t| t.max(r.ts_us)));
            }
            TraceEvent::Fail { resubmitted, .. } => {
                if *resubmitted {
                    stats.resubmitted += 1;
                } else {
                    stats.failed += 1;
                    last_terminal = Some(last_terminal.map_or(r.ts_us, |t| t.max(r.ts_us)));
                }
            }
            TraceEvent::Cancel { .. } => {
                stats.cancelled += 1;
                last_terminal = Some(last_terminal.map_or(r.ts_us, |t| t.max(r.ts_us)));
            }
            _ => {}
        }
    }
    stats.transfer_bytes = fetched;
    stats.locality_hit_rate = match (local + fetched, stats.completed) {
        (0, 0) => 0.0,
        (0, _) => 1.0,
        (total, _) => local as f64 / total as f64,
    };
    if let (Some(a), Some(b)) = (first_ready, last_terminal) {
        stats.makespan_ms = b.saturating_sub(a) as f64 / 1000.0;
    }
    stats
}

impl fmt::Display for TraceStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let _ = writeln!(out, "{:<38} {:>8} {:>14} {:>14}", "agent", "tasks", "bytes_local", "bytes_fetched");
        for (agent, s) in &self.per_agent {
            let _ = writeln!(out, "{:<38} {:>8} {:>14} {:>14}", agent.to_string(), s.tasks, s.bytes_local, s.bytes_fetched);
        }
        let _ = writeln!(out, "completed          {}", self.completed);
        let _ = writeln!(out, "failed             {}", self.failed);
        let _ = writeln!(out, "resubmitted        {}", self.resubmitted);
        let _ = writeln!(out, "cancelled          {}", self.cancelled);
        let _ = writeln!(out, "locality_hit_rate  {:.4}", self.locality_hit_rate);
        let _ = writeln!(out, "transfer_bytes     {}", self.transfer_bytes);
        let _ = write!(out, "makespan_ms        {:.1}", self.makespan_ms);
        f.write_str(&out)
    }
}
