//! Failure detection bookkeeping and task resubmission.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::access::{AccessProcessor, Failure, FailureCause};
use crate::ids::{AgentId, TaskId};
use crate::scheduler::{Assignment, Scheduler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub probe_period_ms: u64,
    /// Consecutive missed probes before an agent is declared dead.
    pub max_misses: u32,
    pub max_attempts: u32,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self { probe_period_ms: 500, max_misses: 3, max_attempts: 3 }
    }
}

impl RecoveryConfig {
    pub fn probe_period(&self) -> Duration {
        Duration::from_millis(self.probe_period_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Liveness {
    Live,
    Suspect,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivenessRecord {
    pub agent_id: AgentId,
    /// Milliseconds since the Unix epoch of the last answered probe.
    pub last_seen: u64,
    pub consecutive_misses: u32,
    pub status: Liveness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LivenessTransition {
    pub agent_id: AgentId,
    pub from: Liveness,
    pub to: Liveness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Answered,
    Missed,
}

#[derive(Debug, Clone, Default)]
pub struct LivenessTracker {
    max_misses: u32,
    records: BTreeMap<AgentId, LivenessRecord>,
}

impl LivenessTracker {
    pub fn new(max_misses: u32) -> Self {
        Self { max_misses: max_misses.max(1), records: BTreeMap::new() }
    }

    /// Starts a fresh incarnation for `agent`, replacing any previous record.
    pub fn track(&mut self, agent: AgentId, now_ms: u64) {
        self.records.insert(
            agent,
            LivenessRecord { agent_id: agent, last_seen: now_ms, consecutive_misses: 0, status: Liveness::Live },
        );
    }

    pub fn forget(&mut self, agent: AgentId) {
        self.records.remove(&agent);
    }

    pub fn record(&self, agent: AgentId) -> Option<&LivenessRecord> {
        self.records.get(&agent)
    }

    pub fn records(&self) -> impl Iterator<Item = &LivenessRecord> {
        self.records.values()
    }

    pub fn is_dead(&self, agent: AgentId) -> bool {
        self.records.get(&agent).is_some_and(|r| r.status == Liveness::Dead)
    }

    /// Applies one probe result. DEAD is terminal: late answers are ignored.
    pub fn observe(&mut self, agent: AgentId, probe: Probe, now_ms: u64) -> Option<LivenessTransition> {
        let max_misses = self.max_misses;
        let r = self.records.get_mut(&agent)?;
        let from = r.status;
        if from == Liveness::Dead {
            return None;
        }
        match probe {
            Probe::Answered => {
                r.last_seen = now_ms;
                r.consecutive_misses = 0;
                r.status = Liveness::Live;
            }
            Probe::Missed => {
                r.consecutive_misses += 1;
                r.status = if r.consecutive_misses >= max_misses { Liveness::Dead } else { Liveness::Suspect };
            }
        }
        (r.status != from).then_some(LivenessTransition { agent_id: agent, from, to: r.status })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReclaimOutcome {
    pub resubmitted: Vec<TaskId>,
    pub failed: Vec<TaskId>,
    pub cancelled: Vec<TaskId>,
    pub released: Vec<Assignment>,
}

/// Takes every task the dead agent held, frees its reservations and puts it
/// back in READY with the next attempt, or fails it for good once the retry
/// budget is spent.
pub fn reclaim(
    dead: AgentId,
    access: &AccessProcessor,
    scheduler: &mut Scheduler,
    max_attempts: u32,
) -> ReclaimOutcome {
    let mut out = ReclaimOutcome::default();
    for a in scheduler.remove_dead(dead) {
        match access.notify_failure(a.task_id, a.attempt, FailureCause::AgentLost, max_attempts) {
            Ok(Failure::Resubmitted { .. }) => out.resubmitted.push(a.task_id),
            Ok(Failure::Terminal { cancelled }) => {
                out.failed.push(a.task_id);
                out.cancelled.extend(cancelled);
            }
            Ok(Failure::Ignored) => {}
            Err(e) => log::error!("reclaim of {} on {dead}: {e}", a.task_id),
        }
        out.released.push(a);
    }
    out
}
