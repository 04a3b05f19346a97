//! Constraint filtering, locality scoring and greedy list scheduling.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::ReadyTask;
use crate::ids::{AgentId, TaskId};
use crate::model::{AgentDescriptor, DataVersion, ResourceConstraints, ResourcePool};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("agent {0} is already part of the view")]
    DuplicateAgent(AgentId),
    #[error("resize of {agent} below its current reservation ({reserved_cores} cores / {reserved_memory_mb} MB)")]
    BelowReservation { agent: AgentId, reserved_cores: u32, reserved_memory_mb: u64 },
    #[error("agent must have at least one core")]
    ZeroCores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AgentStatus {
    Live,
    /// Removed while busy: honors existing reservations, takes no new work.
    Draining,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentEntry {
    pub descriptor: AgentDescriptor,
    pub pool: ResourcePool,
    pub status: AgentStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceView {
    pub agents: BTreeMap<AgentId, AgentEntry>,
}

impl ResourceView {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, agent: &AgentId) -> Option<&AgentEntry> {
        self.agents.get(agent)
    }

    pub fn live(&self) -> impl Iterator<Item = (&AgentId, &AgentEntry)> {
        self.agents.iter().filter(|(_, e)| e.status == AgentStatus::Live)
    }

    pub fn total_free_cores(&self) -> u32 {
        self.live().map(|(_, e)| e.pool.free_cores()).sum()
    }
}

/// Change to the schedulable resource set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ResourceDelta {
    Add(AgentDescriptor),
    Remove { agent_id: AgentId },
    Resize { agent_id: AgentId, cores: u32, memory_mb: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewChange {
    Added(AgentId),
    Removed(AgentId),
    Draining(AgentId),
    Resized(AgentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub agent_id: AgentId,
    pub cores: u32,
    pub memory_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: TaskId,
    pub attempt: u32,
    /// Length equals the task's gang width; the first agent leads.
    pub agent_ids: Vec<AgentId>,
    pub reservation: Vec<Reservation>,
    /// Locality score of the leading agent.
    pub locality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeferReason {
    /// No live agent can take it right now.
    NoCandidates,
    /// Fewer simultaneous candidates than the gang width.
    GangIncomplete { needed: u32, available: u32 },
    /// No agent in the view could host it even when idle.
    Unsatisfiable,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignOutcome {
    pub assignments: Vec<Assignment>,
    pub deferred: Vec<(TaskId, DeferReason)>,
}

/// Replica placement and sizes of data versions as seen by the storage layer.
pub trait Placement {
    fn replicas(&self, version: &DataVersion) -> Option<&BTreeSet<AgentId>>;
    fn size_bytes(&self, version: &DataVersion) -> Option<u64>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlacementSnapshot {
    entries: HashMap<DataVersion, (u64, BTreeSet<AgentId>)>,
}

impl PlacementSnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, version: DataVersion, size_bytes: u64, replicas: BTreeSet<AgentId>) {
        self.entries.insert(version, (size_bytes, replicas));
    }

    pub fn contains(&self, version: &DataVersion) -> bool {
        self.entries.contains_key(version)
    }
}

impl Placement for PlacementSnapshot {
    fn replicas(&self, version: &DataVersion) -> Option<&BTreeSet<AgentId>> {
        self.entries.get(version).map(|e| &e.1)
    }

    fn size_bytes(&self, version: &DataVersion) -> Option<u64> {
        self.entries.get(version).map(|e| e.0)
    }
}

fn satisfies(entry: &AgentEntry, c: &ResourceConstraints, pool: &ResourcePool) -> bool {
    pool.fits(c.cores, c.memory_mb)
        && c.software_tags.is_subset(&entry.descriptor.software_tags)
        && entry.descriptor.processor_kinds.contains(&c.processor_kind)
}

/// Live agents able to host the task now, ascending by id.
pub fn filter_candidates(constraints: &ResourceConstraints, view: &ResourceView) -> Vec<AgentId> {
    view.live()
        .filter(|(_, e)| satisfies(e, constraints, &e.pool))
        .map(|(id, _)| *id)
        .collect()
}

/// Whether enough live agents could host the task if they were idle.
pub fn is_satisfiable(constraints: &ResourceConstraints, view: &ResourceView) -> bool {
    let hosts = view
        .live()
        .filter(|(_, e)| satisfies(e, constraints, &ResourcePool::new(e.pool.total_cores, e.pool.total_memory_mb)))
        .count();
    hosts >= constraints.nodes as usize
}

/// Fraction of the task's input bytes already resident on `agent`.
///
/// Defined as 1 for tasks without inputs. A version the placement does not
/// know about counts as one remote byte.
pub fn locality_score(inputs: &[DataVersion], agent: AgentId, placement: &impl Placement) -> Ratio<u64> {
    let mut local = 0u64;
    let mut total = 0u64;
    for v in inputs {
        match (placement.size_bytes(v), placement.replicas(v)) {
            (Some(size), Some(replicas)) => {
                total += size;
                if replicas.contains(&agent) {
                    local += size;
                }
            }
            _ => total += 1,
        }
    }
    if total == 0 {
        Ratio::from_integer(1)
    } else {
        Ratio::new(local, total)
    }
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Maximize (locality, free cores), then lowest agent id.
    #[default]
    Locality,
    /// Cycle through live agents ignoring data placement. Control policy for experiments.
    RoundRobin,
}

/// One reservation as it looked when it was made, for audit replay.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub task_id: TaskId,
    pub attempt: u32,
    pub constraints: ResourceConstraints,
    pub agent: AgentEntry,
}

impl AuditEntry {
    pub fn is_sound(&self) -> bool {
        self.agent.status == AgentStatus::Live && satisfies(&self.agent, &self.constraints, &self.agent.pool)
    }
}

/// Owner of the resource view. All reservation arithmetic goes through here.
#[derive(Debug, Default)]
pub struct Scheduler {
    view: ResourceView,
    policy: Policy,
    active: HashMap<(TaskId, u32), Assignment>,
    rr_cursor: usize,
    audit: Option<Vec<AuditEntry>>,
}

impl Scheduler {
    pub fn new(policy: Policy) -> Self {
        Self { policy, ..Self::default() }
    }

    /// Keep a copy of every reservation decision for later replay.
    pub fn with_audit(mut self) -> Self {
        self.audit = Some(Vec::new());
        self
    }

    pub fn view(&self) -> &ResourceView {
        &self.view
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        self.audit.as_deref().unwrap_or(&[])
    }

    pub fn active(&self) -> impl Iterator<Item = &Assignment> {
        self.active.values()
    }

    pub fn assignment(&self, task: TaskId, attempt: u32) -> Option<&Assignment> {
        self.active.get(&(task, attempt))
    }

    /// Active assignments that involve `agent`.
    pub fn assignments_on(&self, agent: AgentId) -> Vec<Assignment> {
        let mut v: Vec<Assignment> =
            self.active.values().filter(|a| a.agent_ids.contains(&agent)).cloned().collect();
        v.sort_by_key(|a| (a.task_id, a.attempt));
        v
    }

    pub fn update_resources(&mut self, delta: ResourceDelta) -> Result<ViewChange, SchedulerError> {
        match delta {
            ResourceDelta::Add(descriptor) => {
                let id = descriptor.agent_id;
                if self.view.agents.contains_key(&id) {
                    return Err(SchedulerError::DuplicateAgent(id));
                }
                if descriptor.capacity.total_cores == 0 {
                    return Err(SchedulerError::ZeroCores);
                }
                let pool = ResourcePool::new(descriptor.capacity.total_cores, descriptor.capacity.total_memory_mb);
                self.view.agents.insert(id, AgentEntry { descriptor, pool, status: AgentStatus::Live });
                Ok(ViewChange::Added(id))
            }
            ResourceDelta::Remove { agent_id } => {
                let entry = self.view.agents.get_mut(&agent_id).ok_or(SchedulerError::UnknownAgent(agent_id))?;
                if entry.pool.is_idle() {
                    self.view.agents.remove(&agent_id);
                    Ok(ViewChange::Removed(agent_id))
                } else {
                    entry.status = AgentStatus::Draining;
                    Ok(ViewChange::Draining(agent_id))
                }
            }
            ResourceDelta::Resize { agent_id, cores, memory_mb } => {
                let entry = self.view.agents.get_mut(&agent_id).ok_or(SchedulerError::UnknownAgent(agent_id))?;
                if cores == 0 {
                    return Err(SchedulerError::ZeroCores);
                }
                if cores < entry.pool.reserved_cores || memory_mb < entry.pool.reserved_memory_mb {
                    return Err(SchedulerError::BelowReservation {
                        agent: agent_id,
                        reserved_cores: entry.pool.reserved_cores,
                        reserved_memory_mb: entry.pool.reserved_memory_mb,
                    });
                }
                entry.pool.total_cores = cores;
                entry.pool.total_memory_mb = memory_mb;
                entry.descriptor.capacity.total_cores = cores;
                entry.descriptor.capacity.total_memory_mb = memory_mb;
                Ok(ViewChange::Resized(agent_id))
            }
        }
    }

    /// Drops a failed agent from the view and returns the assignments it was part of.
    ///
    /// Reservations those assignments held on other (still live) agents are released.
    pub fn remove_dead(&mut self, agent: AgentId) -> Vec<Assignment> {
        let affected = self.assignments_on(agent);
        self.view.agents.remove(&agent);
        for a in &affected {
            self.release(a.task_id, a.attempt);
        }
        affected
    }

    /// Greedy pass over `ready` in registration order.
    pub fn assign(&mut self, ready: &[ReadyTask], placement: &impl Placement) -> AssignOutcome {
        let mut ready: Vec<&ReadyTask> = ready.iter().collect();
        ready.sort_by_key(|t| t.seq);
        let mut out = AssignOutcome::default();
        for task in ready {
            if self.active.contains_key(&(task.task_id, task.attempt)) {
                continue;
            }
            let c = &task.constraints;
            let candidates = filter_candidates(c, &self.view);
            if candidates.len() < c.nodes as usize {
                let reason = if !is_satisfiable(c, &self.view) {
                    DeferReason::Unsatisfiable
                } else if c.nodes > 1 {
                    DeferReason::GangIncomplete { needed: c.nodes, available: candidates.len() as u32 }
                } else {
                    DeferReason::NoCandidates
                };
                out.deferred.push((task.task_id, reason));
                continue;
            }

            let chosen: Vec<(AgentId, Ratio<u64>)> = match self.policy {
                Policy::Locality => {
                    let mut ranked: Vec<(AgentId, Ratio<u64>, u32)> = candidates
                        .iter()
                        .map(|id| {
                            (*id, locality_score(&task.inputs, *id, placement), self.view.agents[id].pool.free_cores())
                        })
                        .collect();
                    ranked.sort_by(|a, b| rank(a, b));
                    ranked.into_iter().take(c.nodes as usize).map(|(id, s, _)| (id, s)).collect()
                }
                Policy::RoundRobin => {
                    let live: Vec<AgentId> = self.view.live().map(|(id, _)| *id).collect();
                    let mut picked = Vec::new();
                    for i in 0..live.len() {
                        let id = live[(self.rr_cursor + i) % live.len()];
                        if candidates.contains(&id) {
                            picked.push((id, locality_score(&task.inputs, id, placement)));
                            if picked.len() == c.nodes as usize {
                                self.rr_cursor = (self.rr_cursor + i + 1) % live.len();
                                break;
                            }
                        }
                    }
                    picked
                }
            };

            let mut reservation = Vec::with_capacity(chosen.len());
            for (id, _) in &chosen {
                let entry = self.view.agents.get_mut(id).expect("candidate in view");
                if let Some(audit) = self.audit.as_mut() {
                    audit.push(AuditEntry {
                        task_id: task.task_id,
                        attempt: task.attempt,
                        constraints: c.clone(),
                        agent: entry.clone(),
                    });
                }
                entry.pool.reserve(c.cores, c.memory_mb).expect("filter guarantees fit");
                reservation.push(Reservation { agent_id: *id, cores: c.cores, memory_mb: c.memory_mb });
            }
            let assignment = Assignment {
                task_id: task.task_id,
                attempt: task.attempt,
                agent_ids: chosen.iter().map(|(id, _)| *id).collect(),
                reservation,
                locality: ratio_to_f64(chosen[0].1),
            };
            self.active.insert((task.task_id, task.attempt), assignment.clone());
            out.assignments.push(assignment);
        }
        out
    }

    /// Returns the reservations of an assignment. A second release is a no-op.
    pub fn release(&mut self, task: TaskId, attempt: u32) -> Option<Assignment> {
        let Some(assignment) = self.active.remove(&(task, attempt)) else {
            warn!("release of {task} attempt {attempt}: no active assignment");
            return None;
        };
        for r in &assignment.reservation {
            let Some(entry) = self.view.agents.get_mut(&r.agent_id) else {
                continue;
            };
            if let Err(e) = entry.pool.release(r.cores, r.memory_mb) {
                warn!("release on {}: {e}", r.agent_id);
            }
            if entry.status == AgentStatus::Draining && entry.pool.is_idle() {
                self.view.agents.remove(&r.agent_id);
            }
        }
        Some(assignment)
    }
}

fn rank(a: &(AgentId, Ratio<u64>, u32), b: &(AgentId, Ratio<u64>, u32)) -> Ordering {
    b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0))
}
