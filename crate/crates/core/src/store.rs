//! Persistent object interface and the in-memory reference backend.
//!
//! [`StoreClient`] covers both sides of the storage layer: `make_persistent`
//! and `get` are what applications use; `get_locations`, `replicate_to` and
//! `drop_replica` are what the runtime uses to place work near data.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Mutex;

use async_trait::async_trait;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::AgentId;
use crate::model::DataVersion;

#[cfg(any(test, feature = "conformance"))]
pub mod conformance;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("{0:?} is not persisted")]
    NotFound(DataVersion),
    #[error("{0:?} already persisted with different bytes")]
    VersionConflict(DataVersion),
    #[error("refusing to drop the last replica of {0:?}")]
    LastReplica(DataVersion),
    #[error("agent {agent} unreachable: {reason}")]
    TargetUnreachable { agent: AgentId, reason: String },
    #[error("storage backend unavailable: {0}")]
    Unavailable(String),
}

impl StoreError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, StoreError::TargetUnreachable { .. } | StoreError::Unavailable(_))
    }
}

/// A persisted value. `payload` is not part of the serialized metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredObject {
    pub version: DataVersion,
    #[serde(skip)]
    pub payload: Bytes,
    pub size_bytes: u64,
    pub replicas: BTreeSet<AgentId>,
}

/// Size and placement of a version, without its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub version: DataVersion,
    pub size_bytes: u64,
    pub replicas: BTreeSet<AgentId>,
}

pub fn payload_digest(payload: &[u8]) -> [u8; 32] {
    Sha256::digest(payload).into()
}

#[async_trait]
pub trait StoreClient: Send + Sync {
    /// Persists `payload` as `version` with a first replica on `home`.
    /// Re-persisting identical bytes is a no-op returning the existing record.
    async fn make_persistent(
        &self,
        version: DataVersion,
        payload: Bytes,
        home: AgentId,
    ) -> Result<StoredObject, StoreError>;

    /// Reads the payload on behalf of `requester`, which becomes a replica.
    async fn get(&self, version: DataVersion, requester: AgentId) -> Result<Bytes, StoreError>;

    /// Current replica set; empty for unknown versions.
    async fn get_locations(&self, version: DataVersion) -> Result<BTreeSet<AgentId>, StoreError>;

    async fn replicate_to(
        &self,
        version: DataVersion,
        target: AgentId,
    ) -> Result<BTreeSet<AgentId>, StoreError>;

    /// Removes one replica. The last replica is never dropped.
    async fn drop_replica(
        &self,
        version: DataVersion,
        agent: AgentId,
    ) -> Result<BTreeSet<AgentId>, StoreError>;

    async fn metadata(&self, version: DataVersion) -> Result<Option<ObjectMeta>, StoreError>;

    /// Forgets every replica held by a failed agent.
    async fn purge_agent(&self, agent: AgentId) -> Result<(), StoreError>;
}

#[derive(Debug, Clone)]
struct Meta {
    size: u64,
    digest: [u8; 32],
    replicas: BTreeSet<AgentId>,
}

#[derive(Debug, Default)]
struct MemState {
    objects: HashMap<DataVersion, Meta>,
    shards: HashMap<AgentId, HashMap<DataVersion, Bytes>>,
    offline: HashSet<AgentId>,
    transfers: u64,
    transfer_bytes: u64,
}

impl MemState {
    fn check_online(&self, agent: AgentId) -> Result<(), StoreError> {
        if self.offline.contains(&agent) {
            Err(StoreError::TargetUnreachable { agent, reason: "offline".into() })
        } else {
            Ok(())
        }
    }

    /// Bytes of `version` as served by some online replica, preferring `prefer`.
    fn read_from_replica(&self, version: DataVersion, prefer: AgentId) -> Result<(AgentId, Bytes), StoreError> {
        let meta = self.objects.get(&version).ok_or(StoreError::NotFound(version))?;
        let mut sources: Vec<AgentId> = meta.replicas.iter().copied().collect();
        sources.sort_by_key(|a| *a != prefer);
        for src in sources {
            if self.offline.contains(&src) {
                continue;
            }
            if let Some(bytes) = self.shards.get(&src).and_then(|s| s.get(&version)) {
                return Ok((src, bytes.clone()));
            }
        }
        let agent = *meta.replicas.iter().next().ok_or(StoreError::NotFound(version))?;
        Err(StoreError::TargetUnreachable { agent, reason: "no online replica".into() })
    }

    fn place(&mut self, version: DataVersion, target: AgentId, bytes: Bytes) {
        self.shards.entry(target).or_default().insert(version, bytes);
        self.objects.get_mut(&version).expect("known").replicas.insert(target);
    }
}

/// In-memory reference backend: one byte shard per agent plus a single
/// location table. Every cross-agent copy is counted as a transfer.
#[derive(Debug, Default)]
pub struct MemoryStore {
    state: Mutex<MemState>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulates an agent going away (or coming back) without losing its shard.
    pub fn set_online(&self, agent: AgentId, online: bool) {
        let mut s = self.state.lock().unwrap();
        if online {
            s.offline.remove(&agent);
        } else {
            s.offline.insert(agent);
        }
    }

    /// Number and total size of cross-agent copies so far.
    pub fn transfers(&self) -> (u64, u64) {
        let s = self.state.lock().unwrap();
        (s.transfers, s.transfer_bytes)
    }

    /// Whether `agent` physically holds the bytes of `version`.
    pub fn holds(&self, version: DataVersion, agent: AgentId) -> bool {
        let s = self.state.lock().unwrap();
        s.shards.get(&agent).is_some_and(|sh| sh.contains_key(&version))
    }
}

#[async_trait]
impl StoreClient for MemoryStore {
    async fn make_persistent(
        &self,
        version: DataVersion,
        payload: Bytes,
        home: AgentId,
    ) -> Result<StoredObject, StoreError> {
        let mut s = self.state.lock().unwrap();
        let digest = payload_digest(&payload);
        if let Some(meta) = s.objects.get(&version) {
            if meta.digest != digest {
                return Err(StoreError::VersionConflict(version));
            }
            return Ok(StoredObject {
                version,
                payload,
                size_bytes: meta.size,
                replicas: meta.replicas.clone(),
            });
        }
        s.check_online(home)?;
        let size = payload.len() as u64;
        s.objects.insert(version, Meta { size, digest, replicas: BTreeSet::new() });
        s.place(version, home, payload.clone());
        Ok(StoredObject { version, payload, size_bytes: size, replicas: BTreeSet::from([home]) })
    }

    async fn get(&self, version: DataVersion, requester: AgentId) -> Result<Bytes, StoreError> {
        let mut s = self.state.lock().unwrap();
        if !s.objects.contains_key(&version) {
            return Err(StoreError::NotFound(version));
        }
        s.check_online(requester)?;
        let (src, bytes) = s.read_from_replica(version, requester)?;
        if src != requester {
            s.transfers += 1;
            s.transfer_bytes += bytes.len() as u64;
            s.place(version, requester, bytes.clone());
        }
        Ok(bytes)
    }

    async fn get_locations(&self, version: DataVersion) -> Result<BTreeSet<AgentId>, StoreError> {
        let s = self.state.lock().unwrap();
        Ok(s.objects.get(&version).map(|m| m.replicas.clone()).unwrap_or_default())
    }

    async fn replicate_to(
        &self,
        version: DataVersion,
        target: AgentId,
    ) -> Result<BTreeSet<AgentId>, StoreError> {
        let mut s = self.state.lock().unwrap();
        let meta = s.objects.get(&version).ok_or(StoreError::NotFound(version))?;
        if meta.replicas.contains(&target) {
            return Ok(meta.replicas.clone());
        }
        s.check_online(target)?;
        let (_, bytes) = s.read_from_replica(version, target)?;
        s.transfers += 1;
        s.transfer_bytes += bytes.len() as u64;
        s.place(version, target, bytes);
        Ok(s.objects[&version].replicas.clone())
    }

    async fn drop_replica(
        &self,
        version: DataVersion,
        agent: AgentId,
    ) -> Result<BTreeSet<AgentId>, StoreError> {
        let mut s = self.state.lock().unwrap();
        let meta = s.objects.get_mut(&version).ok_or(StoreError::NotFound(version))?;
        if !meta.replicas.contains(&agent) {
            return Err(StoreError::NotFound(version));
        }
        if meta.replicas.len() == 1 {
            return Err(StoreError::LastReplica(version));
        }
        meta.replicas.remove(&agent);
        let replicas = meta.replicas.clone();
        if let Some(shard) = s.shards.get_mut(&agent) {
            shard.remove(&version);
        }
        Ok(replicas)
    }

    async fn metadata(&self, version: DataVersion) -> Result<Option<ObjectMeta>, StoreError> {
        let s = self.state.lock().unwrap();
        Ok(s.objects.get(&version).map(|m| ObjectMeta {
            version,
            size_bytes: m.size,
            replicas: m.replicas.clone(),
        }))
    }

    async fn purge_agent(&self, agent: AgentId) -> Result<(), StoreError> {
        let mut s = self.state.lock().unwrap();
        s.shards.remove(&agent);
        s.objects.retain(|_, m| {
            m.replicas.remove(&agent);
            !m.replicas.is_empty()
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::DataId;

    fn v() -> DataVersion {
        DataVersion::new(DataId::new(), 1)
    }

    #[tokio::test]
    async fn reference_store_passes_contract_suite() {
        let store = MemoryStore::new();
        let agents = [AgentId::new(), AgentId::new(), AgentId::new()];
        let report = conformance::run(&store, agents, conformance::SuiteConfig::quick()).await;
        report.assert_all_passed();
    }

    #[tokio::test]
    async fn replica_survives_source_going_offline() {
        let store = MemoryStore::new();
        let (a, b) = (AgentId::new(), AgentId::new());
        let x = v();
        store.make_persistent(x, Bytes::from_static(b"abc"), a).await.unwrap();
        store.replicate_to(x, b).await.unwrap();
        store.set_online(a, false);
        let before = store.transfers();
        assert_eq!(store.get(x, b).await.unwrap(), Bytes::from_static(b"abc"));
        assert_eq!(store.transfers(), before, "served locally");
        assert!(matches!(
            store.replicate_to(DataVersion::new(DataId::new(), 0), b).await,
            Err(StoreError::NotFound(_))
        ));
    }

    #[tokio::test]
    async fn unreachable_target_is_retryable() {
        let store = MemoryStore::new();
        let (a, b) = (AgentId::new(), AgentId::new());
        let x = v();
        store.make_persistent(x, Bytes::from_static(b"q"), a).await.unwrap();
        store.set_online(b, false);
        let err = store.replicate_to(x, b).await.unwrap_err();
        assert!(err.is_retryable());
    }

    // get_locations must equal the set of agents that can serve without a transfer.
    #[tokio::test]
    async fn locations_match_transfer_free_reads() {
        let store = MemoryStore::new();
        let agents: Vec<AgentId> = (0..4).map(|_| AgentId::new()).collect();
        let x = v();
        store.make_persistent(x, Bytes::from(vec![7u8; 100]), agents[0]).await.unwrap();
        store.get(x, agents[1]).await.unwrap();
        store.replicate_to(x, agents[2]).await.unwrap();
        store.drop_replica(x, agents[0]).await.unwrap();
        let locations = store.get_locations(x).await.unwrap();
        for a in &agents {
            let before = store.transfers().0;
            store.get(x, *a).await.unwrap();
            let local = store.transfers().0 == before;
            assert_eq!(local, locations.contains(a), "agent {a}");
        }
    }

    #[tokio::test]
    async fn purge_forgets_agent() {
        let store = MemoryStore::new();
        let (a, b) = (AgentId::new(), AgentId::new());
        let (x, y) = (v(), v());
        store.make_persistent(x, Bytes::from_static(b"x"), a).await.unwrap();
        store.replicate_to(x, b).await.unwrap();
        store.make_persistent(y, Bytes::from_static(b"y"), b).await.unwrap();
        store.purge_agent(b).await.unwrap();
        assert_eq!(store.get_locations(x).await.unwrap(), BTreeSet::from([a]));
        assert!(store.get_locations(y).await.unwrap().is_empty());
        assert!(!store.holds(x, b));
    }
}
