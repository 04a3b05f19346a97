//! [`StoreClient`] over a master's `/data` endpoints.

use std::collections::BTreeSet;

use async_trait::async_trait;
use bytes::Bytes;
use taskmesh_core::store::{ObjectMeta, StoreClient, StoreError, StoredObject};
use taskmesh_core::{AgentId, DataVersion};

use crate::client::{AgentClient, ClientError, DataQuery};

/// Remote object store backed by the location metadata of one master agent.
#[derive(Debug, Clone)]
pub struct AgentStore {
    master: AgentClient,
}

impl AgentStore {
    pub fn new(master_endpoint: &str) -> Self {
        Self { master: AgentClient::new(master_endpoint) }
    }

    pub fn with_client(master: AgentClient) -> Self {
        Self { master }
    }
}

/// Maps a client error back to a store error; `agent` is the one the call concerned.
fn store_error(e: ClientError, v: DataVersion, agent: AgentId) -> StoreError {
    match &e {
        ClientError::Status { kind, message, .. } => match kind.as_str() {
            "NotFound" => StoreError::NotFound(v),
            "VersionConflict" => StoreError::VersionConflict(v),
            "LastReplica" => StoreError::LastReplica(v),
            "TargetUnreachable" => StoreError::TargetUnreachable { agent, reason: message.clone() },
            _ => StoreError::Unavailable(e.to_string()),
        },
        ClientError::Unreachable { .. } | ClientError::Decode(_) => StoreError::Unavailable(e.to_string()),
    }
}

#[async_trait]
impl StoreClient for AgentStore {
    async fn make_persistent(&self, version: DataVersion, payload: Bytes, home: AgentId) -> Result<StoredObject, StoreError> {
        let q = DataQuery { home: Some(home), ..DataQuery::default() };
        let meta = self.master.put_data(version, payload.clone(), &q).await.map_err(|e| store_error(e, version, home))?;
        Ok(StoredObject { version, payload, size_bytes: meta.size_bytes, replicas: meta.replicas })
    }

    async fn get(&self, version: DataVersion, requester: AgentId) -> Result<Bytes, StoreError> {
        let q = DataQuery { requester: Some(requester), ..DataQuery::default() };
        self.master.get_data(version, &q).await.map_err(|e| store_error(e, version, requester))
    }

    async fn get_locations(&self, version: DataVersion) -> Result<BTreeSet<AgentId>, StoreError> {
        Ok(self.metadata(version).await?.map(|m| m.replicas).unwrap_or_default())
    }

    async fn replicate_to(&self, version: DataVersion, target: AgentId) -> Result<BTreeSet<AgentId>, StoreError> {
        self.master.replicate(version, target).await.map_err(|e| store_error(e, version, target))
    }

    async fn drop_replica(&self, version: DataVersion, agent: AgentId) -> Result<BTreeSet<AgentId>, StoreError> {
        self.master
            .drop_replica(version, agent, &DataQuery::default())
            .await
            .map_err(|e| store_error(e, version, agent))
    }

    async fn metadata(&self, version: DataVersion) -> Result<Option<ObjectMeta>, StoreError> {
        match self.master.locations(version).await {
            Ok(m) => Ok(Some(m)),
            Err(ClientError::Status { status: 404, .. }) => Ok(None),
            Err(e) => Err(StoreError::Unavailable(e.to_string())),
        }
    }

    async fn purge_agent(&self, agent: AgentId) -> Result<(), StoreError> {
        self.master.purge_agent(agent).await.map_err(|e| StoreError::Unavailable(e.to_string()))
    }
}
