//! Location metadata kept by an application master.

use std::collections::{BTreeSet, HashMap};

use bytes::Bytes;
use taskmesh_core::scheduler::PlacementSnapshot;
use taskmesh_core::store::{payload_digest, ObjectMeta};
use taskmesh_core::{AgentId, DataVersion};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub size_bytes: u64,
    pub digest: [u8; 32],
    pub replicas: BTreeSet<AgentId>,
}

#[derive(Debug, Default)]
pub struct Catalog {
    entries: HashMap<DataVersion, Entry>,
}

/// Result of recording a new version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recorded {
    New,
    /// Same bytes were already recorded.
    Existing(Entry),
    Conflict,
}

impl Catalog {
    pub fn get(&self, v: &DataVersion) -> Option<&Entry> {
        self.entries.get(v)
    }

    pub fn contains(&self, v: &DataVersion) -> bool {
        self.entries.contains_key(v)
    }

    pub fn check(&self, v: &DataVersion, payload: &[u8]) -> Recorded {
        match self.entries.get(v) {
            None => Recorded::New,
            Some(e) if e.digest == payload_digest(payload) => Recorded::Existing(e.clone()),
            Some(_) => Recorded::Conflict,
        }
    }

    /// Records `v` as held by `holders`, merging with an identical earlier record.
    pub fn record(&mut self, v: DataVersion, payload: &Bytes, holders: impl IntoIterator<Item = AgentId>) {
        let digest = payload_digest(payload);
        let e = self.entries.entry(v).or_insert_with(|| Entry {
            size_bytes: payload.len() as u64,
            digest,
            replicas: BTreeSet::new(),
        });
        if e.digest != digest {
            // Only non-deterministic executors get here; the accepted attempt wins.
            log::warn!("{v} re-recorded with different bytes; replacing earlier replicas");
            *e = Entry { size_bytes: payload.len() as u64, digest, replicas: BTreeSet::new() };
        }
        e.replicas.extend(holders);
    }

    pub fn add_replica(&mut self, v: &DataVersion, agent: AgentId) -> Option<BTreeSet<AgentId>> {
        let e = self.entries.get_mut(v)?;
        e.replicas.insert(agent);
        Some(e.replicas.clone())
    }

    pub fn remove_replica(&mut self, v: &DataVersion, agent: AgentId) -> Option<BTreeSet<AgentId>> {
        let e = self.entries.get_mut(v)?;
        e.replicas.remove(&agent);
        Some(e.replicas.clone())
    }

    /// Forgets `agent` everywhere; versions it held alone are forgotten too.
    pub fn purge(&mut self, agent: AgentId) -> Vec<DataVersion> {
        let mut lost = Vec::new();
        self.entries.retain(|v, e| {
            e.replicas.remove(&agent);
            if e.replicas.is_empty() {
                lost.push(*v);
                false
            } else {
                true
            }
        });
        lost
    }

    pub fn meta(&self, v: DataVersion) -> Option<ObjectMeta> {
        self.entries.get(&v).map(|e| ObjectMeta { version: v, size_bytes: e.size_bytes, replicas: e.replicas.clone() })
    }

    pub fn placement<'a>(&self, versions: impl IntoIterator<Item = &'a DataVersion>) -> PlacementSnapshot {
        let mut p = PlacementSnapshot::new();
        for v in versions {
            if let Some(e) = self.entries.get(v) {
                p.insert(*v, e.size_bytes, e.replicas.clone());
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use taskmesh_core::DataId;

    #[test]
    fn record_merges_identical_bytes_and_flags_conflicts() {
        let mut c = Catalog::default();
        let v = DataVersion::new(DataId::new(), 1);
        let (a, b) = (AgentId::new(), AgentId::new());
        let bytes = Bytes::from_static(b"abc");
        assert_eq!(c.check(&v, &bytes), Recorded::New);
        c.record(v, &bytes, [a]);
        c.record(v, &bytes, [b]);
        assert_eq!(c.get(&v).unwrap().replicas, BTreeSet::from([a, b]));
        assert_eq!(c.check(&v, b"xyz"), Recorded::Conflict);
        assert!(matches!(c.check(&v, &bytes), Recorded::Existing(_)));
    }

    #[test]
    fn purge_drops_versions_without_replicas() {
        let mut c = Catalog::default();
        let (a, b) = (AgentId::new(), AgentId::new());
        let v1 = DataVersion::new(DataId::new(), 1);
        let v2 = DataVersion::new(DataId::new(), 1);
        c.record(v1, &Bytes::from_static(b"1"), [a]);
        c.record(v2, &Bytes::from_static(b"2"), [a, b]);
        assert_eq!(c.purge(a), vec![v1]);
        assert_eq!(c.meta(v2).unwrap().replicas, BTreeSet::from([b]));
        assert_eq!(c.len(), 1);
    }
}
