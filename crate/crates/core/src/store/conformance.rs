//! Contract suite every [`StoreClient`] backend must pass.
//!
//! Each check uses fresh data ids, so the suite can run against a store that
//! already holds other data.

use std::collections::BTreeSet;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StoreClient, StoreError};
use crate::ids::{AgentId, DataId};
use crate::model::DataVersion;

pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub roundtrip_payloads: usize,
    pub replica_safety_steps: usize,
    pub seed: u64,
}

impl SuiteConfig {
    /// The full contract: 1,000 random payloads up to 1 MiB.
    pub fn full() -> Self {
        Self { roundtrip_payloads: 1000, replica_safety_steps: 2000, seed: 0x5eed }
    }

    pub fn quick() -> Self {
        Self { roundtrip_payloads: 64, replica_safety_steps: 300, seed: 0x5eed }
    }
}

#[derive(Debug, Default)]
pub struct Report {
    pub results: Vec<(&'static str, Result<(), String>)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|(_, r)| r.is_ok())
    }

    pub fn assert_all_passed(&self) {
        let failures: Vec<String> = self
            .results
            .iter()
            .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
            .collect();
        assert!(failures.is_empty(), "store contract failures:\n{}", failures.join("\n"));
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fresh(version: u64) -> DataVersion {
    DataVersion::new(DataId::new(), version)
}

fn set(ids: &[AgentId]) -> BTreeSet<AgentId> {
    ids.iter().copied().collect()
}

type Check = Result<(), String>;

async fn persist_creates_single_replica<S: StoreClient>(s: &S, [a, _, _]: [AgentId; 3]) -> Check {
    let x = fresh(1);
    let obj = s.make_persistent(x, Bytes::from_static(b"\x01\x02\x03\x04"), a).await.map_err(|e| e.to_string())?;
    ensure!(obj.replicas == set(&[a]), "replicas {:?}", obj.replicas);
    ensure!(obj.size_bytes == 4, "size {}", obj.size_bytes);
    Ok(())
}

async fn persist_is_idempotent<S: StoreClient>(s: &S, [a, b, _]: [AgentId; 3]) -> Check {
    let x = fresh(1);
    let first = s.make_persistent(x, Bytes::from_static(b"same"), a).await.map_err(|e| e.to_string())?;
    let again = s.make_persistent(x, Bytes::from_static(b"same"), b).await.map_err(|e| e.to_string())?;
    ensure!(first.replicas == again.replicas, "{:?} vs {:?}", first.replicas, again.replicas);
    ensure!(again.size_bytes == first.size_bytes, "size changed");
    let loc = s.get_locations(x).await.map_err(|e| e.to_string())?;
    ensure!(loc == set(&[a]), "idempotent persist added a replica: {loc:?}");
    Ok(())
}

async fn persist_conflict_is_rejected<S: StoreClient>(s: &S, [a, _, _]: [AgentId; 3]) -> Check {
    let x = fresh(1);
    s.make_persistent(x, Bytes::from_static(b"one"), a).await.map_err(|e| e.to_string())?;
    match s.make_persistent(x, Bytes::from_static(b"two"), a).await {
        Err(StoreError::VersionConflict(v)) if v == x => Ok(()),
        other => Err(format!("expected VersionConflict, got {other:?}")),
    }
}

async fn get_from_home_keeps_replicas<S: StoreClient>(s: &S, [a, _, _]: [AgentId; 3]) -> Check {
    let x = fresh(2);
    s.make_persistent(x, Bytes::from_static(b"home"), a).await.map_err(|e| e.to_string())?;
    let got = s.get(x, a).await.map_err(|e| e.to_string())?;
    ensure!(got == Bytes::from_static(b"home"), "bytes differ");
    let loc = s.get_locations(x).await.map_err(|e| e.to_string())?;
    ensure!(loc == set(&[a]), "replicas changed: {loc:?}");
    Ok(())
}

async fn get_elsewhere_caches_replica<S: StoreClient>(s: &S, [a, b, _]: [AgentId; 3]) -> Check {
    let x = fresh(2);
    s.make_persistent(x, Bytes::from_static(b"far"), a).await.map_err(|e| e.to_string())?;
    let got = s.get(x, b).await.map_err(|e| e.to_string())?;
    ensure!(got == Bytes::from_static(b"far"), "bytes differ");
    let loc = s.get_locations(x).await.map_err(|e| e.to_string())?;
    ensure!(loc == set(&[a, b]), "replicas {loc:?}");
    Ok(())
}

async fn get_unknown_is_not_found<S: StoreClient>(s: &S, [a, _, _]: [AgentId; 3]) -> Check {
    match s.get(fresh(0), a).await {
        Err(StoreError::NotFound(_)) => Ok(()),
        other => Err(format!("expected NotFound, got {other:?}")),
    }
}

async fn locations_track_replication<S: StoreClient>(s: &S, [a, b, _]: [AgentId; 3]) -> Check {
    let x = fresh(1);
    ensure!(s.get_locations(x).await.map_err(|e| e.to_string())?.is_empty(), "unknown version has locations");
    s.make_persistent(x, Bytes::from_static(b"loc"), a).await.map_err(|e| e.to_string())?;
    ensure!(s.get_locations(x).await.map_err(|e| e.to_string())? == set(&[a]), "after persist");
    let r = s.replicate_to(x, b).await.map_err(|e| e.to_string())?;
    ensure!(r == set(&[a, b]), "replicate returned {r:?}");
    ensure!(s.get_locations(x).await.map_err(|e| e.to_string())? == set(&[a, b]), "after replicate");
    Ok(())
}

async fn replicate_is_idempotent<S: StoreClient>(s: &S, [a, b, _]: [AgentId; 3]) -> Check {
    let x = fresh(1);
    s.make_persistent(x, Bytes::from_static(b"rep"), a).await.map_err(|e| e.to_string())?;
    let once = s.replicate_to(x, b).await.map_err(|e| e.to_string())?;
    let twice = s.replicate_to(x, b).await.map_err(|e| e.to_string())?;
    ensure!(once == twice, "{once:?} vs {twice:?}");
    let got = s.get(x, b).await.map_err(|e| e.to_string())?;
    ensure!(got == Bytes::from_static(b"rep"), "target bytes differ");
    match s.replicate_to(fresh(0), b).await {
        Err(StoreError::NotFound(_)) => Ok(()),
        other => Err(format!("replicate of unknown: expected NotFound, got {other:?}")),
    }
}

async fn drop_rules<S: StoreClient>(s: &S, [a, b, c]: [AgentId; 3]) -> Check {
    let x = fresh(1);
    s.make_persistent(x, Bytes::from_static(b"drop"), a).await.map_err(|e| e.to_string())?;
    s.replicate_to(x, b).await.map_err(|e| e.to_string())?;
    let left = s.drop_replica(x, a).await.map_err(|e| e.to_string())?;
    ensure!(left == set(&[b]), "after drop {left:?}");
    match s.drop_replica(x, b).await {
        Err(StoreError::LastReplica(_)) => {}
        other => return Err(format!("drop last: expected LastReplica, got {other:?}")),
    }
    match s.drop_replica(x, c).await {
        Err(StoreError::NotFound(_)) => {}
        other => return Err(format!("drop at non-replica: expected NotFound, got {other:?}")),
    }
    let got = s.get(x, c).await.map_err(|e| e.to_string())?;
    ensure!(got == Bytes::from_static(b"drop"), "bytes differ after drops");
    Ok(())
}

fn random_payload(rng: &mut ChaCha8Rng, i: usize) -> Vec<u8> {
    // Log-uniform sizes keep the suite fast while still covering the 1 MiB bound.
    let len = match i {
        0 => 0,
        1 => MAX_PAYLOAD,
        _ => {
            let exp: f64 = rng.gen_range(0.0..20.0);
            ((2f64.powf(exp)) as usize).min(MAX_PAYLOAD)
        }
    };
    let mut buf = vec![0u8; len];
    rng.fill(&mut buf[..]);
    buf
}

async fn roundtrip_random_payloads<S: StoreClient>(s: &S, agents: [AgentId; 3], cfg: SuiteConfig) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.roundtrip_payloads {
        let payload = Bytes::from(random_payload(&mut rng, i));
        let x = fresh(rng.gen_range(0..4));
        let home = agents[rng.gen_range(0..3)];
        let reader = agents[rng.gen_range(0..3)];
        s.make_persistent(x, payload.clone(), home).await.map_err(|e| format!("payload {i}: {e}"))?;
        let got = s.get(x, reader).await.map_err(|e| format!("payload {i}: {e}"))?;
        ensure!(got == payload, "payload {i} ({} bytes) differs", payload.len());
    }
    Ok(())
}

async fn at_least_one_replica<S: StoreClient>(s: &S, agents: [AgentId; 3], cfg: SuiteConfig) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdead);
    let versions: Vec<(DataVersion, Bytes)> = (0..8)
        .map(|i| (fresh(1), Bytes::from(format!("object-{i}").into_bytes())))
        .collect();
    for (v, p) in &versions {
        s.make_persistent(*v, p.clone(), agents[rng.gen_range(0..3)]).await.map_err(|e| e.to_string())?;
    }
    for step in 0..cfg.replica_safety_steps {
        let (v, payload) = &versions[rng.gen_range(0..versions.len())];
        let agent = agents[rng.gen_range(0..3)];
        let res = match rng.gen_range(0..3) {
            0 => s.drop_replica(*v, agent).await.map(|_| ()),
            1 => s.replicate_to(*v, agent).await.map(|_| ()),
            _ => s.get(*v, agent).await.map(|_| ()),
        };
        match res {
            Ok(()) | Err(StoreError::LastReplica(_)) | Err(StoreError::NotFound(_)) => {}
            Err(e) => return Err(format!("step {step}: {e}")),
        }
        let loc = s.get_locations(*v).await.map_err(|e| e.to_string())?;
        ensure!(!loc.is_empty(), "step {step}: {v:?} lost every replica");
        let reader = agents[rng.gen_range(0..3)];
        let got = s.get(*v, reader).await.map_err(|e| format!("step {step}: {e}"))?;
        ensure!(&got == payload, "step {step}: bytes differ");
    }
    Ok(())
}

/// Runs every contract check against `store` using three distinct agents.
pub async fn run<S: StoreClient>(store: &S, agents: [AgentId; 3], cfg: SuiteConfig) -> Report {
    let mut report = Report::default();
    report.results.push(("persist_creates_single_replica", persist_creates_single_replica(store, agents).await));
    report.results.push(("persist_is_idempotent", persist_is_idempotent(store, agents).await));
    report.results.push(("persist_conflict_is_rejected", persist_conflict_is_rejected(store, agents).await));
    report.results.push(("get_from_home_keeps_replicas", get_from_home_keeps_replicas(store, agents).await));
    report.results.push(("get_elsewhere_caches_replica", get_elsewhere_caches_replica(store, agents).await));
    report.results.push(("get_unknown_is_not_found", get_unknown_is_not_found(store, agents).await));
    report.results.push(("locations_track_replication", locations_track_replication(store, agents).await));
    report.results.push(("replicate_is_idempotent", replicate_is_idempotent(store, agents).await));
    report.results.push(("drop_rules", drop_rules(store, agents).await));
    report.results.push(("roundtrip_random_payloads", roundtrip_random_payloads(store, agents, cfg).await));
    report.results.push(("at_least_one_replica", at_least_one_replica(store, agents, cfg).await));
    report
}
