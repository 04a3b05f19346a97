mod common;

use std::time::Duration;

use bytes::Bytes;
use common::*;
use taskmesh_agent::protocol::{CompletionReport, MainState, Outcome};
use taskmesh_agent::{ClusterOptions, DataQuery, LocalCluster};
use taskmesh_core::scheduler::ResourceDelta;
use taskmesh_core::{AccessMode, AgentId, DataId, DataVersion, TaskId, TaskKind, TaskSpec, TaskState, Value};

async fn cluster(n: usize) -> LocalCluster {
    LocalCluster::start(configs(n, 2), ClusterOptions::default()).await.unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_identity_and_pool() {
    let c = cluster(1).await;
    let h = c.client().health(None).await.unwrap();
    assert_eq!(h.agent_id, c.master().id());
    assert_eq!(h.name, "agent0");
    assert_eq!(h.pool.total_cores, 2);
    assert_eq!(h.pool.reserved_cores, 0);
    assert!(!h.draining);
}

#[tokio::test(flavor = "multi_thread")]
async fn data_round_trips_with_encoded_values() {
    let c = cluster(2).await;
    let client = c.client();
    let v = DataVersion::new(DataId::new(), 0);
    let payload = Value::from("hello").encode();
    let worker = c.workers()[0].id();
    let meta = client
        .put_data(v, Bytes::from(payload.clone()), &DataQuery { home: Some(worker), ..DataQuery::default() })
        .await
        .unwrap();
    assert_eq!(meta.size_bytes, payload.len() as u64);
    assert_eq!(meta.replicas, [worker].into());
    assert_eq!(client.locations(v).await.unwrap().replicas, [worker].into());
    let got = client.get_data(v, &DataQuery::default()).await.unwrap();
    assert_eq!(Value::decode(&got).unwrap(), Value::from("hello"));
    // Reading through the master leaves a cached copy there.
    assert!(client.locations(v).await.unwrap().replicas.contains(&worker));
    // A second put of the same version is a conflict.
    let err = client.put_data(v, Bytes::from_static(b"x"), &DataQuery::default()).await.unwrap_err();
    assert_eq!(err.status(), Some(409));
    assert_eq!(err.kind(), Some("VersionConflict"));
}

#[tokio::test(flavor = "multi_thread")]
async fn replicas_can_be_added_and_dropped_but_not_the_last() {
    let c = cluster(3).await;
    let client = c.client();
    let (a, b) = (c.agents()[1].id(), c.agents()[2].id());
    let v = DataVersion::new(DataId::new(), 0);
    client.put_data(v, Bytes::from_static(b"abc"), &DataQuery { home: Some(a), ..DataQuery::default() }).await.unwrap();
    assert_eq!(client.replicate(v, b).await.unwrap(), [a, b].into());
    assert!(c.agents()[2].agent().holds(&v));
    assert_eq!(client.drop_replica(v, a, &DataQuery::default()).await.unwrap(), [b].into());
    assert!(!c.agents()[1].agent().holds(&v));
    let err = client.drop_replica(v, b, &DataQuery::default()).await.unwrap_err();
    assert_eq!(err.kind(), Some("LastReplica"));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_versions_are_not_found() {
    let c = cluster(1).await;
    let v = DataVersion::new(DataId::new(), 3);
    assert_eq!(c.client().get_data(v, &DataQuery::default()).await.unwrap_err().status(), Some(404));
    assert_eq!(c.client().locations(v).await.unwrap_err().status(), Some(404));
    assert_eq!(c.client().task_status(TaskId::new()).await.unwrap_err().status(), Some(404));
}

#[tokio::test(flavor = "multi_thread")]
async fn tasks_registered_over_http_run_and_report_status() {
    let c = cluster(2).await;
    let client = c.client();
    let app = client.start_application(&start("external", vec![])).await.unwrap();
    let x = DataId::new();
    let v0 = DataVersion::new(x, 0);
    client
        .put_data(v0, Bytes::from(Value::Int(40).encode()), &DataQuery { app: Some(app), ..DataQuery::default() })
        .await
        .unwrap();
    let spec = TaskSpec::new(app, TaskKind::builtin("inc")).param(x, AccessMode::InOut).literal(2);
    let reg = client.register_task(spec).await.unwrap();
    assert!(matches!(reg.state, TaskState::Ready | TaskState::Scheduled | TaskState::Running));
    let s = client.wait_application(app, Duration::from_secs(20)).await.unwrap();
    assert!(s.finished && s.main == MainState::Finished, "{s:?}");
    let t = client.task_status(reg.task_id).await.unwrap();
    assert_eq!((t.state, t.attempt), (TaskState::Completed, 1));
    let got = client.get_data(DataVersion::new(x, 1), &DataQuery::default()).await.unwrap();
    assert_eq!(Value::decode(&got).unwrap(), Value::Int(42));
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_task_specs_are_rejected() {
    let c = cluster(1).await;
    let client = c.client();
    let app = client.start_application(&start("external", vec![])).await.unwrap();
    // Reading data nobody wrote.
    let spec = TaskSpec::new(app, TaskKind::builtin("inc")).param(DataId::new(), AccessMode::In);
    assert_eq!(client.register_task(spec).await.unwrap_err().kind(), Some("UnknownData"));
    // Unknown application.
    let spec = TaskSpec::new(taskmesh_core::ApplicationId::new(), TaskKind::builtin("add")).param(DataId::new(), AccessMode::Out);
    assert_eq!(client.register_task(spec).await.unwrap_err().status(), Some(404));
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_demos_are_bad_requests() {
    let c = cluster(1).await;
    let err = c.client().start_application(&start("no-such-demo", vec![])).await.unwrap_err();
    assert_eq!((err.status(), err.kind()), (Some(400), Some("UnknownDemo")));
}

#[tokio::test(flavor = "multi_thread")]
async fn graph_is_served_as_json_dot_and_listing() {
    let c = cluster(1).await;
    let client = c.client();
    let (app, _) = c.run(&start("diamond", vec![Value::Int(0)]), Duration::from_secs(20)).await.unwrap();
    let g = client.graph(app).await.unwrap();
    assert_eq!(g.nodes.len(), 4);
    assert_eq!(g.edges().len(), 4);
    let dot = client.graph_text(app, "dot").await.unwrap();
    assert!(dot.starts_with("digraph"), "{dot}");
    assert_eq!(dot.matches("->").count(), 4);
    let listing = client.graph_text(app, "listing").await.unwrap();
    assert!(listing.lines().filter(|l| !l.trim().is_empty()).count() >= 4, "{listing}");
}

#[tokio::test(flavor = "multi_thread")]
async fn resources_can_be_added_resized_and_removed() {
    let c = cluster(1).await;
    let client = c.client();
    let extra = taskmesh_agent::LocalAgent::start(cfg("extra", 3)).unwrap();
    extra.wait_healthy(Duration::from_secs(10)).await.unwrap();
    let view = client.update_resources(&ResourceDelta::Add(extra.agent().descriptor())).await.unwrap();
    assert_eq!(view.agents[&extra.id()].pool.total_cores, 3);
    let dup = client.update_resources(&ResourceDelta::Add(extra.agent().descriptor())).await.unwrap_err();
    assert_eq!(dup.status(), Some(409));
    let view = client
        .update_resources(&ResourceDelta::Resize { agent_id: extra.id(), cores: 5, memory_mb: 1024 })
        .await
        .unwrap();
    assert_eq!(view.agents[&extra.id()].pool.total_cores, 5);
    let view = client.update_resources(&ResourceDelta::Remove { agent_id: extra.id() }).await.unwrap();
    assert!(!view.agents.contains_key(&extra.id()));
    let missing = client.update_resources(&ResourceDelta::Remove { agent_id: AgentId::new() }).await.unwrap_err();
    assert_eq!(missing.status(), Some(404));
    let snap = client.resources().await.unwrap();
    assert_eq!(snap.agent_id, c.master().id());
    assert!(snap.view.agents.contains_key(&c.master().id()));
}

#[tokio::test(flavor = "multi_thread")]
async fn stale_completion_reports_are_not_accepted() {
    let c = cluster(1).await;
    let report = CompletionReport {
        task_id: TaskId::new(),
        attempt: 1,
        agent_id: c.master().id(),
        rank: 0,
        outcome: Outcome::Success { outputs: vec![] },
        bytes_local: 0,
        bytes_fetched: 0,
    };
    assert!(!c.client().report_completion(&report).await.unwrap().accepted);
}

#[tokio::test(flavor = "multi_thread")]
async fn trace_is_filtered_by_application() {
    let c = cluster(1).await;
    let (a, _) = c.run(&start("chain", vec![Value::Int(2)]), Duration::from_secs(20)).await.unwrap();
    let (b, _) = c.run(&start("chain", vec![Value::Int(3)]), Duration::from_secs(20)).await.unwrap();
    let client = c.client();
    let ta = client.trace(Some(a)).await.unwrap();
    let tb = client.trace(Some(b)).await.unwrap();
    let all = client.trace(None).await.unwrap();
    let completes = |t: &[taskmesh_core::trace::TraceRecord]| {
        t.iter().filter(|r| matches!(r.event, taskmesh_core::trace::TraceEvent::Complete { .. })).count()
    };
    assert_eq!((completes(&ta), completes(&tb)), (2, 3));
    assert!(completes(&all) >= 5);
}

#[tokio::test(flavor = "multi_thread")]
async fn two_applications_run_concurrently() {
    let c = cluster(2).await;
    let client = c.client();
    let a = client.start_application(&start("chain", vec![Value::Int(6)])).await.unwrap();
    let b = client.start_application(&start("diamond", vec![Value::Int(20)])).await.unwrap();
    let sb = client.wait_application(b, Duration::from_secs(20)).await.unwrap();
    let sa = client.wait_application(a, Duration::from_secs(20)).await.unwrap();
    assert_eq!(sa.values["x"], Value::Int(6));
    assert_eq!(sb.values["r"], Value::Int(38));
}

#[tokio::test(flavor = "multi_thread")]
async fn draining_agents_refuse_new_applications() {
    let c = cluster(1).await;
    c.master().agent().set_draining(true);
    let err = c.client().start_application(&start("chain", vec![Value::Int(1)])).await.unwrap_err();
    assert_eq!(err.status(), Some(503));
}
