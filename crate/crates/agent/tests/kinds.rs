mod common;

use std::time::Duration;

use common::*;
use taskmesh_agent::executor::parse_counts;
use taskmesh_agent::{ClusterOptions, LocalCluster, Script, ScriptTask};
use taskmesh_core::trace::TraceEvent;
use taskmesh_core::{AccessMode, TaskKind, TaskState, Value};

async fn cluster(n: usize) -> LocalCluster {
    LocalCluster::start(configs(n, 2), ClusterOptions::default()).await.unwrap()
}

fn kind_task(kind: TaskKind, params: Vec<(usize, AccessMode)>) -> ScriptTask {
    ScriptTask { kind, params, literals: vec![], constraints: None }
}

#[tokio::test(flavor = "multi_thread")]
async fn shell_tasks_map_files_to_values() {
    let c = cluster(2).await;
    let script = Script {
        data: vec![data("text", Some(Value::from("hello world")), None), data("upper", None, None)],
        tasks: vec![kind_task(
            TaskKind::Shell { command: "tr a-z A-Z < {in0} > {out0}".into() },
            vec![(0, AccessMode::In), (1, AccessMode::Out)],
        )],
    };
    let (_, s) = c.run(&script_start(&script), Duration::from_secs(20)).await.unwrap();
    assert!(s.finished && s.failed_tasks() == 0, "{s:?}");
    let v = c.master().agent().read_for(taskmesh_core::DataVersion::new(s.data["upper"], 1), c.master().id(), true).await.unwrap();
    assert_eq!(Value::decode(&v).unwrap(), Value::from("HELLO WORLD"));
}

#[tokio::test(flavor = "multi_thread")]
async fn nonzero_shell_exit_fails_the_task() {
    let c = cluster(1).await;
    let script = Script {
        data: vec![data("out", None, None)],
        tasks: vec![kind_task(TaskKind::Shell { command: "exit 3".into() }, vec![(0, AccessMode::Out)])],
    };
    let (_, s) = c.run(&script_start(&script), Duration::from_secs(20)).await.unwrap();
    assert_eq!(s.summary.count(TaskState::Failed), 1, "{s:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn service_tasks_post_the_input_and_keep_the_response() {
    let app = axum::Router::new().route(
        "/echo",
        axum::routing::post(|body: bytes::Bytes| async move { format!("echo:{}", String::from_utf8_lossy(&body)) }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/echo", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let c = cluster(2).await;
    let script = Script {
        data: vec![data("q", Some(Value::from("ping")), None), data("a", None, None)],
        tasks: vec![kind_task(
            TaskKind::Service { url, method: "POST".into() },
            vec![(0, AccessMode::In), (1, AccessMode::Out)],
        )],
    };
    let (_, s) = c.run(&script_start(&script), Duration::from_secs(20)).await.unwrap();
    assert!(s.finished && s.failed_tasks() == 0, "{s:?}");
    let v = c.master().agent().read_for(taskmesh_core::DataVersion::new(s.data["a"], 1), c.master().id(), true).await.unwrap();
    assert_eq!(Value::decode(&v).unwrap(), Value::from("echo:ping"));
}

#[tokio::test(flavor = "multi_thread")]
async fn gang_tasks_hold_one_rank_per_agent() {
    let c = cluster(3).await;
    let (app, s) = c.run(&start("gangdemo", vec![Value::Int(3)]), Duration::from_secs(20)).await.unwrap();
    assert_eq!(s.values["width"], Value::Int(3), "{s:?}");
    let trace = c.master().agent().trace().records_for(app);
    let mut ranks: Vec<_> = trace
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Dispatch { agent_id, .. } => Some(*agent_id),
            _ => None,
        })
        .collect();
    ranks.sort();
    ranks.dedup();
    assert_eq!(ranks.len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn a_gang_wider_than_the_view_stays_unscheduled() {
    let c = cluster(2).await;
    let client = c.client();
    let app = client.start_application(&start("gangdemo", vec![Value::Int(5)])).await.unwrap();
    assert!(eventually(Duration::from_secs(5), || c.master().agent().unschedulable(app).len() == 1).await);
    let s = client.application(app).await.unwrap();
    assert!(!s.finished);
    assert_eq!(s.unschedulable.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn wordcount_matches_a_direct_count() {
    let c = cluster(2).await;
    let text = "the quick brown fox\njumps over the lazy dog\nThe end\nfox";
    let (_, s) = c.run(&start("wordcount", vec![Value::from(text), Value::Int(3)]), Duration::from_secs(20)).await.unwrap();
    let counts = parse_counts(&s.values["counts"]).unwrap();
    assert_eq!(counts["the"], 3);
    assert_eq!(counts["fox"], 2);
    assert_eq!(counts.values().sum::<i64>(), 12);
}

#[tokio::test(flavor = "multi_thread")]
async fn montecarlo_pi_is_reproducible_for_a_seed() {
    let c = cluster(2).await;
    let mut req = start("montecarlo-pi", vec![Value::Int(40_000), Value::Int(4)]);
    req.hints.seed = Some(5);
    let (_, a) = c.run(&req, Duration::from_secs(30)).await.unwrap();
    let (_, b) = c.run(&req, Duration::from_secs(30)).await.unwrap();
    assert_eq!(a.values["hits"], b.values["hits"]);
    let Value::Float(pi) = a.values["pi"] else { panic!("{:?}", a.values) };
    assert!((pi - std::f64::consts::PI).abs() < 0.05, "{pi}");
}
