use std::time::Duration;

use taskmesh_agent::protocol::{AppHints, MainState, StartApplication};
use taskmesh_agent::{AgentConfig, ClusterOptions, LocalCluster};
use taskmesh_core::{TaskKind, Value};

fn start(demo: &str, literals: Vec<Value>) -> StartApplication {
    StartApplication { main: TaskKind::builtin(demo), literals, hints: AppHints::default() }
}

#[tokio::test(flavor = "multi_thread")]
async fn chain_and_diamond_on_two_agents() {
    let cluster = LocalCluster::start(
        vec![AgentConfig::new("a", 2, 1024), AgentConfig::new("b", 2, 1024)],
        ClusterOptions::default(),
    )
    .await
    .unwrap();
    let (_, s) = cluster.run(&start("chain", vec![Value::Int(5)]), Duration::from_secs(20)).await.unwrap();
    assert_eq!(s.main, MainState::Finished, "{s:?}");
    assert_eq!(s.values["x"], Value::Int(5));
    let (_, s) = cluster.run(&start("diamond", vec![Value::Int(10)]), Duration::from_secs(20)).await.unwrap();
    assert!(s.finished, "{s:?}");
    assert_eq!(s.values["r"], Value::Int(38));
}
