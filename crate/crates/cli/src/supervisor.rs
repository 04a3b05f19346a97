//! Localhost topologies as supervised child processes, one `agent serve`
//! per configured agent. Children exit when their stdin closes, so a
//! crashed supervisor leaves nothing behind.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use taskmesh_agent::{AgentClient, ClientError};
use taskmesh_core::{AgentId, ResourceDelta};

use crate::topology::{AgentEntry, TopologyConfig};

/// First line an agent prints once its port is bound.
pub const READY_PREFIX: &str = "READY";

#[derive(Debug, thiserror::Error)]
pub enum SupervisorError {
    #[error("agent {name} did not start: {reason}")]
    StartupTimeout { name: String, reason: String },
    #[error("cannot register agents with each other: {0}")]
    Registration(ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Running {
    pub name: String,
    pub agent_id: AgentId,
    pub endpoint: String,
    child: Option<Child>,
}

impl Running {
    pub fn client(&self) -> AgentClient {
        AgentClient::new(&self.endpoint)
    }
}

/// A started topology; dropping it tears every agent down.
pub struct Supervisor {
    pub agents: Vec<Running>,
}

fn serve_args(t: &TopologyConfig, a: &AgentEntry, trace_dir: Option<&PathBuf>) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "agent".into(),
        "serve".into(),
        "--name".into(),
        a.name.clone(),
        "--host".into(),
        a.host.clone(),
        "--port".into(),
        a.port.to_string(),
        "--cores".into(),
        a.cores.to_string(),
        "--memory-mb".into(),
        a.memory_mb.to_string(),
        "--probe-period-ms".into(),
        t.recovery.probe_period_ms.to_string(),
        "--max-misses".into(),
        t.recovery.max_misses.to_string(),
        "--max-attempts".into(),
        t.recovery.max_attempts.to_string(),
        "--policy".into(),
        serde_json::to_value(t.policy).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
        "--exit-on-stdin-eof".into(),
    ];
    for tag in &a.software_tags {
        args.extend(["--tag".into(), tag.clone()]);
    }
    for k in &a.processor_kinds {
        args.extend(["--processor".into(), k.clone()]);
    }
    if let Some(dir) = trace_dir {
        args.extend(["--trace".into(), dir.join(format!("{}.ndjson", a.name)).display().to_string()]);
    }
    args
}

/// Reads the READY line: `READY <agent-id> <endpoint>`.
fn await_ready(name: &str, child: &mut Child, timeout: Duration) -> Result<(AgentId, String), SupervisorError> {
    let stdout = child.stdout.take().expect("piped");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut lines = BufReader::new(stdout).lines();
        let first = lines.next();
        let _ = tx.send(first);
        // Keep draining so the child never blocks on a full pipe.
        for _ in lines {}
    });
    let fail = |reason: String| SupervisorError::StartupTimeout { name: name.to_string(), reason };
    let line = match rx.recv_timeout(timeout) {
        Ok(Some(Ok(line))) => line,
        Ok(_) => {
            let status = child.wait().map(|s| s.to_string()).unwrap_or_default();
            return Err(fail(format!("exited before listening ({status})")));
        }
        Err(_) => return Err(fail(format!("no answer within {timeout:?}"))),
    };
    let mut parts = line.split_whitespace();
    match (parts.next(), parts.next().and_then(|id| id.parse().ok()), parts.next()) {
        (Some(READY_PREFIX), Some(id), Some(endpoint)) => Ok((id, endpoint.to_string())),
        _ => Err(fail(format!("unexpected first line {line:?}"))),
    }
}

impl Supervisor {
    /// Spawns every agent, waits until each answers `/health`, then adds
    /// every agent to every agent's view.
    pub async fn up(topology: &TopologyConfig, trace_dir: Option<PathBuf>) -> Result<Self, SupervisorError> {
        let exe = std::env::current_exe()?;
        let mut sup = Supervisor { agents: Vec::new() };
        for a in &topology.agents {
            let mut child = Command::new(&exe)
                .args(serve_args(topology, a, trace_dir.as_ref()))
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let ready = tokio::task::block_in_place(|| await_ready(&a.name, &mut child, Duration::from_secs(10)));
            let (agent_id, endpoint) = match ready {
                Ok(r) => r,
                Err(e) => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(e);
                }
            };
            sup.agents.push(Running { name: a.name.clone(), agent_id, endpoint, child: Some(child) });
        }
        let mut descriptors = Vec::new();
        for r in &sup.agents {
            let health = wait_healthy(&r.client(), &r.name, Duration::from_secs(10)).await?;
            descriptors.push(health.descriptor);
        }
        for r in &sup.agents {
            let client = r.client();
            for d in &descriptors {
                client.update_resources(&ResourceDelta::Add(d.clone())).await.map_err(SupervisorError::Registration)?;
            }
        }
        Ok(sup)
    }

    pub fn master(&self) -> &Running {
        &self.agents[0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Running> {
        self.agents.iter().find(|a| a.name == name)
    }

    /// Kills one agent's process, as a crash would.
    pub fn kill(&mut self, name: &str) -> bool {
        let Some(r) = self.agents.iter_mut().find(|a| a.name == name) else { return false };
        match r.child.take() {
            Some(mut c) => {
                let _ = c.kill();
                let _ = c.wait();
                true
            }
            None => false,
        }
    }

    pub fn teardown(&mut self) {
        for r in &mut self.agents {
            if let Some(mut c) = r.child.take() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        self.teardown();
    }
}

async fn wait_healthy(client: &AgentClient, name: &str, timeout: Duration) -> Result<taskmesh_agent::protocol::Health, SupervisorError> {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        match client.health(Some(Duration::from_millis(500))).await {
            Ok(h) => return Ok(h),
            Err(e) if tokio::time::Instant::now() >= deadline => {
                return Err(SupervisorError::StartupTimeout { name: name.to_string(), reason: e.to_string() })
            }
            Err(_) => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
}
