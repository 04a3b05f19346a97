//! In-process clusters: every agent gets its own runtime and loopback port,
//! so killing one really drops its sockets.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use taskmesh_core::recovery::RecoveryConfig;
use taskmesh_core::{AgentId, ApplicationId, Policy, ResourceDelta};
use tokio::runtime::Runtime;

use crate::agent::{bind, Agent, AgentConfig, AgentError};
use crate::client::{AgentClient, ClientError};
use crate::protocol::{AppStatus, StartApplication};
use crate::server::serve;

/// One agent serving on its own runtime.
pub struct LocalAgent {
    agent: Arc<Agent>,
    runtime: Mutex<Option<Runtime>>,
}

impl std::fmt::Debug for LocalAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalAgent").field("agent", &self.agent).field("alive", &self.is_alive()).finish()
    }
}

impl LocalAgent {
    /// Binds and starts serving; does not wait for the agent to answer.
    pub fn start(config: AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let listener = bind(&config)?;
        let addr = listener.local_addr()?;
        let agent = Agent::new(config, addr)?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name(format!("agent-{}", agent.name()))
            .enable_all()
            .build()?;
        let served = agent.clone();
        runtime.spawn(async move {
            match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => {
                    if let Err(e) = serve(served, l).await {
                        log::error!("serve: {e}");
                    }
                }
                Err(e) => log::error!("listener: {e}"),
            }
        });
        Ok(Self { agent, runtime: Mutex::new(Some(runtime)) })
    }

    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }

    pub fn id(&self) -> AgentId {
        self.agent.id()
    }

    pub fn endpoint(&self) -> &str {
        self.agent.endpoint()
    }

    pub fn client(&self) -> AgentClient {
        AgentClient::new(self.agent.endpoint())
    }

    pub fn is_alive(&self) -> bool {
        self.runtime.lock().unwrap().is_some()
    }

    /// Stops the agent abruptly: in-flight work is abandoned and its port closes.
    pub fn kill(&self) {
        if let Some(rt) = self.runtime.lock().unwrap().take() {
            rt.shutdown_background();
        }
    }

    /// Holds `/health` answers for `d`, simulating a stalled process.
    pub fn pause_health(&self, d: Duration) {
        self.agent.pause_health(d);
    }

    pub async fn wait_healthy(&self, timeout: Duration) -> Result<(), AgentError> {
        let client = self.client();
        let deadline = Instant::now() + timeout;
        loop {
            match client.health(Some(Duration::from_millis(500))).await {
                Ok(h) if h.agent_id == self.id() => return Ok(()),
                _ if Instant::now() >= deadline => {
                    return Err(AgentError::StartupTimeout(format!("{} did not answer /health", self.agent.name())));
                }
                _ => tokio::time::sleep(Duration::from_millis(20)).await,
            }
        }
    }
}

impl Drop for LocalAgent {
    fn drop(&mut self) {
        self.kill();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterOptions {
    pub policy: Policy,
    pub recovery: RecoveryConfig,
    pub audit: bool,
    /// Whether the master also executes tasks.
    pub master_in_view: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self { policy: Policy::Locality, recovery: RecoveryConfig::default(), audit: false, master_in_view: true }
    }
}

/// Agents started together; the first one masters the applications.
#[derive(Debug)]
pub struct LocalCluster {
    agents: Vec<LocalAgent>,
}

impl LocalCluster {
    pub async fn start(configs: Vec<AgentConfig>, opts: ClusterOptions) -> Result<Self, AgentError> {
        if configs.is_empty() {
            return Err(AgentError::InvalidConfig("a cluster needs at least one agent".into()));
        }
        let mut agents = Vec::with_capacity(configs.len());
        for mut c in configs {
            c.policy = opts.policy;
            c.recovery = opts.recovery;
            c.audit = opts.audit;
            agents.push(LocalAgent::start(c)?);
        }
        for a in &agents {
            a.wait_healthy(Duration::from_secs(10)).await?;
        }
        let cluster = Self { agents };
        let master = cluster.master();
        if opts.master_in_view {
            master.agent().update_resources(ResourceDelta::Add(master.agent().descriptor())).map_err(invalid)?;
        }
        for a in &cluster.agents[1..] {
            cluster.add(a).await.map_err(|e| AgentError::StartupTimeout(e.to_string()))?;
        }
        Ok(cluster)
    }

    pub fn master(&self) -> &LocalAgent {
        &self.agents[0]
    }

    pub fn agents(&self) -> &[LocalAgent] {
        &self.agents
    }

    pub fn workers(&self) -> &[LocalAgent] {
        &self.agents[1..]
    }

    pub fn by_name(&self, name: &str) -> Option<&LocalAgent> {
        self.agents.iter().find(|a| a.agent().name() == name)
    }

    pub fn client(&self) -> AgentClient {
        self.master().client()
    }

    /// Adds an agent to the master's view over `PUT /resources`.
    pub async fn add(&self, agent: &LocalAgent) -> Result<(), ClientError> {
        self.client().update_resources(&ResourceDelta::Add(agent.agent().descriptor())).await.map(|_| ())
    }

    pub async fn remove(&self, agent: AgentId) -> Result<(), ClientError> {
        self.client().update_resources(&ResourceDelta::Remove { agent_id: agent }).await.map(|_| ())
    }

    /// Starts a main program on the master and waits for it to finish.
    pub async fn run(&self, start: &StartApplication, timeout: Duration) -> Result<(ApplicationId, AppStatus), ClientError> {
        let client = self.client();
        let app = client.start_application(start).await?;
        let status = client.wait_application(app, timeout).await?;
        Ok((app, status))
    }
}

fn invalid(e: impl std::fmt::Display) -> AgentError {
    AgentError::InvalidConfig(e.to_string())
}
