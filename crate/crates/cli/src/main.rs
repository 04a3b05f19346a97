//! `taskmesh`: run agents, bring up localhost topologies, submit the bundled
//! demo applications and inspect their graphs and traces.

mod supervisor;
mod topology;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use taskmesh_agent::protocol::{AppHints, AppStatus, MainState, StartApplication};
use taskmesh_agent::{bind, serve, Agent, AgentClient, AgentConfig, AgentError, ClientError};
use taskmesh_core::recovery::{LivenessRecord, RecoveryConfig};
use taskmesh_core::trace::{parse_trace, trace_stats};
use taskmesh_core::{ApplicationId, Policy, ProcessorKind, TaskKind, TaskState, Value};
use thiserror::Error;

use supervisor::{Supervisor, SupervisorError, READY_PREFIX};
use topology::{TopologyConfig, TopologyError};

#[derive(Debug, Parser)]
#[command(name = "taskmesh", version, about = "Task-based workflow runtime over REST agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Agent daemon.
    #[command(subcommand)]
    Agent(AgentCommand),
    /// Start every agent of a topology file and keep them running until
    /// interrupted or stdin closes.
    Up {
        #[arg(long)]
        topology: PathBuf,
        /// Directory for per-agent trace files.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run a bundled demo application and wait for it to finish.
    Submit(SubmitArgs),
    /// Summary of one application plus the master's liveness view.
    Status {
        app: ApplicationId,
        #[arg(long)]
        master: String,
        #[arg(long)]
        json: bool,
    },
    /// Dependency graph of one application.
    Graph {
        app: ApplicationId,
        #[arg(long)]
        master: String,
        #[arg(long, value_enum, default_value_t = GraphFormat::Listing)]
        format: GraphFormat,
    },
    /// Dump the master's scheduling trace as line-delimited JSON.
    Trace {
        #[arg(long)]
        master: String,
        #[arg(long)]
        app: Option<ApplicationId>,
    },
    /// Aggregate a trace file: per-agent tasks, locality hit-rate, transfer bytes, makespan.
    TraceStats {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum AgentCommand {
    /// Serve the REST interface until killed.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Take the agent's settings from this topology file (selected by --name).
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 0)]
    port: u16,
    #[arg(long, default_value_t = 1)]
    cores: u32,
    #[arg(long, default_value_t = 1024)]
    memory_mb: u64,
    #[arg(long = "tag")]
    tags: Vec<String>,
    #[arg(long = "processor", default_values_t = vec!["cpu".to_string()])]
    processors: Vec<String>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Locality)]
    policy: PolicyArg,
    #[arg(long)]
    probe_period_ms: Option<u64>,
    #[arg(long)]
    max_misses: Option<u32>,
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Append every trace record to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Exit when stdin reaches end of file (used by supervising parents).
    #[arg(long)]
    exit_on_stdin_eof: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Locality,
    RoundRobin,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GraphFormat {
    Listing,
    Dot,
    Json,
}

#[derive(Debug, Args)]
struct SubmitArgs {
    /// chain, diamond, wordcount, montecarlo-pi or gangdemo.
    demo: String,
    /// Demo arguments; `wordcount` takes a file path first.
    args: Vec<String>,
    #[arg(long, conflicts_with = "topology", required_unless_present = "topology")]
    master: Option<String>,
    /// Start this topology for the run and tear it down afterwards.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Kill this agent's process once `--at-task` tasks have completed.
    #[arg(long, requires = "at_task", requires = "topology")]
    kill_agent: Option<String>,
    #[arg(long, requires = "kill_agent")]
    at_task: Option<usize>,
    #[arg(long, default_value_t = 600)]
    timeout_secs: u64,
    /// Write the application's trace records here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Connectivity(String),
    #[error("{0}")]
    TaskFailure(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::TaskFailure(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Connectivity(_) => 3,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e.status() {
            Some(s) if (400..500).contains(&s) => CliError::Usage(e.to_string()),
            _ => CliError::Connectivity(e.to_string()),
        }
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Connectivity(e.to_string()),
        }
    }
}

impl From<SupervisorError> for CliError {
    fn from(e: SupervisorError) -> Self {
        CliError::Connectivity(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Agent(AgentCommand::Serve(args)) => serve_agent(args),
        other => runtime().block_on(run(other)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime")
}

async fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Agent(_) => unreachable!("served on its own runtime"),
        Command::Up { topology, trace_dir, json } => up(topology, trace_dir, json).await,
        Command::Submit(args) => submit(args).await,
        Command::Status { app, master, json } => status(app, &master, json).await,
        Command::Graph { app, master, format } => {
            let client = AgentClient::new(&master);
            let text = match format {
                GraphFormat::Json => serde_json::to_string_pretty(&client.graph(app).await?).expect("graph serializes"),
                GraphFormat::Dot => client.graph_text(app, "dot").await?,
                GraphFormat::Listing => client.graph_text(app, "listing").await?,
            };
            println!("{}", text.trim_end());
            Ok(())
        }
        Command::Trace { master, app } => {
            let records = AgentClient::new(&master).trace(app).await?;
            let mut out = std::io::stdout().lock();
            for r in records {
                let _ = writeln!(out, "{}", r.to_line());
            }
            Ok(())
        }
        Command::TraceStats { file, json } => {
            let text = std::fs::read_to_string(&file).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
            let records = parse_trace(&text).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
            let stats = trace_stats(&records);
            if json {
                println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            } else {
                println!("{stats}");
            }
            Ok(())
        }
    }
}

// ---- agent serve ----------------------------------------------------------------

fn serve_config(args: &ServeArgs) -> Result<AgentConfig, CliError> {
    let mut config = if let Some(path) = &args.topology {
        let t = TopologyConfig::load(path)?;
        let entry = t.agent(&args.name).ok_or_else(|| CliError::Usage(format!("no agent `{}` in {}", args.name, path.display())))?;
        t.agent_config(entry)?
    } else {
        let mut c = AgentConfig::new(&args.name, args.cores, args.memory_mb);
        c.host = args.host.clone();
        c.port = args.port;
        c.software_tags = args.tags.iter().cloned().collect();
        c.processor_kinds = args
            .processors
            .iter()
            .map(|p| p.parse::<ProcessorKind>())
            .collect::<Result<_, _>>()
            .map_err(CliError::Usage)?;
        c.policy = match args.policy {
            PolicyArg::Locality => Policy::Locality,
            PolicyArg::RoundRobin => Policy::RoundRobin,
        };
        c
    };
    let defaults = config.recovery;
    config.recovery = RecoveryConfig {
        probe_period_ms: args.probe_period_ms.unwrap_or(defaults.probe_period_ms),
        max_misses: args.max_misses.unwrap_or(defaults.max_misses),
        max_attempts: args.max_attempts.unwrap_or(defaults.max_attempts),
    };
    config.trace_path = args.trace.clone();
    config.validate()?;
    Ok(config)
}

fn serve_agent(args: ServeArgs) -> Result<(), CliError> {
    let config = serve_config(&args)?;
    let listener = bind(&config)?;
    let addr = listener.local_addr().map_err(AgentError::from)?;
    let agent = Agent::new(config, addr)?;
    if args.exit_on_stdin_eof {
        std::thread::spawn(|| {
            let _ = std::io::copy(&mut std::io::stdin().lock(), &mut std::io::sink());
            std::process::exit(0);
        });
    }
    {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{READY_PREFIX} {} {}", agent.id(), agent.endpoint());
        let _ = out.flush();
    }
    runtime().block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| CliError::Connectivity(e.to_string()))?;
        serve(agent, listener).await.map_err(|e| CliError::Connectivity(e.to_string()))
    })
}

// ---- up -------------------------------------------------------------------------

#[derive(Serialize)]
struct AgentLine<'a> {
    name: &'a str,
    agent_id: String,
    endpoint: &'a str,
}

fn print_agents(sup: &Supervisor, json: bool) {
    let lines: Vec<AgentLine> = sup
        .agents
        .iter()
        .map(|a| AgentLine { name: &a.name, agent_id: a.agent_id.to_string(), endpoint: &a.endpoint })
        .collect();
    if json {
        println!("{}", serde_json::to_string(&lines).expect("agents serialize"));
    } else {
        for l in &lines {
            println!("{:<16} {} {}", l.name, l.agent_id, l.endpoint);
        }
    }
    let _ = std::io::stdout().flush();
}

async fn up(path: PathBuf, trace_dir: Option<PathBuf>, json: bool) -> Result<(), CliError> {
    let topology = TopologyConfig::load(&path)?;
    let mut sup = Supervisor::up(&topology, trace_dir).await?;
    print_agents(&sup, json);
    let stdin_closed = async {
        use tokio::io::AsyncReadExt;
        let mut buf = [0u8; 256];
        let mut stdin = tokio::io::stdin();
        while matches!(stdin.read(&mut buf).await, Ok(n) if n > 0) {}
    };
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = stdin_closed => {}
    }
    sup.teardown();
    Ok(())
}

// ---- submit ---------------------------------------------------------------------

fn demo_literals(demo: &str, args: &[String]) -> Result<Vec<Value>, CliError> {
    let literal = |s: &String| s.parse::<i64>().map(Value::Int).unwrap_or_else(|_| Value::from(s.as_str()));
    match (demo, args) {
        ("wordcount", [file, rest @ ..]) => {
            let text = std::fs::read_to_string(file).map_err(|e| CliError::Usage(format!("{file}: {e}")))?;
            Ok(std::iter::once(Value::from(text)).chain(rest.iter().map(literal)).collect())
        }
        ("wordcount", []) => Err(CliError::Usage("wordcount needs a FILE argument".into())),
        _ => Ok(args.iter().map(literal).collect()),
    }
}

fn counts_line(s: &AppStatus) -> String {
    let counts: Vec<String> = s.summary.counts.iter().map(|(k, v)| format!("{}={v}", state_name(*k))).collect();
    counts.join(" ")
}

fn state_name(s: TaskState) -> String {
    format!("{s:?}").to_uppercase()
}

fn show(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Bytes(b) => match std::str::from_utf8(b) {
            Ok(s) => format!("{s:?}"),
            Err(_) => format!("<{} bytes>", b.len()),
        },
        Value::List(items) => format!("[{}]", items.iter().map(show).collect::<Vec<_>>().join(", ")),
    }
}

fn print_status(s: &AppStatus) {
    let main = match &s.main {
        MainState::Running => "running".to_string(),
        MainState::Finished => "finished".to_string(),
        MainState::Failed { error } => format!("failed: {error}"),
    };
    println!("application {}", s.summary.app);
    println!("main      {main}");
    println!("finished  {}", s.finished);
    println!("tasks     {} ({})", s.summary.total, counts_line(s));
    for (name, v) in &s.values {
        println!("value     {name} = {}", show(v));
    }
    for t in &s.unschedulable {
        println!("unschedulable {t}");
    }
}

fn outcome(s: &AppStatus) -> Result<(), CliError> {
    if let MainState::Failed { error } = &s.main {
        return Err(CliError::TaskFailure(format!("application failed: {error}")));
    }
    if s.failed_tasks() > 0 {
        return Err(CliError::TaskFailure(format!("{} task(s) failed", s.failed_tasks())));
    }
    if !s.finished {
        return Err(CliError::TaskFailure("application did not finish in time".into()));
    }
    Ok(())
}

async fn submit(args: SubmitArgs) -> Result<(), CliError> {
    let literals = demo_literals(&args.demo, &args.args)?;
    let mut sup = match &args.topology {
        Some(path) => Some(Supervisor::up(&TopologyConfig::load(path)?, None).await?),
        None => None,
    };
    if let (Some(s), Some(name)) = (&sup, &args.kill_agent) {
        if s.by_name(name).is_none() {
            return Err(CliError::Usage(format!("no agent named `{name}` in the topology")));
        }
        if s.master().name == *name {
            return Err(CliError::Usage("--kill-agent cannot target the master".into()));
        }
    }
    let client = match (&sup, &args.master) {
        (Some(s), _) => s.master().client(),
        (None, Some(url)) => AgentClient::new(url),
        (None, None) => unreachable!("clap requires --master or --topology"),
    };
    let start = StartApplication {
        main: TaskKind::builtin(&args.demo),
        literals,
        hints: AppHints { seed: args.seed, ..AppHints::default() },
    };
    let app = client.start_application(&start).await?;
    if !args.json {
        eprintln!("started application {app}");
    }
    let deadline = Instant::now() + Duration::from_secs(args.timeout_secs);
    let mut last = String::new();
    let mut pending_kill = args.kill_agent.clone().zip(args.at_task);
    let status = loop {
        let s = client.application(app).await?;
        let line = counts_line(&s);
        if !args.json && line != last {
            eprintln!("  {line}");
            last = line;
        }
        if let (Some((name, k)), Some(sup)) = (&pending_kill, sup.as_mut()) {
            if s.summary.count(TaskState::Completed) >= *k {
                sup.kill(name);
                if !args.json {
                    eprintln!("killed agent {name} after {} completed task(s)", s.summary.count(TaskState::Completed));
                }
                pending_kill = None;
            }
        }
        if (s.finished && s.main != MainState::Running) || matches!(s.main, MainState::Failed { .. }) || Instant::now() >= deadline {
            break s;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    };
    if let Some(path) = &args.trace_out {
        let records = client.trace(Some(app)).await?;
        let text: String = records.iter().map(|r| r.to_line() + "\n").collect();
        std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    if args.json {
        println!("{}", serde_json::to_string(&status).expect("status serializes"));
    } else {
        print_status(&status);
    }
    drop(sup);
    outcome(&status)
}

// ---- status ---------------------------------------------------------------------

#[derive(Serialize)]
struct StatusOutput {
    #[serde(flatten)]
    status: AppStatus,
    liveness: Vec<LivenessRecord>,
}

async fn status(app: ApplicationId, master: &str, json: bool) -> Result<(), CliError> {
    let client = AgentClient::new(master);
    let status = client.application(app).await?;
    let liveness = client.resources().await?.liveness;
    if json {
        println!("{}", serde_json::to_string(&StatusOutput { status, liveness }).expect("status serializes"));
    } else {
        print_status(&status);
        let by_agent: BTreeMap<_, _> = liveness.iter().map(|l| (l.agent_id, l)).collect();
        for (agent, l) in by_agent {
            println!("agent     {agent} {:?} (misses {})", l.status, l.consecutive_misses);
        }
    }
    Ok(())
}
