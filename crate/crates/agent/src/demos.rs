//! Main programs bundled with the agent and the context they run in.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use taskmesh_core::access::AccessError;
use taskmesh_core::store::StoreError;
use taskmesh_core::{
    AccessMode, AgentId, ApplicationId, DataId, DataVersion, ResourceConstraints, TaskId, TaskKind, TaskSpec, Value,
};
use thiserror::Error;

use crate::agent::Agent;
use crate::protocol::{AppStatus, MainState, StartApplication};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("unknown demo {0:?}")]
    UnknownDemo(String),
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Main-program state kept by the master.
#[derive(Debug)]
pub struct AppRecord {
    pub main: Mutex<MainState>,
    pub names: Mutex<BTreeMap<String, DataId>>,
    pub values: Mutex<BTreeMap<String, Value>>,
}

impl AppRecord {
    fn new() -> Self {
        Self { main: Mutex::new(MainState::Running), names: Mutex::default(), values: Mutex::default() }
    }
}

/// What a main program sees: named data, puts, task registration and barriers.
#[derive(Clone)]
pub struct AppContext {
    agent: Arc<Agent>,
    app: ApplicationId,
    record: Arc<AppRecord>,
}

impl AppContext {
    pub fn app(&self) -> ApplicationId {
        self.app
    }

    pub fn data(&self, name: &str) -> DataId {
        let id = DataId::new();
        self.record.names.lock().unwrap().insert(name.to_string(), id);
        id
    }

    /// Explicit put. The value stays in master memory until a task needs it.
    pub fn put(&self, data: DataId, value: &Value) -> Result<DataVersion, DemoError> {
        let v = self.agent.ap.put(self.app, data)?;
        self.agent.pending.lock().unwrap().insert(v, Bytes::from(value.encode()));
        Ok(v)
    }

    /// Explicit put persisted right away with its first replica on `home`.
    pub async fn put_at(&self, data: DataId, value: &Value, home: AgentId) -> Result<DataVersion, DemoError> {
        let v = self.agent.ap.next_put_version(self.app, data)?;
        self.agent.persist(v, Bytes::from(value.encode()), home).await?;
        self.agent.ap.put_version(self.app, v)?;
        Ok(v)
    }

    pub fn task(&self, spec: TaskSpec) -> Result<TaskId, DemoError> {
        Ok(self.agent.register_task(spec)?.task_id)
    }

    pub fn spec(&self, function: &str) -> TaskSpec {
        TaskSpec::new(self.app, TaskKind::builtin(function))
    }

    /// Barrier: every registered task is terminal. Closes the application.
    pub async fn wait_all(&self) -> Result<(), DemoError> {
        loop {
            let ap = self.agent.ap.clone();
            let app = self.app;
            let r = tokio::task::spawn_blocking(move || ap.wait_all_timeout(app, Some(Duration::from_millis(200))))
                .await
                .expect("wait_all worker");
            if r?.is_some() {
                return Ok(());
            }
        }
    }

    /// Latest value of `data`.
    pub async fn fetch(&self, data: DataId) -> Result<Value, DemoError> {
        let summary = self.agent.ap.summary(self.app)?;
        let v = *summary.last_writer.get(&data).ok_or(AccessError::UnknownData(data))?;
        let bytes = self.agent.read_for(v, self.agent.id, true).await?;
        Value::decode(&bytes).map_err(|e| DemoError::InvalidArgs(format!("{v}: {e}")))
    }

    pub fn set_value(&self, name: &str, value: Value) {
        self.record.values.lock().unwrap().insert(name.to_string(), value);
    }
}

/// A data item of a [`Script`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptData {
    pub name: String,
    #[serde(default)]
    pub initial: Option<Value>,
    /// Persist the initial value on this agent instead of keeping it pending.
    #[serde(default)]
    pub home: Option<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptTask {
    pub kind: TaskKind,
    /// Index into [`Script::data`] and access mode.
    pub params: Vec<(usize, AccessMode)>,
    #[serde(default)]
    pub literals: Vec<Value>,
    #[serde(default)]
    pub constraints: Option<ResourceConstraints>,
}

/// A straight-line main program: initial puts, then tasks in order, then a barrier.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub data: Vec<ScriptData>,
    pub tasks: Vec<ScriptTask>,
}

impl Script {
    pub fn to_literal(&self) -> Value {
        Value::Bytes(serde_json::to_vec(self).expect("script serializes"))
    }

    pub fn from_literal(v: &Value) -> Result<Self, DemoError> {
        let bytes = v.as_bytes().ok_or_else(|| DemoError::InvalidArgs("script must be a bytes literal".into()))?;
        serde_json::from_slice(bytes).map_err(|e| DemoError::InvalidArgs(format!("script: {e}")))
    }
}

pub const DEMOS: &[&str] = &["chain", "diamond", "wordcount", "montecarlo-pi", "gangdemo", "script", "external"];

fn int_arg(literals: &[Value], i: usize, default: i64) -> Result<i64, DemoError> {
    match literals.get(i) {
        None => Ok(default),
        Some(Value::Int(n)) => Ok(*n),
        Some(Value::Bytes(b)) => std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| DemoError::InvalidArgs(format!("argument {i} is not an integer"))),
        Some(other) => Err(DemoError::InvalidArgs(format!("argument {i} is not an integer: {other:?}"))),
    }
}

impl Agent {
    /// Starts a bundled main program as a new application mastered here.
    pub fn start_application(self: &Arc<Self>, req: StartApplication) -> Result<ApplicationId, DemoError> {
        let TaskKind::Builtin { function: name } = &req.main else {
            return Err(DemoError::InvalidArgs("the main program must be a BUILTIN demo".into()));
        };
        if !DEMOS.contains(&name.as_str()) {
            return Err(DemoError::UnknownDemo(name.clone()));
        }
        // Validate arguments up front so bad requests fail synchronously.
        let script = if name == "script" {
            Some(Script::from_literal(
                req.literals.first().ok_or_else(|| DemoError::InvalidArgs("script needs one literal".into()))?,
            )?)
        } else {
            None
        };
        for i in 0..req.literals.len() {
            if matches!(name.as_str(), "chain" | "diamond" | "montecarlo-pi" | "gangdemo") {
                int_arg(&req.literals, i, 0)?;
            }
        }
        let app = ApplicationId::new();
        self.ap.open_application(app)?;
        let record = Arc::new(AppRecord::new());
        self.apps.lock().unwrap().insert(app, record.clone());
        let ctx = AppContext { agent: self.clone(), app, record: record.clone() };
        let name = name.clone();
        let seed = req.hints.seed.unwrap_or(42);
        let literals = req.literals;
        let fut: std::pin::Pin<Box<dyn std::future::Future<Output = ()> + Send>> = Box::pin(async move {
            let result = run_demo(&ctx, &name, &literals, seed, script).await;
            *record.main.lock().unwrap() = match result {
                Ok(()) => MainState::Finished,
                Err(e) => MainState::Failed { error: e.to_string() },
            };
        });
        tokio::spawn(fut);
        Ok(app)
    }

    pub fn app_status(&self, app: ApplicationId) -> Option<AppStatus> {
        let record = self.apps.lock().unwrap().get(&app).cloned()?;
        let summary = self.ap.summary(app).ok()?;
        let main = record.main.lock().unwrap().clone();
        let data = record.names.lock().unwrap().clone();
        let values = record.values.lock().unwrap().clone();
        Some(AppStatus {
            finished: main != MainState::Running && summary.done,
            main,
            data,
            values,
            unschedulable: self.unschedulable(app),
            summary,
        })
    }
}

async fn run_demo(
    ctx: &AppContext,
    name: &str,
    literals: &[Value],
    seed: u64,
    script: Option<Script>,
) -> Result<(), DemoError> {
    match name {
        "chain" => chain(ctx, int_arg(literals, 0, 10)?).await,
        "diamond" => diamond(ctx, int_arg(literals, 0, 100)?).await,
        "wordcount" => wordcount(ctx, literals).await,
        "montecarlo-pi" => montecarlo_pi(ctx, int_arg(literals, 0, 100_000)?, int_arg(literals, 1, 8)?, seed).await,
        "gangdemo" => gangdemo(ctx, int_arg(literals, 0, 2)?).await,
        "script" => run_script(ctx, script.expect("parsed on start")).await,
        "external" => Ok(()),
        other => Err(DemoError::UnknownDemo(other.to_string())),
    }
}

async fn chain(ctx: &AppContext, n: i64) -> Result<(), DemoError> {
    let x = ctx.data("x");
    ctx.put(x, &Value::Int(0))?;
    for _ in 0..n {
        ctx.task(ctx.spec("inc").param(x, AccessMode::InOut))?;
    }
    ctx.wait_all().await?;
    let v = ctx.fetch(x).await?;
    ctx.set_value("x", v);
    Ok(())
}

/// d0 = 3; x = d0 + 1; a = x + 10; b = x + 20; r = a + b = 38.
async fn diamond(ctx: &AppContext, delay_ms: i64) -> Result<(), DemoError> {
    let (d0, x, a, b, r) = (ctx.data("d0"), ctx.data("x"), ctx.data("a"), ctx.data("b"), ctx.data("r"));
    ctx.put(d0, &Value::Int(3))?;
    let sleep = |inputs: &[DataId], out: DataId, lit: i64| {
        let mut s = ctx.spec("sleep");
        for i in inputs {
            s = s.param(*i, AccessMode::In);
        }
        s.param(out, AccessMode::Out).literal(delay_ms).literal(lit)
    };
    ctx.task(sleep(&[d0], x, 1))?;
    ctx.task(sleep(&[x], a, 10))?;
    ctx.task(sleep(&[x], b, 20))?;
    ctx.task(sleep(&[a, b], r, 0))?;
    ctx.wait_all().await?;
    let v = ctx.fetch(r).await?;
    ctx.set_value("r", v);
    Ok(())
}

/// Literals: the text, then an optional chunk count.
async fn wordcount(ctx: &AppContext, literals: &[Value]) -> Result<(), DemoError> {
    let text = literals
        .first()
        .and_then(|v| v.as_str())
        .ok_or_else(|| DemoError::InvalidArgs("wordcount needs the text as a UTF-8 literal".into()))?;
    let chunks = int_arg(literals, 1, 4)?.max(1) as usize;
    let lines: Vec<&str> = text.lines().collect();
    let per = lines.len().div_ceil(chunks).max(1);
    let mut partials = Vec::new();
    for (i, group) in lines.chunks(per).enumerate() {
        let chunk = ctx.data(&format!("chunk{i}"));
        ctx.put(chunk, &Value::from(group.join("\n").as_str()))?;
        let counts = ctx.data(&format!("counts{i}"));
        ctx.task(ctx.spec("wordcount_map").param(chunk, AccessMode::In).param(counts, AccessMode::Out))?;
        partials.push(counts);
    }
    let total = ctx.data("total");
    let mut reduce = ctx.spec("wordcount_reduce");
    for p in &partials {
        reduce = reduce.param(*p, AccessMode::In);
    }
    if partials.is_empty() {
        ctx.put(total, &Value::Bytes(Vec::new()))?;
    } else {
        ctx.task(reduce.param(total, AccessMode::Out))?;
    }
    ctx.wait_all().await?;
    let v = ctx.fetch(total).await?;
    ctx.set_value("counts", v);
    Ok(())
}

async fn montecarlo_pi(ctx: &AppContext, samples: i64, tasks: i64, seed: u64) -> Result<(), DemoError> {
    if samples <= 0 || tasks <= 0 {
        return Err(DemoError::InvalidArgs("samples and tasks must be positive".into()));
    }
    let per = samples / tasks;
    let mut parts = Vec::new();
    for i in 0..tasks {
        let hits = ctx.data(&format!("hits{i}"));
        ctx.task(ctx.spec("pi_sample").param(hits, AccessMode::Out).literal(seed as i64).literal(per).literal(i))?;
        parts.push(hits);
    }
    let total = ctx.data("hits");
    let mut sum = ctx.spec("add");
    for p in &parts {
        sum = sum.param(*p, AccessMode::In);
    }
    ctx.task(sum.param(total, AccessMode::Out))?;
    ctx.wait_all().await?;
    let hits = ctx.fetch(total).await?.as_int().unwrap_or(0);
    ctx.set_value("hits", Value::Int(hits));
    ctx.set_value("pi", Value::Float(4.0 * hits as f64 / (per * tasks) as f64));
    Ok(())
}

async fn gangdemo(ctx: &AppContext, nodes: i64) -> Result<(), DemoError> {
    if nodes <= 0 {
        return Err(DemoError::InvalidArgs("gang width must be positive".into()));
    }
    let out = ctx.data("width");
    let spec = TaskSpec::new(ctx.app, TaskKind::gang("gang_stub"))
        .param(out, AccessMode::Out)
        .constraints(ResourceConstraints::default().with_nodes(nodes as u32));
    ctx.task(spec)?;
    ctx.wait_all().await?;
    let v = ctx.fetch(out).await?;
    ctx.set_value("width", v);
    Ok(())
}

async fn run_script(ctx: &AppContext, script: Script) -> Result<(), DemoError> {
    let mut ids = Vec::with_capacity(script.data.len());
    for d in &script.data {
        let id = ctx.data(&d.name);
        match (&d.initial, d.home) {
            (Some(v), Some(home)) => {
                ctx.put_at(id, v, home).await?;
            }
            (Some(v), None) => {
                ctx.put(id, v)?;
            }
            (None, _) => {}
        }
        ids.push(id);
    }
    for t in &script.tasks {
        let mut spec = TaskSpec::new(ctx.app, t.kind.clone());
        for (i, mode) in &t.params {
            let id = *ids.get(*i).ok_or_else(|| DemoError::InvalidArgs(format!("data index {i} out of range")))?;
            spec = spec.param(id, *mode);
        }
        spec.literals = t.literals.clone();
        if let Some(c) = &t.constraints {
            spec.constraints = c.clone();
        }
        ctx.task(spec)?;
    }
    ctx.wait_all().await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_round_trips_through_a_literal() {
        let s = Script {
            data: vec![ScriptData { name: "x".into(), initial: Some(Value::Int(1)), home: None }],
            tasks: vec![ScriptTask {
                kind: TaskKind::builtin("inc"),
                params: vec![(0, AccessMode::InOut)],
                literals: vec![],
                constraints: None,
            }],
        };
        assert_eq!(Script::from_literal(&s.to_literal()).unwrap(), s);
    }

    #[test]
    fn integer_arguments_accept_text() {
        assert_eq!(int_arg(&[Value::from("12")], 0, 0).unwrap(), 12);
        assert_eq!(int_arg(&[], 0, 7).unwrap(), 7);
        assert!(int_arg(&[Value::from("x")], 0, 0).is_err());
    }
}
