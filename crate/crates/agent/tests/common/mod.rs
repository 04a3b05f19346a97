#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use taskmesh_agent::executor::Invocation;
use taskmesh_agent::protocol::{AppHints, StartApplication};
use taskmesh_agent::{AgentConfig, ExecutorRegistry, Script, ScriptData, ScriptTask};
use taskmesh_core::{AccessMode, AgentId, TaskKind, Value};

pub fn start(demo: &str, literals: Vec<Value>) -> StartApplication {
    StartApplication { main: TaskKind::builtin(demo), literals, hints: AppHints::default() }
}

pub fn script_start(script: &Script) -> StartApplication {
    start("script", vec![script.to_literal()])
}

pub fn cfg(name: &str, cores: u32) -> AgentConfig {
    AgentConfig::new(name, cores, 16 * 1024)
}

pub fn configs(n: usize, cores: u32) -> Vec<AgentConfig> {
    (0..n).map(|i| cfg(&format!("agent{i}"), cores)).collect()
}

pub async fn eventually(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    cond()
}

pub fn data(name: impl Into<String>, initial: Option<Value>, home: Option<AgentId>) -> ScriptData {
    ScriptData { name: name.into(), initial, home }
}

pub fn task(function: &str, params: Vec<(usize, AccessMode)>, literals: Vec<Value>) -> ScriptTask {
    ScriptTask { kind: TaskKind::builtin(function), params, literals, constraints: None }
}

/// `n` independent `sleep` tasks of `ms` milliseconds.
pub fn sleep_script(n: usize, ms: i64) -> Script {
    Script {
        data: (0..n).map(|i| data(format!("o{i}"), None, None)).collect(),
        tasks: (0..n).map(|i| task("sleep", vec![(i, AccessMode::Out)], vec![Value::Int(ms), Value::Int(i as i64)])).collect(),
    }
}

/// A random straight-line program and every version it writes, as computed
/// by running the same functions in program order.
pub struct Program {
    pub script: Script,
    /// (data index, version, encoded value)
    pub expected: Vec<(usize, u64, Vec<u8>)>,
}

pub fn random_program(rng: &mut ChaCha8Rng, max_tasks: usize, max_data: usize) -> Program {
    let registry = ExecutorRegistry::with_builtins();
    let n_data = rng.gen_range(1..=max_data);
    let n_tasks = rng.gen_range(1..=max_tasks);
    let mut current: Vec<Option<(u64, Value)>> = vec![None; n_data];
    let mut script = Script::default();
    let mut expected = Vec::new();
    for (i, cur) in current.iter_mut().enumerate() {
        let initial = rng.gen_bool(0.6).then(|| Value::Int(rng.gen_range(-1000..1000)));
        if let Some(v) = &initial {
            expected.push((i, 0, v.encode()));
            *cur = Some((0, v.clone()));
        }
        script.data.push(data(format!("d{i}"), initial, None));
    }
    for _ in 0..n_tasks {
        let p = rng.gen_range(1..=n_data.min(4));
        let picked = sample(rng, n_data, p).into_vec();
        let mut params: Vec<(usize, AccessMode)> = picked
            .iter()
            .map(|&d| {
                let mode = if current[d].is_none() {
                    AccessMode::Out
                } else {
                    [AccessMode::In, AccessMode::InOut, AccessMode::Out][rng.gen_range(0..3)]
                };
                (d, mode)
            })
            .collect();
        if params.iter().all(|(_, m)| !m.writes()) {
            params.last_mut().unwrap().1 = AccessMode::InOut;
        }
        let inputs: Vec<Value> =
            params.iter().filter(|(_, m)| m.reads()).map(|(d, _)| current[*d].as_ref().unwrap().1.clone()).collect();
        let n_out = params.iter().filter(|(_, m)| m.writes()).count();
        let all_int = inputs.iter().all(|v| matches!(v, Value::Int(_)));
        let function = if n_out == 1 && all_int && !inputs.is_empty() {
            match (inputs.len(), rng.gen_range(0..4)) {
                (1, 0) => "inc",
                (1, 1) => "double",
                (_, 2) => "mul",
                _ => "add",
            }
        } else if n_out == 1 && inputs.is_empty() {
            "add"
        } else if inputs.len() == 1 && rng.gen_bool(0.3) {
            "identity"
        } else {
            "mix"
        };
        let literals: Vec<Value> = match function {
            "inc" => vec![Value::Int(rng.gen_range(-5..50))],
            "double" | "identity" => vec![],
            _ => (0..rng.gen_range(0..3)).map(|_| Value::Int(rng.gen_range(-100..100))).collect(),
        };
        let inv = Invocation { inputs: &inputs, literals: &literals, n_outputs: n_out, rank: 0, gang_size: 1 };
        let outputs = registry.call(function, &inv).expect("generated calls are well-typed");
        for ((d, _), value) in params.iter().filter(|(_, m)| m.writes()).zip(outputs) {
            let version = current[*d].as_ref().map_or(1, |(v, _)| v + 1);
            expected.push((*d, version, value.encode()));
            current[*d] = Some((version, value));
        }
        script.tasks.push(task(function, params, literals));
    }
    Program { script, expected }
}
