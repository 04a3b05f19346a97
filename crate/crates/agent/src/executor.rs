//! Task executors: the builtin function registry plus SHELL and SERVICE runners.
//!
//! Every payload is an encoded [`Value`]. A task receives the payloads of its
//! IN/INOUT parameters in parameter order and must produce exactly one value
//! per OUT/INOUT parameter, again in parameter order.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use taskmesh_core::{TaskKind, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ExecutorError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ExecutorError> {
    Err(ExecutorError(msg.into()))
}

/// Arguments of one function call.
#[derive(Debug, Clone, Copy)]
pub struct Invocation<'a> {
    pub inputs: &'a [Value],
    pub literals: &'a [Value],
    pub n_outputs: usize,
    /// Position within a gang; 0 for single-node tasks.
    pub rank: u32,
    pub gang_size: u32,
}

pub type Builtin = Arc<dyn Fn(&Invocation<'_>) -> Result<Vec<Value>, ExecutorError> + Send + Sync>;

/// Name → pure function. Same inputs always give the same outputs.
#[derive(Clone)]
pub struct ExecutorRegistry {
    functions: HashMap<String, Builtin>,
}

impl std::fmt::Debug for ExecutorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<&String> = self.functions.keys().collect();
        names.sort();
        f.debug_struct("ExecutorRegistry").field("functions", &names).finish()
    }
}

impl Default for ExecutorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ExecutorRegistry {
    pub fn empty() -> Self {
        Self { functions: HashMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("add", add);
        r.register("mul", mul);
        r.register("inc", inc);
        r.register("double", double);
        r.register("identity", identity);
        r.register("concat", concat);
        r.register("matmul", matmul);
        r.register("mix", |inv: &Invocation<'_>| Ok(mix(inv)));
        r.register("sleep", sleep);
        r.register("pi_sample", pi_sample);
        r.register("wordcount_map", wordcount_map);
        r.register("wordcount_reduce", wordcount_reduce);
        r.register("gang_stub", gang_stub);
        r.register("fail", |_: &Invocation<'_>| err("task requested failure"));
        r
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(&Invocation<'_>) -> Result<Vec<Value>, ExecutorError> + Send + Sync + 'static,
    ) {
        self.functions.insert(name.into(), Arc::new(f));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.functions.contains_key(name)
    }

    /// Synchronous call; checks the output arity.
    pub fn call(&self, name: &str, inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
        let Some(f) = self.functions.get(name) else {
            return err(format!("unknown function {name:?}"));
        };
        let out = f(inv)?;
        if out.len() != inv.n_outputs {
            return err(format!("{name} produced {} outputs, expected {}", out.len(), inv.n_outputs));
        }
        Ok(out)
    }

    /// Runs a task of any kind to completion.
    pub async fn run(
        &self,
        kind: &TaskKind,
        inputs: Vec<Value>,
        literals: Vec<Value>,
        n_outputs: usize,
        rank: u32,
        gang_size: u32,
        http: &reqwest::Client,
    ) -> Result<Vec<Value>, ExecutorError> {
        match kind {
            TaskKind::Builtin { function } | TaskKind::Gang { function } => {
                let registry = self.clone();
                let function = function.clone();
                tokio::task::spawn_blocking(move || {
                    let inv = Invocation { inputs: &inputs, literals: &literals, n_outputs, rank, gang_size };
                    registry.call(&function, &inv)
                })
                .await
                .map_err(|e| ExecutorError(format!("executor panicked: {e}")))?
            }
            TaskKind::Shell { command } => run_shell(command, &inputs, n_outputs).await,
            TaskKind::Service { url, method } => run_service(http, url, method, &inputs, n_outputs).await,
        }
    }
}

fn single(inv: &Invocation<'_>, v: Value) -> Result<Vec<Value>, ExecutorError> {
    if inv.n_outputs != 1 {
        return err(format!("function has one output, task declares {}", inv.n_outputs));
    }
    Ok(vec![v])
}

#[derive(Clone, Copy)]
enum Num {
    I(i64),
    F(f64),
}

fn num(v: &Value) -> Result<Num, ExecutorError> {
    match v {
        Value::Int(i) => Ok(Num::I(*i)),
        Value::Float(f) => Ok(Num::F(*f)),
        other => err(format!("expected a number, got {other:?}")),
    }
}

fn fold(vals: impl Iterator<Item = Result<Num, ExecutorError>>, unit: i64, op_i: fn(i64, i64) -> i64, op_f: fn(f64, f64) -> f64) -> Result<Value, ExecutorError> {
    let mut acc = Num::I(unit);
    for v in vals {
        acc = match (acc, v?) {
            (Num::I(a), Num::I(b)) => Num::I(op_i(a, b)),
            (Num::I(a), Num::F(b)) => Num::F(op_f(a as f64, b)),
            (Num::F(a), Num::I(b)) => Num::F(op_f(a, b as f64)),
            (Num::F(a), Num::F(b)) => Num::F(op_f(a, b)),
        };
    }
    Ok(match acc {
        Num::I(i) => Value::Int(i),
        Num::F(f) => Value::Float(f),
    })
}

fn sum(values: &[&Value]) -> Result<Value, ExecutorError> {
    fold(values.iter().map(|v| num(v)), 0, i64::wrapping_add, |a, b| a + b)
}

/// Sum of all inputs and literals.
fn add(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let all: Vec<&Value> = inv.inputs.iter().chain(inv.literals).collect();
    single(inv, sum(&all)?)
}

fn mul(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let v = fold(inv.inputs.iter().chain(inv.literals).map(num), 1, i64::wrapping_mul, |a, b| a * b)?;
    single(inv, v)
}

/// Single input plus the first literal (default 1).
fn inc(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let [x] = inv.inputs else { return err("inc takes exactly one input") };
    let delta = inv.literals.first().cloned().unwrap_or(Value::Int(1));
    single(inv, sum(&[x, &delta])?)
}

fn double(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let [x] = inv.inputs else { return err("double takes exactly one input") };
    single(inv, sum(&[x, x])?)
}

/// Copies input i to output i; a single input fans out to every output.
fn identity(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    match inv.inputs {
        [x] => Ok(vec![x.clone(); inv.n_outputs]),
        xs if xs.len() == inv.n_outputs => Ok(xs.to_vec()),
        xs => err(format!("identity: {} inputs for {} outputs", xs.len(), inv.n_outputs)),
    }
}

fn concat(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let mut out = Vec::new();
    for v in inv.inputs.iter().chain(inv.literals) {
        match v {
            Value::Bytes(b) => out.extend_from_slice(b),
            other => return err(format!("concat expects bytes, got {other:?}")),
        }
    }
    single(inv, Value::Bytes(out))
}

/// Matrix as a flat list: `[rows, cols, a00, a01, ...]`.
pub fn matrix(rows: usize, cols: usize, cells: &[f64]) -> Value {
    let mut v = vec![Value::Int(rows as i64), Value::Int(cols as i64)];
    v.extend(cells.iter().map(|c| Value::Float(*c)));
    Value::List(v)
}

fn unpack_matrix(v: &Value) -> Result<(usize, usize, Vec<f64>), ExecutorError> {
    let Value::List(items) = v else { return err("matrix must be a list") };
    let (Some(Value::Int(r)), Some(Value::Int(c))) = (items.first(), items.get(1)) else {
        return err("matrix header must be [rows, cols]");
    };
    let (r, c) = (*r as usize, *c as usize);
    let cells: Vec<f64> = items[2..]
        .iter()
        .map(|x| match num(x)? {
            Num::I(i) => Ok(i as f64),
            Num::F(f) => Ok(f),
        })
        .collect::<Result<_, _>>()?;
    if cells.len() != r * c {
        return err(format!("matrix {r}x{c} has {} cells", cells.len()));
    }
    Ok((r, c, cells))
}

fn matmul(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let [a, b] = inv.inputs else { return err("matmul takes two inputs") };
    let (ar, ac, a) = unpack_matrix(a)?;
    let (br, bc, b) = unpack_matrix(b)?;
    if ac != br {
        return err(format!("shape mismatch {ar}x{ac} * {br}x{bc}"));
    }
    let mut out = vec![0.0; ar * bc];
    for i in 0..ar {
        for k in 0..ac {
            for j in 0..bc {
                out[i * bc + j] += a[i * ac + k] * b[k * bc + j];
            }
        }
    }
    single(inv, matrix(ar, bc, &out))
}

/// Deterministic digest of all inputs and literals, one distinct value per output.
pub fn mix(inv: &Invocation<'_>) -> Vec<Value> {
    let mut h = Sha256::new();
    for v in inv.inputs {
        let e = v.encode();
        h.update((e.len() as u64).to_le_bytes());
        h.update(&e);
    }
    h.update(b"|");
    for v in inv.literals {
        let e = v.encode();
        h.update((e.len() as u64).to_le_bytes());
        h.update(&e);
    }
    (0..inv.n_outputs)
        .map(|k| {
            let mut hk = h.clone();
            hk.update((k as u64).to_le_bytes());
            Value::Bytes(hk.finalize().to_vec())
        })
        .collect()
}

/// Sleeps `literals[0]` milliseconds, then outputs the sum of the inputs and
/// the remaining literals (or, with several outputs, their mix).
fn sleep(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let Some(Value::Int(ms)) = inv.literals.first() else { return err("sleep needs a millisecond literal") };
    std::thread::sleep(Duration::from_millis((*ms).max(0) as u64));
    let rest = Invocation { literals: &inv.literals[1..], ..*inv };
    match inv.n_outputs {
        0 => Ok(Vec::new()),
        1 => add(&rest),
        _ => Ok(mix(&rest)),
    }
}

/// Literals `[seed, samples, index]`; outputs the number of points inside the unit quarter circle.
fn pi_sample(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let [Value::Int(seed), Value::Int(samples), Value::Int(index)] = inv.literals else {
        return err("pi_sample needs [seed, samples, index]");
    };
    let mut rng = ChaCha8Rng::seed_from_u64((*seed as u64) ^ (*index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut hits = 0i64;
    for _ in 0..*samples {
        let (x, y): (f64, f64) = (rng.gen(), rng.gen());
        if x * x + y * y <= 1.0 {
            hits += 1;
        }
    }
    single(inv, Value::Int(hits))
}

fn counts_to_value(counts: &BTreeMap<String, i64>) -> Value {
    let mut text = String::new();
    for (w, c) in counts {
        text.push_str(&format!("{w}\t{c}\n"));
    }
    Value::Bytes(text.into_bytes())
}

/// Parses the `word<TAB>count` lines produced by the word-count functions.
pub fn parse_counts(v: &Value) -> Result<BTreeMap<String, i64>, ExecutorError> {
    let Some(text) = v.as_str() else { return err("counts must be UTF-8 bytes") };
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let Some((w, c)) = line.split_once('\t') else { return err(format!("bad count line {line:?}")) };
        let c: i64 = c.parse().map_err(|_| ExecutorError(format!("bad count {c:?}")))?;
        *out.entry(w.to_string()).or_insert(0) += c;
    }
    Ok(out)
}

fn wordcount_map(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let [text] = inv.inputs else { return err("wordcount_map takes one input") };
    let Some(text) = text.as_str() else { return err("wordcount_map expects UTF-8 bytes") };
    let mut counts = BTreeMap::new();
    for w in text.split_whitespace() {
        *counts.entry(w.to_lowercase()).or_insert(0) += 1;
    }
    single(inv, counts_to_value(&counts))
}

fn wordcount_reduce(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    let mut total = BTreeMap::new();
    for v in inv.inputs {
        for (w, c) in parse_counts(v)? {
            *total.entry(w).or_insert(0) += c;
        }
    }
    single(inv, counts_to_value(&total))
}

/// Stand-in for a multi-node kernel: every rank reports the gang size.
fn gang_stub(inv: &Invocation<'_>) -> Result<Vec<Value>, ExecutorError> {
    if inv.rank >= inv.gang_size {
        return err(format!("rank {} outside gang of {}", inv.rank, inv.gang_size));
    }
    Ok(vec![Value::Int(inv.gang_size as i64); inv.n_outputs])
}

fn shell_arg(v: &Value) -> Vec<u8> {
    match v {
        Value::Bytes(b) => b.clone(),
        Value::Int(i) => i.to_string().into_bytes(),
        Value::Float(f) => f.to_string().into_bytes(),
        Value::List(items) => items.iter().map(|i| String::from_utf8_lossy(&shell_arg(i)).into_owned()).collect::<Vec<_>>().join(" ").into_bytes(),
    }
}

/// Runs `sh -c` with `{inN}` / `{outN}` replaced by temp file paths. Each
/// output file's bytes become a `Bytes` value.
async fn run_shell(template: &str, inputs: &[Value], n_outputs: usize) -> Result<Vec<Value>, ExecutorError> {
    let dir = tempfile::tempdir().map_err(|e| ExecutorError(format!("tempdir: {e}")))?;
    let mut command = template.to_string();
    for (i, v) in inputs.iter().enumerate() {
        let path = dir.path().join(format!("in{i}"));
        tokio::fs::write(&path, shell_arg(v)).await.map_err(|e| ExecutorError(format!("write input: {e}")))?;
        command = command.replace(&format!("{{in{i}}}"), &path.display().to_string());
    }
    let outs: Vec<_> = (0..n_outputs).map(|i| dir.path().join(format!("out{i}"))).collect();
    for (i, p) in outs.iter().enumerate() {
        command = command.replace(&format!("{{out{i}}}"), &p.display().to_string());
    }
    let status = tokio::process::Command::new("sh")
        .arg("-c")
        .arg(&command)
        .current_dir(dir.path())
        .status()
        .await
        .map_err(|e| ExecutorError(format!("spawn sh: {e}")))?;
    if !status.success() {
        return err(format!("command exited with {status}"));
    }
    let mut values = Vec::with_capacity(n_outputs);
    for p in &outs {
        let bytes = tokio::fs::read(p).await.unwrap_or_default();
        values.push(Value::Bytes(bytes));
    }
    Ok(values)
}

async fn run_service(
    http: &reqwest::Client,
    url: &str,
    method: &str,
    inputs: &[Value],
    n_outputs: usize,
) -> Result<Vec<Value>, ExecutorError> {
    let method = reqwest::Method::from_bytes(method.to_uppercase().as_bytes())
        .map_err(|_| ExecutorError(format!("bad HTTP method {method:?}")))?;
    let body: Vec<u8> = inputs.first().map(shell_arg).unwrap_or_default();
    let resp = http
        .request(method, url)
        .body(body)
        .send()
        .await
        .map_err(|e| ExecutorError(format!("service call failed: {e}")))?;
    let status = resp.status();
    if !status.is_success() {
        return err(format!("service answered {status}"));
    }
    let bytes = resp.bytes().await.map_err(|e| ExecutorError(format!("service body: {e}")))?;
    Ok(vec![Value::Bytes(bytes.to_vec()); n_outputs])
}
