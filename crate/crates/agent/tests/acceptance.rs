//! Acceptance criteria of the runtime, one PASS/FAIL line each.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmesh_agent::protocol::{AppStatus, MainState};
use taskmesh_agent::sink::now_us;
use taskmesh_agent::{AgentConfig, AgentStore, ClusterOptions, LocalAgent, LocalCluster, Script, ScriptTask};
use taskmesh_core::access::AccessProcessor;
use taskmesh_core::scheduler::AgentStatus;
use taskmesh_core::store::conformance::{self, SuiteConfig};
use taskmesh_core::trace::{trace_stats, TraceEvent};
use taskmesh_core::{
    AccessMode, AgentId, ApplicationId, DataId, DataVersion, MemoryStore, ProcessorKind, ResourceConstraints,
    TaskId, TaskKind, TaskSpec, TaskState, Value,
};

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

async fn run_app(cluster: &LocalCluster, script: &Script, timeout: Duration) -> Result<(ApplicationId, AppStatus), String> {
    let (app, s) = cluster.run(&script_start(script), timeout).await.map_err(|e| e.to_string())?;
    check(s.finished && s.main == MainState::Finished, || format!("application did not finish: {:?} {:?}", s.main, s.summary.counts))?;
    Ok((app, s))
}

async fn version_bytes(master: &LocalAgent, v: DataVersion) -> Result<Vec<u8>, String> {
    master.agent().read_for(v, master.id(), true).await.map(|b| b.to_vec()).map_err(|e| format!("{v}: {e}"))
}

// ---- sequential equivalence ----------------------------------------------------

async fn run_program(cluster: Arc<LocalCluster>, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prog = random_program(&mut rng, 200, 50);
    let (_, status) = run_app(&cluster, &prog.script, Duration::from_secs(120)).await.map_err(|e| format!("seed {seed}: {e}"))?;
    let n = prog.script.tasks.len();
    check(status.summary.count(TaskState::Completed) == n, || format!("seed {seed}: {:?}", status.summary.counts))?;
    for (d, version, bytes) in &prog.expected {
        let id = status.data[&format!("d{d}")];
        let got = version_bytes(cluster.master(), DataVersion::new(id, *version)).await?;
        check(&got == bytes, || format!("seed {seed}: d{d} v{version} differs from the in-order result"))?;
    }
    Ok(n)
}

async fn sequential_equivalence() -> Outcome {
    const PROGRAMS: u64 = 500;
    let t0 = Instant::now();
    let mut tasks = 0;
    for n_agents in [1usize, 2, 4] {
        let cluster = Arc::new(LocalCluster::start(configs(n_agents, 2), ClusterOptions::default()).await.map_err(|e| e.to_string())?);
        let mut set = tokio::task::JoinSet::new();
        let mut next = 0;
        while next < PROGRAMS || !set.is_empty() {
            while next < PROGRAMS && set.len() < 8 {
                set.spawn(run_program(cluster.clone(), next));
                next += 1;
            }
            tasks += set.join_next().await.expect("non-empty").map_err(|e| e.to_string())??;
        }
    }
    let elapsed = t0.elapsed();
    check(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!("{} programs x 3 topologies, {tasks} tasks, all versions identical, {:.1}s", PROGRAMS, elapsed.as_secs_f64()))
}

// ---- graph construction --------------------------------------------------------

struct Builder {
    ap: AccessProcessor,
    app: ApplicationId,
    tasks: Vec<TaskId>,
}

impl Builder {
    fn new() -> Self {
        let ap = AccessProcessor::new();
        let app = ApplicationId::new();
        ap.open_application(app).unwrap();
        Self { ap, app, tasks: Vec::new() }
    }

    fn put(&self) -> DataId {
        let d = DataId::new();
        self.ap.put(self.app, d).unwrap();
        d
    }

    fn task(&mut self, params: &[(DataId, AccessMode)]) -> usize {
        let mut spec = TaskSpec::new(self.app, TaskKind::builtin("f"));
        for (d, m) in params {
            spec = spec.param(*d, *m);
        }
        self.tasks.push(self.ap.register_task(spec).unwrap().0);
        self.tasks.len() - 1
    }

    fn edges(&self) -> BTreeSet<(usize, usize)> {
        let idx: HashMap<TaskId, usize> = self.tasks.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        self.ap.graph_snapshot(self.app).unwrap().edges().into_iter().map(|(a, b)| (idx[&a], idx[&b])).collect()
    }
}

fn graph_construction() -> Outcome {
    use AccessMode::*;
    // chain
    let mut b = Builder::new();
    let x = b.put();
    for _ in 0..4 {
        b.task(&[(x, InOut)]);
    }
    check(b.edges() == BTreeSet::from([(0, 1), (1, 2), (2, 3)]), || format!("chain: {:?}", b.edges()))?;
    // diamond
    let mut b = Builder::new();
    let (d, x, y, z, r) = (b.put(), DataId::new(), DataId::new(), DataId::new(), DataId::new());
    b.task(&[(d, In), (x, Out)]);
    b.task(&[(x, In), (y, Out)]);
    b.task(&[(x, In), (z, Out)]);
    b.task(&[(y, In), (z, In), (r, Out)]);
    check(b.edges() == BTreeSet::from([(0, 1), (0, 2), (1, 3), (2, 3)]), || format!("diamond: {:?}", b.edges()))?;
    // fan-out / fan-in
    let mut b = Builder::new();
    let (s, x, out) = (b.put(), DataId::new(), DataId::new());
    b.task(&[(s, In), (x, Out)]);
    let mids: Vec<DataId> = (0..6).map(|_| DataId::new()).collect();
    for m in &mids {
        b.task(&[(x, In), (*m, Out)]);
    }
    let mut sink: Vec<(DataId, AccessMode)> = mids.iter().map(|m| (*m, In)).collect();
    sink.push((out, Out));
    b.task(&sink);
    let want: BTreeSet<(usize, usize)> = (1..=6).map(|i| (0, i)).chain((1..=6).map(|i| (i, 7))).collect();
    check(b.edges() == want, || format!("fan-out/fan-in: {:?}", b.edges()))?;
    // INOUT self-chain with readers in between: no self-loops, no reader-writer edges
    let mut b = Builder::new();
    let (x, y, w) = (b.put(), DataId::new(), DataId::new());
    b.task(&[(x, InOut)]);
    b.task(&[(x, In), (y, Out)]);
    b.task(&[(x, InOut)]);
    b.task(&[(x, In), (w, Out)]);
    b.task(&[(x, InOut)]);
    let want = BTreeSet::from([(0, 1), (0, 2), (2, 3), (2, 4)]);
    check(b.edges() == want, || format!("INOUT self-chain: {:?}", b.edges()))?;

    // Random sequences: edges = nearest earlier writer of each read; acyclic; forward.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total_edges = 0;
    for seq in 0..10_000 {
        let mut b = Builder::new();
        let n_data = rng.gen_range(1..=8);
        let data: Vec<DataId> = (0..n_data).map(|_| b.put()).collect();
        let mut last_writer: Vec<Option<usize>> = vec![None; n_data];
        let mut want = BTreeSet::new();
        for t in 0..rng.gen_range(1..=30) {
            let k = rng.gen_range(1..=n_data.min(4));
            let picked = rand::seq::index::sample(&mut rng, n_data, k).into_vec();
            let params: Vec<(usize, AccessMode)> = picked.iter().map(|d| (*d, [In, Out, InOut][rng.gen_range(0..3)])).collect();
            for (d, m) in &params {
                if let (true, Some(u)) = (m.reads(), last_writer[*d]) {
                    want.insert((u, t));
                }
            }
            for (d, m) in &params {
                if m.writes() {
                    last_writer[*d] = Some(t);
                }
            }
            let p: Vec<(DataId, AccessMode)> = params.iter().map(|(d, m)| (data[*d], *m)).collect();
            b.task(&p);
        }
        let got = b.edges();
        check(got == want, || format!("random sequence {seq}: edges differ from nearest-writer oracle"))?;
        check(got.iter().all(|(u, v)| u < v), || format!("random sequence {seq}: backward edge"))?;
        let g = b.ap.graph_snapshot(b.app).unwrap();
        check(g.topological_order().is_some(), || format!("random sequence {seq}: cycle"))?;
        total_edges += got.len();
    }
    Ok(format!("4 fixed shapes exact; 10000 random sequences acyclic and oracle-equal ({total_edges} edges)"))
}

// ---- parallel speedup ----------------------------------------------------------

async fn parallel_speedup() -> Outcome {
    let cluster = LocalCluster::start(configs(4, 1), ClusterOptions::default()).await.map_err(|e| e.to_string())?;
    let (app, _) = run_app(&cluster, &sleep_script(32, 100), Duration::from_secs(60)).await?;
    let stats = trace_stats(&cluster.master().agent().trace().records_for(app));
    check(stats.completed == 32, || format!("{} completed", stats.completed))?;
    check(stats.makespan_ms <= 1200.0, || format!("makespan {:.1} ms > 1200 ms", stats.makespan_ms))?;
    Ok(format!("32 x 100 ms on 4 single-core agents: makespan {:.1} ms", stats.makespan_ms))
}

// ---- locality -------------------------------------------------------------------

fn coordinator_only() -> ClusterOptions {
    ClusterOptions { master_in_view: false, ..ClusterOptions::default() }
}

async fn locality_pipeline() -> Outcome {
    let cluster = LocalCluster::start(vec![cfg("a", 2), cfg("b", 2), cfg("c", 2)], coordinator_only())
        .await
        .map_err(|e| e.to_string())?;
    let b = cluster.by_name("b").unwrap().id();
    let script = Script {
        data: vec![data("x", Some(Value::Bytes(vec![7; 4096])), Some(b))],
        tasks: (0..10).map(|i| task("mix", vec![(0, AccessMode::InOut)], vec![Value::Int(i)])).collect(),
    };
    let (app, _) = run_app(&cluster, &script, Duration::from_secs(60)).await?;
    let records = cluster.master().agent().trace().records_for(app);
    let stats = trace_stats(&records);
    let on: Vec<AgentId> = records
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Complete { agent_id, .. } => Some(*agent_id),
            _ => None,
        })
        .collect();
    check(on.len() == 10 && on.iter().all(|a| *a == b), || format!("stages ran on {on:?}, expected all on b={b}"))?;
    check(stats.transfer_bytes == 0, || format!("transfer bytes {}", stats.transfer_bytes))?;
    Ok(format!("10 stages all on B, transfer bytes {}", stats.transfer_bytes))
}

async fn split_hit_rate(policy: taskmesh_core::Policy) -> Result<f64, String> {
    let opts = ClusterOptions { policy, ..coordinator_only() };
    let cluster = LocalCluster::start(vec![cfg("a", 2), cfg("b", 16), cfg("c", 16)], opts).await.map_err(|e| e.to_string())?;
    let (b, c) = (cluster.by_name("b").unwrap().id(), cluster.by_name("c").unwrap().id());
    let n = 20;
    let mut script = Script::default();
    for i in 0..n {
        let home = if i % 4 < 2 { b } else { c };
        script.data.push(data(format!("in{i}"), Some(Value::Bytes(vec![i as u8; 16 * 1024])), Some(home)));
    }
    for i in 0..n {
        script.data.push(data(format!("out{i}"), None, None));
        script.tasks.push(task("mix", vec![(i, AccessMode::In), (n + i, AccessMode::Out)], vec![]));
    }
    let (app, _) = run_app(&cluster, &script, Duration::from_secs(60)).await?;
    let stats = trace_stats(&cluster.master().agent().trace().records_for(app));
    check(stats.completed == n as u64, || format!("{} completed", stats.completed))?;
    Ok(stats.locality_hit_rate)
}

async fn locality_split() -> Outcome {
    let loc = split_hit_rate(taskmesh_core::Policy::Locality).await?;
    let rr = split_hit_rate(taskmesh_core::Policy::RoundRobin).await?;
    check(loc >= 0.9 && rr <= 0.5, || format!("hit-rate locality {loc:.3} (need >= 0.9), round-robin {rr:.3} (need <= 0.5)"))?;
    Ok(format!("hit-rate locality {loc:.3}, round-robin {rr:.3}"))
}

// ---- constraint soundness -------------------------------------------------------

async fn constraint_soundness() -> Outcome {
    let opts = ClusterOptions { audit: true, ..ClusterOptions::default() };
    let configs = vec![
        cfg("a", 2).with_tag("py"),
        cfg("b", 4).with_tag("py").with_tag("java"),
        cfg("c", 8).with_tag("cuda").with_processors([ProcessorKind::Cpu, ProcessorKind::Gpu]),
        AgentConfig::new("d", 1, 512),
    ];
    let descriptors: Vec<(u32, u64, BTreeSet<String>, BTreeSet<ProcessorKind>)> =
        configs.iter().map(|c| (c.cores, c.memory_mb, c.software_tags.clone(), c.processor_kinds.clone())).collect();
    let cluster = LocalCluster::start(configs, opts).await.map_err(|e| e.to_string())?;
    let client = cluster.client();
    let app = client.start_application(&start("external", vec![])).await.map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tags = ["py", "java", "cuda", "fortran"];
    let mut unsat = BTreeSet::new();
    let n = 1000;
    for _ in 0..n {
        let mut c = ResourceConstraints::default()
            .with_cores(if rng.gen_bool(0.05) { 9 } else { rng.gen_range(1..=4) })
            .with_memory_mb([0, 256, 1024, 8 * 1024, 32 * 1024][rng.gen_range(0..5) * usize::from(rng.gen_bool(0.5))])
            .with_processor(if rng.gen_bool(0.2) { ProcessorKind::Gpu } else { ProcessorKind::Cpu });
        for t in tags {
            if rng.gen_bool(if t == "fortran" { 0.05 } else { 0.15 }) {
                c = c.with_tag(t);
            }
        }
        let hostable = descriptors
            .iter()
            .any(|(cores, mem, t, k)| c.cores <= *cores && c.memory_mb <= *mem && c.software_tags.is_subset(t) && k.contains(&c.processor_kind));
        let spec = TaskSpec::new(app, TaskKind::builtin("add"))
            .param(DataId::new(), AccessMode::Out)
            .literal(1)
            .constraints(c);
        let reg = client.register_task(spec).await.map_err(|e| e.to_string())?;
        if !hostable {
            unsat.insert(reg.task_id);
        }
    }
    let master = cluster.master().agent().clone();
    let settled = eventually(Duration::from_secs(120), || {
        master.app_status(app).is_some_and(|s| s.summary.count(TaskState::Completed) == n - unsat.len())
    })
    .await;
    let status = client.application(app).await.map_err(|e| e.to_string())?;
    check(settled, || format!("not settled: {:?}", status.summary.counts))?;
    let reported: BTreeSet<TaskId> = status.unschedulable.iter().copied().collect();
    check(reported == unsat, || format!("reported {} unschedulable, oracle says {}", reported.len(), unsat.len()))?;
    check(status.summary.count(TaskState::Ready) == unsat.len(), || format!("{:?}", status.summary.counts))?;
    let deferred: BTreeSet<TaskId> = master
        .trace()
        .records_for(app)
        .iter()
        .filter_map(|r| match &r.event {
            TraceEvent::Defer { task_id, reason: taskmesh_core::scheduler::DeferReason::Unsatisfiable } => Some(*task_id),
            _ => None,
        })
        .collect();
    check(deferred == unsat, || "trace does not report every unsatisfiable task".to_string())?;
    // Independent replay of every reservation against the agent as it looked then.
    let log = master.audit_log();
    let violations = log
        .iter()
        .filter(|e| {
            let a = &e.agent;
            let c = &e.constraints;
            !(a.status == AgentStatus::Live
                && c.cores <= a.pool.total_cores - a.pool.reserved_cores
                && c.memory_mb <= a.pool.total_memory_mb - a.pool.reserved_memory_mb
                && c.software_tags.is_subset(&a.descriptor.software_tags)
                && a.descriptor.processor_kinds.contains(&c.processor_kind))
        })
        .count();
    check(log.len() >= n - unsat.len(), || format!("audit log has {} entries", log.len()))?;
    check(violations == 0, || format!("{violations} audit violations"))?;
    Ok(format!("{n} tasks, {} reservations audited, 0 violations, {} unsatisfiable reported", log.len(), unsat.len()))
}

// ---- fault tolerance ------------------------------------------------------------

fn fault_options() -> ClusterOptions {
    coordinator_only()
}

fn diamond_start() -> taskmesh_agent::protocol::StartApplication {
    start("diamond", vec![Value::Int(300)])
}

async fn diamond_outputs(master: &LocalAgent, status: &AppStatus) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for (name, version) in [("d0", 0), ("x", 1), ("a", 1), ("b", 1), ("r", 1)] {
        out.insert(name.to_string(), version_bytes(master, DataVersion::new(status.data[name], version)).await?);
    }
    Ok(out)
}

async fn fault_tolerance() -> Outcome {
    let topology = || vec![cfg("a", 1), cfg("b", 1), cfg("c", 1), cfg("d", 1)];
    let baseline = {
        let cluster = LocalCluster::start(topology(), fault_options()).await.map_err(|e| e.to_string())?;
        let (_, s) = cluster.run(&diamond_start(), Duration::from_secs(60)).await.map_err(|e| e.to_string())?;
        check(s.finished, || "baseline did not finish".into())?;
        diamond_outputs(cluster.master(), &s).await?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = Duration::ZERO;
    for run in 0..20 {
        let cluster = LocalCluster::start(topology(), fault_options()).await.map_err(|e| e.to_string())?;
        let client = cluster.client();
        let app = client.start_application(&diamond_start()).await.map_err(|e| e.to_string())?;
        let master = cluster.master().agent().clone();
        let boundary = rng.gen_range(0..=3);
        // Wait until `boundary` tasks completed and some task is running on a worker.
        let mut victim: Option<AgentId> = None;
        let found = eventually(Duration::from_secs(30), || {
            let Ok(g) = master.access().graph_snapshot(app) else { return false };
            let done = g.nodes.values().filter(|n| n.state == TaskState::Completed).count();
            if done < boundary {
                return false;
            }
            let mut running: Vec<AgentId> =
                g.nodes.values().filter(|n| n.state == TaskState::Running).filter_map(|n| n.assigned_agent).collect();
            running.sort();
            running.dedup();
            victim = running.choose(&mut rng).copied();
            victim.is_some()
        })
        .await;
        check(found, || format!("run {run}: no running task after {boundary} completions"))?;
        let victim = victim.unwrap();
        let killed_at = now_us();
        cluster.agents().iter().find(|a| a.id() == victim).unwrap().kill();
        let status = client.wait_application(app, Duration::from_secs(60)).await.map_err(|e| e.to_string())?;
        check(status.finished && status.failed_tasks() == 0, || format!("run {run}: {:?}", status.summary.counts))?;
        let outputs = diamond_outputs(cluster.master(), &status).await?;
        check(outputs == baseline, || format!("run {run}: outputs differ from the failure-free run"))?;
        let resubmitted = master.trace().records().iter().find_map(|r| match &r.event {
            TraceEvent::Ready { attempt, .. } if *attempt >= 2 && r.ts_us >= killed_at => Some(r.ts_us),
            _ => None,
        });
        let latency = Duration::from_micros(resubmitted.ok_or_else(|| format!("run {run}: nothing was resubmitted"))? - killed_at);
        check(latency <= Duration::from_secs(3), || format!("run {run}: kill to resubmission took {latency:?}"))?;
        worst = worst.max(latency);
    }
    Ok(format!("20 runs with a worker killed: outputs identical, worst kill-to-resubmission {} ms", worst.as_millis()))
}

// ---- elasticity -----------------------------------------------------------------

async fn backlog_makespan(add_midway: bool) -> Result<f64, String> {
    let cluster = LocalCluster::start(vec![cfg("a", 2), cfg("b", 2)], ClusterOptions::default()).await.map_err(|e| e.to_string())?;
    let extra = LocalAgent::start(cfg("c", 2)).map_err(|e| e.to_string())?;
    extra.wait_healthy(Duration::from_secs(10)).await.map_err(|e| e.to_string())?;
    let client = cluster.client();
    let app = client.start_application(&script_start(&sleep_script(64, 100))).await.map_err(|e| e.to_string())?;
    if add_midway {
        tokio::time::sleep(Duration::from_millis(300)).await;
        cluster.add(&extra).await.map_err(|e| e.to_string())?;
    }
    let status = client.wait_application(app, Duration::from_secs(60)).await.map_err(|e| e.to_string())?;
    check(status.finished && status.summary.count(TaskState::Completed) == 64, || format!("{:?}", status.summary.counts))?;
    let stats = trace_stats(&cluster.master().agent().trace().records_for(app));
    Ok(stats.makespan_ms)
}

async fn elasticity_add() -> Outcome {
    let control = backlog_makespan(false).await?;
    let grown = backlog_makespan(true).await?;
    check(grown < control, || format!("with added agent {grown:.1} ms, control {control:.1} ms"))?;
    Ok(format!("64-task backlog: control {control:.1} ms, agent added mid-run {grown:.1} ms"))
}

async fn elasticity_remove() -> Outcome {
    let cluster = LocalCluster::start(vec![cfg("a", 2).with_tag("work"), cfg("b", 2).with_tag("work"), cfg("c", 2)], ClusterOptions::default())
        .await
        .map_err(|e| e.to_string())?;
    let c = cluster.by_name("c").unwrap().id();
    let b = cluster.by_name("b").unwrap().id();
    let mut script = sleep_script(40, 50);
    for t in &mut script.tasks {
        t.constraints = Some(ResourceConstraints::default().with_tag("work"));
    }
    // Plus untagged tasks that any agent, c included, may take.
    let base = script.data.len();
    for i in 0..8 {
        script.data.push(data(format!("u{i}"), None, None));
        script.tasks.push(ScriptTask { constraints: None, ..task("sleep", vec![(base + i, AccessMode::Out)], vec![Value::Int(50), Value::Int(i as i64)]) });
    }
    let client = cluster.client();
    let app = client.start_application(&script_start(&script)).await.map_err(|e| e.to_string())?;
    let master = cluster.master().agent().clone();
    // Remove c as soon as it holds no reservation, then remove b while it is busy.
    let idle = eventually(Duration::from_secs(30), || master.view().get(&c).is_some_and(|e| e.pool.is_idle())).await;
    check(idle, || "c never idle".into())?;
    cluster.remove(c).await.map_err(|e| e.to_string())?;
    tokio::time::sleep(Duration::from_millis(200)).await;
    cluster.remove(b).await.map_err(|e| e.to_string())?;
    let status = client.wait_application(app, Duration::from_secs(60)).await.map_err(|e| e.to_string())?;
    check(status.finished, || format!("not finished: {:?}", status.summary.counts))?;
    let stats = trace_stats(&master.trace().records_for(app));
    check(status.failed_tasks() == 0 && stats.resubmitted == 0 && stats.completed == 48, || {
        format!("failed {}, resubmitted {}, completed {}", status.failed_tasks(), stats.resubmitted, stats.completed)
    })?;
    check(master.view().get(&c).is_none(), || "c still in view".into())?;
    Ok(format!("idle agent and draining agent removed mid-run: 48/48 completed, 0 failed, 0 resubmitted"))
}

// ---- throughput -----------------------------------------------------------------

async fn throughput() -> Outcome {
    let cluster = LocalCluster::start(vec![cfg("master", 8)], ClusterOptions::default()).await.map_err(|e| e.to_string())?;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut script = Script::default();
    for i in 0..100 {
        script.data.push(data(format!("d{i}"), Some(Value::Int(i)), None));
    }
    for i in 0..n {
        let d = rng.gen_range(0..100);
        script.tasks.push(task("mix", vec![(d, AccessMode::InOut)], vec![Value::Int(i)]));
    }
    let t0 = Instant::now();
    let (_, status) = run_app(&cluster, &script, Duration::from_secs(120)).await?;
    let elapsed = t0.elapsed();
    check(status.summary.count(TaskState::Completed) == n as usize, || format!("{:?}", status.summary.counts))?;
    check(elapsed <= Duration::from_secs(60), || format!("{n} tasks took {elapsed:?}"))?;
    Ok(format!("{n} tasks registered and completed in {:.2}s", elapsed.as_secs_f64()))
}

// ---- store conformance ----------------------------------------------------------

async fn store_conformance() -> Outcome {
    let agents = [AgentId::new(), AgentId::new(), AgentId::new()];
    let memory = conformance::run(&MemoryStore::new(), agents, SuiteConfig::full()).await;
    check(memory.passed(), || format!("memory store: {:?}", memory.results.iter().filter(|r| r.1.is_err()).collect::<Vec<_>>()))?;
    let cluster = LocalCluster::start(configs(3, 1), ClusterOptions::default()).await.map_err(|e| e.to_string())?;
    let ids = [cluster.agents()[0].id(), cluster.agents()[1].id(), cluster.agents()[2].id()];
    let store = AgentStore::new(cluster.master().endpoint());
    let remote = conformance::run(&store, ids, SuiteConfig::full()).await;
    check(remote.passed(), || format!("agent store: {:?}", remote.results.iter().filter(|r| r.1.is_err()).collect::<Vec<_>>()))?;
    Ok(format!("{} checks on the in-memory store and over HTTP", memory.results.len()))
}

// ---- driver ---------------------------------------------------------------------

async fn report(name: &str, f: impl Future<Output = Outcome>, failures: &mut Vec<String>) {
    let t0 = Instant::now();
    match f.await {
        Ok(detail) => println!("PASS {name}: {detail} [{:.1}s]", t0.elapsed().as_secs_f64()),
        Err(why) => {
            println!("FAIL {name}: {why} [{:.1}s]", t0.elapsed().as_secs_f64());
            failures.push(name.to_string());
        }
    }
}

#[tokio::main(flavor = "multi_thread", worker_threads = 4)]
async fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut failures = Vec::new();
    macro_rules! criterion {
        ($name:literal, $f:expr) => {
            if selected($name) {
                report($name, $f, &mut failures).await;
            }
        };
    }
    criterion!("graph_construction", async { graph_construction() });
    criterion!("store_conformance", store_conformance());
    criterion!("parallel_speedup", parallel_speedup());
    criterion!("locality_pipeline", locality_pipeline());
    criterion!("locality_split", locality_split());
    criterion!("constraint_soundness", constraint_soundness());
    criterion!("elasticity_add", elasticity_add());
    criterion!("elasticity_remove", elasticity_remove());
    criterion!("fault_tolerance", fault_tolerance());
    criterion!("throughput", throughput());
    criterion!("sequential_equivalence", sequential_equivalence());
    if !failures.is_empty() {
        println!("{} criteria failed: {}", failures.len(), failures.join(", "));
        std::process::exit(1);
    }
}
