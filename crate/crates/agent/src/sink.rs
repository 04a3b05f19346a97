//! In-memory scheduling trace with an optional line-per-record file copy.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use taskmesh_core::trace::{TraceEvent, TraceRecord};
use taskmesh_core::{ApplicationId, TaskId};

pub fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

pub fn now_ms() -> u64 {
    now_us() / 1000
}

#[derive(Debug, Default)]
pub struct TraceSink {
    records: Mutex<Vec<TraceRecord>>,
    file: Option<Mutex<BufWriter<File>>>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self { records: Mutex::default(), file: Some(Mutex::new(BufWriter::new(File::create(path)?))) })
    }

    pub fn emit(&self, event: TraceEvent) {
        let record = TraceRecord { ts_us: now_us(), event };
        if let Some(f) = &self.file {
            let mut f = f.lock().unwrap();
            let _ = writeln!(f, "{}", record.to_line());
            let _ = f.flush();
        }
        self.records.lock().unwrap().push(record);
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.records.lock().unwrap().clone()
    }

    /// Records that belong to one application's tasks.
    pub fn records_for(&self, app: ApplicationId) -> Vec<TraceRecord> {
        let all = self.records.lock().unwrap();
        let tasks: HashSet<TaskId> = all
            .iter()
            .filter_map(|r| match &r.event {
                TraceEvent::Ready { app: a, task_id, .. } if *a == app => Some(*task_id),
                _ => None,
            })
            .collect();
        all.iter().filter(|r| task_of(&r.event).is_some_and(|t| tasks.contains(&t))).cloned().collect()
    }
}

fn task_of(e: &TraceEvent) -> Option<TaskId> {
    match e {
        TraceEvent::Ready { task_id, .. }
        | TraceEvent::Assign { task_id, .. }
        | TraceEvent::Defer { task_id, .. }
        | TraceEvent::Dispatch { task_id, .. }
        | TraceEvent::Complete { task_id, .. }
        | TraceEvent::Fail { task_id, .. }
        | TraceEvent::Cancel { task_id }
        | TraceEvent::Release { task_id, .. } => Some(*task_id),
        TraceEvent::Persist { .. }
        | TraceEvent::Replicate { .. }
        | TraceEvent::Liveness { .. }
        | TraceEvent::Resources { .. } => None,
    }
}
