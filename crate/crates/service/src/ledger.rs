//! Run ledger: one append-only JSON-lines event log per run, mirrored in
//! memory as the replayed [`RunState`].

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use indexmap::IndexMap;

use storyagent_core::orchestrator::{system_clock, Event, EventKind, RunState};

use crate::error::{Result, ServiceError};

/// Reason recorded for runs found unfinished when the service starts.
pub const INTERRUPTED: &str = "service stopped before the run finished";

struct Entry {
    state: RunState,
    log: File,
}

pub struct Ledger {
    dir: PathBuf,
    runs: RwLock<IndexMap<String, Arc<Mutex<Entry>>>>,
    next_id: Mutex<u64>,
}

fn append_line(log: &mut File, event: &Event) -> Result<()> {
    let mut line = serde_json::to_vec(event)?;
    line.push(b'\n');
    log.write_all(&line)?;
    log.flush()?;
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| {
            ServiceError::BadRequest(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        events.push(event);
    }
    Ok(events)
}

impl Ledger {
    /// Replays every run log under `root/runs`. Runs that were still live
    /// when the previous process stopped are closed with an `aborted` event.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = root.join("runs");
        std::fs::create_dir_all(&dir)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        paths.sort();
        let mut runs = IndexMap::new();
        let mut next_id = 1;
        for path in paths {
            let events = read_log(&path)?;
            if events.is_empty() {
                continue;
            }
            let mut state = RunState::replay(&events)?;
            let mut log = OpenOptions::new().append(true).open(&path)?;
            if !state.phase.is_terminal() {
                let event = state
                    .record(
                        EventKind::Aborted {
                            reason: INTERRUPTED.to_string(),
                        },
                        system_clock(),
                    )?
                    .clone();
                append_line(&mut log, &event)?;
            }
            if let Some(n) = state.run_id.strip_prefix("run-").and_then(|n| n.parse::<u64>().ok()) {
                next_id = next_id.max(n + 1);
            }
            runs.insert(state.run_id.clone(), Arc::new(Mutex::new(Entry { state, log })));
        }
        Ok(Self {
            dir,
            runs: RwLock::new(runs),
            next_id: Mutex::new(next_id),
        })
    }

    pub fn allocate_id(&self) -> String {
        let mut next = self.next_id.lock().expect("ledger id lock");
        let id = format!("run-{:06}", *next);
        *next += 1;
        id
    }

    /// Persists and applies one event of `run_id`. The first event of a run
    /// must be its `run_started`.
    pub fn append(&self, run_id: &str, event: &Event) -> Result<()> {
        let existing = self.runs.read().expect("ledger lock").get(run_id).cloned();
        match existing {
            Some(entry) => {
                let mut entry = entry.lock().expect("run lock");
                entry.state.apply(event.clone())?;
                append_line(&mut entry.log, event)
            }
            None => {
                let state = RunState::replay(std::slice::from_ref(event))?;
                let mut log = OpenOptions::new()
                    .create_new(true)
                    .append(true)
                    .open(self.dir.join(format!("{run_id}.jsonl")))?;
                append_line(&mut log, event)?;
                self.runs
                    .write()
                    .expect("ledger lock")
                    .insert(run_id.to_string(), Arc::new(Mutex::new(Entry { state, log })));
                Ok(())
            }
        }
    }

    pub fn get(&self, run_id: &str) -> Option<RunState> {
        let entry = self.runs.read().expect("ledger lock").get(run_id).cloned()?;
        let state = entry.lock().expect("run lock").state.clone();
        Some(state)
    }

    pub fn ids(&self) -> Vec<String> {
        self.runs.read().expect("ledger lock").keys().cloned().collect()
    }
}
