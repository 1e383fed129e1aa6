//! Run directories: the on-disk record of one simulated trial.
//!
//! ```text
//! <run>/run.json                 manifest (layout version, profile, seed, status)
//! <run>/config.toml              the resolved run configuration
//! <run>/fault_plan.json          the fault plan at start
//! <run>/events.jsonl             event log, one record per line
//! <run>/ledger.jsonl             ledger entry states, appended on every change
//! <run>/alerts/                  file-sink alerts
//! <run>/dashboard_queue.jsonl    red alerts held for manual review
//! <run>/tables/<table>.jsonl     store journal per table
//! <run>/snapshots.jsonl          per-day table line counts
//! <run>/control.jsonl            operator commands with the step they arrived at
//! <run>/inject.jsonl             inbox for live fault injection
//! <run>/injections_applied.jsonl live faults with the step they were applied at
//! <run>/sink_buffered.jsonl      alerts the sink refused, for replay
//! ```
//!
//! Operation records carry the number of steps completed when they happened
//! and a sequence number shared across the three operation files.

mod replay;
mod verify;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use replay::{replay_run, ReplayReport};
pub use verify::{verify_run, verify_store, Mismatch, VerifyReport};

use crate::clock::Slot;
use crate::decision::ProfileKind;
use crate::error::{Error, Result};
use crate::faults::{FaultEntry, FaultPlan};
use crate::sentinel::alerts::{Alert, AlertSink, DispatchOutcome, Dispatcher, FileSink};
use crate::sentinel::Severity;
use crate::sim::config::SinkKind;
use crate::sim::{ControlCommand, EventRecord, RunConfig, Simulation, StepOutcome};
use crate::store::Store;

pub const LAYOUT_VERSION: u32 = 1;

pub const MANIFEST: &str = "run.json";
pub const CONFIG: &str = "config.toml";
pub const FAULT_PLAN: &str = "fault_plan.json";
pub const EVENTS: &str = "events.jsonl";
pub const LEDGER: &str = "ledger.jsonl";
pub const ALERTS_DIR: &str = "alerts";
pub const DASHBOARD_QUEUE: &str = "dashboard_queue.jsonl";
pub const TABLES_DIR: &str = "tables";
pub const SNAPSHOTS: &str = "snapshots.jsonl";
pub const CONTROL: &str = "control.jsonl";
pub const INJECT_INBOX: &str = "inject.jsonl";
pub const INJECTIONS_APPLIED: &str = "injections_applied.jsonl";
pub const SINK_BUFFERED: &str = "sink_buffered.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout_version: u32,
    pub code_version: String,
    pub profile: ProfileKind,
    pub seed: u64,
    pub status: RunStatus,
    pub steps: u64,
    pub final_tick: u32,
}

/// End-of-day table sizes; loading that many lines per file restores the
/// store as it was after that day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMark {
    pub day: u32,
    pub tick: u32,
    pub lines: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub step: u64,
    pub seq: u64,
    pub entry_id: u64,
    pub command: ControlCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub step: u64,
    pub seq: u64,
    pub entry: FaultEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferedRecord {
    pub step: u64,
    pub seq: u64,
    pub alert_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub profile: ProfileKind,
    pub steps: u64,
    pub decisions: usize,
    pub red: usize,
    pub yellow: usize,
    pub green: usize,
    pub alerts: usize,
    pub alerts_pending: usize,
}

/// Accepts every alert and keeps nothing.
pub struct NullSink;

impl AlertSink for NullSink {
    fn deliver(&mut self, _alert: &Alert) -> Result<()> {
        Ok(())
    }
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads every JSON line of `path`; a missing file is empty.
pub fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::NotFound(format!("run directory {} (no {MANIFEST})", dir.display())));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn read_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join(CONFIG))
}

/// Store state after the end of `day`, from the snapshot marks.
pub fn restore_snapshot(dir: &Path, day: u32) -> Result<Store> {
    let manifest = read_manifest(dir)?;
    let marks: Vec<SnapshotMark> = read_lines(&dir.join(SNAPSHOTS))?;
    let mark = marks
        .iter()
        .find(|m| m.day == day)
        .ok_or_else(|| Error::NotFound(format!("snapshot for day {day}")))?;
    Store::load_prefix(manifest.profile, &dir.join(TABLES_DIR), Some(&mark.lines))
}

/// Drives a [`Simulation`] and keeps its run directory current.
pub struct Runner {
    sim: Simulation,
    dir: PathBuf,
    dispatcher: Dispatcher,
    events: BufWriter<File>,
    ledger: BufWriter<File>,
    dashboard: BufWriter<File>,
    control: BufWriter<File>,
    applied: BufWriter<File>,
    buffered: BufWriter<File>,
    snapshots: BufWriter<File>,
    lines: BTreeMap<String, usize>,
    inbox_seen: usize,
    steps: u64,
    ops: u64,
    observer: Option<Observer>,
}

/// Sees every event as it is written to the log.
pub type Observer = Box<dyn FnMut(&EventRecord) + Send>;

impl Runner {
    /// Creates `dir` and starts a run with the sink named in the config.
    pub fn create(cfg: RunConfig, dir: &Path) -> Result<Self> {
        let sink: Box<dyn AlertSink> = match cfg.sink.kind {
            SinkKind::File => Box::new(FileSink::new(dir.join(ALERTS_DIR))?),
            SinkKind::None => Box::new(NullSink),
            SinkKind::Webhook => {
                return Err(Error::config("webhook sinks are provided by the gateway; use create_with_sink"));
            }
        };
        Self::create_with_sink(cfg, dir, sink)
    }

    pub fn create_with_sink(cfg: RunConfig, dir: &Path, sink: Box<dyn AlertSink>) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.resolve_fault_plan()?;
        Self::create_with_plan(cfg, plan, dir, sink)
    }

    pub fn create_with_plan(cfg: RunConfig, plan: FaultPlan, dir: &Path, sink: Box<dyn AlertSink>) -> Result<Self> {
        if dir.join(MANIFEST).exists() {
            return Err(Error::rejected(format!("{} already holds a run", dir.display())));
        }
        fs::create_dir_all(dir.join(TABLES_DIR))?;
        fs::write(dir.join(CONFIG), cfg.to_toml_string())?;
        fs::write(dir.join(FAULT_PLAN), serde_json::to_vec_pretty(&plan)?)?;
        File::create(dir.join(INJECT_INBOX))?;
        let sim = Simulation::with_plan(cfg, plan)?;
        let mut runner = Runner {
            dispatcher: Dispatcher::new(sink),
            events: writer(&dir.join(EVENTS))?,
            ledger: writer(&dir.join(LEDGER))?,
            dashboard: writer(&dir.join(DASHBOARD_QUEUE))?,
            control: writer(&dir.join(CONTROL))?,
            applied: writer(&dir.join(INJECTIONS_APPLIED))?,
            buffered: writer(&dir.join(SINK_BUFFERED))?,
            snapshots: writer(&dir.join(SNAPSHOTS))?,
            dir: dir.to_path_buf(),
            sim,
            lines: BTreeMap::new(),
            inbox_seen: 0,
            steps: 0,
            ops: 0,
            observer: None,
        };
        runner.persist()?;
        runner.write_manifest(RunStatus::Running)?;
        Ok(runner)
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Events already written are not passed to a new observer.
    pub fn set_observer(&mut self, observer: Observer) {
        self.observer = Some(observer);
    }

    pub fn pending_alerts(&self) -> usize {
        self.dispatcher.pending()
    }

    pub fn dashboard_queue(&self) -> &[Alert] {
        self.dispatcher.dashboard_queue()
    }

    /// Queues a command for the next step and records it for replay.
    pub fn submit(&mut self, cmd: ControlCommand) -> Result<u64> {
        let entry_id = self.sim.submit(cmd.clone())?;
        let rec = ControlRecord {
            step: self.steps,
            seq: self.next_op(),
            entry_id,
            command: cmd,
        };
        write_line(&mut self.control, &rec)?;
        self.persist()?;
        Ok(entry_id)
    }

    /// Adds a live fault and records it for replay.
    pub fn inject(&mut self, entry: FaultEntry) -> Result<()> {
        let result = self.sim.inject(entry.clone());
        let rec = InjectionRecord {
            step: self.steps,
            seq: self.next_op(),
            entry,
            rejected: result.as_ref().err().map(ToString::to_string),
        };
        write_line(&mut self.applied, &rec)?;
        self.persist()?;
        result
    }

    /// Picks up faults appended to the inbox by another process.
    fn poll_inbox(&mut self) -> Result<()> {
        let pending: Vec<FaultEntry> = read_lines(&self.dir.join(INJECT_INBOX))?;
        let fresh: Vec<FaultEntry> = pending.into_iter().skip(self.inbox_seen).collect();
        self.inbox_seen += fresh.len();
        for entry in fresh {
            // rejection is recorded; the run goes on
            let _ = self.inject(entry);
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        self.poll_inbox()?;
        self.dispatcher.flush();
        let evening = self.sim.clock().current_slot == Slot::Evening;
        let (day, tick) = (self.sim.clock().current_day, self.sim.tick());
        let outcome = self.sim.step()?;
        self.steps += 1;
        self.persist()?;
        if outcome != StepOutcome::Paused && (evening || outcome == StepOutcome::Finished) {
            write_line(
                &mut self.snapshots,
                &SnapshotMark {
                    day,
                    tick,
                    lines: self.lines.clone(),
                },
            )?;
        }
        if outcome == StepOutcome::Finished {
            self.dispatcher.flush();
            self.write_manifest(RunStatus::Finished)?;
        }
        self.flush_files()?;
        Ok(outcome)
    }

    /// Steps to the end, resuming if a command paused the run.
    pub fn run_to_completion(&mut self) -> Result<RunSummary> {
        loop {
            match self.step()? {
                StepOutcome::Finished => break,
                StepOutcome::Paused => {
                    self.submit(ControlCommand::new(crate::sim::CommandKind::Resume).note("unattended run"))?;
                }
                StepOutcome::Advanced => {}
            }
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        let count = |s: Severity| self.sim.issues().iter().filter(|i| i.severity == s).count();
        RunSummary {
            dir: self.dir.clone(),
            profile: self.sim.config().profile,
            steps: self.steps,
            decisions: self.sim.decisions_total(),
            red: count(Severity::Red),
            yellow: count(Severity::Yellow),
            green: count(Severity::Green),
            alerts: self.sim.alerts().len(),
            alerts_pending: self.dispatcher.pending(),
        }
    }

    fn next_op(&mut self) -> u64 {
        self.ops += 1;
        self.ops
    }

    fn persist(&mut self) -> Result<()> {
        let out = self.sim.drain_outbox();
        for e in &out.events {
            write_line(&mut self.events, e)?;
            if let Some(f) = self.observer.as_mut() {
                f(e);
            }
        }
        for l in &out.ledger {
            write_line(&mut self.ledger, l)?;
        }
        for alert in out.alerts {
            let id = alert.alert_id;
            let queued = alert.clone();
            match self.dispatcher.dispatch(alert) {
                DispatchOutcome::Buffered => {
                    self.sim.note_alert_buffered(id);
                    let rec = BufferedRecord {
                        step: self.steps,
                        seq: self.next_op(),
                        alert_id: id,
                    };
                    write_line(&mut self.buffered, &rec)?;
                }
                DispatchOutcome::Queued => write_line(&mut self.dashboard, &queued)?,
                DispatchOutcome::Delivered | DispatchOutcome::BufferedAgain => {}
            }
        }
        for (file, n) in self.sim.store_mut().flush_journal(&self.dir.join(TABLES_DIR))? {
            *self.lines.entry(file.to_string()).or_default() += n;
        }
        Ok(())
    }

    fn flush_files(&mut self) -> Result<()> {
        for w in [
            &mut self.events,
            &mut self.ledger,
            &mut self.dashboard,
            &mut self.control,
            &mut self.applied,
            &mut self.buffered,
            &mut self.snapshots,
        ] {
            w.flush()?;
        }
        if self.sim.is_finished() {
            return Ok(());
        }
        self.write_manifest(RunStatus::Running)
    }

    fn write_manifest(&self, status: RunStatus) -> Result<()> {
        let m = Manifest {
            layout_version: LAYOUT_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            profile: self.sim.config().profile,
            seed: self.sim.config().seed,
            status,
            steps: self.steps,
            final_tick: self.sim.final_tick(),
        };
        fs::write(self.dir.join(MANIFEST), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

/// Queues a fault for a live run by appending it to the run's inbox.
pub fn queue_injection(dir: &Path, entry: &FaultEntry) -> Result<()> {
    let manifest = read_manifest(dir)?;
    if manifest.status != RunStatus::Running {
        return Err(Error::rejected(format!("run in {} has finished", dir.display())));
    }
    let mut w = writer(&dir.join(INJECT_INBOX))?;
    write_line(&mut w, entry)?;
    w.flush()?;
    Ok(())
}
