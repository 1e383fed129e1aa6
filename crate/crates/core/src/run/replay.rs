//! Re-runs a recorded run from its configuration, fault plan and operation
//! journals and compares the regenerated event log with the stored one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    read_config, read_lines, BufferedRecord, ControlRecord, InjectionRecord, CONTROL, EVENTS, FAULT_PLAN,
    INJECTIONS_APPLIED, SINK_BUFFERED,
};
use crate::error::Result;
use crate::faults::FaultPlan;
use crate::sim::{Simulation, StepOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub steps: u64,
    pub events_recorded: usize,
    pub events_replayed: usize,
    /// Line number (0-based) of the first differing event, if any.
    pub first_divergence: Option<usize>,
}

impl ReplayReport {
    pub fn is_identical(&self) -> bool {
        self.first_divergence.is_none() && self.events_recorded == self.events_replayed
    }
}

enum Op {
    Control(ControlRecord),
    Inject(InjectionRecord),
    Buffered(BufferedRecord),
}

impl Op {
    fn key(&self) -> (u64, u64) {
        match self {
            Op::Control(r) => (r.step, r.seq),
            Op::Inject(r) => (r.step, r.seq),
            Op::Buffered(r) => (r.step, r.seq),
        }
    }
}

fn apply(sim: &mut Simulation, op: Op) {
    // failures were recorded in the original run too; replaying them has
    // the same (absent) effect
    match op {
        Op::Control(r) => {
            let _ = sim.submit(r.command);
        }
        Op::Inject(r) => {
            let _ = sim.inject(r.entry);
        }
        Op::Buffered(r) => sim.note_alert_buffered(r.alert_id),
    }
}

fn to_lines(sim: &mut Simulation, out: &mut Vec<String>) -> Result<()> {
    for e in sim.drain_outbox().events {
        out.push(serde_json::to_string(&e)?);
    }
    Ok(())
}

/// Replays the run in `dir` up to the number of steps it recorded.
pub fn replay_run(dir: &Path) -> Result<ReplayReport> {
    let manifest = super::read_manifest(dir)?;
    let cfg = read_config(dir)?;
    let plan: FaultPlan = serde_json::from_slice(&fs::read(dir.join(FAULT_PLAN))?)?;
    let mut ops: Vec<Op> = Vec::new();
    ops.extend(read_lines::<ControlRecord>(&dir.join(CONTROL))?.into_iter().map(Op::Control));
    ops.extend(read_lines::<InjectionRecord>(&dir.join(INJECTIONS_APPLIED))?.into_iter().map(Op::Inject));
    ops.extend(read_lines::<BufferedRecord>(&dir.join(SINK_BUFFERED))?.into_iter().map(Op::Buffered));
    ops.sort_by_key(Op::key);
    let mut ops = ops.into_iter().peekable();

    let mut sim = Simulation::with_plan(cfg, plan)?;
    let mut lines = Vec::new();
    to_lines(&mut sim, &mut lines)?;
    let mut steps = 0;
    loop {
        while let Some(op) = ops.next_if(|op| op.key().0 <= steps) {
            apply(&mut sim, op);
            to_lines(&mut sim, &mut lines)?;
        }
        if steps >= manifest.steps {
            break;
        }
        let outcome = sim.step()?;
        steps += 1;
        to_lines(&mut sim, &mut lines)?;
        if outcome == StepOutcome::Finished {
            break;
        }
    }

    let recorded = fs::read_to_string(dir.join(EVENTS))?;
    let recorded: Vec<&str> = recorded.lines().filter(|l| !l.is_empty()).collect();
    let first_divergence = recorded
        .iter()
        .zip(&lines)
        .position(|(a, b)| *a != b.as_str())
        .or_else(|| (recorded.len() != lines.len()).then(|| recorded.len().min(lines.len())));
    Ok(ReplayReport {
        steps,
        events_recorded: recorded.len(),
        events_replayed: lines.len(),
        first_divergence,
    })
}
