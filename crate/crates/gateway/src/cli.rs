use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use trialwatch_core::clock::Slot;
use trialwatch_core::faults::{FaultEntry, FaultKind, SlotRef};
use trialwatch_core::run::{
    queue_injection, replay_run, verify_run, NullSink, RunSummary, Runner, ALERTS_DIR,
};
use trialwatch_core::sentinel::alerts::{AlertSink, FileSink};
use trialwatch_core::sim::config::SinkKind;
use trialwatch_core::sim::RunConfig;

use crate::api::AppState;
use crate::error::Result;
use crate::serve::{serve, ServeOptions};
use crate::webhook::WebhookSink;

/// Exit code for a run directory that failed verification or replay.
pub const EXIT_MISMATCH: u8 = 1;
/// Exit code for bad arguments, configs or missing run directories.
pub const EXIT_ERROR: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "trialwatch", version, about = "Simulate, monitor and verify adaptive mobile-health trials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulated trial into a new run directory.
    Run(RunArgs),
    /// Recompute every stored probability and action; exit 1 on any mismatch.
    Verify(VerifyArgs),
    /// Re-execute a run from its config and recorded operations and compare event logs.
    Replay { run_dir: PathBuf },
    /// Queue a fault for a live run.
    Inject(InjectArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration. `TRIALWATCH_*` environment variables override it.
    #[arg(long)]
    pub config: PathBuf,
    /// Fault plan file, or `incident-replay`.
    #[arg(long)]
    pub fault_plan: Option<String>,
    /// Run directory; defaults to runs/<profile>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Advance in paced mode and serve the HTTP API.
    #[arg(long)]
    pub serve: bool,
    #[arg(long)]
    pub bind: Option<String>,
    /// Wall milliseconds per simulated slot in --serve mode.
    #[arg(long)]
    pub pace_ms: Option<u64>,
    /// With --serve, stop once the trial ends.
    #[arg(long)]
    pub exit_when_done: bool,
    /// Route red checks to the dashboard queue instead of alerting.
    #[arg(long)]
    pub manual_red: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub run_dir: PathBuf,
    /// Mismatching rows to print.
    #[arg(long, default_value_t = 20)]
    pub max_rows: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SlotArg {
    Morning,
    Evening,
}

impl From<SlotArg> for Slot {
    fn from(s: SlotArg) -> Self {
        match s {
            SlotArg::Morning => Slot::Morning,
            SlotArg::Evening => Slot::Evening,
        }
    }
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    pub run_dir: PathBuf,
    /// Fault kind, e.g. RL_CRASH.
    pub kind: FaultKind,
    #[arg(long)]
    pub participant: Option<String>,
    /// First day; without it the fault hits the next slot only.
    #[arg(long)]
    pub day: Option<u32>,
    /// With --day, restrict to one slot.
    #[arg(long, requires = "day")]
    pub slot: Option<SlotArg>,
    /// Last day, inclusive.
    #[arg(long, requires = "day")]
    pub until_day: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    pub probability: f64,
}

impl InjectArgs {
    pub fn entry(&self) -> FaultEntry {
        let mut e = FaultEntry::new(self.kind).with_probability(self.probability);
        if let Some(p) = &self.participant {
            e = e.for_participant(p.clone());
        }
        if let Some(day) = self.day {
            let (from, to) = match self.slot {
                Some(slot) => (SlotRef::at(day, slot.into()), SlotRef::at(self.until_day.unwrap_or(day), slot.into())),
                None => (SlotRef::day(day), SlotRef::day(self.until_day.unwrap_or(day))),
            };
            e = e.during(from, to);
        }
        e
    }
}

pub fn execute(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Verify(args) => verify(&args),
        Command::Replay { run_dir } => replay(&run_dir),
        Command::Inject(args) => inject(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

/// Loads the config file and applies flags and environment overrides.
pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?.apply_env_overrides(std::env::vars())?;
    if let Some(plan) = &args.fault_plan {
        cfg.fault_plan = Some(plan.clone());
    }
    if let Some(bind) = &args.bind {
        cfg.api.bind = bind.clone();
    }
    if let Some(pace) = args.pace_ms {
        cfg.pace_ms = pace;
    }
    if args.manual_red {
        cfg.automated_red = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn sink_for(cfg: &RunConfig, dir: &Path) -> Result<Box<dyn AlertSink>> {
    Ok(match cfg.sink.kind {
        SinkKind::File => Box::new(FileSink::new(dir.join(ALERTS_DIR))?),
        SinkKind::None => Box::new(NullSink),
        // validate() guarantees the url
        SinkKind::Webhook => Box::new(WebhookSink::new(cfg.sink.url.clone().unwrap_or_default())),
    })
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&args)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.profile, cfg.seed)));
    let sink = sink_for(&cfg, &dir)?;
    let mut runner = Runner::create_with_sink(cfg.clone(), &dir, sink)?;
    let summary = if args.serve {
        let state = AppState::new(runner, cfg.api.token.clone());
        let opts = ServeOptions {
            bind: cfg.api.bind.clone(),
            pace: Duration::from_millis(cfg.pace_ms),
            exit_when_done: args.exit_when_done,
        };
        tokio::runtime::Runtime::new()?.block_on(serve(state, opts))?
    } else {
        runner.run_to_completion()?
    };
    print_summary(&summary);
    Ok(ExitCode::SUCCESS)
}

fn print_summary(s: &RunSummary) {
    println!(
        "{} run in {}: {} steps, {} decisions, issues {} red / {} yellow / {} green, {} alerts ({} undelivered)",
        s.profile,
        s.dir.display(),
        s.steps,
        s.decisions,
        s.red,
        s.yellow,
        s.green,
        s.alerts,
        s.alerts_pending
    );
}

fn verify(args: &VerifyArgs) -> Result<ExitCode> {
    let report = verify_run(&args.run_dir)?;
    if report.is_clean() {
        println!(
            "clean: {} probabilities and {} actions recomputed",
            report.checked_probs, report.checked_actions
        );
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "{} mismatches in {} probabilities and {} actions",
        report.mismatches.len(),
        report.checked_probs,
        report.checked_actions
    );
    for m in report.mismatches.iter().take(args.max_rows) {
        println!(
            "  {} row {}: participant {} t={} {} stored {} expected {}",
            m.table, m.row, m.participant_id, m.decision_t, m.field, m.stored, m.expected
        );
    }
    if report.mismatches.len() > args.max_rows {
        println!("  ... {} more", report.mismatches.len() - args.max_rows);
    }
    Ok(ExitCode::from(EXIT_MISMATCH))
}

fn replay(dir: &Path) -> Result<ExitCode> {
    let report = replay_run(dir)?;
    if report.is_identical() {
        println!("identical: {} steps, {} events", report.steps, report.events_replayed);
        return Ok(ExitCode::SUCCESS);
    }
    println!(
        "diverged: {} events recorded, {} replayed, first difference at line {}",
        report.events_recorded,
        report.events_replayed,
        report.first_divergence.map_or("-".into(), |l| l.to_string())
    );
    Ok(ExitCode::from(EXIT_MISMATCH))
}

fn inject(args: &InjectArgs) -> Result<ExitCode> {
    let entry = args.entry();
    queue_injection(&args.run_dir, &entry)?;
    println!("queued {} for {}", entry.kind, args.run_dir.display());
    Ok(ExitCode::SUCCESS)
}
