//! Paced mode: the simulation advances on its own thread while the API
//! serves readers and queues commands between steps.

use std::thread;
use std::time::Duration;

use tokio::net::TcpListener;
use tracing::info;

use trialwatch_core::run::RunSummary;
use trialwatch_core::sim::StepOutcome;

use crate::api::{router, AppState};
use crate::error::{GatewayError, Result};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: String,
    /// Wall time per simulated slot.
    pub pace: Duration,
    /// Stop serving once the trial ends instead of waiting for Ctrl-C.
    pub exit_when_done: bool,
}

/// Steps the run every `pace` until it finishes or the state is shut down.
/// A paused run keeps ticking in place until an operator resumes it.
pub fn drive(state: &AppState, pace: Duration) -> Result<RunSummary> {
    loop {
        if pace.is_zero() {
            thread::yield_now();
        } else {
            thread::sleep(pace);
        }
        let mut runner = state.runner().map_err(|e| GatewayError::Driver(e.to_string()))?;
        if state.is_shut_down() || runner.sim().is_finished() {
            return Ok(runner.summary());
        }
        if runner.step()? == StepOutcome::Finished {
            info!(steps = runner.steps(), "trial finished");
            return Ok(runner.summary());
        }
    }
}

/// Serves the API while [`drive`] runs the trial. The final state stays
/// readable after the trial ends, until Ctrl-C or, with `exit_when_done`,
/// right away.
pub async fn serve(state: AppState, opts: ServeOptions) -> Result<RunSummary> {
    let listener = TcpListener::bind(&opts.bind).await?;
    info!(addr = %listener.local_addr()?, pace_ms = opts.pace.as_millis() as u64, "serving");
    let (done_tx, done_rx) = tokio::sync::oneshot::channel();
    let driver_state = state.clone();
    let pace = opts.pace;
    let driver = thread::spawn(move || {
        let out = drive(&driver_state, pace);
        let _ = done_tx.send(());
        out
    });
    let stop_state = state.clone();
    let exit_when_done = opts.exit_when_done;
    let shutdown = async move {
        let done = async {
            if exit_when_done {
                let _ = done_rx.await;
            } else {
                std::future::pending::<()>().await;
            }
        };
        tokio::select! {
            _ = tokio::signal::ctrl_c() => info!("interrupted"),
            _ = done => {}
        }
        stop_state.shut_down();
    };
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    state.shut_down();
    driver.join().map_err(|_| GatewayError::Driver("panicked".into()))?
}
