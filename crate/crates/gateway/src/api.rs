//! HTTP and server-sent-event API over a live run.
//!
//! Handlers lock the runner only between simulation steps, so every read
//! sees one consistent tick and commands take effect on the next step.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, watch};

use trialwatch_core::error::Error as CoreError;
use trialwatch_core::faults::FaultEntry;
use trialwatch_core::run::Runner;
use trialwatch_core::sentinel::alerts::LedgerEntry;
use trialwatch_core::sentinel::{IssueEvent, Severity};
use trialwatch_core::sim::{
    CommandKind, ControlCommand, DecisionRecord, EventBody, EventRecord, ParticipantSummary, PolicySummary, Status,
};

/// Frames kept for slow event-stream clients before they see a `lagged` frame.
const FRAME_BUFFER: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{message}")]
    BadRequest { code: &'static str, message: String },
    #[error("missing or wrong bearer token")]
    Unauthorized,
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl ToString) -> Self {
        ApiError::BadRequest {
            code,
            message: message.to_string(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest { code, .. } => code,
            ApiError::Unauthorized => "unauthorized",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NotFound(what) => ApiError::NotFound(what),
            CoreError::RejectedInput(msg) => ApiError::bad("rejected", msg),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().into(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct Shared {
    runner: Mutex<Runner>,
    frames: broadcast::Sender<Arc<EventRecord>>,
    shutdown: watch::Sender<bool>,
    token: Option<String>,
}

/// Cheap to clone; every clone talks to the same run.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(mut runner: Runner, token: Option<String>) -> Self {
        let (frames, _) = broadcast::channel(FRAME_BUFFER);
        let tx = frames.clone();
        runner.set_observer(Box::new(move |e| {
            if frame_name(&e.body).is_some() {
                // no subscribers is fine
                let _ = tx.send(Arc::new(e.clone()));
            }
        }));
        let (shutdown, _) = watch::channel(false);
        Self {
            shared: Arc::new(Shared {
                runner: Mutex::new(runner),
                frames,
                shutdown,
                token,
            }),
        }
    }

    pub fn runner(&self) -> Result<MutexGuard<'_, Runner>, ApiError> {
        self.shared
            .runner
            .lock()
            .map_err(|_| ApiError::Internal("the simulation thread panicked".into()))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<EventRecord>> {
        self.shared.frames.subscribe()
    }

    /// Ends open event streams and tells the driver loop to stop.
    pub fn shut_down(&self) {
        self.shared.shutdown.send_replace(true);
    }

    pub fn is_shut_down(&self) -> bool {
        *self.shared.shutdown.borrow()
    }

    fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shared.shutdown.subscribe()
    }
}

/// Event-stream name for the frames the dashboard consumes; `None` for the
/// rest of the event log.
pub fn frame_name(body: &EventBody) -> Option<&'static str> {
    Some(match body {
        EventBody::Issue(_) => "issue",
        EventBody::Decision(_) => "decision",
        EventBody::Alert(_) => "alert",
        EventBody::Ledger(_) => "ledger",
        EventBody::Command { .. } => "command",
        EventBody::TickStarted { .. } => "tick",
        EventBody::Finished { .. } => "finished",
        _ => return None,
    })
}

pub fn router(state: AppState) -> Router {
    let writes = Router::new()
        .route("/issues/{id}/ack", post(ack_issue))
        .route("/control", post(control))
        .route("/inject", post(inject))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/status", get(status))
        .route("/participants", get(participants))
        .route("/participants/{id}/decisions", get(decisions))
        .route("/issues", get(issues))
        .route("/ledger", get(ledger))
        .route("/policies", get(policies))
        .route("/events", get(events))
        .merge(writes)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &state.shared.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return Err(ApiError::Unauthorized);
        }
    }
    Ok(next.run(req).await)
}

#[derive(Debug, Serialize)]
pub struct StatusView {
    #[serde(flatten)]
    pub status: Status,
    pub steps: u64,
    pub run_dir: PathBuf,
    pub alerts_pending: usize,
}

async fn status(State(state): State<AppState>) -> ApiResult<StatusView> {
    let r = state.runner()?;
    Ok(Json(StatusView {
        status: r.sim().status(),
        steps: r.steps(),
        run_dir: r.dir().to_path_buf(),
        alerts_pending: r.pending_alerts(),
    }))
}

async fn participants(State(state): State<AppState>) -> ApiResult<Vec<ParticipantSummary>> {
    Ok(Json(state.runner()?.sim().participant_summaries()))
}

async fn decisions(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<DecisionRecord>> {
    let r = state.runner()?;
    let p = r
        .sim()
        .participant(&id)
        .ok_or_else(|| ApiError::NotFound(format!("participant {id}")))?;
    Ok(Json(p.log.clone()))
}

/// An issue with the operator state kept on its ledger entry.
#[derive(Debug, Serialize, Deserialize)]
pub struct IssueCard {
    #[serde(flatten)]
    pub issue: IssueEvent,
    pub acknowledged: bool,
    pub resolved: bool,
    pub ledger_entry: Option<u64>,
    pub note: String,
}

#[derive(Debug, Deserialize)]
struct IssueQuery {
    severity: Option<String>,
}

async fn issues(State(state): State<AppState>, Query(q): Query<IssueQuery>) -> ApiResult<Vec<IssueCard>> {
    let severity = match q.severity.as_deref() {
        None => None,
        Some(s) => Some(Severity::parse(s).ok_or_else(|| ApiError::bad("bad_severity", format!("unknown severity `{s}`")))?),
    };
    let r = state.runner()?;
    let sim = r.sim();
    let mut cards: Vec<IssueCard> = sim
        .issues()
        .iter()
        .filter(|i| severity.is_none_or(|s| i.severity == s))
        .map(|i| {
            let entry = sim.ledger().iter().find(|e| e.issue_id == i.issue_id);
            IssueCard {
                issue: i.clone(),
                acknowledged: entry.is_some_and(|e| e.acknowledged),
                resolved: entry.is_some_and(|e| e.resolved_at.is_some()),
                ledger_entry: entry.map(|e| e.entry_id),
                note: entry.map(|e| e.note.clone()).unwrap_or_default(),
            }
        })
        .collect();
    cards.sort_by_key(|c| (c.issue.severity, std::cmp::Reverse(c.issue.issue_id)));
    Ok(Json(cards))
}

async fn ledger(State(state): State<AppState>) -> ApiResult<Vec<LedgerEntry>> {
    Ok(Json(state.runner()?.sim().ledger().to_vec()))
}

async fn policies(State(state): State<AppState>) -> ApiResult<Vec<PolicySummary>> {
    Ok(Json(state.runner()?.sim().policies().to_vec()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub entry_id: u64,
}

#[derive(Debug, Default, Deserialize)]
struct AckBody {
    #[serde(default)]
    note: String,
}

async fn ack_issue(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Accepted> {
    let body: AckBody = if body.is_empty() {
        AckBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad("malformed_body", e))?
    };
    let cmd = ControlCommand::new(CommandKind::AckIssue).target(id).note(body.note);
    let entry_id = state.runner()?.submit(cmd)?;
    Ok(Json(Accepted { entry_id }))
}

async fn control(State(state): State<AppState>, body: Bytes) -> ApiResult<Accepted> {
    let cmd: ControlCommand = serde_json::from_slice(&body).map_err(|e| ApiError::bad("malformed_command", e))?;
    let entry_id = state.runner()?.submit(cmd).map_err(|e| match e {
        CoreError::RejectedInput(msg) => ApiError::bad("invalid_command", msg),
        other => other.into(),
    })?;
    Ok(Json(Accepted { entry_id }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Injected {
    pub kind: String,
    pub from_tick: u32,
    pub to_tick: u32,
}

async fn inject(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Injected>), ApiError> {
    let entry: FaultEntry = serde_json::from_slice(&body).map_err(|e| ApiError::bad("malformed_fault", e))?;
    let mut r = state.runner()?;
    r.inject(entry).map_err(|e| match e {
        CoreError::RejectedInput(msg) | CoreError::Configuration(msg) => ApiError::bad("rejected_fault", msg),
        other => other.into(),
    })?;
    // the live plan now ends with the normalized entry
    let added = r.sim().plan().entries.last().expect("entry was just added");
    Ok((
        StatusCode::ACCEPTED,
        Json(Injected {
            kind: added.kind.as_str().to_string(),
            from_tick: added.start_tick(),
            to_tick: added.end_tick(),
        }),
    ))
}

async fn events(State(state): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.subscribe();
    let stop = state.shutdown_signal();
    let stream = futures::stream::unfold((rx, stop), |(mut rx, mut stop)| async move {
        if *stop.borrow() {
            return None;
        }
        let frame = tokio::select! {
            got = rx.recv() => got,
            _ = stop.changed() => return None,
        };
        let event = match frame {
            Ok(rec) => {
                let name = frame_name(&rec.body).unwrap_or("event");
                Event::default()
                    .id(rec.seq.to_string())
                    .event(name)
                    .json_data(&*rec)
                    .unwrap_or_else(|e| Event::default().event("error").data(e.to_string()))
            }
            Err(broadcast::error::RecvError::Lagged(n)) => Event::default().event("lagged").data(n.to_string()),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), (rx, stop)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
