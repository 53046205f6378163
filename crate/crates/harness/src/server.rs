//! HTTP transport for human labelling.
//!
//! The trainer thread owns all training state. Handlers only touch the
//! shared board (what is pending, what was answered) and push label
//! events into a bounded queue that the trainer drains while a session
//! is open.

use std::net::SocketAddr;
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use reed_pbrl_core::buffer::Segment;
use reed_pbrl_core::envsim::{Env, Primitive};
use reed_pbrl_core::teachers::LabelOutcome;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const QUEUE_CAPACITY: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    Right,
    Equal,
    Skip,
}

impl From<Choice> for LabelOutcome {
    fn from(c: Choice) -> Self {
        match c {
            Choice::Left => LabelOutcome::Prefer1,
            Choice::Right => LabelOutcome::Prefer2,
            Choice::Equal => LabelOutcome::Equal,
            Choice::Skip => LabelOutcome::Discard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub states: Vec<Vec<f64>>,
    pub frames: Vec<Vec<Primitive>>,
}

impl SegmentView {
    pub fn new(env: &Env, seg: &Segment) -> Self {
        let states: Vec<Vec<f64>> = seg.transitions.iter().map(|t| t.state.clone()).collect();
        let frames = states.iter().map(|s| env.render_frame(s)).collect();
        Self { states, frames }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub id: u64,
    pub left: SegmentView,
    pub right: SegmentView,
    pub answered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    /// `None` while the trainer is between sessions.
    pub session: Option<u64>,
    pub queries: Vec<QueryView>,
    pub answered: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub episode: u64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelEvent {
    pub query: u64,
    pub outcome: LabelOutcome,
}

#[derive(Debug, Default)]
struct Board {
    session: Option<u64>,
    queries: Vec<QueryView>,
    metrics: Vec<MetricRow>,
}

/// State shared between the HTTP handlers and the trainer.
#[derive(Clone, Debug)]
pub struct FeedbackHub {
    board: Arc<Mutex<Board>>,
    tx: SyncSender<LabelEvent>,
}

impl FeedbackHub {
    fn board(&self) -> MutexGuard<'_, Board> {
        self.board.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn push_metric(&self, row: MetricRow) {
        self.board().metrics.push(row);
    }

    pub fn current(&self) -> SessionView {
        let b = self.board();
        SessionView {
            session: b.session,
            answered: b.queries.iter().filter(|q| q.answered).count(),
            total: b.queries.len(),
            queries: b.queries.clone(),
        }
    }

    pub fn metrics(&self) -> Vec<MetricRow> {
        self.board().metrics.clone()
    }

    fn submit(&self, id: u64, choice: Choice) -> std::result::Result<(), ApiError> {
        let mut b = self.board();
        let q = b
            .queries
            .iter_mut()
            .find(|q| q.id == id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no pending query {id}")))?;
        if q.answered {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("query {id} is already labelled"),
            ));
        }
        let event = LabelEvent {
            query: id,
            outcome: choice.into(),
        };
        match self.tx.try_send(event) {
            Ok(()) => {
                q.answered = true;
                Ok(())
            }
            Err(TrySendError::Full(_)) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "label queue is full".into(),
            )),
            Err(TrySendError::Disconnected(_)) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "trainer has stopped".into(),
            )),
        }
    }
}

/// Trainer side: publishes sessions and blocks until they are answered.
#[derive(Debug)]
pub struct HumanTeacher {
    hub: FeedbackHub,
    rx: Receiver<LabelEvent>,
    next_id: u64,
}

impl HumanTeacher {
    pub fn hub(&self) -> &FeedbackHub {
        &self.hub
    }

    /// Opens session `session` with the given pairs and waits for every
    /// one to be labelled. Outcomes come back in query order.
    pub fn run_session(&mut self, session: u64, pairs: Vec<(SegmentView, SegmentView)>) -> Result<Vec<LabelOutcome>> {
        let first = self.next_id;
        self.next_id += pairs.len() as u64;
        {
            let mut b = self.hub.board();
            b.session = Some(session);
            b.queries = pairs
                .into_iter()
                .enumerate()
                .map(|(i, (left, right))| QueryView {
                    id: first + i as u64,
                    left,
                    right,
                    answered: false,
                })
                .collect();
        }
        let n = (self.next_id - first) as usize;
        let mut outcomes: Vec<Option<LabelOutcome>> = vec![None; n];
        let mut remaining = n;
        while remaining > 0 {
            let ev = self.rx.recv().map_err(|_| HarnessError::FeedbackClosed)?;
            // Stale events from an earlier session cannot occur: ids are
            // only accepted while their session is on the board.
            let slot = &mut outcomes[(ev.query - first) as usize];
            if slot.is_none() {
                *slot = Some(ev.outcome);
                remaining -= 1;
            }
        }
        {
            let mut b = self.hub.board();
            b.session = None;
            b.queries.clear();
        }
        Ok(outcomes.into_iter().map(|o| o.expect("all answered")).collect())
    }
}

pub fn feedback_channel() -> (FeedbackHub, HumanTeacher) {
    let (tx, rx) = mpsc::sync_channel(QUEUE_CAPACITY);
    let hub = FeedbackHub {
        board: Arc::new(Mutex::new(Board::default())),
        tx,
    };
    let teacher = HumanTeacher {
        hub: hub.clone(),
        rx,
        next_id: 0,
    };
    (hub, teacher)
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: String) -> Self {
        Self { status, message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Deserialize)]
struct LabelBody {
    choice: Choice,
}

async fn current_session(State(hub): State<FeedbackHub>) -> Json<SessionView> {
    Json(hub.current())
}

async fn metrics(State(hub): State<FeedbackHub>) -> Json<Vec<MetricRow>> {
    Json(hub.metrics())
}

async fn label(
    State(hub): State<FeedbackHub>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("no pending query {id}")))?;
    let body: LabelBody = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("expected {{\"choice\": \"left\"|\"right\"|\"equal\"|\"skip\"}}: {e}"),
        )
    })?;
    hub.submit(id, body.choice)?;
    Ok(Json(serde_json::json!({ "ok": true, "query": id })))
}

pub fn router(hub: FeedbackHub) -> Router {
    Router::new()
        .route("/api/session/current", get(current_session))
        .route("/api/query/{id}/label", post(label))
        .route("/api/metrics", get(metrics))
        .with_state(hub)
}

/// Listener running on its own thread; dropping it shuts the server down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `127.0.0.1:port` (0 picks a free port) and serves the API.
pub fn serve(hub: FeedbackHub, port: u16) -> Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(("127.0.0.1", port)).map_err(HarnessError::Bind)?;
    listener.set_nonblocking(true).map_err(HarnessError::Bind)?;
    let addr = listener.local_addr().map_err(HarnessError::Bind)?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                log::error!("feedback API runtime: {e}");
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    log::error!("feedback API listener: {e}");
                    return;
                }
            };
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, router(hub)).with_graceful_shutdown(shutdown).await {
                log::error!("feedback API stopped: {e}");
            }
        });
    });
    log::info!("feedback API listening on http://{addr}");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
