use std::io::Write;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bubbleview_core::config::{ExperimentConfig, TaskType, TimeLimit};
use bubbleview_core::store::{EventKind, EventRecord, Session, SessionState, SessionStatus};
use bubbleview_core::{derive_seed, stable_hash};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{ApiError, AppState, Runtime, EXPERIMENTER_HEADER, TOKEN_HEADER};

type Shared = State<Arc<AppState>>;

pub(crate) fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{sid}", get(session_state))
        .route("/api/sessions/{sid}/events", post(post_events))
        .route("/api/sessions/{sid}/advance", post(advance))
        .route("/api/experiments/{id}", get(experiment))
        .route("/api/experiments/{id}/close", post(close_experiment))
        .route("/api/images/{id}", get(image))
        .route("/api/monitor/{experiment}/{image}", get(monitor))
        .route("/consent", get(consent))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub experiment_id: String,
    pub participant_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub token: String,
    pub participant_id: String,
    pub experiment_id: String,
    pub image_sequence: Vec<String>,
    pub current_image: Option<String>,
    pub next_seq: u64,
    pub config: ExperimentConfig,
}

/// A client event; identity fields are filled in from the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostedEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub image_id: String,
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default)]
    pub y: Option<f64>,
    pub t_ms: f64,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsRequest {
    pub events: Vec<PostedEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventsResponse {
    pub first_seq: u64,
    pub last_seq: u64,
    pub duplicate: bool,
    pub next_seq: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub image_id: String,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub next_image: Option<String>,
    pub complete: bool,
    pub completion_code: Option<String>,
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStateResponse {
    pub session_id: String,
    pub participant_id: String,
    pub experiment_id: String,
    pub status: SessionStatus,
    pub image_sequence: Vec<String>,
    pub images_done: usize,
    pub current_image: Option<String>,
    pub next_seq: u64,
    /// Server-side free-view time left on the current image.
    pub remaining_s: Option<f64>,
    pub completion_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorStream {
    pub session_id: String,
    pub participant_id: String,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorResponse {
    pub experiment_id: String,
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub blurred_url: String,
    pub original_url: String,
    pub config: ExperimentConfig,
    pub streams: Vec<MonitorStream>,
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

fn is_experimenter(state: &AppState, headers: &HeaderMap) -> bool {
    let key = &state.config.experimenter_key;
    !key.is_empty() && header(headers, EXPERIMENTER_HEADER) == Some(key.as_str())
}

/// Checks the token against the session and returns the runtime record.
fn authorize(state: &AppState, sid: &str, headers: &HeaderMap) -> Result<Runtime, ApiError> {
    let runtime = state.runtimes.lock().get(sid).cloned();
    let runtime = runtime.ok_or_else(|| ApiError::UnknownSession(sid.to_owned()))?;
    match header(headers, TOKEN_HEADER) {
        Some(t) if t == runtime.token => Ok(runtime),
        _ => Err(ApiError::Unauthorized),
    }
}

fn completion_code(token: &str, sid: &str) -> String {
    format!("{:010X}", derive_seed(stable_hash(token), stable_hash(sid)) >> 24)
}

fn new_token() -> String {
    let mut rng = rand::rng();
    format!("{:016x}{:016x}", rng.random::<u64>(), rng.random::<u64>())
}

fn image_sequence(state: &AppState, config: &ExperimentConfig, sid: &str) -> Vec<String> {
    let mut ids = config.image_ids.clone();
    match state.config.seed {
        Some(seed) => {
            let key = stable_hash(&format!("{}/{sid}", config.experiment_id));
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, key)));
        }
        None => ids.shuffle(&mut rand::rng()),
    }
    ids.truncate(config.images_per_session as usize);
    ids
}

fn remaining_s(config: &ExperimentConfig, started_ms: u64, now_ms: u64) -> Option<f64> {
    match (config.task_type, config.time_limit_s) {
        (TaskType::FreeView, TimeLimit::Seconds(limit)) => {
            Some((limit - now_ms.saturating_sub(started_ms) as f64 / 1000.0).max(0.0))
        }
        _ => None,
    }
}

fn state_response(state: &AppState, s: &SessionState, runtime: &Runtime) -> SessionStateResponse {
    let config = state.experiments.get(&s.session.experiment_id).map(|e| &e.config);
    let remaining = match (config, s.current_image()) {
        (Some(c), Some(_)) => remaining_s(c, runtime.image_started_ms, state.clock.now_ms()),
        _ => None,
    };
    SessionStateResponse {
        session_id: s.session.session_id.clone(),
        participant_id: s.session.participant_id.clone(),
        experiment_id: s.session.experiment_id.clone(),
        status: s.session.status,
        image_sequence: s.session.image_sequence.clone(),
        images_done: s.images_done(),
        current_image: s.current_image().map(str::to_owned),
        next_seq: s.next_seq(),
        remaining_s: remaining,
        completion_code: (s.session.status == SessionStatus::Complete)
            .then(|| completion_code(&runtime.token, &s.session.session_id)),
    }
}

async fn create_session(
    State(state): Shared,
    Json(req): Json<CreateSessionRequest>,
) -> Result<Json<CreateSessionResponse>, ApiError> {
    let experiment = state
        .experiments
        .get(&req.experiment_id)
        .ok_or_else(|| ApiError::UnknownExperiment(req.experiment_id.clone()))?;
    if !experiment.is_open() {
        return Err(ApiError::ExperimentClosed(req.experiment_id));
    }
    if req.participant_id.is_empty() {
        return Err(ApiError::BadRequest("participant_id must not be empty".into()));
    }
    let config = &experiment.config;

    let mut log = state.log.write();
    let sid = loop {
        let n = state.session_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let sid = format!("s{n:06}");
        if log.session(&sid).is_none() {
            break sid;
        }
    };
    let token = new_token();
    let session = Session {
        session_id: sid.clone(),
        participant_id: req.participant_id.clone(),
        experiment_id: config.experiment_id.clone(),
        image_sequence: image_sequence(&state, config, &sid),
        status: SessionStatus::Open,
        created_at_ms: state.clock.now_ms(),
    };
    append_token(&state, &sid, &token)?;
    let first = session.image_sequence.first().cloned();
    let mut batch = vec![EventRecord::session_begin(&session)];
    if let Some(first) = &first {
        batch.push(EventRecord::image_begin(&session, 2, first));
    }
    log.append_batch(batch)?;
    let next_seq = log.session(&sid).map_or(1, |s| s.next_seq());
    drop(log);

    state.runtimes.lock().insert(
        sid.clone(),
        Runtime {
            token: token.clone(),
            image_started_ms: state.clock.now_ms(),
        },
    );
    tracing::info!(session = %sid, experiment = %config.experiment_id, "session created");
    Ok(Json(CreateSessionResponse {
        session_id: sid,
        token,
        participant_id: req.participant_id,
        experiment_id: config.experiment_id.clone(),
        image_sequence: session.image_sequence,
        current_image: first,
        next_seq,
        config: config.clone(),
    }))
}

fn append_token(state: &AppState, sid: &str, token: &str) -> Result<(), ApiError> {
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&state.tokens_path)?;
        f.write_all(format!("{sid}\t{token}\n").as_bytes())?;
        f.sync_data()
    };
    write().map_err(|e| ApiError::Internal(format!("{}: {e}", state.tokens_path.display())))
}

async fn session_state(
    State(state): Shared,
    Path(sid): Path<String>,
    headers: HeaderMap,
) -> Result<Json<SessionStateResponse>, ApiError> {
    let runtime = authorize(&state, &sid, &headers)?;
    let log = state.log.read();
    let s = log.session(&sid).ok_or_else(|| ApiError::UnknownSession(sid.clone()))?;
    Ok(Json(state_response(&state, s, &runtime)))
}

async fn post_events(
    State(state): Shared,
    Path(sid): Path<String>,
    headers: HeaderMap,
    Json(req): Json<EventsRequest>,
) -> Result<Json<EventsResponse>, ApiError> {
    authorize(&state, &sid, &headers)?;
    if req.events.is_empty() {
        return Err(ApiError::BadRequest("empty batch".into()));
    }
    if let Some(e) = req.events.iter().find(|e| !e.kind.is_client_kind()) {
        return Err(ApiError::InvalidEvent(format!("{:?} events are written by the server", e.kind)));
    }
    let mut log = state.log.write();
    let session = log
        .session(&sid)
        .ok_or_else(|| ApiError::UnknownSession(sid.clone()))?
        .session
        .clone();
    let batch = req
        .events
        .into_iter()
        .map(|e| EventRecord {
            session_id: session.session_id.clone(),
            participant_id: session.participant_id.clone(),
            experiment_id: session.experiment_id.clone(),
            image_id: Some(e.image_id),
            seq: e.seq,
            kind: e.kind,
            x: e.x,
            y: e.y,
            t_ms: e.t_ms,
            text: e.text,
        })
        .collect();
    let committed = log.append_batch(batch)?;
    let next_seq = log.session(&sid).map_or(1, |s| s.next_seq());
    Ok(Json(EventsResponse {
        first_seq: committed.first_seq,
        last_seq: committed.last_seq,
        duplicate: committed.duplicate,
        next_seq,
    }))
}

async fn advance(
    State(state): Shared,
    Path(sid): Path<String>,
    headers: HeaderMap,
    Json(req): Json<AdvanceRequest>,
) -> Result<Json<AdvanceResponse>, ApiError> {
    let runtime = authorize(&state, &sid, &headers)?;
    let mut log = state.log.write();
    let s = log.session(&sid).ok_or_else(|| ApiError::UnknownSession(sid.clone()))?;
    if s.session.status != SessionStatus::Open {
        return Err(ApiError::SessionClosed);
    }
    if s.current_image() != Some(req.image_id.as_str()) {
        return Err(ApiError::WrongImage {
            expected: s.current_image().map(str::to_owned),
            got: req.image_id,
        });
    }
    let config = &state
        .experiments
        .get(&s.session.experiment_id)
        .ok_or_else(|| ApiError::UnknownExperiment(s.session.experiment_id.clone()))?
        .config;
    let now = state.clock.now_ms();
    let elapsed_ms = now.saturating_sub(runtime.image_started_ms);
    match (config.task_type, config.time_limit_s) {
        (TaskType::Describe, _) => {
            let got = req.description.as_deref().map_or(0, |d| d.encode_utf16().count());
            let min = config.min_description_chars;
            if got < min as usize {
                return Err(ApiError::DescriptionTooShort {
                    missing: min as usize - got,
                    min,
                });
            }
        }
        (TaskType::FreeView, TimeLimit::Seconds(limit)) => {
            let elapsed_s = elapsed_ms as f64 / 1000.0;
            if elapsed_s < limit - state.config.skew_allowance_s {
                let remaining = (limit - elapsed_s).ceil().max(1.0) as u64;
                return Err(ApiError::TimeRemaining(remaining));
            }
        }
        (TaskType::FreeView, TimeLimit::Unlimited) => {}
    }

    let session = s.session.clone();
    let mut seq = s.next_seq();
    let next_image = s.session.image_sequence.get(s.images_done() + 1).cloned();
    let t_ms = elapsed_ms as f64;
    let mut batch = Vec::with_capacity(3);
    if config.task_type == TaskType::Describe {
        let text = req.description.as_deref().unwrap_or_default();
        batch.push(EventRecord::description_final(&session, seq, &req.image_id, t_ms, text));
        seq += 1;
    }
    batch.push(EventRecord::image_end(&session, seq, &req.image_id, t_ms));
    seq += 1;
    match &next_image {
        Some(next) => batch.push(EventRecord::image_begin(&session, seq, next)),
        None => batch.push(EventRecord::session_end(&session, seq, false)),
    }
    log.append_batch(batch)?;
    let next_seq = log.session(&sid).map_or(1, |s| s.next_seq());
    drop(log);

    if let Some(r) = state.runtimes.lock().get_mut(&sid) {
        r.image_started_ms = now;
    }
    let complete = next_image.is_none();
    Ok(Json(AdvanceResponse {
        next_image,
        complete,
        completion_code: complete.then(|| completion_code(&runtime.token, &sid)),
        next_seq,
    }))
}

#[derive(Serialize)]
struct ExperimentInfo<'a> {
    experiment_id: &'a str,
    open: bool,
    config: &'a ExperimentConfig,
    images: Vec<ImageInfo<'a>>,
}

#[derive(Serialize)]
struct ImageInfo<'a> {
    image_id: &'a str,
    width: usize,
    height: usize,
}

async fn experiment(State(state): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    let e = state.experiments.get(&id).ok_or(ApiError::UnknownExperiment(id))?;
    let info = ExperimentInfo {
        experiment_id: &e.config.experiment_id,
        open: e.is_open(),
        config: &e.config,
        images: e
            .images
            .iter()
            .map(|(id, a)| ImageInfo {
                image_id: id,
                width: a.width,
                height: a.height,
            })
            .collect(),
    };
    Ok(Json(info).into_response())
}

async fn close_experiment(
    State(state): Shared,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<StatusCode, ApiError> {
    if !is_experimenter(&state, &headers) {
        return Err(ApiError::Unauthorized);
    }
    if state.close_experiment(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::UnknownExperiment(id))
    }
}

#[derive(Debug, Default, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Variant {
    #[default]
    Blurred,
    Original,
}

#[derive(Deserialize)]
struct ImageQuery {
    #[serde(default)]
    variant: Variant,
    session: Option<String>,
    experiment: Option<String>,
}

async fn image(
    State(state): Shared,
    Path(image_id): Path<String>,
    Query(q): Query<ImageQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let experiment_id = if is_experimenter(&state, &headers) {
        match q.experiment {
            Some(e) => e,
            None => state
                .experiments
                .values()
                .find(|e| e.images.contains_key(&image_id))
                .map(|e| e.config.experiment_id.clone())
                .ok_or_else(|| ApiError::UnknownImage(image_id.clone()))?,
        }
    } else {
        let token = header(&headers, TOKEN_HEADER).ok_or(ApiError::Unauthorized)?;
        let sid = match q.session {
            Some(sid) => sid,
            None => state
                .runtimes
                .lock()
                .iter()
                .find(|(_, r)| r.token == token)
                .map(|(sid, _)| sid.clone())
                .ok_or(ApiError::Unauthorized)?,
        };
        authorize(&state, &sid, &headers)?;
        let log = state.log.read();
        let s = log.session(&sid).ok_or_else(|| ApiError::UnknownSession(sid.clone()))?;
        if !s.session.image_sequence.contains(&image_id) {
            return Err(ApiError::ForbiddenImage(image_id));
        }
        s.session.experiment_id.clone()
    };
    let assets = state
        .experiments
        .get(&experiment_id)
        .and_then(|e| e.images.get(&image_id))
        .ok_or_else(|| ApiError::UnknownImage(image_id.clone()))?;
    let bytes = match q.variant {
        Variant::Blurred => assets.blurred_png.as_ref().clone(),
        Variant::Original => assets.original_png.as_ref().clone(),
    };
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "private, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

async fn monitor(
    State(state): Shared,
    Path((experiment_id, image_id)): Path<(String, String)>,
    headers: HeaderMap,
) -> Result<Json<MonitorResponse>, ApiError> {
    if !is_experimenter(&state, &headers) {
        return Err(ApiError::Unauthorized);
    }
    let e = state
        .experiments
        .get(&experiment_id)
        .ok_or_else(|| ApiError::UnknownExperiment(experiment_id.clone()))?;
    let assets = e
        .images
        .get(&image_id)
        .ok_or_else(|| ApiError::UnknownImage(image_id.clone()))?;
    let log = state.log.read();
    let streams = log
        .sessions()
        .filter(|s| s.session.experiment_id == experiment_id)
        .filter_map(|s| {
            let events: Vec<EventRecord> = s
                .events
                .iter()
                .filter(|ev| ev.image_id.as_deref() == Some(image_id.as_str()))
                .cloned()
                .collect();
            (!events.is_empty()).then(|| MonitorStream {
                session_id: s.session.session_id.clone(),
                participant_id: s.session.participant_id.clone(),
                events,
            })
        })
        .collect();
    let url = |v: &str| format!("/api/images/{image_id}?variant={v}&experiment={experiment_id}");
    Ok(Json(MonitorResponse {
        experiment_id: experiment_id.clone(),
        image_id: image_id.clone(),
        width: assets.width,
        height: assets.height,
        blurred_url: url("blurred"),
        original_url: url("original"),
        config: e.config.clone(),
        streams,
    }))
}

async fn consent(State(state): Shared) -> Response {
    match &state.config.consent_html {
        Some(html) => Html(html.clone()).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}
