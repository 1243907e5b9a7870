//! HTTP service for participant browsers and experimenter monitoring.
//!
//! Routes:
//!
//! | method | path                                 | auth             |
//! |--------|--------------------------------------|------------------|
//! | POST   | `/api/sessions`                      | none             |
//! | GET    | `/api/sessions/{sid}`                | session token    |
//! | GET    | `/api/experiments/{id}`              | none             |
//! | POST   | `/api/experiments/{id}/close`        | experimenter key |
//! | GET    | `/api/images/{id}?variant=...`       | token or key     |
//! | POST   | `/api/sessions/{sid}/events`         | session token    |
//! | POST   | `/api/sessions/{sid}/advance`        | session token    |
//! | GET    | `/api/monitor/{experiment}/{image}`  | experimenter key |
//! | GET    | `/consent`                           | none             |
//!
//! The session token travels in the [`TOKEN_HEADER`] header, the experimenter
//! credential in [`EXPERIMENTER_HEADER`]. Error bodies are JSON objects with a
//! machine-readable `reason` code (see [`ApiError`]).

mod assets;
mod clock;
mod error;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64};
use std::sync::Arc;

use axum::Router;
use bubbleview_core::config::ExperimentConfig;
use bubbleview_core::store::{Catalog, EventLog, StoreError};
use parking_lot::{Mutex, RwLock};

pub use assets::{AssetError, ImageAssets};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::ApiError;
pub use routes::{
    AdvanceRequest, AdvanceResponse, CreateSessionRequest, CreateSessionResponse, EventsRequest, EventsResponse,
    MonitorResponse, MonitorStream, PostedEvent, SessionStateResponse,
};

pub const TOKEN_HEADER: &str = "x-session-token";
pub const EXPERIMENTER_HEADER: &str = "x-experimenter-key";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub experimenter_key: String,
    /// Fixes image permutations and completion codes; `None` draws fresh randomness.
    pub seed: Option<u64>,
    /// Slack subtracted from the free-view time limit when checking advances.
    pub skew_allowance_s: f64,
    /// Consent page served at `/consent`, supplied by the experimenter.
    pub consent_html: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            experimenter_key: String::new(),
            seed: None,
            skew_allowance_s: 0.5,
            consent_html: None,
        }
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub images: BTreeMap<String, ImageAssets>,
    open: AtomicBool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, images: BTreeMap<String, ImageAssets>) -> Self {
        Experiment {
            config,
            images,
            open: AtomicBool::new(true),
        }
    }

    pub fn is_open(&self) -> bool {
        self.open.load(std::sync::atomic::Ordering::SeqCst)
    }
}

/// Per-session data that is not part of the log.
#[derive(Debug, Clone)]
struct Runtime {
    token: String,
    /// Server time at which the current image was shown.
    image_started_ms: u64,
}

pub struct AppState {
    log: RwLock<EventLog>,
    experiments: BTreeMap<String, Experiment>,
    runtimes: Mutex<HashMap<String, Runtime>>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
    session_counter: AtomicU64,
    tokens_path: PathBuf,
}

impl AppState {
    /// Opens (and replays) the event log for the given experiments.
    ///
    /// Session tokens live next to the log in `<log>.tokens` so that sessions
    /// can resume after a restart. A resumed session's image timer restarts.
    pub fn new(
        log_path: impl Into<PathBuf>,
        experiments: Vec<Experiment>,
        clock: Arc<dyn Clock>,
        config: ServiceConfig,
    ) -> Result<Self, StoreError> {
        let mut catalog = Catalog::new();
        for e in &experiments {
            let dims = e.images.iter().map(|(id, a)| (id.clone(), (a.width, a.height))).collect();
            catalog.insert(e.config.clone(), dims);
        }
        let log = EventLog::open(log_path, catalog)?;
        let tokens_path = sidecar(log.path(), ".tokens");
        let now = clock.now_ms();
        let runtimes = load_tokens(&tokens_path)?
            .into_iter()
            .filter(|(sid, _)| log.session(sid).is_some())
            .map(|(sid, token)| {
                (
                    sid,
                    Runtime {
                        token,
                        image_started_ms: now,
                    },
                )
            })
            .collect();
        let existing = log.state().sessions.len() as u64;
        Ok(AppState {
            log: RwLock::new(log),
            experiments: experiments
                .into_iter()
                .map(|e| (e.config.experiment_id.clone(), e))
                .collect(),
            runtimes: Mutex::new(runtimes),
            clock,
            config,
            session_counter: AtomicU64::new(existing),
            tokens_path,
        })
    }

    pub fn experiment(&self, id: &str) -> Option<&Experiment> {
        self.experiments.get(id)
    }

    /// Stops new sessions from being created; running sessions continue.
    pub fn close_experiment(&self, id: &str) -> bool {
        match self.experiments.get(id) {
            Some(e) => {
                e.open.store(false, std::sync::atomic::Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    /// Read access to the event log (a consistent committed prefix).
    pub fn with_log<T>(&self, f: impl FnOnce(&EventLog) -> T) -> T {
        f(&self.log.read())
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn load_tokens(path: &Path) -> Result<Vec<(String, String)>, StoreError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(StoreError::Io {
                path: path.display().to_string(),
                source,
            })
        }
    };
    // A torn last line has no tab or no newline; its session never got a response.
    Ok(text
        .split_inclusive('\n')
        .filter(|l| l.ends_with('\n'))
        .filter_map(|l| l.trim_end().split_once('\t'))
        .map(|(sid, tok)| (sid.to_owned(), tok.to_owned()))
        .collect())
}

pub fn router(state: Arc<AppState>) -> Router {
    routes::router(state)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Like [`serve`], finishing in-flight requests once `shutdown` resolves.
pub async fn serve_until(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
