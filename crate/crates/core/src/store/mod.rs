//! Append-only event log for participant sessions.
//!
//! The log is a UTF-8 file with one JSON [`EventRecord`] per LF-terminated
//! line. Appending is the only mutation; the in-memory state is whatever
//! replaying the file produces. Rejected events go to a sibling quarantine
//! file together with the rejection reason.

mod filter;
mod fixations;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, MouseModality, TaskType};

pub use filter::{FilterPolicy, FilteredPoints, OutOfBoundsPolicy};
pub use fixations::{export_fixations, import_fixations, FixationImport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionBegin,
    ImageBegin,
    Click,
    MoveSample,
    DescriptionUpdate,
    DescriptionFinal,
    ImageEnd,
    SessionEnd,
}

impl EventKind {
    pub fn is_pointer(self) -> bool {
        matches!(self, EventKind::Click | EventKind::MoveSample)
    }

    /// Kinds a participant client may post; the rest are written by the server.
    pub fn is_client_kind(self) -> bool {
        matches!(
            self,
            EventKind::Click | EventKind::MoveSample | EventKind::DescriptionUpdate
        )
    }
}

/// One line of the log. Coordinates are stimulus pixels; `t_ms` counts from
/// the image's `image_begin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub session_id: String,
    pub participant_id: String,
    pub experiment_id: String,
    pub image_id: Option<String>,
    pub seq: u64,
    pub kind: EventKind,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub t_ms: f64,
    pub text: Option<String>,
}

impl EventRecord {
    fn base(session: &Session, seq: u64, kind: EventKind, image_id: Option<&str>) -> Self {
        EventRecord {
            session_id: session.session_id.clone(),
            participant_id: session.participant_id.clone(),
            experiment_id: session.experiment_id.clone(),
            image_id: image_id.map(str::to_owned),
            seq,
            kind,
            x: None,
            y: None,
            t_ms: 0.0,
            text: None,
        }
    }

    /// The opening record of a session; its `text` carries the [`SessionInit`].
    pub fn session_begin(session: &Session) -> Self {
        let init = SessionInit {
            image_sequence: session.image_sequence.clone(),
            created_at_ms: session.created_at_ms,
        };
        EventRecord {
            text: Some(serde_json::to_string(&init).expect("serializable")),
            ..Self::base(session, 1, EventKind::SessionBegin, None)
        }
    }

    pub fn image_begin(session: &Session, seq: u64, image_id: &str) -> Self {
        Self::base(session, seq, EventKind::ImageBegin, Some(image_id))
    }

    pub fn image_end(session: &Session, seq: u64, image_id: &str, t_ms: f64) -> Self {
        EventRecord {
            t_ms,
            ..Self::base(session, seq, EventKind::ImageEnd, Some(image_id))
        }
    }

    pub fn description_final(session: &Session, seq: u64, image_id: &str, t_ms: f64, text: &str) -> Self {
        EventRecord {
            t_ms,
            text: Some(text.to_owned()),
            ..Self::base(session, seq, EventKind::DescriptionFinal, Some(image_id))
        }
    }

    pub fn session_end(session: &Session, seq: u64, abandoned: bool) -> Self {
        EventRecord {
            text: abandoned.then(|| ABANDONED.to_owned()),
            ..Self::base(session, seq, EventKind::SessionEnd, None)
        }
    }

    pub fn pointer(session: &Session, seq: u64, kind: EventKind, image_id: &str, x: f64, y: f64, t_ms: f64) -> Self {
        EventRecord {
            x: Some(x),
            y: Some(y),
            t_ms,
            ..Self::base(session, seq, kind, Some(image_id))
        }
    }
}

const ABANDONED: &str = "abandoned";

/// Payload of a `session_begin` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInit {
    pub image_sequence: Vec<String>,
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Complete,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant_id: String,
    pub experiment_id: String,
    pub image_sequence: Vec<String>,
    pub status: SessionStatus,
    pub created_at_ms: u64,
}

/// Why an event was refused.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RejectReason {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} already exists")]
    DuplicateSession(String),
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("session is {0:?}")]
    SessionClosed(SessionStatus),
    #[error("expected seq {expected}, got {got}")]
    SeqConflict { expected: u64, got: u64 },
    #[error("event identity does not match the session ({0})")]
    IdentityMismatch(&'static str),
    #[error("invalid session_begin payload: {0}")]
    BadSessionInit(String),
    #[error("image {got:?} is not the current image (expected {expected:?})")]
    WrongImage { expected: Option<String>, got: Option<String> },
    #[error("an image is still open")]
    ImageStillOpen,
    #[error("coordinates ({x}, {y}) outside the {width}x{height} stimulus")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("{0:?} events do not match the experiment's mouse modality")]
    WrongModality(EventKind),
    #[error("timestamp {0} is invalid or earlier than the previous sample")]
    BadTimestamp(f64),
    #[error("description has {got} characters, at least {min} required")]
    DescriptionTooShort { got: usize, min: u32 },
    #[error("image ended without a final description")]
    MissingDescription,
    #[error("session ended before all images were shown")]
    PrematureEnd,
    #[error("batch mixes sessions")]
    MixedBatch,
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("event rejected: {0}")]
    Rejected(RejectReason),
    #[error("log i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt log {path} at line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("no data for image {image_id:?} in experiment {experiment_id:?}")]
    UnknownImage { experiment_id: String, image_id: String },
    #[error("every participant was filtered out")]
    EmptyPointSet,
    #[error("fixation file: {0}")]
    Fixations(String),
}

impl StoreError {
    pub fn reject_reason(&self) -> Option<&RejectReason> {
        match self {
            StoreError::Rejected(r) => Some(r),
            _ => None,
        }
    }
}

/// Experiments the log accepts events for, with stimulus dimensions.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    experiments: BTreeMap<String, CatalogEntry>,
}

#[derive(Debug, Clone)]
struct CatalogEntry {
    config: ExperimentConfig,
    dims: BTreeMap<String, (usize, usize)>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an experiment; `dims` maps image id to `(width, height)`.
    pub fn insert(&mut self, config: ExperimentConfig, dims: BTreeMap<String, (usize, usize)>) {
        self.experiments
            .insert(config.experiment_id.clone(), CatalogEntry { config, dims });
    }

    pub fn config(&self, experiment_id: &str) -> Option<&ExperimentConfig> {
        self.experiments.get(experiment_id).map(|e| &e.config)
    }

    pub fn dims(&self, experiment_id: &str, image_id: &str) -> Option<(usize, usize)> {
        self.experiments.get(experiment_id)?.dims.get(image_id).copied()
    }

    pub fn experiment_ids(&self) -> impl Iterator<Item = &str> {
        self.experiments.keys().map(String::as_str)
    }
}

/// Where a session is within its image sequence.
#[derive(Debug, Clone, PartialEq)]
struct Cursor {
    next_seq: u64,
    status: SessionStatus,
    images_done: usize,
    current_image: Option<String>,
    has_final_description: bool,
    last_pointer_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session: Session,
    cursor: Cursor,
    pub events: Vec<EventRecord>,
}

impl SessionState {
    pub fn next_seq(&self) -> u64 {
        self.cursor.next_seq
    }

    pub fn current_image(&self) -> Option<&str> {
        self.cursor.current_image.as_deref()
    }

    /// The image that will be shown next, if the current one is closed.
    pub fn upcoming_image(&self) -> Option<&str> {
        self.session.image_sequence.get(self.cursor.images_done).map(String::as_str)
    }

    pub fn images_done(&self) -> usize {
        self.cursor.images_done
    }
}

/// Everything replaying the log reconstructs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogState {
    pub sessions: BTreeMap<String, SessionState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Committed {
    pub first_seq: u64,
    pub last_seq: u64,
    /// The batch had already been committed; nothing was written.
    pub duplicate: bool,
}

pub struct EventLog {
    path: PathBuf,
    quarantine_path: PathBuf,
    file: File,
    catalog: Catalog,
    state: LogState,
}

fn utf16_len(s: &str) -> usize {
    s.encode_utf16().count()
}

impl EventLog {
    /// Opens (or creates) the log at `path` and replays it.
    ///
    /// A trailing line without a newline is a torn write and is truncated.
    pub fn open(path: impl Into<PathBuf>, catalog: Catalog) -> Result<Self, StoreError> {
        let path = path.into();
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&path).map_err(io)?;
        let mut state = LogState::default();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                if !line.ends_with('\n') {
                    break;
                }
                let corrupt = |message: String| StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                    message,
                };
                let event: EventRecord = serde_json::from_str(line.trim_end()).map_err(|e| corrupt(e.to_string()))?;
                let mut cursor = cursor_for(&state, &event);
                validate(&catalog, &state, &mut cursor, &event).map_err(|r| corrupt(r.to_string()))?;
                apply(&mut state, cursor, event);
                good_len += n as u64;
            }
        }
        if file.metadata().map_err(io)?.len() != good_len {
            file.set_len(good_len).map_err(io)?;
        }
        let quarantine_path = quarantine_path_for(&path);
        Ok(EventLog {
            path,
            quarantine_path,
            file,
            catalog,
            state,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn quarantine_path(&self) -> &Path {
        &self.quarantine_path
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn state(&self) -> &LogState {
        &self.state
    }

    pub fn session(&self, session_id: &str) -> Option<&SessionState> {
        self.state.sessions.get(session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionState> {
        self.state.sessions.values()
    }

    pub fn append(&mut self, event: EventRecord) -> Result<u64, StoreError> {
        self.append_batch(vec![event]).map(|c| c.last_seq)
    }

    /// All-or-nothing append of seq-contiguous events for one session.
    ///
    /// Re-sending an already committed batch is a no-op that reports the same
    /// seq range.
    pub fn append_batch(&mut self, batch: Vec<EventRecord>) -> Result<Committed, StoreError> {
        let reject = |log: &mut Self, batch: &[EventRecord], reason: RejectReason| {
            log.quarantine(batch, &reason)?;
            Err(StoreError::Rejected(reason))
        };
        let Some(first) = batch.first() else {
            return reject(self, &batch, RejectReason::EmptyBatch);
        };
        if batch.iter().any(|e| e.session_id != first.session_id) {
            return reject(self, &batch, RejectReason::MixedBatch);
        }
        if let Some(existing) = self.state.sessions.get(&first.session_id) {
            if first.seq < existing.cursor.next_seq {
                let dup = batch.iter().all(|e| {
                    e.seq >= 1 && existing.events.get(e.seq as usize - 1).is_some_and(|old| old == e)
                });
                if dup {
                    return Ok(Committed {
                        first_seq: first.seq,
                        last_seq: batch.last().map_or(first.seq, |e| e.seq),
                        duplicate: true,
                    });
                }
            }
        }

        let mut staged = self.state.clone_session_shell(&first.session_id);
        let mut cursors = Vec::with_capacity(batch.len());
        for event in &batch {
            let mut cursor = cursor_for(&staged, event);
            if let Err(reason) = validate(&self.catalog, &staged, &mut cursor, event) {
                return reject(self, &batch, reason);
            }
            apply_cursor(&mut staged, cursor.clone(), event);
            cursors.push(cursor);
        }

        let mut buf = Vec::new();
        for event in &batch {
            serde_json::to_writer(&mut buf, event).expect("serializable event");
            buf.push(b'\n');
        }
        self.write_durable(&buf)?;

        let range = Committed {
            first_seq: first.seq,
            last_seq: batch.last().map_or(first.seq, |e| e.seq),
            duplicate: false,
        };
        for (cursor, event) in cursors.into_iter().zip(batch) {
            apply(&mut self.state, cursor, event);
        }
        Ok(range)
    }

    fn write_durable(&mut self, buf: &[u8]) -> Result<(), StoreError> {
        let io = |source| StoreError::Io {
            path: self.path.display().to_string(),
            source,
        };
        self.file.write_all(buf).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    fn quarantine(&self, batch: &[EventRecord], reason: &RejectReason) -> Result<(), StoreError> {
        #[derive(Serialize)]
        struct Quarantined<'a> {
            reason: String,
            event: &'a EventRecord,
        }
        let io = |source| StoreError::Io {
            path: self.quarantine_path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        for event in batch {
            serde_json::to_writer(
                &mut buf,
                &Quarantined {
                    reason: reason.to_string(),
                    event,
                },
            )
            .expect("serializable event");
            buf.push(b'\n');
        }
        if batch.is_empty() {
            buf.extend_from_slice(format!("{{\"reason\":{:?},\"event\":null}}\n", reason.to_string()).as_bytes());
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.quarantine_path)
            .map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_data().map_err(io)
    }
}

fn quarantine_path_for(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".quarantine");
    path.with_file_name(name)
}

impl LogState {
    /// Copy of one session's state without its event history, for staging.
    fn clone_session_shell(&self, session_id: &str) -> LogState {
        let mut sessions = BTreeMap::new();
        if let Some(s) = self.sessions.get(session_id) {
            sessions.insert(
                session_id.to_owned(),
                SessionState {
                    session: s.session.clone(),
                    cursor: s.cursor.clone(),
                    events: Vec::new(),
                },
            );
        }
        LogState { sessions }
    }
}

fn cursor_for(state: &LogState, event: &EventRecord) -> Cursor {
    state
        .sessions
        .get(&event.session_id)
        .map(|s| s.cursor.clone())
        .unwrap_or(Cursor {
            next_seq: 1,
            status: SessionStatus::Open,
            images_done: 0,
            current_image: None,
            has_final_description: false,
            last_pointer_t: 0.0,
        })
}

fn apply_cursor(state: &mut LogState, cursor: Cursor, event: &EventRecord) {
    apply_inner(state, cursor, event, false)
}

fn apply(state: &mut LogState, cursor: Cursor, event: EventRecord) {
    apply_inner(state, cursor, &event, true)
}

fn apply_inner(state: &mut LogState, cursor: Cursor, event: &EventRecord, keep_event: bool) {
    if event.kind == EventKind::SessionBegin {
        let init: SessionInit = serde_json::from_str(event.text.as_deref().unwrap_or_default()).expect("validated");
        state.sessions.insert(
            event.session_id.clone(),
            SessionState {
                session: Session {
                    session_id: event.session_id.clone(),
                    participant_id: event.participant_id.clone(),
                    experiment_id: event.experiment_id.clone(),
                    image_sequence: init.image_sequence,
                    status: SessionStatus::Open,
                    created_at_ms: init.created_at_ms,
                },
                cursor: cursor.clone(),
                events: Vec::new(),
            },
        );
    }
    let s = state.sessions.get_mut(&event.session_id).expect("validated session");
    s.session.status = cursor.status;
    s.cursor = cursor;
    if keep_event {
        s.events.push(event.clone());
    }
}

/// Checks `event` against the session state and advances `cursor`.
fn validate(catalog: &Catalog, state: &LogState, cursor: &mut Cursor, e: &EventRecord) -> Result<(), RejectReason> {
    let cfg = catalog
        .config(&e.experiment_id)
        .ok_or_else(|| RejectReason::UnknownExperiment(e.experiment_id.clone()))?;
    let existing = state.sessions.get(&e.session_id);

    if e.kind == EventKind::SessionBegin {
        if existing.is_some() {
            return Err(RejectReason::DuplicateSession(e.session_id.clone()));
        }
        if e.seq != 1 {
            return Err(RejectReason::SeqConflict { expected: 1, got: e.seq });
        }
        let text = e.text.as_deref().ok_or(RejectReason::MissingField("text"))?;
        let init: SessionInit =
            serde_json::from_str(text).map_err(|x| RejectReason::BadSessionInit(x.to_string()))?;
        check_sequence(cfg, &init.image_sequence)?;
        cursor.next_seq = 2;
        return Ok(());
    }

    let s = existing.ok_or_else(|| RejectReason::UnknownSession(e.session_id.clone()))?;
    if s.session.participant_id != e.participant_id {
        return Err(RejectReason::IdentityMismatch("participant_id"));
    }
    if s.session.experiment_id != e.experiment_id {
        return Err(RejectReason::IdentityMismatch("experiment_id"));
    }
    if cursor.status != SessionStatus::Open {
        return Err(RejectReason::SessionClosed(cursor.status));
    }
    if e.seq != cursor.next_seq {
        return Err(RejectReason::SeqConflict {
            expected: cursor.next_seq,
            got: e.seq,
        });
    }
    if !(e.t_ms >= 0.0 && e.t_ms.is_finite()) {
        return Err(RejectReason::BadTimestamp(e.t_ms));
    }
    let require_current = |cursor: &Cursor| -> Result<(), RejectReason> {
        if cursor.current_image.is_none() || cursor.current_image != e.image_id {
            return Err(RejectReason::WrongImage {
                expected: cursor.current_image.clone(),
                got: e.image_id.clone(),
            });
        }
        Ok(())
    };

    match e.kind {
        EventKind::SessionBegin => unreachable!(),
        EventKind::ImageBegin => {
            if cursor.current_image.is_some() {
                return Err(RejectReason::ImageStillOpen);
            }
            let expected = s.session.image_sequence.get(cursor.images_done);
            if expected.is_none() || expected != e.image_id.as_ref() {
                return Err(RejectReason::WrongImage {
                    expected: expected.cloned(),
                    got: e.image_id.clone(),
                });
            }
            cursor.current_image = e.image_id.clone();
            cursor.has_final_description = false;
            cursor.last_pointer_t = 0.0;
        }
        EventKind::Click | EventKind::MoveSample => {
            require_current(cursor)?;
            let wanted = match cfg.mouse_modality {
                MouseModality::Click => EventKind::Click,
                MouseModality::Move => EventKind::MoveSample,
            };
            if e.kind != wanted {
                return Err(RejectReason::WrongModality(e.kind));
            }
            let x = e.x.ok_or(RejectReason::MissingField("x"))?;
            let y = e.y.ok_or(RejectReason::MissingField("y"))?;
            let image_id = e.image_id.as_deref().unwrap_or_default();
            let (width, height) = catalog
                .dims(&e.experiment_id, image_id)
                .ok_or_else(|| RejectReason::WrongImage {
                    expected: None,
                    got: e.image_id.clone(),
                })?;
            if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
                return Err(RejectReason::OutOfBounds { x, y, width, height });
            }
            if e.t_ms < cursor.last_pointer_t {
                return Err(RejectReason::BadTimestamp(e.t_ms));
            }
            cursor.last_pointer_t = e.t_ms;
        }
        EventKind::DescriptionUpdate => {
            require_current(cursor)?;
            e.text.as_ref().ok_or(RejectReason::MissingField("text"))?;
        }
        EventKind::DescriptionFinal => {
            require_current(cursor)?;
            let text = e.text.as_deref().ok_or(RejectReason::MissingField("text"))?;
            if cfg.task_type == TaskType::Describe && utf16_len(text) < cfg.min_description_chars as usize {
                return Err(RejectReason::DescriptionTooShort {
                    got: utf16_len(text),
                    min: cfg.min_description_chars,
                });
            }
            cursor.has_final_description = true;
        }
        EventKind::ImageEnd => {
            require_current(cursor)?;
            if cfg.task_type == TaskType::Describe && !cursor.has_final_description {
                return Err(RejectReason::MissingDescription);
            }
            cursor.current_image = None;
            cursor.images_done += 1;
        }
        EventKind::SessionEnd => {
            if e.text.as_deref() == Some(ABANDONED) {
                cursor.status = SessionStatus::Abandoned;
            } else {
                if cursor.current_image.is_some() {
                    return Err(RejectReason::ImageStillOpen);
                }
                if cursor.images_done < s.session.image_sequence.len() {
                    return Err(RejectReason::PrematureEnd);
                }
                cursor.status = SessionStatus::Complete;
            }
        }
    }
    cursor.next_seq += 1;
    Ok(())
}

fn check_sequence(cfg: &ExperimentConfig, seq: &[String]) -> Result<(), RejectReason> {
    if seq.len() != cfg.images_per_session as usize {
        return Err(RejectReason::BadSessionInit(format!(
            "{} images, experiment shows {} per session",
            seq.len(),
            cfg.images_per_session
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for id in seq {
        if !cfg.image_ids.contains(id) {
            return Err(RejectReason::BadSessionInit(format!("image {id:?} not in experiment")));
        }
        if !seen.insert(id) {
            return Err(RejectReason::BadSessionInit(format!("image {id:?} repeated")));
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::TimeLimit;

    pub(crate) fn catalog(task: TaskType, modality: MouseModality) -> Catalog {
        let cfg = ExperimentConfig {
            experiment_id: "exp".into(),
            task_type: task,
            blur_sigma_px: 30.0,
            bubble_radius_px: 30.0,
            time_limit_s: match task {
                TaskType::FreeView => TimeLimit::Seconds(10.0),
                TaskType::Describe => TimeLimit::Unlimited,
            },
            mouse_modality: modality,
            min_description_chars: if task == TaskType::Describe { 150 } else { 0 },
            images_per_session: 2,
            image_ids: vec!["a".into(), "b".into(), "c".into()],
            move_sample_hz: 100,
            qualification_note: String::new(),
        };
        let mut cat = Catalog::new();
        let dims = ["a", "b", "c"].iter().map(|s| (s.to_string(), (100, 80))).collect();
        cat.insert(cfg, dims);
        cat
    }

    pub(crate) fn session(id: &str, participant: &str, images: &[&str]) -> Session {
        Session {
            session_id: id.into(),
            participant_id: participant.into(),
            experiment_id: "exp".into(),
            image_sequence: images.iter().map(|s| s.to_string()).collect(),
            status: SessionStatus::Open,
            created_at_ms: 1_700_000_000_000,
        }
    }

    /// Begins a session and its first image; returns the next seq.
    pub(crate) fn begin(log: &mut EventLog, s: &Session) -> u64 {
        log.append(EventRecord::session_begin(s)).unwrap();
        log.append(EventRecord::image_begin(s, 2, &s.image_sequence[0])).unwrap();
        3
    }

    #[test]
    fn appends_commit_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::FreeView, MouseModality::Click)).unwrap();
        let s = session("s1", "p1", &["a", "b"]);
        assert_eq!(log.append(EventRecord::session_begin(&s)).unwrap(), 1);
        assert_eq!(log.append(EventRecord::image_begin(&s, 2, "a")).unwrap(), 2);
        let events = &log.session("s1").unwrap().events;
        assert_eq!(events.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn click_on_right_edge_is_rejected_and_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::FreeView, MouseModality::Click)).unwrap();
        let s = session("s1", "p1", &["a", "b"]);
        let seq = begin(&mut log, &s);
        let err = log
            .append(EventRecord::pointer(&s, seq, EventKind::Click, "a", 100.0, 5.0, 10.0))
            .unwrap_err();
        assert!(matches!(err.reject_reason(), Some(RejectReason::OutOfBounds { .. })));
        let q = std::fs::read_to_string(log.quarantine_path()).unwrap();
        assert_eq!(q.lines().count(), 1);
        assert!(q.contains("outside the 100x80 stimulus"));
        log.append(EventRecord::pointer(&s, seq, EventKind::Click, "a", 99.9, 79.9, 10.0))
            .unwrap();
    }

    fn description(n: usize) -> String {
        "x".repeat(n)
    }

    #[test]
    fn description_minimum_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::Describe, MouseModality::Click)).unwrap();
        let s = session("s1", "p1", &["a", "b"]);
        let seq = begin(&mut log, &s);
        let err = log
            .append(EventRecord::description_final(&s, seq, "a", 1000.0, &description(149)))
            .unwrap_err();
        assert_eq!(
            err.reject_reason(),
            Some(&RejectReason::DescriptionTooShort { got: 149, min: 150 })
        );
        let err = log.append(EventRecord::image_end(&s, seq, "a", 1000.0)).unwrap_err();
        assert_eq!(err.reject_reason(), Some(&RejectReason::MissingDescription));
        log.append(EventRecord::description_final(&s, seq, "a", 1000.0, &description(150)))
            .unwrap();
        log.append(EventRecord::image_end(&s, seq + 1, "a", 1000.0)).unwrap();
    }

    #[test]
    fn seq_gap_and_closed_session() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::FreeView, MouseModality::Click)).unwrap();
        let s = session("s1", "p1", &["a", "b"]);
        let seq = begin(&mut log, &s);
        let err = log
            .append(EventRecord::pointer(&s, seq + 1, EventKind::Click, "a", 1.0, 1.0, 0.0))
            .unwrap_err();
        assert_eq!(err.reject_reason(), Some(&RejectReason::SeqConflict { expected: 3, got: 4 }));
        log.append(EventRecord::session_end(&s, seq, true)).unwrap();
        assert_eq!(log.session("s1").unwrap().session.status, SessionStatus::Abandoned);
        let err = log
            .append(EventRecord::pointer(&s, seq + 1, EventKind::Click, "a", 1.0, 1.0, 0.0))
            .unwrap_err();
        assert!(matches!(err.reject_reason(), Some(RejectReason::SessionClosed(_))));
    }

    #[test]
    fn full_session_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::FreeView, MouseModality::Click)).unwrap();
        let s = session("s1", "p1", &["b", "a"]);
        let mut seq = begin(&mut log, &s);
        assert!(log.append(EventRecord::session_end(&s, seq, false)).is_err());
        log.append(EventRecord::image_end(&s, seq, "b", 10_000.0)).unwrap();
        seq += 1;
        // wrong image order
        assert!(log.append(EventRecord::image_begin(&s, seq, "c")).is_err());
        log.append(EventRecord::image_begin(&s, seq, "a")).unwrap();
        log.append(EventRecord::image_end(&s, seq + 1, "a", 10_000.0)).unwrap();
        log.append(EventRecord::session_end(&s, seq + 2, false)).unwrap();
        assert_eq!(log.session("s1").unwrap().session.status, SessionStatus::Complete);
    }

    #[test]
    fn modality_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::FreeView, MouseModality::Move)).unwrap();
        let s = session("s1", "p1", &["a", "b"]);
        let seq = begin(&mut log, &s);
        let err = log
            .append(EventRecord::pointer(&s, seq, EventKind::Click, "a", 1.0, 1.0, 0.0))
            .unwrap_err();
        assert_eq!(err.reject_reason(), Some(&RejectReason::WrongModality(EventKind::Click)));
        log.append(EventRecord::pointer(&s, seq, EventKind::MoveSample, "a", 1.0, 1.0, 0.0))
            .unwrap();
    }

    #[test]
    fn bad_session_sequences_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = EventLog::open(dir.path().join("events.jsonl"), catalog(TaskType::FreeView, MouseModality::Click)).unwrap();
        for images in [&["a"][..], &["a", "a"], &["a", "zz"], &["a", "b", "c"]] {
            let s = session("s", "p", images);
            assert!(matches!(
                log.append(EventRecord::session_begin(&s)).unwrap_err().reject_reason(),
                Some(RejectReason::BadSessionInit(_))
            ));
        }
    }

    #[test]
    fn batch_is_atomic_and_duplicates_are_noops() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut log = EventLog::open(&path, catalog(TaskType::FreeView, MouseModality::Click)).unwrap();
        let s = session("s1", "p1", &["a", "b"]);
        let seq = begin(&mut log, &s);
        let batch: Vec<EventRecord> = (0..5)
            .map(|i| EventRecord::pointer(&s, seq + i, EventKind::Click, "a", i as f64, 2.0, i as f64 * 10.0))
            .collect();
        let mut bad = batch.clone();
        bad[3].x = Some(1e6);
        assert!(log.append_batch(bad).is_err());
        assert_eq!(log.session("s1").unwrap().next_seq(), seq);
        let c = log.append_batch(batch.clone()).unwrap();
        assert_eq!((c.first_seq, c.last_seq, c.duplicate), (3, 7, false));
        let size = std::fs::metadata(&path).unwrap().len();
        let again = log.append_batch(batch.clone()).unwrap();
        assert_eq!((again.first_seq, again.last_seq, again.duplicate), (3, 7, true));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), size);
        let mut altered = batch;
        altered[0].x = Some(50.0);
        assert!(matches!(
            log.append_batch(altered).unwrap_err().reject_reason(),
            Some(RejectReason::SeqConflict { expected: 8, got: 3 })
        ));
    }

    #[test]
    fn replay_reconstructs_state_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let cat = catalog(TaskType::FreeView, MouseModality::Click);
        let mut log = EventLog::open(&path, cat.clone()).unwrap();
        for (sid, p) in [("s1", "p1"), ("s2", "p2")] {
            let s = session(sid, p, &["a", "b"]);
            let seq = begin(&mut log, &s);
            for i in 0..3 {
                log.append(EventRecord::pointer(&s, seq + i, EventKind::Click, "a", 0.1 + i as f64, 0.7, i as f64))
                    .unwrap();
            }
        }
        let before = log.state().clone();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"session_id\":\"s1\",\"par").unwrap();
        drop(f);
        let replayed = EventLog::open(&path, cat.clone()).unwrap();
        assert_eq!(replayed.state(), &before);
        let again = EventLog::open(&path, cat).unwrap();
        assert_eq!(again.state(), &before);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "not json\n").unwrap();
        let err = EventLog::open(&path, catalog(TaskType::FreeView, MouseModality::Click)).err().unwrap();
        assert!(matches!(err, StoreError::Corrupt { line: 1, .. }));
    }
}
