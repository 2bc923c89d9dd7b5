//! Session registry, background jobs and the optional directory store.
//!
//! Each session has one writer (the engine [`Session`], taken out of its slot
//! while a job runs) and a published [`View`] that readers clone from. The
//! view is replaced only between iterations, so reads see whole iterations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use roireg::engine::{CancelFlag, Phase, RunOptions, Session, SessionConfig, SessionParts, Stage, TraceEntry, Verdict};
use roireg::engine::LossTrace;
use roireg::volume::{decode_mha, encode_mha};
use roireg::{DisplacementField, Error, RoiBox, Volume3};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Idle,
    Running { phase: Phase, iteration: u64 },
    Cancelling { phase: Phase, iteration: u64 },
    Failed { reason: String },
    Accepted,
}

impl Status {
    pub fn is_active(&self) -> bool {
        matches!(self, Status::Running { .. } | Status::Cancelling { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Job {
    Iso { iterations: usize },
    Rso { roi: RoiBox, iterations: usize },
}

impl Job {
    fn phase(&self) -> Phase {
        match self {
            Job::Iso { .. } => Phase::Iso,
            Job::Rso { .. } => Phase::Rso,
        }
    }
}

/// Snapshot handed to readers.
#[derive(Debug, Clone)]
pub struct View {
    pub fixed: Arc<Volume3>,
    pub moving: Arc<Volume3>,
    pub dvf: Arc<DisplacementField>,
    pub trace: LossTrace,
    pub stage: Stage,
    pub roi_history: Vec<RoiBox>,
    pub config: SessionConfig,
    pub status: Status,
}

impl View {
    fn of(session: &Session, status: Status) -> Self {
        View {
            fixed: session.fixed().clone(),
            moving: session.moving().clone(),
            dvf: Arc::new(session.dvf().clone()),
            trace: session.trace().clone(),
            stage: session.stage(),
            roi_history: session.roi_history().to_vec(),
            config: *session.config(),
            status,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.trace.last_iteration()
    }
}

pub struct SessionEntry {
    pub id: String,
    pub created_at_ms: u64,
    engine: Mutex<Option<Session>>,
    view: RwLock<View>,
    cancel: Mutex<Option<CancelFlag>>,
    dir: Option<PathBuf>,
}

impl SessionEntry {
    fn new(id: String, created_at_ms: u64, session: Session, dir: Option<PathBuf>) -> Self {
        let status = if session.stage() == Stage::Accepted {
            Status::Accepted
        } else {
            Status::Idle
        };
        SessionEntry {
            id,
            created_at_ms,
            view: RwLock::new(View::of(&session, status)),
            engine: Mutex::new(Some(session)),
            cancel: Mutex::new(None),
            dir,
        }
    }

    pub fn view(&self) -> View {
        self.view.read().clone()
    }

    /// Runs `f` on the read-locked view without cloning the trace.
    pub fn with_view<T>(&self, f: impl FnOnce(&View) -> T) -> T {
        f(&self.view.read())
    }

    /// Validate and launch `job` on a blocking thread. Returns once the
    /// status reads Running.
    pub fn start(self: &Arc<Self>, job: Job) -> Result<(), ApiError> {
        let mut slot = self.engine.lock();
        let session = slot.as_ref().ok_or_else(ApiError::busy)?;
        if session.stage() == Stage::Accepted {
            return Err(Error::Stage {
                op: "run",
                stage: session.stage().to_string(),
            }
            .into());
        }
        if let Job::Rso { roi, .. } = &job {
            roi.validate(session.fixed().dims())?;
        }
        let mut session = slot.take().expect("checked above");
        *self.cancel.lock() = Some(session.cancel_flag());
        self.view.write().status = Status::Running {
            phase: job.phase(),
            iteration: session.iteration(),
        };
        drop(slot);

        let entry = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut publish = |s: &Session, e: &TraceEntry| entry.publish(s, e);
            let result = match job {
                Job::Iso { iterations } => session.run_iso_with(RunOptions::iterations(iterations), &mut publish),
                Job::Rso { roi, iterations } => {
                    session.run_rso_with(roi, RunOptions::iterations(iterations), &mut publish)
                }
            };
            if let Err(e) = &result {
                tracing::warn!(session = %entry.id, error = %e, "job failed");
            }
            entry.finish(session, result.err().map(|e| e.to_string()));
        });
        Ok(())
    }

    fn publish(&self, session: &Session, entry: &TraceEntry) {
        let dvf = Arc::new(session.dvf().clone());
        let mut v = self.view.write();
        v.trace.entries.push(*entry);
        v.dvf = dvf;
        v.stage = session.stage();
        if v.roi_history.len() != session.roi_history().len() {
            v.roi_history = session.roi_history().to_vec();
        }
        v.status = match v.status {
            Status::Cancelling { phase, .. } => Status::Cancelling {
                phase,
                iteration: entry.iteration,
            },
            _ => Status::Running {
                phase: entry.phase,
                iteration: entry.iteration,
            },
        };
    }

    fn finish(&self, session: Session, failure: Option<String>) {
        let mut slot = self.engine.lock();
        let status = match failure {
            Some(reason) => Status::Failed { reason },
            None => Status::Idle,
        };
        *self.view.write() = View::of(&session, status);
        *self.cancel.lock() = None;
        self.persist(&session);
        *slot = Some(session);
    }

    /// Ask a running job to stop after its current iteration.
    pub fn cancel(&self) -> Result<(), ApiError> {
        let _slot = self.engine.lock();
        let flag = self.cancel.lock().clone();
        let mut v = self.view.write();
        match (flag, &v.status) {
            (Some(flag), Status::Running { phase, iteration } | Status::Cancelling { phase, iteration }) => {
                flag.request();
                v.status = Status::Cancelling {
                    phase: *phase,
                    iteration: *iteration,
                };
                Ok(())
            }
            _ => Err(ApiError::new(
                axum::http::StatusCode::CONFLICT,
                "not_running",
                "no job is running on this session",
            )),
        }
    }

    pub fn accept(&self) -> Result<(), ApiError> {
        let mut slot = self.engine.lock();
        let session = slot.as_mut().ok_or_else(ApiError::busy)?;
        session.decide(Verdict::Accept)?;
        let mut v = self.view.write();
        v.stage = session.stage();
        v.status = Status::Accepted;
        drop(v);
        self.persist(session);
        Ok(())
    }

    fn persist(&self, session: &Session) {
        if let Some(dir) = &self.dir {
            if let Err(e) = save_state(dir, &self.id, self.created_at_ms, session) {
                tracing::error!(session = %self.id, error = %e, "could not persist session");
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredState {
    id: String,
    created_at_ms: u64,
    config: SessionConfig,
    stage: Stage,
    trace: LossTrace,
    roi_history: Vec<RoiBox>,
}

const FIXED_FILE: &str = "fixed.mha";
const MOVING_FILE: &str = "moving.mha";
const DVF_FILE: &str = "dvf.mha";
const STATE_FILE: &str = "state.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> roireg::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_volumes(dir: &Path, fixed: &Volume3, moving: &Volume3) -> roireg::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(FIXED_FILE), &encode_mha(fixed))?;
    write_atomic(&dir.join(MOVING_FILE), &encode_mha(moving))
}

fn save_state(dir: &Path, id: &str, created_at_ms: u64, session: &Session) -> roireg::Result<()> {
    let tmp = dir.join("dvf.tmp.mha");
    session.dvf().save(&tmp)?;
    let dvf = dir.join(DVF_FILE);
    std::fs::rename(&tmp, &dvf).map_err(|e| Error::io(&dvf, e))?;
    let state = StoredState {
        id: id.to_string(),
        created_at_ms,
        config: *session.config(),
        stage: session.stage(),
        trace: session.trace().clone(),
        roi_history: session.roi_history().to_vec(),
    };
    let json = serde_json::to_vec_pretty(&state).expect("state serializes");
    write_atomic(&dir.join(STATE_FILE), &json)
}

fn load_state(dir: &Path) -> roireg::Result<(StoredState, Session)> {
    let state_path = dir.join(STATE_FILE);
    let text = std::fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: StoredState =
        serde_json::from_slice(&text).map_err(|e| Error::argument("state", format!("{}: {e}", state_path.display())))?;
    let read = |name: &str| -> roireg::Result<Arc<Volume3>> {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Arc::new(decode_mha(&bytes, &p.display().to_string())?))
    };
    let session = Session::restore(SessionParts {
        fixed: read(FIXED_FILE)?,
        moving: read(MOVING_FILE)?,
        dvf: DisplacementField::load(dir.join(DVF_FILE))?,
        config: state.config,
        stage: state.stage,
        trace: state.trace.clone(),
        roi_history: state.roi_history.clone(),
    })?;
    Ok((state, session))
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Default)]
pub struct Store {
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    root: Option<PathBuf>,
}

impl Store {
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Directory-backed store; sessions found under `root` are restored.
    pub fn open(root: impl Into<PathBuf>) -> roireg::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut sessions = HashMap::new();
        let listing = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        for item in listing.flatten() {
            let dir = item.path();
            if !dir.join(STATE_FILE).is_file() {
                continue;
            }
            match load_state(&dir) {
                Ok((state, session)) => {
                    let entry = SessionEntry::new(state.id.clone(), state.created_at_ms, session, Some(dir));
                    sessions.insert(state.id, Arc::new(entry));
                }
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "skipping unreadable session"),
            }
        }
        tracing::info!(count = sessions.len(), root = %root.display(), "restored sessions");
        Ok(Store {
            sessions: RwLock::new(sessions),
            root: Some(root),
        })
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Register a freshly initialized session and write it to disk if persistent.
    pub fn insert(&self, session: Session) -> roireg::Result<Arc<SessionEntry>> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let created = now_ms();
        let dir = self.root.as_ref().map(|r| r.join(&id));
        if let Some(dir) = &dir {
            save_volumes(dir, session.fixed(), session.moving())?;
            save_state(dir, &id, created, &session)?;
        }
        let entry = Arc::new(SessionEntry::new(id.clone(), created, session, dir));
        self.sessions.write().insert(id, entry.clone());
        Ok(entry)
    }
}
