//! File-backed session store. The JSON-lines event log is the source of
//! truth; the in-memory index is always the fold of that log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::mentorflow::{build_partial_ground_truth, MentoringSession, SessionStatus};
use crate::sample::{Feedback, PartialLabel, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionCreated {
        session: MentoringSession,
    },
    Feedback {
        session_id: String,
        feedback: Feedback,
    },
    SessionCompleted {
        session_id: String,
        at: DateTime<Utc>,
    },
}

/// Derived state: sessions by id plus creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionState {
    pub sessions: BTreeMap<String, MentoringSession>,
    pub order: Vec<String>,
}

impl SessionState {
    pub fn apply(&mut self, event: &SessionEvent) -> Result<()> {
        match event {
            SessionEvent::SessionCreated { session } => {
                if self.sessions.contains_key(&session.id) {
                    return Err(Error::Conflict(format!("session {} already exists", session.id)));
                }
                if session.status != SessionStatus::Open || !session.feedback.is_empty() {
                    return Err(Error::InvalidInput(format!("session {} must start open and empty", session.id)));
                }
                self.order.push(session.id.clone());
                self.sessions.insert(session.id.clone(), session.clone());
            }
            SessionEvent::Feedback { session_id, feedback } => {
                self.get_mut(session_id)?.record(feedback.clone())?;
            }
            SessionEvent::SessionCompleted { session_id, at } => {
                let s = self.get_mut(session_id)?;
                if s.status == SessionStatus::Completed {
                    return Err(Error::Conflict(format!("session {session_id} is already completed")));
                }
                s.complete(*at)?;
            }
        }
        Ok(())
    }

    pub fn fold<'a>(events: impl IntoIterator<Item = &'a SessionEvent>) -> Result<Self> {
        let mut state = Self::default();
        for e in events {
            state.apply(e)?;
        }
        Ok(state)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut MentoringSession> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    /// Oldest open session by creation time (log order breaks ties).
    pub fn next_open(&self) -> Option<&MentoringSession> {
        self.order
            .iter()
            .map(|id| &self.sessions[id])
            .filter(|s| s.status == SessionStatus::Open)
            .min_by_key(|s| s.created_at)
    }

    pub fn progress(&self) -> Progress {
        let completed = self
            .sessions
            .values()
            .filter(|s| s.status == SessionStatus::Completed)
            .count();
        Progress {
            open: self.sessions.len() - completed,
            completed,
            total: self.sessions.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub open: usize,
    pub completed: usize,
    pub total: usize,
}

/// Reads a log, dropping a torn final line. Returns the events and the byte
/// length of the intact prefix.
pub fn read_log(path: &Path) -> Result<(Vec<SessionEvent>, u64)> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            log::warn!("{}: dropping torn final line {lineno}", path.display());
            break;
        }
        if line.trim().is_empty() {
            good += n as u64;
            continue;
        }
        let event: SessionEvent = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{} line {lineno}: {e}", path.display())))?;
        events.push(event);
        good += n as u64;
    }
    Ok((events, good))
}

/// Single writer of the event log.
pub struct SessionStore {
    path: PathBuf,
    log: File,
    state: SessionState,
    shape: GridShape,
    labels_dir: Option<PathBuf>,
}

impl SessionStore {
    /// Opens (or creates) the log and replays it. A torn trailing line from
    /// an interrupted write is truncated away. Completed sessions write their
    /// partial labels to `labels_dir/<image_id>.json` when a directory is set.
    pub fn open(path: &Path, shape: GridShape, labels_dir: Option<PathBuf>) -> Result<Self> {
        let (events, good) = read_log(path)?;
        let state = SessionState::fold(&events)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let log = OpenOptions::new().create(true).append(true).open(path)?;
        if log.metadata()?.len() > good {
            log.set_len(good)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            log,
            state,
            shape,
            labels_dir,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn get(&self, id: &str) -> Result<&MentoringSession> {
        self.state
            .sessions
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn append(&mut self, event: SessionEvent) -> Result<()> {
        let mut next = self.state.clone();
        next.apply(&event)?;
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.state = next;
        Ok(())
    }

    pub fn create_session(&mut self, session: MentoringSession) -> Result<()> {
        self.append(SessionEvent::SessionCreated { session })
    }

    pub fn next_session(&self) -> Option<&MentoringSession> {
        self.state.next_open()
    }

    pub fn submit_feedback(
        &mut self,
        session_id: &str,
        detection_id: &str,
        verdict: Verdict,
        at: DateTime<Utc>,
    ) -> Result<&MentoringSession> {
        self.append(SessionEvent::Feedback {
            session_id: session_id.to_string(),
            feedback: Feedback {
                detection_id: detection_id.to_string(),
                verdict,
                timestamp: at,
            },
        })?;
        self.get(session_id)
    }

    /// Completes a fully answered session and persists its partial label.
    pub fn complete_session(&mut self, session_id: &str, at: DateTime<Utc>) -> Result<(MentoringSession, PartialLabel)> {
        let mut preview = self.get(session_id)?.clone();
        if preview.status == SessionStatus::Completed {
            return Err(Error::Conflict(format!("session {session_id} is already completed")));
        }
        preview.complete(at)?;
        let partial = build_partial_ground_truth(&preview, self.shape)?;
        if let Some(dir) = &self.labels_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}.json", preview.image_id));
            std::fs::write(path, serde_json::to_vec(&partial)?)?;
        }
        self.append(SessionEvent::SessionCompleted {
            session_id: session_id.to_string(),
            at,
        })?;
        Ok((self.get(session_id)?.clone(), partial))
    }

    pub fn progress(&self) -> Progress {
        self.state.progress()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.log.flush()?;
        self.log.sync_all()?;
        Ok(())
    }
}

/// Partial labels written by completed sessions, keyed by image id.
pub fn load_partial_labels(dir: &Path) -> Result<BTreeMap<String, PartialLabel>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("bad label file name {}", path.display())))?
            .to_string();
        out.insert(id, serde_json::from_slice(&std::fs::read(&path)?)?);
    }
    Ok(out)
}
