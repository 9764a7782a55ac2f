//! JSON Lines audit trail of scenarios, actuations, drift and promotions.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditKind {
    Scenario,
    Act,
    Drift,
    Promote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    /// Simulation clock, seconds.
    pub t: f64,
    pub event: AuditKind,
    pub detail: serde_json::Value,
}

/// Append-only event log, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct AuditLog {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    events: Vec<AuditEvent>,
    file: Option<File>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a log file and appends to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        let events = if path.exists() { read_events(&path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            inner: Mutex::new(Inner { events, file: Some(file) }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, t: f64, event: AuditKind, detail: serde_json::Value) -> Result<(), AuditError> {
        let ev = AuditEvent { t, event, detail };
        let mut inner = self.inner.lock().expect("audit lock");
        if let Some(f) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&ev).expect("audit event serializes");
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        inner.events.push(ev);
        Ok(())
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.inner.lock().expect("audit lock").events.clone()
    }

    pub fn count(&self, kind: AuditKind) -> usize {
        self.inner
            .lock()
            .expect("audit lock")
            .events
            .iter()
            .filter(|e| e.event == kind)
            .count()
    }
}

/// Parses a log file; blank lines are skipped.
pub fn read_events(path: &Path) -> Result<Vec<AuditEvent>, AuditError> {
    parse_events(BufReader::new(File::open(path)?))
}

pub fn parse_events(input: impl BufRead) -> Result<Vec<AuditEvent>, AuditError> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| AuditError::Malformed {
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}
