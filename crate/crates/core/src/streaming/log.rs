use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    /// Microseconds since the session clock started.
    pub t_us: u64,
    pub event: String,
    pub detail: Value,
}

struct Inner {
    events: Vec<LogEvent>,
    sink: Option<BufWriter<File>>,
    write_error: Option<std::io::Error>,
}

/// JSON-lines event log shared between threads. The clock is read under the
/// same lock that appends, so line order and `t_us` order agree.
pub struct SessionLog {
    start: Instant,
    inner: Mutex<Inner>,
}

impl SessionLog {
    pub fn in_memory() -> Self {
        Self::with_start(Instant::now(), None)
    }

    /// Log that also streams every event to `path`.
    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::with_start(Instant::now(), Some(BufWriter::new(File::create(path)?))))
    }

    /// Log sharing another log's clock, e.g. a client inside a simulated session.
    pub fn sharing_clock(other: &SessionLog, path: Option<&Path>) -> std::io::Result<Self> {
        let sink = path.map(File::create).transpose()?.map(BufWriter::new);
        Ok(Self::with_start(other.start, sink))
    }

    fn with_start(start: Instant, sink: Option<BufWriter<File>>) -> Self {
        SessionLog { start, inner: Mutex::new(Inner { events: Vec::new(), sink, write_error: None }) }
    }

    pub fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn record(&self, event: &str, detail: Value) -> u64 {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let t_us = self.now_us();
        let e = LogEvent { t_us, event: event.to_string(), detail };
        if let Some(sink) = inner.sink.as_mut() {
            let line = serde_json::to_string(&e).expect("log events serialize");
            if let Err(err) = writeln!(sink, "{line}") {
                inner.write_error.get_or_insert(err);
            }
        }
        inner.events.push(e);
        t_us
    }

    pub fn events(&self) -> Vec<LogEvent> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).events.clone()
    }

    pub fn count(&self, event: &str) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).events.iter().filter(|e| e.event == event).count()
    }

    /// Flushes the file sink and reports the first write error, if any.
    pub fn flush(&self) -> std::io::Result<()> {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(e) = inner.write_error.take() {
            return Err(e);
        }
        match inner.sink.as_mut() {
            Some(s) => s.flush(),
            None => Ok(()),
        }
    }
}

/// Reads a JSON-lines log back.
pub fn read_log(path: &Path) -> std::io::Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        .collect()
}
