//! Out-of-process scorers speaking a line protocol over stdin/stdout.
//!
//! Each request is one JSON object per line:
//!
//! ```text
//! {"sample_id":"s0","prompt":"...","category":5,"retained":[0,3,9],"evidence":[3,4]}
//! ```
//!
//! and the scorer answers each with one decimal number per line, in order.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vtprune_core::calibration::{ScoreRequest, Scorer};
use vtprune_core::CategoryId;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub prompt: String,
    pub category: CategoryId,
    pub retained: Vec<usize>,
    pub evidence: Vec<usize>,
}

impl From<&ScoreRequest<'_>> for ScoreRecord {
    fn from(r: &ScoreRequest<'_>) -> Self {
        ScoreRecord {
            sample_id: r.sample_id.to_string(),
            prompt: r.prompt.to_string(),
            category: r.category,
            retained: r.retained.as_slice().to_vec(),
            evidence: r.evidence.as_slice().to_vec(),
        }
    }
}

/// Parses one reply line into a finite score.
pub fn parse_score(line: &str) -> Result<f64> {
    let t = line.trim();
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::MalformedScore(t.to_string())),
    }
}

/// A long-running child process started with `sh -c <command>`.
pub struct ExternalScorer {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl ExternalScorer {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io("sh", e))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalScorer { command: command.to_string(), child, stdin, lines: rx, timeout })
    }

    pub fn request(&mut self, record: &ScoreRecord) -> Result<f64> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let sent = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(line.as_bytes()).and_then(|()| stdin.flush()).is_ok(),
            None => false,
        };
        if !sent {
            return Err(self.exit_error());
        }
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => parse_score(&reply),
            Ok(Err(e)) => Err(Error::io("scorer stdout", e)),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                let _ = self.child.wait();
                Err(Error::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(self.exit_error()),
        }
    }

    fn exit_error(&mut self) -> Error {
        self.stdin = None;
        match self.child.wait() {
            Ok(status) => Error::ProcessExit(status.code()),
            Err(e) => Error::io("scorer", e),
        }
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        self.stdin = None;
        if matches!(self.child.try_wait(), Ok(None)) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

impl Scorer for ExternalScorer {
    fn name(&self) -> String {
        format!("exec:{}", self.command)
    }

    fn score(&mut self, request: &ScoreRequest<'_>) -> std::result::Result<f64, String> {
        self.request(&ScoreRecord::from(request)).map_err(|e| e.to_string())
    }
}

/// Serves the built-in synthetic score over the line protocol until EOF.
pub fn serve_synthetic(input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("stdin", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedScore(e.to_string()))?;
        let retained = vtprune_core::IndexSet::from_unsorted(rec.retained);
        let evidence = vtprune_core::IndexSet::from_unsorted(rec.evidence);
        let s = vtprune_core::calibration::synthetic_score(&retained, &evidence);
        writeln!(output, "{s:?}").and_then(|()| output.flush()).map_err(|e| Error::io("stdout", e))?;
    }
    Ok(())
}
