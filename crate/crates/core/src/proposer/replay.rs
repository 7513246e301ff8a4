//! Record/replay of proposer traffic as JSON lines.
//!
//! Each line is one [`ReplayEntry`]: the rendered prompt plus either the raw
//! response or the transport error text. Replaying checks prompts match the
//! recording so a diverging run fails loudly instead of silently drifting.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProposalRequest, ProposerBackend, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt: String,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

pub struct RecordingBackend<B> {
    inner: B,
    log: File,
}

impl<B: ProposerBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: &Path) -> std::io::Result<Self> {
        let log = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner, log })
    }
}

impl<B: ProposerBackend> ProposerBackend for RecordingBackend<B> {
    fn supports_attachments(&self) -> bool {
        self.inner.supports_attachments()
    }

    fn complete(&mut self, request: &ProposalRequest<'_>) -> Result<String, TransportError> {
        let result = self.inner.complete(request);
        let entry = ReplayEntry {
            prompt: request.prompt.to_string(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        self.log
            .write_all(line.as_bytes())
            .map_err(|e| TransportError::Other(format!("replay log write failed: {e}")))?;
        result
    }
}

#[derive(Debug)]
pub struct ReplayBackend {
    entries: Vec<ReplayEntry>,
    next: usize,
    strict: bool,
}

impl ReplayBackend {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        Self {
            entries,
            next: 0,
            strict: true,
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("replay log line {}: {e}", i + 1),
                )
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    /// Skip prompt comparison, replaying responses purely by position.
    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.next
    }
}

impl ProposerBackend for ReplayBackend {
    fn complete(&mut self, request: &ProposalRequest<'_>) -> Result<String, TransportError> {
        let index = self.next;
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| TransportError::Other(format!("replay log exhausted after {index} entries")))?;
        if self.strict && entry.prompt != request.prompt {
            return Err(TransportError::Other(format!(
                "replay prompt mismatch at entry {index}"
            )));
        }
        self.next += 1;
        match (&entry.response, &entry.error) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(e)) => Err(TransportError::Other(e.clone())),
            (None, None) => Err(TransportError::Malformed(format!("replay entry {index} is empty"))),
        }
    }
}
