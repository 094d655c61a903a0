use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide::PatchRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accept" => Ok(Verdict::Accept),
            "reject" => Ok(Verdict::Reject),
            other => Err(Error::MalformedVerdict(other.to_string())),
        }
    }
}

/// Patch identity for decisions: position and size, level ignored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchKey {
    pub slide_id: String,
    pub x: i64,
    pub y: i64,
    pub size: u32,
}

impl From<&PatchRef> for PatchKey {
    fn from(p: &PatchRef) -> Self {
        Self {
            slide_id: p.slide_id.clone(),
            x: p.x,
            y: p.y,
            size: p.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub slide_id: String,
    pub x: i64,
    pub y: i64,
    pub size: u32,
    pub class_label: String,
    pub verdict: Verdict,
    pub reviewer: String,
}

impl Decision {
    pub fn patch(&self) -> PatchRef {
        PatchRef::new(self.slide_id.clone(), self.x, self.y, self.size)
    }

    pub fn key(&self) -> PatchKey {
        PatchKey {
            slide_id: self.slide_id.clone(),
            x: self.x,
            y: self.y,
            size: self.size,
        }
    }
}

/// Last decision per (patch, class), by sequence number.
pub fn effective_decisions(decisions: &[Decision]) -> HashMap<(PatchKey, String), Decision> {
    let mut out: HashMap<(PatchKey, String), Decision> = HashMap::new();
    for d in decisions {
        let k = (d.key(), d.class_label.clone());
        match out.get(&k) {
            Some(prev) if prev.seq > d.seq => {}
            _ => {
                out.insert(k, d.clone());
            }
        }
    }
    out
}

/// Parse complete lines; returns the decisions and the byte length of the
/// complete prefix. A trailing line without a newline is an interrupted
/// write and is ignored.
fn parse(bytes: &[u8], path: &Path) -> Result<(Vec<Decision>, usize)> {
    let complete = bytes.iter().rposition(|&b| b == b'\n').map(|i| i + 1).unwrap_or(0);
    let mut out: Vec<Decision> = Vec::new();
    for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let d: Decision = serde_json::from_slice(line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(prev) = out.last() {
            if d.seq <= prev.seq {
                return Err(Error::Invalid(format!(
                    "{}:{}: sequence {} after {}",
                    path.display(),
                    i + 1,
                    d.seq,
                    prev.seq
                )));
            }
        }
        out.push(d);
    }
    Ok((out, complete))
}

pub fn read_log(path: &Path) -> Result<Vec<Decision>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(parse(&std::fs::read(path)?, path)?.0)
}

/// Append-only decision log.
pub struct DecisionLog {
    path: PathBuf,
    file: File,
    decisions: Vec<Decision>,
}

impl DecisionLog {
    /// Open or create, dropping any interrupted trailing write.
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = if path.exists() { std::fs::read(path)? } else { Vec::new() };
        let (decisions, complete) = parse(&bytes, path)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if complete < bytes.len() {
            tracing::warn!(path = %path.display(), dropped = bytes.len() - complete, "truncating partial decision");
            file.set_len(complete as u64)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            decisions,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn last_seq(&self) -> u64 {
        self.decisions.last().map(|d| d.seq).unwrap_or(0)
    }

    pub fn append(
        &mut self,
        patch: PatchRef,
        class_label: &str,
        verdict: Verdict,
        reviewer: &str,
        timestamp_ms: u64,
    ) -> Result<Decision> {
        let d = Decision {
            seq: self.last_seq() + 1,
            timestamp_ms,
            slide_id: patch.slide_id,
            x: patch.x,
            y: patch.y,
            size: patch.size,
            class_label: class_label.to_string(),
            verdict,
            reviewer: reviewer.to_string(),
        };
        let mut line = serde_json::to_vec(&d)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.decisions.push(d.clone());
        Ok(d)
    }
}
