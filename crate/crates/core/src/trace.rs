//! Execution trace: line-delimited JSON records with a header line and a
//! summary line. Field order is fixed by the struct definitions, so equal
//! executions serialize to equal bytes.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::agreement::InstanceId;
use crate::detect::DetectRule;
use crate::eig::{NodeLabel, ProcessId, PutRule, Value};
use crate::resolve::CloseRule;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    pub adversary: String,
    pub alphabet_size: u32,
    pub corrupt: Vec<ProcessId>,
    /// Input per process id; `None` for corrupt ids.
    pub inputs: Vec<Option<Value>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceEvent {
    Output { value: Value },
    Stopped,
    Killed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorEvent {
    Invoke { instance: InstanceId, phi: usize, input: Value },
    SetV { value: Value },
    SetEarly { value: bool },
    Decide { value: Value },
    Halt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalEvent {
    Decide { value: Value },
    Halt,
}

/// Per-process outcome in the summary line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessOutcome {
    pub process: ProcessId,
    pub input: Value,
    /// Decision as produced internally; may be `bad`.
    pub decision: Option<Value>,
    pub halt_round: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub rounds: u32,
    pub terminated: bool,
    pub f_actual: usize,
    pub deviators: Vec<ProcessId>,
    pub outcomes: Vec<ProcessOutcome>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Put { round: u32, process: ProcessId, instance: InstanceId, label: NodeLabel, value: Value, provenance: PutRule },
    Close { round: u32, process: ProcessId, instance: InstanceId, label: NodeLabel, rule: CloseRule },
    Detect { round: u32, process: ProcessId, detected: ProcessId, rule: DetectRule },
    Mask { round: u32, process: ProcessId, instance: InstanceId, label: NodeLabel },
    Instance { round: u32, process: ProcessId, instance: InstanceId, event: InstanceEvent },
    Monitor { round: u32, process: ProcessId, seq: u8, event: MonitorEvent },
    Global { round: u32, process: ProcessId, event: GlobalEvent },
    /// Messages sent by one process in one round. `recipient` is `None` for a
    /// broadcast.
    Traffic { round: u32, sender: ProcessId, recipient: Option<ProcessId>, eig_messages: usize, bits: u64 },
    /// Tree sizes at the end of a round, summed over instances.
    Size { round: u32, process: ProcessId, it_nodes: usize, rt_puts: usize, fa: usize },
    Summary(TraceSummary),
}

impl TraceRecord {
    pub fn round(&self) -> Option<u32> {
        match self {
            TraceRecord::Put { round, .. }
            | TraceRecord::Close { round, .. }
            | TraceRecord::Detect { round, .. }
            | TraceRecord::Mask { round, .. }
            | TraceRecord::Instance { round, .. }
            | TraceRecord::Monitor { round, .. }
            | TraceRecord::Global { round, .. }
            | TraceRecord::Traffic { round, .. }
            | TraceRecord::Size { round, .. } => Some(*round),
            TraceRecord::Header(_) | TraceRecord::Summary(_) => None,
        }
    }
}

/// Final IT labels and RT puts of one instance at one correct process, kept
/// in memory for tree analysis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InstanceSnapshot {
    pub phi: usize,
    /// Last local round the instance ran.
    pub last_round: u32,
    /// Ended by monitor halting rather than on its own.
    pub killed: bool,
    /// Every IT label ever created, breadth-first.
    pub it_labels: Vec<NodeLabel>,
    /// Put labels with value and instance-local round.
    pub puts: Vec<(NodeLabel, Value, PutRule, u32)>,
}

/// A complete execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    pub summary: TraceSummary,
    /// Not serialized. Keyed by process, then instance.
    pub snapshots: BTreeMap<ProcessId, BTreeMap<InstanceId, InstanceSnapshot>>,
}

impl ExecutionTrace {
    pub fn correct(&self) -> impl Iterator<Item = ProcessId> + '_ {
        (0..self.header.n as ProcessId).filter(|p| !self.header.corrupt.contains(p))
    }

    pub fn is_correct(&self, p: ProcessId) -> bool {
        (p as usize) < self.header.n && !self.header.corrupt.contains(&p)
    }

    /// Writes header, records and summary as JSON lines.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let line = |w: &mut W, rec: &TraceRecord| -> io::Result<()> {
            serde_json::to_writer(&mut *w, rec).map_err(io::Error::other)?;
            w.write_all(b"\n")
        };
        line(&mut w, &TraceRecord::Header(self.header.clone()))?;
        for rec in &self.records {
            line(&mut w, rec)?;
        }
        line(&mut w, &TraceRecord::Summary(self.summary.clone()))
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Reads a trace written by [`Self::write_jsonl`]. Snapshots are empty.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceReadError> {
        let mut header = None;
        let mut summary = None;
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|e| TraceReadError::Parse { line: i + 1, msg: e.to_string() })?;
            match rec {
                TraceRecord::Header(h) => header = Some(h),
                TraceRecord::Summary(s) => summary = Some(s),
                other => records.push(other),
            }
        }
        Ok(ExecutionTrace {
            header: header.ok_or(TraceReadError::Missing("header"))?,
            records,
            summary: summary.ok_or(TraceReadError::Missing("summary"))?,
            snapshots: BTreeMap::new(),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace has no {0} record")]
    Missing(&'static str),
}
