use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A local flag marked set at launch.
    FlagPreset,
    /// A transfer agent finished copying a communication tile.
    CopyComplete,
    /// A transfer agent set a flag; `rank` is the board owner, `peer` the agent.
    FlagSet,
    /// A worker found its tile's flag unset and started spinning.
    WaitBegin,
    ComputeStart,
    ComputeEnd,
    /// Epilogue stored a tile into the staging plane of `peer`'s rank.
    LocalWrite,
    RemoteWrite,
    /// A partial tile was folded into the output of `peer`'s rank.
    Accumulate,
    /// Discrete reduction of the staging planes on `rank`.
    Reduce,
}

/// One JSON line of the causality log.
///
/// For transfer events `tile_row` is the communication-tile (flag) index and
/// `tile_col` is 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub event: EventKind,
    pub rank: usize,
    pub tile_row: usize,
    pub tile_col: usize,
    pub logical_ts: u64,
    pub wall_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    /// For `compute_start`: the latest set timestamp among the flags the tile read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_ts: Option<u64>,
}

impl LogEvent {
    pub fn new(event: EventKind, rank: usize, tile: (usize, usize), logical_ts: u64, wall_ns: u64) -> Self {
        Self {
            event,
            rank,
            tile_row: tile.0,
            tile_col: tile.1,
            logical_ts,
            wall_ns,
            peer: None,
            signal_ts: None,
        }
    }

    pub fn with_peer(mut self, peer: usize) -> Self {
        self.peer = Some(peer);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CausalityLog {
    pub events: Vec<LogEvent>,
}

impl CausalityLog {
    pub fn from_parts(parts: impl IntoIterator<Item = Vec<LogEvent>>) -> Self {
        let mut events: Vec<LogEvent> = parts.into_iter().flatten().collect();
        events.sort_by_key(|e| (e.logical_ts, e.rank, e.event, e.tile_row, e.tile_col));
        Self { events }
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &LogEvent> {
        self.events.iter().filter(move |e| e.event == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(Self { events })
    }
}

/// A tile that started before one of its flags was set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalityViolation {
    pub rank: usize,
    pub tile: (usize, usize),
    pub flag: usize,
    pub flag_ts: Option<u64>,
    pub compute_ts: u64,
}

/// Cross-checks every `compute_start` against the `flag_set`/`flag_preset`
/// events of the flags covering its rows. `flags_of(tile_row)` returns those
/// flag indices. A missing flag event is itself a violation.
pub fn causality_violations(
    log: &CausalityLog,
    flags_of: impl Fn(usize) -> std::ops::Range<usize>,
) -> Vec<CausalityViolation> {
    use std::collections::HashMap;
    let mut set_at: HashMap<(usize, usize), u64> = HashMap::new();
    for e in &log.events {
        if matches!(e.event, EventKind::FlagSet | EventKind::FlagPreset) {
            set_at.insert((e.rank, e.tile_row), e.logical_ts);
        }
    }
    let mut out = Vec::new();
    for e in log.of_kind(EventKind::ComputeStart) {
        for f in flags_of(e.tile_row) {
            let ts = set_at.get(&(e.rank, f)).copied();
            if ts.is_none_or(|t| e.logical_ts < t) {
                out.push(CausalityViolation {
                    rank: e.rank,
                    tile: (e.tile_row, e.tile_col),
                    flag: f,
                    flag_ts: ts,
                    compute_ts: e.logical_ts,
                });
            }
        }
    }
    out
}
