//! Multi-rank execution of the overlap strategies.
//!
//! Each simulated rank owns a pool of worker threads that walk its output tile
//! grid in swizzled order, plus one transfer agent thread for AllGather. All
//! ranks share a [`PeerDirectory`]: the buffers every other rank can read or
//! write, standing in for peer-to-peer device memory.

mod fused_ag;
mod fused_rs;
mod log;
mod reference;
mod signal;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use fused_ag::{host_transfer_loop, run_fused_allgather_gemm, CommPlan, CommTileSpec, TransferRecord};
pub use fused_rs::run_fused_gemm_reducescatter;
pub use log::{causality_violations, CausalityLog, CausalityViolation, EventKind, LogEvent};
pub use reference::{
    medium_schedule, run_medium_grained, run_nonoverlap, MediumOp, MediumSchedule, StepRecord,
};
pub use signal::{spin_until, Jitter, LogicalClock, SignalBoard, WaitBudget, WaitFailure};

use crate::exec::host_parallelism;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Copy a peer's shard into the local gather buffer, set a local flag.
    Pull,
    /// Copy the local shard into a peer's gather buffer, set the peer's flag.
    Push,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::Pull => "pull",
            TransferMode::Push => "push",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteMode {
    /// Store partial tiles into per-source staging planes on the owner, then
    /// reduce the planes once every source has finished.
    WriteAlltoAll,
    /// Accumulate partial tiles straight into the owner's output.
    FusedReduce,
}

impl fmt::Display for WriteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WriteMode::WriteAlltoAll => "write_alltoall",
            WriteMode::FusedReduce => "fused_reduce",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Worker threads per rank; `None` splits the host's threads across ranks.
    #[serde(default)]
    pub workers_per_rank: Option<usize>,
    /// Accumulate in rank order behind a per-tile lock instead of arrival order.
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Seed for randomized pauses between tiles and transfers.
    #[serde(default)]
    pub jitter_seed: Option<u64>,
    #[serde(default)]
    pub wait: WaitBudget,
}

fn yes() -> bool {
    true
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workers_per_rank: None,
            deterministic: true,
            jitter_seed: None,
            wait: WaitBudget::default(),
        }
    }
}

impl EngineConfig {
    pub fn workers(&self, tp: usize) -> usize {
        self.workers_per_rank
            .unwrap_or_else(|| (host_parallelism() / tp.max(1)).max(1))
            .max(1)
    }
}

/// Result of one engine run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub outputs: Vec<Matrix>,
    pub log: CausalityLog,
    /// Per-rank transfer traces (AllGather only).
    pub transfers: Vec<Vec<TransferRecord>>,
}

/// Hands out tile indices to the workers of one rank.
#[derive(Debug, Default)]
pub(crate) struct TileCounter(AtomicUsize);

impl TileCounter {
    pub(crate) fn next(&self, total: usize) -> Option<usize> {
        let i = self.0.fetch_add(1, Ordering::Relaxed);
        (i < total).then_some(i)
    }
}

/// Buffers of every rank, indexed by rank.
#[derive(Debug)]
pub struct PeerDirectory<T> {
    entries: Vec<Option<T>>,
}

impl<T> PeerDirectory<T> {
    pub fn new(entries: Vec<Option<T>>) -> Self {
        Self { entries }
    }

    pub fn get(&self, rank: usize) -> crate::Result<&T> {
        self.entries
            .get(rank)
            .and_then(Option::as_ref)
            .ok_or(crate::Error::Directory { rank })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// State shared by every thread of one run: the clock, and the first failure,
/// which also tells spinning threads to give up.
#[derive(Debug)]
pub(crate) struct RunContext {
    pub(crate) clock: LogicalClock,
    pub(crate) abort: std::sync::atomic::AtomicBool,
    first_error: std::sync::Mutex<Option<crate::Error>>,
    pub(crate) cfg: EngineConfig,
}

impl RunContext {
    pub(crate) fn new(cfg: EngineConfig) -> Self {
        Self {
            clock: LogicalClock::new(),
            abort: std::sync::atomic::AtomicBool::new(false),
            first_error: std::sync::Mutex::new(None),
            cfg,
        }
    }

    pub(crate) fn event(&self, kind: EventKind, rank: usize, tile: (usize, usize)) -> LogEvent {
        LogEvent::new(kind, rank, tile, self.clock.tick(), self.clock.wall_ns())
    }

    /// Records a worker failure; only the first one is kept.
    pub(crate) fn fail(&self, e: crate::Error) {
        let mut slot = self.first_error.lock().expect("error slot poisoned");
        if slot.is_none() {
            *slot = Some(e);
        }
        self.abort.store(true, Ordering::Relaxed);
    }

    pub(crate) fn aborted(&self) -> bool {
        self.abort.load(Ordering::Relaxed)
    }

    pub(crate) fn finish(self) -> crate::Result<()> {
        match self.first_error.into_inner().expect("error slot poisoned") {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
