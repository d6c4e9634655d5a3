//! Deterministic discrete-event cost model of the three overlap strategies.
//!
//! * Coarse: one collective kernel and one GEMM kernel, back to back.
//! * Medium: the GEMM split into one chunk per rank (or two), pipelined
//!   against chunk transfers; every chunk pays a launch and runs at the split
//!   efficiency of the machine.
//! * Fine: one fused kernel whose tiles wait on per-tile signals (AllGather) or
//!   write their results straight to the owning rank (ReduceScatter).

mod build;
mod des;
mod export;
mod machine;
mod metrics;
mod timeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use export::{chrome_trace, read_timelines_jsonl, write_timelines_jsonl};
pub use machine::{gemm_nonsplit_time, split_gemm_time, wave_makespan, MachineModel, SplitEfficiency};
pub use metrics::{metrics, overlap_efficiency, Metrics, METRICS_CSV_HEADER};
pub use timeline::{SimEvent, SimEventKind, Timeline};

use crate::engine::{TransferMode, WriteMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::problem::{Pattern, ProblemSpec, TileShape};
use crate::swizzle::SwizzleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Coarse,
    Medium,
    Fine,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Coarse, Strategy::Medium, Strategy::Fine];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Coarse => "coarse",
            Strategy::Medium => "medium",
            Strategy::Fine => "fine",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "coarse" => Ok(Strategy::Coarse),
            "medium" => Ok(Strategy::Medium),
            "fine" => Ok(Strategy::Fine),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}, expected coarse, medium or fine"
            ))),
        }
    }
}

/// Tunable choices of the overlapped strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapKnobs {
    #[serde(default = "pull")]
    pub transfer: TransferMode,
    /// Rows per communication tile (AllGather); one per rank block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows_per_comm_tile: Option<usize>,
    /// Tile visit order; arrival-aligned for AllGather and rank-shifted for
    /// ReduceScatter when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swizzle: Option<SwizzleKind>,
    #[serde(default = "write_alltoall")]
    pub write_mode: WriteMode,
    /// Chunks of the medium-grained schedule; `tp` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
}

fn pull() -> TransferMode {
    TransferMode::Pull
}

fn write_alltoall() -> WriteMode {
    WriteMode::WriteAlltoAll
}

impl Default for OverlapKnobs {
    fn default() -> Self {
        Self {
            transfer: TransferMode::Pull,
            rows_per_comm_tile: None,
            swizzle: None,
            write_mode: WriteMode::WriteAlltoAll,
            partitions: None,
        }
    }
}

impl OverlapKnobs {
    pub fn swizzle_for(&self, pattern: Pattern) -> SwizzleKind {
        self.swizzle.unwrap_or(match pattern {
            Pattern::AllGatherGemm => SwizzleKind::ArrivalAligned,
            Pattern::GemmReduceScatter => SwizzleKind::RankShifted,
        })
    }

    pub fn partitions_for(&self, problem: &ProblemSpec) -> usize {
        self.partitions.unwrap_or(problem.tp)
    }
}

/// Simulates one strategy. Identical inputs give identical timelines.
pub fn simulate(
    strategy: Strategy,
    problem: &ProblemSpec,
    tile: &TileShape,
    machine: &MachineModel,
    knobs: &OverlapKnobs,
) -> Result<Timeline> {
    problem.validate()?;
    tile.validate(problem)?;
    machine.validate(problem.tp)?;
    let mut g = des::Graph::default();
    match strategy {
        Strategy::Coarse => build::coarse(&mut g, problem, tile, machine)?,
        Strategy::Medium => build::medium(&mut g, problem, tile, machine, knobs.partitions_for(problem))?,
        Strategy::Fine => build::fine(&mut g, problem, tile, machine, knobs)?,
    }
    let events = des::run(&g, &des::Network::new(machine, problem.tp))?;
    Ok(Timeline {
        strategy,
        problem: *problem,
        tile: *tile,
        events,
    })
}

/// One simulation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCase {
    pub strategy: Strategy,
    pub problem: ProblemSpec,
    pub tile: TileShape,
    pub machine: MachineModel,
    pub knobs: OverlapKnobs,
}

/// Simulates independent cases, in parallel when `exec` allows.
pub fn simulate_batch(exec: Exec, cases: &[SimCase]) -> Vec<Result<Timeline>> {
    exec.map(cases, |c| simulate(c.strategy, &c.problem, &c.tile, &c.machine, &c.knobs))
}
