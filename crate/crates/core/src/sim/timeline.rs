use serde::{Deserialize, Serialize};

use crate::problem::{ProblemSpec, TileShape};

use super::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEventKind {
    TileCompute,
    Transfer,
    KernelLaunch,
    /// A slot held by a tile whose input has not arrived.
    Wait,
    /// Elementwise add or reduction kernel.
    Reduce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub kind: SimEventKind,
    pub rank: usize,
    pub start_us: f64,
    pub end_us: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<(usize, usize)>,
    /// Chunk index of the chunked schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    /// Other end of a transfer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
}

impl SimEvent {
    pub fn duration(&self) -> f64 {
        self.end_us - self.start_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub strategy: Strategy,
    pub problem: ProblemSpec,
    pub tile: TileShape,
    pub events: Vec<SimEvent>,
}

impl Timeline {
    /// Latest end minus earliest start; zero for an empty timeline.
    pub fn overall_us(&self) -> f64 {
        if self.events.is_empty() {
            return 0.0;
        }
        let start = self.events.iter().map(|e| e.start_us).fold(f64::INFINITY, f64::min);
        let end = self.events.iter().map(|e| e.end_us).fold(f64::NEG_INFINITY, f64::max);
        end - start
    }

    pub fn of_kind(&self, kind: SimEventKind) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Latest end among the events of one rank.
    pub fn rank_end(&self, rank: usize) -> f64 {
        self.events
            .iter()
            .filter(|e| e.rank == rank)
            .map(|e| e.end_us)
            .fold(0.0, f64::max)
    }

    /// Bytes moved by every transfer.
    pub fn bytes_moved(&self) -> f64 {
        self.of_kind(SimEventKind::Transfer).filter_map(|e| e.bytes).sum()
    }
}
