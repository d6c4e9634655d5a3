use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::problem::{ProblemSpec, TileShape};
use crate::swizzle::{LinkClass, Topology};

/// Relative GEMM rate of a kernel that computes `fraction` of the full GEMM:
/// `max(floor, fraction^exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEfficiency {
    pub exponent: f64,
    pub floor: f64,
}

impl Default for SplitEfficiency {
    fn default() -> Self {
        Self {
            exponent: 0.15,
            floor: 0.5,
        }
    }
}

impl SplitEfficiency {
    pub fn at(&self, fraction: f64) -> f64 {
        fraction.clamp(0.0, 1.0).powf(self.exponent).max(self.floor).min(1.0)
    }
}

/// Parameterized device and interconnect. Times are microseconds, sizes bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineModel {
    /// Concurrent tile slots per rank.
    pub sm_count: usize,
    /// Compute rate of one slot.
    pub flops_per_us: f64,
    pub launch_overhead_us: f64,
    /// Bandwidth of each rank's send and receive port.
    pub link_bw_bytes_per_us: f64,
    pub link_latency_us: f64,
    pub bytes_per_element: usize,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub split_efficiency: SplitEfficiency,
    /// Shared host bridge between NUMA domains of one node; defaults to the link bandwidth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_numa_bw_bytes_per_us: Option<f64>,
    /// Per-node network bandwidth in each direction; defaults to the link bandwidth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inter_node_bw_bytes_per_us: Option<f64>,
    /// Elements per microsecond of an elementwise add or reduction kernel.
    pub elementwise_per_us: f64,
    /// Fraction of a port's bandwidth one pulled copy can use.
    #[serde(default = "one")]
    pub pull_efficiency: f64,
    /// Fraction of a port's bandwidth one pushed copy can use.
    #[serde(default = "one")]
    pub push_efficiency: f64,
    /// Fraction of a port's bandwidth one accumulating remote write can use.
    #[serde(default = "accumulate")]
    pub accumulate_efficiency: f64,
}

fn one() -> f64 {
    1.0
}

fn accumulate() -> f64 {
    0.9
}

impl Default for MachineModel {
    /// A generic eight-GPU NVLink box.
    fn default() -> Self {
        Self {
            sm_count: 108,
            flops_per_us: 2.0e6,
            launch_overhead_us: 5.0,
            link_bw_bytes_per_us: 150.0e3,
            link_latency_us: 2.0,
            bytes_per_element: 2,
            topology: Topology::nvlink_ring(),
            split_efficiency: SplitEfficiency::default(),
            inter_numa_bw_bytes_per_us: None,
            inter_node_bw_bytes_per_us: None,
            elementwise_per_us: 1.0e6,
            pull_efficiency: 1.0,
            push_efficiency: 1.0,
            accumulate_efficiency: 0.9,
        }
    }
}

impl MachineModel {
    pub fn validate(&self, tp: usize) -> Result<()> {
        let positive = [
            ("flops_per_us", self.flops_per_us),
            ("link_bw_bytes_per_us", self.link_bw_bytes_per_us),
            ("elementwise_per_us", self.elementwise_per_us),
            ("inter_numa_bw_bytes_per_us", self.inter_numa_bw()),
            ("inter_node_bw_bytes_per_us", self.inter_node_bw()),
            ("pull_efficiency", self.pull_efficiency),
            ("push_efficiency", self.push_efficiency),
            ("accumulate_efficiency", self.accumulate_efficiency),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return config_err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("launch_overhead_us", self.launch_overhead_us),
            ("link_latency_us", self.link_latency_us),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.sm_count == 0 || self.bytes_per_element == 0 {
            return config_err("sm_count and bytes_per_element must be positive");
        }
        let se = self.split_efficiency;
        if !(se.exponent >= 0.0) || !(se.floor > 0.0 && se.floor <= 1.0) {
            return config_err(format!("split efficiency {se:?} must have exponent >= 0 and floor in (0, 1]"));
        }
        self.topology.validate(tp)
    }

    pub fn inter_numa_bw(&self) -> f64 {
        self.inter_numa_bw_bytes_per_us.unwrap_or(self.link_bw_bytes_per_us)
    }

    pub fn inter_node_bw(&self) -> f64 {
        self.inter_node_bw_bytes_per_us.unwrap_or(self.link_bw_bytes_per_us)
    }

    /// Time of one output tile on one slot at full rate.
    pub fn tile_time_us(&self, problem: &ProblemSpec, tile: &TileShape) -> f64 {
        tile.flops(problem) / self.flops_per_us
    }

    pub fn elementwise_us(&self, elements: usize) -> f64 {
        elements as f64 / self.elementwise_per_us
    }

    /// Same machine with every bandwidth scaled by `factor`.
    pub fn with_bandwidth_scale(&self, factor: f64) -> Self {
        Self {
            link_bw_bytes_per_us: self.link_bw_bytes_per_us * factor,
            inter_numa_bw_bytes_per_us: Some(self.inter_numa_bw() * factor),
            inter_node_bw_bytes_per_us: Some(self.inter_node_bw() * factor),
            ..*self
        }
    }

    /// Lowest bandwidth any single transfer between these ranks can see.
    pub fn path_bw(&self, tp: usize, a: usize, b: usize) -> f64 {
        match self.topology.link_class(tp, a, b) {
            LinkClass::IntraNuma => self.link_bw_bytes_per_us,
            LinkClass::InterNuma => self.link_bw_bytes_per_us.min(self.inter_numa_bw()),
            LinkClass::InterNode => self.link_bw_bytes_per_us.min(self.inter_node_bw()),
        }
    }
}

/// Makespan of `tiles` equal tiles of `tile_us` on `slots` slots.
pub fn wave_makespan(tiles: usize, slots: usize, tile_us: f64) -> f64 {
    tiles.div_ceil(slots.max(1)) as f64 * tile_us
}

/// Per-rank GEMM split into `partitions` kernels: one launch plus the tile
/// stream at the split efficiency. A lower bound on any chunked schedule.
pub fn split_gemm_time(problem: &ProblemSpec, tile: &TileShape, machine: &MachineModel, partitions: usize) -> f64 {
    let tiles = tile.grid(problem).count();
    let scale = machine.split_efficiency.at(1.0 / partitions.max(1) as f64);
    machine.launch_overhead_us + wave_makespan(tiles, machine.sm_count, machine.tile_time_us(problem, tile) / scale)
}

/// Unsplit per-rank GEMM: one launch plus the tile stream over every slot at full rate.
pub fn gemm_nonsplit_time(problem: &ProblemSpec, tile: &TileShape, machine: &MachineModel) -> f64 {
    let tiles = tile.grid(problem).count();
    machine.launch_overhead_us + wave_makespan(tiles, machine.sm_count, machine.tile_time_us(problem, tile))
}
