//! Tile-coordinate mapping and host communication order.
//!
//! The output grid is split into `tp` row blocks, block `b` holding the rows
//! that live on (AllGather) or are owned by (ReduceScatter) rank `b`. A
//! [`SwizzlePolicy`] fixes the order in which one rank visits those blocks;
//! [`comm_order`] fixes the order in which one rank's transfer agent moves
//! them. The two are chosen together so that tiles are visited in the order
//! their inputs arrive.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::TransferMode;
use crate::error::{config_err, Error, Result};
use crate::problem::{GridDims, TileCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwizzleKind {
    Naive,
    RankShifted,
    ArrivalAligned,
}

impl fmt::Display for SwizzleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwizzleKind::Naive => "naive",
            SwizzleKind::RankShifted => "rank_shifted",
            SwizzleKind::ArrivalAligned => "arrival_aligned",
        })
    }
}

/// Order of tiles inside one row block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraBlockOrder {
    /// Sweep the columns of a tile row, then advance to the next tile row.
    #[default]
    RowMajor,
    ColumnMajor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwizzlePolicy {
    pub kind: SwizzleKind,
    pub rank: usize,
    pub tp: usize,
    pub intra: IntraBlockOrder,
    block_order: Vec<usize>,
}

/// Default rotation for [`SwizzleKind::RankShifted`]: start at block `rank + 1`
/// and finish on the local block.
pub const DEFAULT_SHIFT: usize = 1;

impl SwizzlePolicy {
    pub fn naive(rank: usize, tp: usize) -> Self {
        Self {
            kind: SwizzleKind::Naive,
            rank,
            tp,
            intra: IntraBlockOrder::RowMajor,
            block_order: (0..tp).collect(),
        }
    }

    pub fn rank_shifted(rank: usize, tp: usize, offset: usize) -> Self {
        Self {
            kind: SwizzleKind::RankShifted,
            rank,
            tp,
            intra: IntraBlockOrder::RowMajor,
            block_order: (0..tp).map(|s| (rank + offset + s) % tp).collect(),
        }
    }

    /// Local block first, then peers in the order their data reaches `rank`.
    pub fn arrival_aligned(
        rank: usize,
        tp: usize,
        topology: &Topology,
        transfer: TransferMode,
    ) -> Result<Self> {
        Ok(Self {
            kind: SwizzleKind::ArrivalAligned,
            rank,
            tp,
            intra: IntraBlockOrder::RowMajor,
            block_order: arrival_block_order(topology, rank, tp, transfer)?,
        })
    }

    /// Builds the policy of `kind` with default parameters.
    pub fn build(
        kind: SwizzleKind,
        rank: usize,
        tp: usize,
        topology: &Topology,
        transfer: TransferMode,
    ) -> Result<Self> {
        if rank >= tp {
            return config_err(format!("rank {rank} out of range for tp={tp}"));
        }
        match kind {
            SwizzleKind::Naive => Ok(Self::naive(rank, tp)),
            SwizzleKind::RankShifted => Ok(Self::rank_shifted(rank, tp, DEFAULT_SHIFT)),
            SwizzleKind::ArrivalAligned => Self::arrival_aligned(rank, tp, topology, transfer),
        }
    }

    pub fn with_intra(mut self, intra: IntraBlockOrder) -> Self {
        self.intra = intra;
        self
    }

    /// Row blocks in visit order.
    pub fn block_order(&self) -> &[usize] {
        &self.block_order
    }
}

/// Tile rows belonging to block `b` of `tp` over a grid of `rows` tile rows.
pub fn block_rows(b: usize, tp: usize, rows: usize) -> Range<usize> {
    b * rows / tp..(b + 1) * rows / tp
}

/// Maps the `flat`-th tile processed by a rank to its grid coordinate.
pub fn map_tile(policy: &SwizzlePolicy, flat: usize, grid: GridDims) -> Result<TileCoord> {
    if flat >= grid.count() {
        return Err(Error::Bounds(format!(
            "tile index {flat} outside grid of {} tiles",
            grid.count()
        )));
    }
    if policy.kind == SwizzleKind::Naive {
        return Ok(TileCoord::new(flat / grid.cols, flat % grid.cols));
    }
    let mut rest = flat;
    for &b in &policy.block_order {
        let rows = block_rows(b, policy.tp, grid.rows);
        let size = rows.len() * grid.cols;
        if rest < size {
            let (r, c) = match policy.intra {
                IntraBlockOrder::RowMajor => (rest / grid.cols, rest % grid.cols),
                IntraBlockOrder::ColumnMajor => (rest % rows.len(), rest / rows.len()),
            };
            return Ok(TileCoord::new(rows.start + r, c));
        }
        rest -= size;
    }
    unreachable!("block order covers the grid")
}

/// Full visit order of a rank.
pub fn visit_order(policy: &SwizzlePolicy, grid: GridDims) -> Vec<TileCoord> {
    (0..grid.count())
        .map(|i| map_tile(policy, i, grid).expect("index in range"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    NvlinkRing,
    PcieNuma,
    MultiNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub kind: TopologyKind,
    /// Ranks sharing one CPU socket and host bridge (PCIe).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks_per_numa: Option<usize>,
    /// Ranks per node; absent means every rank is on one node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks_per_node: Option<usize>,
}

impl Default for Topology {
    fn default() -> Self {
        Self::nvlink_ring()
    }
}

/// Which interconnect a transfer crosses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    IntraNuma,
    InterNuma,
    InterNode,
}

impl Topology {
    pub fn nvlink_ring() -> Self {
        Self {
            kind: TopologyKind::NvlinkRing,
            ranks_per_numa: None,
            ranks_per_node: None,
        }
    }

    pub fn pcie_numa(ranks_per_numa: usize) -> Self {
        Self {
            kind: TopologyKind::PcieNuma,
            ranks_per_numa: Some(ranks_per_numa),
            ranks_per_node: None,
        }
    }

    pub fn multi_node(ranks_per_node: usize) -> Self {
        Self {
            kind: TopologyKind::MultiNode,
            ranks_per_numa: None,
            ranks_per_node: Some(ranks_per_node),
        }
    }

    pub fn node_size(&self, tp: usize) -> usize {
        self.ranks_per_node.unwrap_or(tp)
    }

    pub fn numa_size(&self, tp: usize) -> usize {
        match self.kind {
            TopologyKind::PcieNuma => self.ranks_per_numa.unwrap_or(tp),
            _ => self.node_size(tp),
        }
    }

    pub fn validate(&self, tp: usize) -> Result<()> {
        let node = self.node_size(tp);
        if node == 0 || !tp.is_multiple_of(node) {
            return config_err(format!("ranks_per_node={node} does not divide tp={tp}"));
        }
        if self.kind == TopologyKind::PcieNuma {
            let numa = self.numa_size(tp);
            if numa == 0 || !node.is_multiple_of(numa) {
                return config_err(format!(
                    "ranks_per_numa={numa} does not divide ranks per node {node}"
                ));
            }
        }
        Ok(())
    }

    pub fn link_class(&self, tp: usize, a: usize, b: usize) -> LinkClass {
        let node = self.node_size(tp);
        let numa = self.numa_size(tp);
        if a / node != b / node {
            LinkClass::InterNode
        } else if a / numa != b / numa {
            LinkClass::InterNuma
        } else {
            LinkClass::IntraNuma
        }
    }
}

/// One host-side transfer of a communication tile into `rank`'s gather buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferDescriptor {
    /// Rank whose `A` shard holds the rows.
    pub source: usize,
    /// Global rows moved.
    pub rows: Range<usize>,
    /// Local rank that first receives the rows over the inter-node link and
    /// forwards them; `None` for direct transfers.
    pub via: Option<usize>,
    pub link: LinkClass,
    /// Issue stream; transfers on one stream run back to back.
    pub stream: usize,
    /// Issue phase; a phase starts once every earlier phase has completed.
    pub phase: usize,
}

/// Ordered transfer descriptors for `rank` under `topology`.
///
/// * NVLink ring: peers `rank+1, rank+2, ...` modulo `tp`.
/// * PCIe/NUMA: every inter-NUMA peer first, starting after the rank's own
///   local index in each remote domain, then intra-NUMA and inter-node peers
///   together.
/// * Multi-node: inter-node transfers from the same local index on every other
///   node run alongside the intra-node ring; rows of other remote ranks are
///   forwarded by the local rank that received them, once they arrive.
///
/// Each peer's rows are split into `rows_per_comm_tile` chunks in ascending order.
pub fn comm_order(
    topology: &Topology,
    rank: usize,
    tp: usize,
    rows_per_rank: usize,
    rows_per_comm_tile: usize,
) -> Result<Vec<TransferDescriptor>> {
    if rank >= tp {
        return config_err(format!("rank {rank} out of range for tp={tp}"));
    }
    topology.validate(tp)?;
    if rows_per_comm_tile == 0 || !rows_per_rank.is_multiple_of(rows_per_comm_tile) {
        return config_err(format!(
            "communication tile of {rows_per_comm_tile} rows does not divide {rows_per_rank}"
        ));
    }
    let ring: Vec<usize> = (1..tp).map(|s| (rank + s) % tp).collect();
    let mut out = Vec::new();
    let mut push_peer = |source: usize, via: Option<usize>, stream: usize, phase: usize| {
        // the hop into `rank` is what the link class describes
        let link = topology.link_class(tp, rank, via.unwrap_or(source));
        let base = source * rows_per_rank;
        for c in 0..rows_per_rank / rows_per_comm_tile {
            out.push(TransferDescriptor {
                source,
                rows: base + c * rows_per_comm_tile..base + (c + 1) * rows_per_comm_tile,
                via,
                link,
                stream,
                phase,
            });
        }
    };
    match topology.kind {
        TopologyKind::NvlinkRing => {
            for &p in &ring {
                let stream = usize::from(topology.link_class(tp, rank, p) == LinkClass::InterNode);
                push_peer(p, None, stream, 0);
            }
        }
        TopologyKind::PcieNuma => {
            // each remote domain rotated by local index, so no two ranks of a
            // domain read the same source at the same step
            let numa = topology.numa_size(tp);
            let node = topology.node_size(tp);
            let (my_domain, local) = (rank / numa, rank % numa);
            let node_first = (rank / node) * (node / numa);
            for s in 1..node / numa {
                let d = node_first + (my_domain - node_first + s) % (node / numa);
                for i in 0..numa {
                    push_peer(d * numa + (local + 1 + i) % numa, None, 0, 0);
                }
            }
            for &p in &ring {
                match topology.link_class(tp, rank, p) {
                    LinkClass::IntraNuma => push_peer(p, None, 0, 1),
                    LinkClass::InterNode => push_peer(p, None, 1, 1),
                    LinkClass::InterNuma => {}
                }
            }
        }
        TopologyKind::MultiNode => {
            let node = topology.node_size(tp);
            let nodes = tp / node;
            let (my_node, local) = (rank / node, rank % node);
            let remote_nodes: Vec<usize> = (1..nodes).map(|s| (my_node + s) % nodes).collect();
            let local_ring: Vec<usize> = (1..node).map(|s| (local + s) % node).collect();
            // direct transfers: counterpart on each remote node interleaved with the local ring
            let steps = remote_nodes.len().max(local_ring.len());
            for s in 0..steps {
                if let Some(&nd) = remote_nodes.get(s) {
                    push_peer(nd * node + local, None, 1, 0);
                }
                if let Some(&l) = local_ring.get(s) {
                    push_peer(my_node * node + l, None, 0, 0);
                }
            }
            // forwarded: remote rank (nd, l) arrives at local rank (my_node, l) first
            for &nd in &remote_nodes {
                for &l in &local_ring {
                    push_peer(nd * node + l, Some(my_node * node + l), 0, 0);
                }
            }
        }
    }
    Ok(out)
}

/// Row blocks ordered by when their data lands on `rank`, local block first.
pub fn arrival_block_order(
    topology: &Topology,
    rank: usize,
    tp: usize,
    transfer: TransferMode,
) -> Result<Vec<usize>> {
    // one comm tile per peer is enough to rank peers
    let mut order = vec![rank];
    match transfer {
        TransferMode::Pull => {
            for d in comm_order(topology, rank, tp, 1, 1)? {
                if !order.contains(&d.source) {
                    order.push(d.source);
                }
            }
        }
        TransferMode::Push => {
            // source s reaches `rank` at the position of `rank` in s's own order
            let mut arrivals: Vec<(usize, usize, usize)> = Vec::new();
            for s in (1..tp).map(|i| (rank + tp - i) % tp) {
                let pos = comm_order(topology, s, tp, 1, 1)?
                    .iter()
                    .position(|d| d.source == rank)
                    .expect("every peer is covered");
                arrivals.push((pos, (rank + tp - s) % tp, s));
            }
            arrivals.sort_unstable();
            order.extend(arrivals.into_iter().map(|(_, _, s)| s));
        }
    }
    Ok(order)
}
