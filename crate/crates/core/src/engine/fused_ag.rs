//! AllGather fused into the GEMM prologue.
//!
//! A transfer agent per rank walks its [`CommTileSpec`] and moves
//! communication tiles into gather buffers, setting one flag per tile. Compute
//! tiles look up the flags covering their rows and spin until they are set
//! before running the mainloop against the gather buffer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    EngineConfig, EventKind, Jitter, LogEvent, PeerDirectory, RunContext, RunOutput, SignalBoard,
    TileCounter, TransferMode,
};
use crate::engine::CausalityLog;
use crate::error::{config_err, Error, Result};
use crate::matrix::{tile_product, Matrix, SharedMatrix};
use crate::problem::{Pattern, ProblemSpec, TileShape};
use crate::swizzle::{comm_order, map_tile, SwizzleKind, SwizzlePolicy, Topology, TransferDescriptor};
use crate::workspace::ShardedWorkspace;

/// Host transfer order of one rank.
///
/// Under [`TransferMode::Pull`] each descriptor moves `rows` of `source` into
/// this rank's gather buffer. Under [`TransferMode::Push`] the same descriptor
/// names `source` as the peer that receives this rank's matching rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTileSpec {
    pub rank: usize,
    pub rows_per_comm_tile: usize,
    pub order: Vec<TransferDescriptor>,
}

impl CommTileSpec {
    pub fn new(
        problem: &ProblemSpec,
        rank: usize,
        rows_per_comm_tile: usize,
        order: Vec<TransferDescriptor>,
    ) -> Result<Self> {
        let spec = Self {
            rank,
            rows_per_comm_tile,
            order,
        };
        spec.validate(problem)?;
        Ok(spec)
    }

    pub fn from_topology(
        problem: &ProblemSpec,
        topology: &Topology,
        rank: usize,
        rows_per_comm_tile: usize,
    ) -> Result<Self> {
        let order = comm_order(topology, rank, problem.tp, problem.rows_per_rank(), rows_per_comm_tile)?;
        Self::new(problem, rank, rows_per_comm_tile, order)
    }

    /// Checks that the descriptors cover every non-local communication tile exactly once.
    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        let rpr = problem.rows_per_rank();
        let c = self.rows_per_comm_tile;
        if self.rank >= problem.tp {
            return config_err(format!("rank {} out of range for tp={}", self.rank, problem.tp));
        }
        if c == 0 || !rpr.is_multiple_of(c) {
            return config_err(format!("communication tile of {c} rows does not divide {rpr}"));
        }
        let mut seen = vec![false; problem.m / c];
        for d in &self.order {
            let block = problem.owned_rows(d.source.min(problem.tp - 1));
            if d.source >= problem.tp
                || d.source == self.rank
                || d.rows.len() != c
                || d.rows.start % c != 0
                || d.rows.start < block.start
                || d.rows.end > block.end
            {
                return Err(Error::Bounds(format!(
                    "descriptor {d:?} is not a communication tile of a peer of rank {}",
                    self.rank
                )));
            }
            let f = d.rows.start / c;
            if std::mem::replace(&mut seen[f], true) {
                return config_err(format!("rows {:?} transferred twice", d.rows));
            }
        }
        let local = problem.owned_rows(self.rank);
        if let Some(f) = (0..seen.len()).find(|&f| !seen[f] && !local.contains(&(f * c))) {
            return config_err(format!(
                "rank {} never receives rows {:?}",
                self.rank,
                f * c..(f + 1) * c
            ));
        }
        Ok(())
    }
}

/// Communication specs of every rank, sharing one communication tile size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommPlan {
    pub rows_per_comm_tile: usize,
    pub specs: Vec<CommTileSpec>,
}

impl CommPlan {
    pub fn new(problem: &ProblemSpec, topology: &Topology, rows_per_comm_tile: usize) -> Result<Self> {
        let specs = (0..problem.tp)
            .map(|r| CommTileSpec::from_topology(problem, topology, r, rows_per_comm_tile))
            .collect::<Result<_>>()?;
        Ok(Self {
            rows_per_comm_tile,
            specs,
        })
    }

    /// One communication tile per rank's block.
    pub fn per_rank(problem: &ProblemSpec, topology: &Topology) -> Result<Self> {
        Self::new(problem, topology, problem.rows_per_rank())
    }
}

/// One completed host transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub descriptor: TransferDescriptor,
    /// Rank whose gather buffer received the rows and whose flag was set.
    pub target: usize,
    pub rows: Range<usize>,
    pub flag: usize,
    pub copy_complete_ts: u64,
    pub flag_set_ts: u64,
}

/// Runs one rank's host transfer loop to completion on the calling thread.
///
/// `gather` and `boards` hold every rank's gather buffer and signal board.
pub fn host_transfer_loop(
    rank: usize,
    shards: &[Matrix],
    gather: &[SharedMatrix],
    boards: &[SignalBoard],
    comm: &CommTileSpec,
    transfer: TransferMode,
) -> Result<(Vec<TransferRecord>, Vec<LogEvent>)> {
    let ctx = RunContext::new(EngineConfig::default());
    let mut log = Vec::new();
    let recs = transfer_agent(rank, shards, gather, boards, comm, transfer, &ctx, &mut log)?;
    Ok((recs, log))
}

#[allow(clippy::too_many_arguments)]
fn transfer_agent(
    rank: usize,
    shards: &[Matrix],
    gather: &[SharedMatrix],
    boards: &[SignalBoard],
    comm: &CommTileSpec,
    transfer: TransferMode,
    ctx: &RunContext,
    log: &mut Vec<LogEvent>,
) -> Result<Vec<TransferRecord>> {
    let c = comm.rows_per_comm_tile;
    let rpr = shards.get(rank).ok_or(Error::Directory { rank })?.rows();
    let mut jitter = Jitter::new(ctx.cfg.jitter_seed, 0xA6E0_0000 + rank as u64);
    let mut records = Vec::with_capacity(comm.order.len());
    for d in &comm.order {
        if ctx.aborted() {
            break;
        }
        jitter.pause();
        let peer = d.source;
        // pull: peer's rows into my buffer; push: my matching rows into peer's buffer
        let (src_rank, target, rows) = match transfer {
            TransferMode::Pull => (peer, rank, d.rows.clone()),
            TransferMode::Push => {
                let offset = d.rows.start.checked_sub(peer * rpr).ok_or_else(|| {
                    Error::Bounds(format!("descriptor {d:?} outside rank {peer}'s rows"))
                })?;
                let start = rank * rpr + offset;
                (rank, peer, start..start + d.rows.len())
            }
        };
        let shard = shards.get(src_rank).ok_or(Error::Directory { rank: src_rank })?;
        let dst = gather.get(target).ok_or(Error::Directory { rank: target })?;
        let board = boards.get(target).ok_or(Error::Directory { rank: target })?;
        let local = rows.start.checked_sub(src_rank * rpr).map(|s| s..s + rows.len());
        let Some(local) = local.filter(|l| l.end <= shard.rows()) else {
            return Err(Error::Bounds(format!(
                "rows {rows:?} are not held by rank {src_rank}"
            )));
        };
        dst.check_rows(&rows)?;
        if rows.start % c != 0 || rows.len() != c {
            return Err(Error::Bounds(format!("rows {rows:?} are not a communication tile of {c} rows")));
        }

        dst.write_rows(rows.start, shard.row_block(local).as_slice());
        let flag = rows.start / c;
        let copied = ctx.event(EventKind::CopyComplete, target, (flag, 0)).with_peer(rank);
        let set_ts = ctx.clock.tick();
        board.set(flag, rank, set_ts)?;
        let mut set_ev = LogEvent::new(EventKind::FlagSet, target, (flag, 0), set_ts, ctx.clock.wall_ns());
        set_ev.peer = Some(rank);
        records.push(TransferRecord {
            descriptor: d.clone(),
            target,
            rows,
            flag,
            copy_complete_ts: copied.logical_ts,
            flag_set_ts: set_ts,
        });
        log.push(copied);
        log.push(set_ev);
    }
    Ok(records)
}

/// Fused AllGather-GEMM over every rank.
pub fn run_fused_allgather_gemm(
    ws: &ShardedWorkspace,
    tile: TileShape,
    plan: &CommPlan,
    transfer: TransferMode,
    swizzle: SwizzleKind,
    topology: &Topology,
    cfg: &EngineConfig,
) -> Result<RunOutput> {
    let p = ws.problem;
    if p.pattern != Pattern::AllGatherGemm {
        return config_err(format!("fused AllGather needs an AllGatherGemm problem, got {p}"));
    }
    ws.validate()?;
    tile.validate(&p)?;
    let tp = p.tp;
    let c = plan.rows_per_comm_tile;
    if plan.specs.len() != tp {
        return Err(Error::Directory { rank: plan.specs.len() });
    }
    for (r, spec) in plan.specs.iter().enumerate() {
        if spec.rank != r || spec.rows_per_comm_tile != c {
            return config_err(format!("communication spec {r} does not belong to rank {r}"));
        }
        spec.validate(&p)?;
    }
    let n_flags = p.m / c;

    let gather: Vec<SharedMatrix> = (0..tp).map(|_| SharedMatrix::zeros(p.m, p.k)).collect();
    let boards: Vec<SignalBoard> = (0..tp).map(|r| SignalBoard::new(r, n_flags)).collect();
    let outs = PeerDirectory::new(
        (0..tp)
            .map(|_| Some(SharedMatrix::zeros(p.m, p.local_n())))
            .collect(),
    );
    let mut preset_log = Vec::new();
    for r in 0..tp {
        let own = p.owned_rows(r);
        gather[r].write_rows(own.start, ws.a_shards[r].as_slice());
        let flags = own.start / c..own.end / c;
        boards[r].preset(flags.clone());
        preset_log.extend(flags.map(|f| LogEvent::new(EventKind::FlagPreset, r, (f, 0), 0, 0)));
    }
    let policies: Vec<SwizzlePolicy> = (0..tp)
        .map(|r| SwizzlePolicy::build(swizzle, r, tp, topology, transfer))
        .collect::<Result<_>>()?;
    let counters: Vec<TileCounter> = (0..tp).map(|_| TileCounter::default()).collect();
    let ctx = RunContext::new(*cfg);
    let workers = cfg.workers(tp);

    let (worker_logs, agent_results) = std::thread::scope(|sc| {
        let mut agents = Vec::new();
        for r in 0..tp {
            let (gather, boards, ctx, spec) = (&gather, &boards, &ctx, &plan.specs[r]);
            agents.push(sc.spawn(move || {
                let mut log = Vec::new();
                let res = transfer_agent(r, &ws.a_shards, gather, boards, spec, transfer, ctx, &mut log);
                match res {
                    Ok(recs) => (recs, log),
                    Err(e) => {
                        ctx.fail(e);
                        (Vec::new(), log)
                    }
                }
            }));
        }
        let mut handles = Vec::new();
        for r in 0..tp {
            for w in 0..workers {
                let (gather, board, outs, ctx) = (&gather[r], &boards[r], &outs, &ctx);
                let (policy, counter) = (&policies[r], &counters[r]);
                handles.push(sc.spawn(move || {
                    let mut log = Vec::new();
                    let res = ag_worker(ws, tile, c, r, w, gather, board, outs, ctx, policy, counter, &mut log);
                    if let Err(e) = res {
                        ctx.fail(e);
                    }
                    log
                }));
            }
        }
        let logs: Vec<Vec<LogEvent>> = handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect();
        let agents: Vec<(Vec<TransferRecord>, Vec<LogEvent>)> = agents
            .into_iter()
            .map(|h| h.join().expect("transfer agent panicked"))
            .collect();
        (logs, agents)
    });
    ctx.finish()?;

    let mut parts = worker_logs;
    parts.push(preset_log);
    let mut transfers = Vec::with_capacity(tp);
    for (recs, log) in agent_results {
        transfers.push(recs);
        parts.push(log);
    }
    let outputs = (0..tp)
        .map(|r| outs.get(r).map(SharedMatrix::to_matrix))
        .collect::<Result<_>>()?;
    Ok(RunOutput {
        outputs,
        log: CausalityLog::from_parts(parts),
        transfers,
    })
}

/// Flags covering the rows of tile row `tile_row`.
pub(crate) fn flags_of_tile(tile_row: usize, tm: usize, rows_per_comm_tile: usize) -> Range<usize> {
    let rows = tile_row * tm..(tile_row + 1) * tm;
    rows.start / rows_per_comm_tile..(rows.end - 1) / rows_per_comm_tile + 1
}

#[allow(clippy::too_many_arguments)]
fn ag_worker(
    ws: &ShardedWorkspace,
    tile: TileShape,
    c: usize,
    rank: usize,
    worker: usize,
    gather: &SharedMatrix,
    board: &SignalBoard,
    outs: &PeerDirectory<SharedMatrix>,
    ctx: &RunContext,
    policy: &SwizzlePolicy,
    counter: &TileCounter,
    log: &mut Vec<LogEvent>,
) -> Result<()> {
    let p = ws.problem;
    let grid = tile.grid(&p);
    let b = &ws.b_shards[rank];
    let out = outs.get(rank)?;
    let mut jitter = Jitter::new(ctx.cfg.jitter_seed, (rank * 1024 + worker) as u64);
    while let Some(i) = counter.next(grid.count()) {
        if ctx.aborted() {
            return Ok(());
        }
        jitter.pause();
        let coord = map_tile(policy, i, grid)?;
        let at = (coord.row, coord.col);
        let mut signal_ts = 0;
        for f in flags_of_tile(coord.row, tile.tm, c) {
            if !board.is_set(f) {
                log.push(ctx.event(EventKind::WaitBegin, rank, at));
            }
            signal_ts = signal_ts.max(board.wait(f, &ctx.cfg.wait, &ctx.abort, (rank, at))?);
        }
        let mut start = ctx.event(EventKind::ComputeStart, rank, at);
        start.signal_ts = Some(signal_ts);
        log.push(start);
        let rows = coord.row * tile.tm..(coord.row + 1) * tile.tm;
        let cols = coord.col * tile.tn..(coord.col + 1) * tile.tn;
        let a = gather.read_rows(rows.clone());
        let acc = tile_product(&a, p.k, b, cols.clone());
        out.write_tile(rows.start, cols.start, tile.tn, &acc);
        log.push(ctx.event(EventKind::ComputeEnd, rank, at));
    }
    Ok(())
}
