//! GEMM with the ReduceScatter fused into the epilogue.
//!
//! Every rank computes its full `[m, n]` partial product tile by tile. The
//! epilogue picks the destination rank from the tile's row and either stores
//! the tile into that rank's staging plane for this source, or accumulates it
//! directly into that rank's output.

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    spin_until, EngineConfig, EventKind, Jitter, LogEvent, PeerDirectory, RunContext, RunOutput,
    TileCounter, WaitFailure, WriteMode,
};
use crate::error::{config_err, Error, Result};
use crate::matrix::{tile_product, SharedMatrix};
use crate::problem::{Pattern, TileShape};
use crate::swizzle::{map_tile, SwizzleKind, SwizzlePolicy, Topology};
use crate::workspace::ShardedWorkspace;
use crate::engine::{CausalityLog, TransferMode};

/// Pending partial tiles of one output tile, folded strictly in source-rank order.
#[derive(Debug)]
struct AccSlot {
    next: usize,
    pending: Vec<Option<Vec<f64>>>,
}

#[derive(Debug)]
struct RsBuffers {
    /// `tp` planes of `[m/tp, n]`, plane `s` written only by source `s`.
    staging: SharedMatrix,
    /// Tiles each source has finished writing into `staging`.
    done: Vec<AtomicUsize>,
    out: SharedMatrix,
    slots: Vec<Mutex<AccSlot>>,
    accumulated: Vec<AtomicU32>,
}

pub fn run_fused_gemm_reducescatter(
    ws: &ShardedWorkspace,
    tile: TileShape,
    write_mode: WriteMode,
    swizzle: SwizzleKind,
    cfg: &EngineConfig,
) -> Result<RunOutput> {
    let p = ws.problem;
    if p.pattern != Pattern::GemmReduceScatter {
        return config_err(format!("fused ReduceScatter needs a GemmReduceScatter problem, got {p}"));
    }
    ws.validate()?;
    tile.validate(&p)?;
    let tp = p.tp;
    let rpr = p.rows_per_rank();
    let grid = tile.grid(&p);
    let col_tiles = grid.cols;
    let tiles_per_block = (rpr / tile.tm) * col_tiles;

    let dir = PeerDirectory::new(
        (0..tp)
            .map(|_| {
                Some(RsBuffers {
                    staging: SharedMatrix::zeros(tp * rpr, p.n),
                    done: (0..tp).map(|_| AtomicUsize::new(0)).collect(),
                    out: SharedMatrix::zeros(rpr, p.n),
                    slots: (0..tiles_per_block)
                        .map(|_| {
                            Mutex::new(AccSlot {
                                next: 0,
                                pending: vec![None; tp],
                            })
                        })
                        .collect(),
                    accumulated: (0..tiles_per_block).map(|_| AtomicU32::new(0)).collect(),
                })
            })
            .collect(),
    );
    let policies: Vec<SwizzlePolicy> = (0..tp)
        .map(|r| SwizzlePolicy::build(swizzle, r, tp, &Topology::default(), TransferMode::Pull))
        .collect::<Result<_>>()?;
    let counters: Vec<TileCounter> = (0..tp).map(|_| TileCounter::default()).collect();
    let ctx = RunContext::new(*cfg);
    let workers = cfg.workers(tp);

    let parts: Vec<Vec<LogEvent>> = std::thread::scope(|sc| {
        let mut handles = Vec::new();
        for r in 0..tp {
            for w in 0..workers {
                let (dir, ctx, policy, counter) = (&dir, &ctx, &policies[r], &counters[r]);
                handles.push(sc.spawn(move || {
                    let mut log = Vec::new();
                    let res = rs_worker(ws, tile, write_mode, r, w, dir, ctx, policy, counter, &mut log);
                    if let Err(e) = res {
                        ctx.fail(e);
                    }
                    log
                }));
            }
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    ctx.finish()?;

    let outputs = (0..tp)
        .map(|r| dir.get(r).map(|b| b.out.to_matrix()))
        .collect::<Result<Vec<_>>>()?;
    for r in 0..tp {
        let b = dir.get(r)?;
        if write_mode == WriteMode::FusedReduce {
            if let Some(i) = b.accumulated.iter().position(|c| c.load(Ordering::Relaxed) as usize != tp) {
                return Err(Error::Mismatch(format!(
                    "rank {r} output tile {i} accumulated {} times, expected {tp}",
                    b.accumulated[i].load(Ordering::Relaxed)
                )));
            }
        }
    }
    Ok(RunOutput {
        outputs,
        log: CausalityLog::from_parts(parts),
        transfers: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn rs_worker(
    ws: &ShardedWorkspace,
    tile: TileShape,
    write_mode: WriteMode,
    rank: usize,
    worker: usize,
    dir: &PeerDirectory<RsBuffers>,
    ctx: &RunContext,
    policy: &SwizzlePolicy,
    counter: &TileCounter,
    log: &mut Vec<LogEvent>,
) -> Result<()> {
    let p = ws.problem;
    let (tp, rpr, k) = (p.tp, p.rows_per_rank(), p.local_k());
    let grid = tile.grid(&p);
    let a = &ws.a_shards[rank];
    let b = &ws.b_shards[rank];
    let mut jitter = Jitter::new(ctx.cfg.jitter_seed, (rank * 1024 + worker) as u64);

    while let Some(i) = counter.next(grid.count()) {
        if ctx.aborted() {
            return Ok(());
        }
        jitter.pause();
        let coord = map_tile(policy, i, grid)?;
        let at = (coord.row, coord.col);
        let rows = coord.row * tile.tm..(coord.row + 1) * tile.tm;
        let cols = coord.col * tile.tn..(coord.col + 1) * tile.tn;
        log.push(ctx.event(EventKind::ComputeStart, rank, at));
        let acc = tile_product(&a.as_slice()[rows.start * k..rows.end * k], k, b, cols.clone());
        log.push(ctx.event(EventKind::ComputeEnd, rank, at));

        // epilogue: destination by row
        let dest = p.owner_of_row(rows.start);
        let local_row = rows.start - dest * rpr;
        let target = dir.get(dest)?;
        let write_kind = if dest == rank {
            EventKind::LocalWrite
        } else {
            EventKind::RemoteWrite
        };
        match write_mode {
            WriteMode::WriteAlltoAll => {
                target
                    .staging
                    .write_tile(rank * rpr + local_row, cols.start, tile.tn, &acc);
                log.push(ctx.event(write_kind, rank, at).with_peer(dest));
                target.done[rank].fetch_add(1, Ordering::Release);
            }
            WriteMode::FusedReduce => {
                let slot_idx = (local_row / tile.tm) * grid.cols + coord.col;
                log.push(ctx.event(write_kind, rank, at).with_peer(dest));
                if ctx.cfg.deterministic {
                    let mut slot = target.slots[slot_idx].lock().expect("slot poisoned");
                    slot.pending[rank] = Some(acc);
                    while slot.next < tp {
                        let next = slot.next;
                        let Some(part) = slot.pending[next].take() else { break };
                        add_tile(&target.out, local_row, cols.start, tile.tn, &part);
                        slot.next += 1;
                    }
                } else {
                    for (ii, chunk) in acc.chunks(tile.tn).enumerate() {
                        for (jj, v) in chunk.iter().enumerate() {
                            target.out.fetch_add(local_row + ii, cols.start + jj, *v);
                        }
                    }
                }
                target.accumulated[slot_idx].fetch_add(1, Ordering::AcqRel);
                log.push(ctx.event(EventKind::Accumulate, rank, at).with_peer(dest));
            }
        }
    }

    // discrete reduction, once per rank, gated on every source's completion count
    if write_mode == WriteMode::WriteAlltoAll && worker == 0 {
        let me = dir.get(rank)?;
        let expected = (rpr / tile.tm) * grid.cols;
        for src in 0..tp {
            match spin_until(&ctx.cfg.wait, &ctx.abort, || {
                me.done[src].load(Ordering::Acquire) == expected
            }) {
                Ok(_) => {}
                Err(WaitFailure::Aborted) => return Ok(()),
                Err(WaitFailure::Exhausted { polls }) => {
                    return Err(Error::Deadlock {
                        rank,
                        tile: (usize::MAX, usize::MAX),
                        board: rank,
                        flag: src,
                        polls,
                    })
                }
            }
        }
        for i in 0..rpr {
            for j in 0..p.n {
                let mut s = 0.0;
                for src in 0..tp {
                    s += me.staging.load(src * rpr + i, j);
                }
                me.out.store(i, j, s);
            }
        }
        log.push(ctx.event(EventKind::Reduce, rank, (0, 0)));
    }
    Ok(())
}

fn add_tile(out: &SharedMatrix, row0: usize, col0: usize, width: usize, part: &[f64]) {
    for (i, chunk) in part.chunks(width).enumerate() {
        for (j, v) in chunk.iter().enumerate() {
            let cur = out.load(row0 + i, col0 + j);
            out.store(row0 + i, col0 + j, cur + v);
        }
    }
}
