//! Reference strategies: the non-overlapped collective-then-GEMM (or
//! GEMM-then-collective) path, and the chunked schedule that splits the GEMM
//! into one piece per device (or two) and pipelines the pieces.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::exec::Exec;
use crate::matrix::{tiled_gemm_with, Matrix};
use crate::problem::{Pattern, ProblemSpec, TileShape};
use crate::workspace::ShardedWorkspace;

/// Serial reference: gather then tiled GEMM, or tiled GEMM then a rank-ordered
/// reduce-scatter. Bitwise equal to the dense oracle.
pub fn run_nonoverlap(ws: &ShardedWorkspace, tile: TileShape) -> Result<Vec<Matrix>> {
    ws.validate()?;
    let p = ws.problem;
    tile.validate(&p)?;
    let exec = Exec::default();
    match p.pattern {
        Pattern::AllGatherGemm => {
            let a = Matrix::vstack(&ws.a_shards)?;
            exec.map(&ws.b_shards, |b| tiled_gemm_with(Exec::Sequential, &a, b, tile.tm, tile.tn))
                .into_iter()
                .collect()
        }
        Pattern::GemmReduceScatter => {
            let partials: Vec<Matrix> = exec
                .map_range(p.tp, |r| {
                    tiled_gemm_with(Exec::Sequential, &ws.a_shards[r], &ws.b_shards[r], tile.tm, tile.tn)
                })
                .into_iter()
                .collect::<Result<_>>()?;
            Ok((0..p.tp)
                .map(|r| {
                    let rows = p.owned_rows(r);
                    Matrix::from_fn(rows.len(), p.n, |i, j| {
                        let mut s = 0.0;
                        for part in &partials {
                            s += part.get(rows.start + i, j);
                        }
                        s
                    })
                })
                .collect())
        }
    }
}

/// One step of the chunked schedule on one rank. `rows` are global rows of
/// the gathered input (AllGather) or of the partial product (ReduceScatter).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MediumOp {
    /// Copy a chunk of `A` from its owner; issued eagerly at the start.
    Fetch { chunk: usize, rows: Range<usize>, from: usize },
    /// GEMM of one chunk of rows.
    ChunkGemm { chunk: usize, rows: Range<usize> },
    /// Add the running sum received from `from` to the local chunk result.
    Add { chunk: usize, rows: Range<usize>, from: usize },
    /// Forward the running sum to `to`.
    Send { chunk: usize, rows: Range<usize>, to: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediumSchedule {
    pub pattern: Pattern,
    pub partitions: usize,
    /// Ops of each rank in issue order.
    pub ranks: Vec<Vec<MediumOp>>,
}

impl MediumSchedule {
    /// Rows per chunk.
    pub fn chunk_rows(&self, problem: &ProblemSpec) -> usize {
        problem.m / self.partitions
    }
}

/// The chunked schedule for `partitions` in `{tp, 2*tp}`.
///
/// ReduceScatter: at step `s` rank `r` computes the partial for block
/// `r-1-s` (and, with two chunks per block, the second half of block
/// `r+1+s`), adds the running sum received from its ring predecessor and
/// forwards the result, so after `tp` steps every rank holds its own block.
/// Each chunk GEMM starts only after the previous add. AllGather: every
/// non-local chunk is fetched up front and chunks are multiplied local first,
/// then in ring order.
pub fn medium_schedule(problem: &ProblemSpec, partitions: usize) -> Result<MediumSchedule> {
    let tp = problem.tp;
    if partitions != tp && partitions != 2 * tp {
        return config_err(format!(
            "chunked schedule needs tp or 2*tp partitions, got {partitions} for tp={tp}"
        ));
    }
    let halves = partitions / tp;
    let rpr = problem.rows_per_rank();
    if !rpr.is_multiple_of(halves) {
        return config_err(format!("{rpr} rows per rank cannot be split into {halves} chunks"));
    }
    let hr = rpr / halves;
    let half_rows = |b: usize, h: usize| b * rpr + h * hr..b * rpr + (h + 1) * hr;
    let mut ranks = Vec::with_capacity(tp);
    for r in 0..tp {
        let mut ops = Vec::new();
        match problem.pattern {
            Pattern::AllGatherGemm => {
                let chunks: Vec<(usize, Range<usize>)> = (0..tp)
                    .flat_map(|s| (0..halves).map(move |h| ((r + s) % tp, h)))
                    .map(|(b, h)| (b, half_rows(b, h)))
                    .collect();
                for (c, (b, rows)) in chunks.iter().enumerate() {
                    if *b != r {
                        ops.push(MediumOp::Fetch { chunk: c, rows: rows.clone(), from: *b });
                    }
                }
                for (c, (_, rows)) in chunks.into_iter().enumerate() {
                    ops.push(MediumOp::ChunkGemm { chunk: c, rows });
                }
            }
            Pattern::GemmReduceScatter => {
                for s in 0..tp {
                    for h in 0..halves {
                        let chunk = s * halves + h;
                        let (b, prev, next) = if h == 0 {
                            ((r + tp * 2 - 1 - s % tp) % tp, (r + tp - 1) % tp, (r + 1) % tp)
                        } else {
                            ((r + 1 + s) % tp, (r + 1) % tp, (r + tp - 1) % tp)
                        };
                        let rows = half_rows(b, h);
                        ops.push(MediumOp::ChunkGemm { chunk, rows: rows.clone() });
                        if s > 0 {
                            ops.push(MediumOp::Add { chunk, rows: rows.clone(), from: prev });
                        }
                        if s + 1 < tp {
                            ops.push(MediumOp::Send { chunk, rows, to: next });
                        }
                    }
                }
            }
        }
        ranks.push(ops);
    }
    Ok(MediumSchedule {
        pattern: problem.pattern,
        partitions,
        ranks,
    })
}

/// One executed op of the chunked schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub rank: usize,
    pub logical_ts: u64,
    #[serde(flatten)]
    pub op: MediumOp,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Executes the chunked schedule and returns per-rank outputs plus the step trace.
pub fn run_medium_grained(
    ws: &ShardedWorkspace,
    tile: TileShape,
    partitions: usize,
) -> Result<(Vec<Matrix>, Vec<StepRecord>)> {
    ws.validate()?;
    let p = ws.problem;
    tile.validate(&p)?;
    let sched = medium_schedule(&p, partitions)?;
    let exec = Exec::default();
    let mut trace = Vec::new();
    let mut ts = 0u64;
    let mut record = |rank: usize, op: &MediumOp, trace: &mut Vec<StepRecord>| {
        ts += 1;
        trace.push(StepRecord { rank, logical_ts: ts, op: op.clone() });
    };
    let chunk_gemm = |a: &Matrix, b: &Matrix| {
        let tm = gcd(tile.tm, a.rows());
        tiled_gemm_with(Exec::Sequential, a, b, tm, tile.tn)
    };

    match p.pattern {
        Pattern::AllGatherGemm => {
            let results: Vec<Result<Matrix>> = exec.map_range(p.tp, |r| {
                let mut out = Matrix::zeros(p.m, p.local_n());
                for op in &sched.ranks[r] {
                    if let MediumOp::ChunkGemm { rows, .. } = op {
                        let owner = p.owner_of_row(rows.start);
                        let local = rows.start - owner * p.rows_per_rank()..rows.end - owner * p.rows_per_rank();
                        let a = ws.a_shards[owner].row_block(local);
                        let c = chunk_gemm(&a, &ws.b_shards[r])?;
                        out.as_mut_slice()[rows.start * p.local_n()..rows.end * p.local_n()]
                            .copy_from_slice(c.as_slice());
                    }
                }
                Ok(out)
            });
            for r in 0..p.tp {
                for op in &sched.ranks[r] {
                    record(r, op, &mut trace);
                }
            }
            let outputs = results.into_iter().collect::<Result<_>>()?;
            Ok((outputs, trace))
        }
        Pattern::GemmReduceScatter => {
            let halves = partitions / p.tp;
            // running sums in flight: inbox[rank][half]
            let mut inbox: Vec<Vec<Option<Matrix>>> = vec![vec![None; halves]; p.tp];
            let mut outputs = vec![Matrix::zeros(p.rows_per_rank(), p.n); p.tp];
            for s in 0..p.tp {
                let step_ops: Vec<Vec<&MediumOp>> = (0..p.tp)
                    .map(|r| {
                        sched.ranks[r]
                            .iter()
                            .filter(|op| matches!(op,
                                MediumOp::ChunkGemm { chunk, .. }
                                | MediumOp::Add { chunk, .. }
                                | MediumOp::Send { chunk, .. } if chunk / halves == s))
                            .collect()
                    })
                    .collect();
                let partials: Vec<Vec<Result<Matrix>>> = exec.map_range(p.tp, |r| {
                    step_ops[r]
                        .iter()
                        .filter_map(|op| match op {
                            MediumOp::ChunkGemm { rows, .. } => {
                                Some(chunk_gemm(&ws.a_shards[r].row_block(rows.clone()), &ws.b_shards[r]))
                            }
                            _ => None,
                        })
                        .collect()
                });
                let mut next_inbox: Vec<Vec<Option<Matrix>>> = vec![vec![None; halves]; p.tp];
                for (r, parts) in partials.into_iter().enumerate() {
                    let mut parts = parts.into_iter();
                    let mut acc: Vec<Option<Matrix>> = vec![None; halves];
                    for op in &step_ops[r] {
                        record(r, op, &mut trace);
                        match op {
                            MediumOp::ChunkGemm { chunk, .. } => {
                                acc[chunk % halves] = Some(parts.next().expect("one partial per gemm")?);
                            }
                            MediumOp::Add { chunk, .. } => {
                                let h = chunk % halves;
                                let received = inbox[r][h].take().expect("running sum arrived");
                                let local = acc[h].take().expect("chunk computed");
                                let mut sum = received;
                                for (x, y) in sum.as_mut_slice().iter_mut().zip(local.as_slice()) {
                                    *x += y;
                                }
                                acc[h] = Some(sum);
                            }
                            MediumOp::Send { chunk, to, .. } => {
                                let h = chunk % halves;
                                next_inbox[*to][h] = acc[h].take();
                            }
                            MediumOp::Fetch { .. } => unreachable!("no fetches in ReduceScatter"),
                        }
                    }
                    if s + 1 == p.tp {
                        for (h, part) in acc.into_iter().enumerate() {
                            let part = part.expect("final chunk stays local");
                            let hr = p.rows_per_rank() / halves;
                            outputs[r].as_mut_slice()[h * hr * p.n..(h + 1) * hr * p.n]
                                .copy_from_slice(part.as_slice());
                        }
                    }
                }
                inbox = next_inbox;
            }
            Ok((outputs, trace))
        }
    }
}
