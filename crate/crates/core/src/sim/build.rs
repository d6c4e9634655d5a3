//! Task graphs of the three strategies.

use crate::engine::{medium_schedule, MediumOp, TransferMode, WriteMode};
use crate::error::{config_err, Result};
use crate::problem::{Pattern, ProblemSpec, TileShape};
use crate::swizzle::{comm_order, visit_order, SwizzlePolicy};

use super::des::{Graph, Phase, Task, TaskId};
use super::machine::MachineModel;
use super::timeline::SimEventKind;
use super::OverlapKnobs;

struct Ctx<'a> {
    p: &'a ProblemSpec,
    tile: &'a TileShape,
    m: &'a MachineModel,
}

impl Ctx<'_> {
    fn launch(&self) -> Phase {
        Phase::Delay {
            kind: SimEventKind::KernelLaunch,
            us: self.m.launch_overhead_us,
        }
    }

    fn compute(&self, scale: f64) -> Phase {
        Phase::Delay {
            kind: SimEventKind::TileCompute,
            us: self.m.tile_time_us(self.p, self.tile) / scale,
        }
    }

    fn reduce(&self, elements: usize, with_launch: bool) -> Phase {
        let launch = if with_launch { self.m.launch_overhead_us } else { 0.0 };
        Phase::Delay {
            kind: SimEventKind::Reduce,
            us: launch + self.m.elementwise_us(elements),
        }
    }

    fn flow(&self, src: usize, dst: usize, elements: usize, efficiency: f64) -> Phase {
        Phase::Flow {
            src,
            dst,
            bytes: (elements * self.m.bytes_per_element) as f64,
            cap: self.m.link_bw_bytes_per_us * efficiency,
            fifo: false,
        }
    }

    /// A tile store into another rank's memory; stores into one rank queue up.
    fn store(&self, src: usize, dst: usize, elements: usize, efficiency: f64) -> Phase {
        match self.flow(src, dst, elements, efficiency) {
            Phase::Flow { src, dst, bytes, cap, .. } => Phase::Flow { src, dst, bytes, cap, fifo: true },
            _ => unreachable!(),
        }
    }

    /// Row-wide elements of a block of `rows` input rows (AllGather moves `A` rows).
    fn row_elems(&self, rows: usize) -> usize {
        match self.p.pattern {
            Pattern::AllGatherGemm => rows * self.p.k,
            Pattern::GemmReduceScatter => rows * self.p.n,
        }
    }

    /// Adds the tiles of output rows `rows` to `lane`, in row-major order.
    fn tiles(&self, g: &mut Graph, rank: usize, lane: usize, rows: std::ops::Range<usize>, scale: f64, after: TaskId, chunk: Option<usize>) -> Vec<TaskId> {
        let cols = self.tile.grid(self.p).cols;
        let mut ids = Vec::new();
        for row in rows.start / self.tile.tm..rows.end / self.tile.tm {
            for col in 0..cols {
                let mut t = Task::new(rank, vec![self.compute(scale)])
                    .after([after])
                    .in_lane(lane)
                    .tile((row, col));
                if let Some(c) = chunk {
                    t = t.chunk(c);
                }
                ids.push(g.add(t));
            }
        }
        ids
    }
}

pub(crate) fn coarse(g: &mut Graph, p: &ProblemSpec, tile: &TileShape, m: &MachineModel) -> Result<()> {
    let cx = Ctx { p, tile, m };
    let tp = p.tp;
    let block = cx.row_elems(p.rows_per_rank());
    let pools: Vec<usize> = (0..tp).map(|_| g.pool(m.sm_count)).collect();
    match p.pattern {
        Pattern::AllGatherGemm => {
            // ring AllGather: at step s rank r forwards block r-s to r+1
            let mut done: Vec<Vec<TaskId>> = vec![Vec::new(); tp];
            if tp > 1 {
                let launches: Vec<TaskId> =
                    (0..tp).map(|r| g.add(Task::new(r, vec![cx.launch()]).label("allgather"))).collect();
                let mut prev: Vec<TaskId> = Vec::new();
                for s in 0..tp - 1 {
                    let step: Vec<TaskId> = (0..tp)
                        .map(|r| {
                            let from = (r + tp - 1) % tp;
                            let deps = if s == 0 { vec![launches[r]] } else { vec![prev[r], prev[from]] };
                            g.add(Task::new(r, vec![cx.flow(r, (r + 1) % tp, block, 1.0)]).after(deps).label("ring"))
                        })
                        .collect();
                    for r in 0..tp {
                        done[r].push(step[r]);
                        done[(r + 1) % tp].push(step[r]);
                    }
                    prev = step;
                }
            }
            for r in 0..tp {
                let launch = g.add(Task::new(r, vec![cx.launch()]).after(done[r].clone()).label("gemm"));
                let lane = g.lane(pools[r]);
                cx.tiles(g, r, lane, 0..p.m, 1.0, launch, None);
            }
        }
        Pattern::GemmReduceScatter => {
            let mut ready = Vec::with_capacity(tp);
            for r in 0..tp {
                let launch = g.add(Task::new(r, vec![cx.launch()]).label("gemm"));
                let lane = g.lane(pools[r]);
                let tiles = cx.tiles(g, r, lane, 0..p.m, 1.0, launch, None);
                let join = g.add(Task::join(r, tiles));
                if tp > 1 {
                    ready.push(g.add(Task::new(r, vec![cx.launch()]).after([join]).label("reducescatter")));
                }
            }
            if tp > 1 {
                // ring ReduceScatter: send the running sum, receiver adds its own partial
                let mut prev = ready.clone();
                for _s in 0..tp - 1 {
                    let sends: Vec<TaskId> = (0..tp)
                        .map(|r| g.add(Task::new(r, vec![cx.flow(r, (r + 1) % tp, block, 1.0)]).after([prev[r]]).label("ring")))
                        .collect();
                    prev = (0..tp)
                        .map(|r| {
                            let from = (r + tp - 1) % tp;
                            g.add(Task::new(r, vec![cx.reduce(block, false)]).after([sends[from], ready[r], prev[r]]).label("add"))
                        })
                        .collect();
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn medium(g: &mut Graph, p: &ProblemSpec, tile: &TileShape, m: &MachineModel, partitions: usize) -> Result<()> {
    let cx = Ctx { p, tile, m };
    let tp = p.tp;
    let sched = medium_schedule(p, partitions)?;
    let chunk_rows = p.m / partitions;
    if !chunk_rows.is_multiple_of(tile.tm) {
        return config_err(format!(
            "chunk of {chunk_rows} rows is not a whole number of {}-row tiles",
            tile.tm
        ));
    }
    let scale = m.split_efficiency.at(1.0 / partitions as f64);
    let pools: Vec<usize> = (0..tp).map(|_| g.pool(m.sm_count)).collect();
    match p.pattern {
        Pattern::AllGatherGemm => {
            for (r, ops) in sched.ranks.iter().enumerate() {
                // fetches issued up front, served one at a time by the copy stream
                let mut fetched = vec![None; partitions];
                let mut last: Option<TaskId> = None;
                for op in ops {
                    if let MediumOp::Fetch { chunk, rows, from } = op {
                        let t = Task::new(r, vec![cx.flow(*from, r, cx.row_elems(rows.len()), m.pull_efficiency)])
                            .after(last)
                            .chunk(*chunk)
                            .label("fetch");
                        let id = g.add(t);
                        fetched[*chunk] = Some(id);
                        last = Some(id);
                    }
                }
                let mut prev_launch: Option<TaskId> = None;
                for op in ops {
                    if let MediumOp::ChunkGemm { chunk, rows } = op {
                        let launch = g.add(
                            Task::new(r, vec![cx.launch()])
                                .after(prev_launch.into_iter().chain(fetched[*chunk]))
                                .chunk(*chunk)
                                .label("gemm"),
                        );
                        let lane = g.lane(pools[r]);
                        cx.tiles(g, r, lane, rows.clone(), scale, launch, Some(*chunk));
                        prev_launch = Some(launch);
                    }
                }
            }
        }
        Pattern::GemmReduceScatter => {
            let mut tail: Vec<Option<TaskId>> = vec![None; tp];
            let mut sends: Vec<Vec<Option<TaskId>>> = vec![vec![None; partitions]; tp];
            let mut joins: Vec<Vec<Option<TaskId>>> = vec![vec![None; partitions]; tp];
            let mut running: Vec<Vec<Option<TaskId>>> = vec![vec![None; partitions]; tp];
            for c in 0..partitions {
                for r in 0..tp {
                    for op in sched.ranks[r].iter() {
                        match op {
                            MediumOp::ChunkGemm { chunk, rows } if *chunk == c => {
                                let launch = g.add(Task::new(r, vec![cx.launch()]).after(tail[r]).chunk(c).label("gemm"));
                                let lane = g.lane(pools[r]);
                                let tiles = cx.tiles(g, r, lane, rows.clone(), scale, launch, Some(c));
                                let join = g.add(Task::join(r, tiles).chunk(c));
                                joins[r][c] = Some(join);
                                running[r][c] = Some(join);
                                tail[r] = Some(join);
                            }
                            MediumOp::Add { chunk, from, .. } if *chunk == c => {
                                let halves = partitions / tp;
                                let incoming = sends[*from][c - halves].expect("predecessor sent first");
                                let add = g.add(
                                    Task::new(r, vec![cx.reduce(chunk_rows * p.n, true)])
                                        .after([incoming, joins[r][c].expect("chunk computed")])
                                        .chunk(c)
                                        .label("add"),
                                );
                                running[r][c] = Some(add);
                                tail[r] = Some(add);
                            }
                            MediumOp::Send { chunk, to, .. } if *chunk == c => {
                                let s = g.add(
                                    Task::new(r, vec![cx.flow(r, *to, chunk_rows * p.n, 1.0)])
                                        .after(running[r][c])
                                        .chunk(c)
                                        .label("send"),
                                );
                                sends[r][c] = Some(s);
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub(crate) fn fine(g: &mut Graph, p: &ProblemSpec, tile: &TileShape, m: &MachineModel, knobs: &OverlapKnobs) -> Result<()> {
    let cx = Ctx { p, tile, m };
    let tp = p.tp;
    let rpr = p.rows_per_rank();
    let grid = tile.grid(p);
    let topo = &m.topology;
    let swizzle = knobs.swizzle_for(p.pattern);
    let launches: Vec<TaskId> = (0..tp).map(|r| g.add(Task::new(r, vec![cx.launch()]).label("fused"))).collect();
    let lanes: Vec<usize> = (0..tp)
        .map(|_| {
            let pool = g.pool(m.sm_count);
            g.lane(pool)
        })
        .collect();
    match p.pattern {
        Pattern::AllGatherGemm => {
            let c = knobs.rows_per_comm_tile.unwrap_or(rpr);
            if c == 0 || !rpr.is_multiple_of(c) {
                return config_err(format!("communication tile of {c} rows does not divide {rpr}"));
            }
            let flags = p.m / c;
            // delivered[target][flag]
            let mut delivered: Vec<Vec<Option<TaskId>>> = vec![vec![None; flags]; tp];
            let orders: Vec<_> = (0..tp).map(|r| comm_order(topo, r, tp, rpr, c)).collect::<Result<_>>()?;
            let mut stream_tail: Vec<Vec<Option<TaskId>>> = vec![Vec::new(); tp];
            let mut phase0: Vec<Vec<TaskId>> = vec![Vec::new(); tp];
            let forwarding = knobs.transfer == TransferMode::Pull;
            for pass in 0..2 {
                for (r, order) in orders.iter().enumerate() {
                    for d in order {
                        let forwarded = forwarding && d.via.is_some();
                        if forwarded != (pass == 1) {
                            continue;
                        }
                        let (src, dst, rows, eff) = match knobs.transfer {
                            TransferMode::Pull => (d.via.unwrap_or(d.source), r, d.rows.clone(), m.pull_efficiency),
                            TransferMode::Push => {
                                let start = r * rpr + (d.rows.start - d.source * rpr);
                                (r, d.source, start..start + d.rows.len(), m.push_efficiency)
                            }
                        };
                        let mut deps: Vec<TaskId> = Vec::new();
                        if stream_tail[r].len() <= d.stream {
                            stream_tail[r].resize(d.stream + 1, None);
                        }
                        deps.extend(stream_tail[r][d.stream]);
                        if d.phase > 0 {
                            deps.extend(phase0[r].iter().copied());
                        }
                        if forwarded {
                            let via = d.via.expect("forwarded");
                            deps.extend(delivered[via][d.rows.start / c]);
                        }
                        let id = g.add(
                            Task::new(r, vec![cx.flow(src, dst, cx.row_elems(rows.len()), eff)])
                                .after(deps)
                                .label(if forwarded { "forward" } else { "copy" }),
                        );
                        stream_tail[r][d.stream] = Some(id);
                        if d.phase == 0 {
                            phase0[r].push(id);
                        }
                        delivered[dst][rows.start / c] = Some(id);
                    }
                }
            }
            for r in 0..tp {
                let policy = SwizzlePolicy::build(swizzle, r, tp, topo, knobs.transfer)?;
                for coord in visit_order(&policy, grid) {
                    let rows = coord.row * tile.tm..(coord.row + 1) * tile.tm;
                    let waits: Vec<TaskId> = (rows.start / c..(rows.end - 1) / c + 1)
                        .filter_map(|f| delivered[r][f])
                        .collect();
                    g.add(
                        Task::new(r, vec![cx.compute(1.0)])
                            .waiting_on(waits)
                            .after([launches[r]])
                            .in_lane(lanes[r])
                            .tile((coord.row, coord.col)),
                    );
                }
            }
        }
        Pattern::GemmReduceScatter => {
            let eff = match knobs.write_mode {
                WriteMode::WriteAlltoAll => 1.0,
                WriteMode::FusedReduce => m.accumulate_efficiency,
            };
            let mut into: Vec<Vec<TaskId>> = vec![Vec::new(); tp];
            for r in 0..tp {
                let policy = SwizzlePolicy::build(swizzle, r, tp, topo, knobs.transfer)?;
                for coord in visit_order(&policy, grid) {
                    let dest = p.owner_of_row(coord.row * tile.tm);
                    let mut phases = vec![cx.compute(1.0)];
                    if dest != r {
                        phases.push(cx.store(r, dest, tile.tm * tile.tn, eff));
                    }
                    let id = g.add(
                        Task::new(r, phases)
                            .after([launches[r]])
                            .in_lane(lanes[r])
                            .tile((coord.row, coord.col)),
                    );
                    into[dest].push(id);
                }
            }
            if knobs.write_mode == WriteMode::WriteAlltoAll && tp > 1 {
                for (dest, deps) in into.into_iter().enumerate() {
                    g.add(Task::new(dest, vec![cx.reduce(tp * rpr * p.n, true)]).after(deps).label("reduce"));
                }
            }
        }
    }
    Ok(())
}
