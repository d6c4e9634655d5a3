mod common;

use common::golden_case;
use proptest::prelude::*;
use tpoverlap::engine::{
    causality_violations, host_transfer_loop, run_fused_allgather_gemm,
    run_fused_gemm_reducescatter, run_medium_grained, run_nonoverlap, CommPlan, EngineConfig,
    EventKind, MediumOp, SignalBoard, TransferMode, WriteMode,
};
use tpoverlap::matrix::SharedMatrix;
use tpoverlap::oracle::{dense_oracle, max_rel_error, DETERMINISTIC_RTOL, NONDETERMINISTIC_RTOL};
use tpoverlap::swizzle::{SwizzleKind, Topology};
use tpoverlap::{Matrix, Pattern, ProblemSpec, ShardedWorkspace, TileShape};

fn bitwise(a: &[Matrix], b: &[Matrix]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape()
                && x.as_slice().iter().zip(y.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

fn cfg(workers: usize, jitter: Option<u64>) -> EngineConfig {
    EngineConfig {
        workers_per_rank: Some(workers),
        jitter_seed: jitter,
        ..EngineConfig::default()
    }
}

#[test]
fn rs_tp2_golden_in_both_write_modes() {
    let case = golden_case("rs_tp2_m8n4k4_seed42");
    let ws = case.workspace();
    let want = case.expected();
    let tile = TileShape::new(2, 2);
    let mut outs = Vec::new();
    for mode in [WriteMode::WriteAlltoAll, WriteMode::FusedReduce] {
        for swizzle in [SwizzleKind::Naive, SwizzleKind::RankShifted] {
            let run = run_fused_gemm_reducescatter(&ws, tile, mode, swizzle, &cfg(2, None)).unwrap();
            assert!(bitwise(&run.outputs, &want), "{mode} {swizzle}");
            outs.push(run.outputs);
        }
    }
    let nondet = EngineConfig {
        deterministic: false,
        ..cfg(3, Some(1))
    };
    let run = run_fused_gemm_reducescatter(&ws, tile, WriteMode::FusedReduce, SwizzleKind::RankShifted, &nondet)
        .unwrap();
    assert!(max_rel_error(&run.outputs, &outs[0]).unwrap() <= NONDETERMINISTIC_RTOL);
}

#[test]
fn rs_tp1_is_plain_gemm_without_remote_writes() {
    let p = ProblemSpec::new(8, 6, 5, 1, Pattern::GemmReduceScatter).unwrap();
    let ws = ShardedWorkspace::random(p, 3).unwrap();
    let plain = tpoverlap::matrix::tiled_gemm(&ws.a_shards[0], &ws.b_shards[0], 2, 3).unwrap();
    for mode in [WriteMode::WriteAlltoAll, WriteMode::FusedReduce] {
        let run = run_fused_gemm_reducescatter(&ws, TileShape::new(2, 3), mode, SwizzleKind::RankShifted, &cfg(2, None))
            .unwrap();
        assert!(bitwise(&run.outputs, std::slice::from_ref(&plain)));
        assert_eq!(run.log.count(EventKind::RemoteWrite), 0);
        assert_eq!(run.log.count(EventKind::LocalWrite), 8);
    }
}

#[test]
fn rs_fused_reduce_accumulates_tp_times_per_tile() {
    let case = golden_case("rs_tp4_m16n16k16_seed42");
    let ws = case.workspace();
    let tile = TileShape::new(2, 4);
    let run = run_fused_gemm_reducescatter(&ws, tile, WriteMode::FusedReduce, SwizzleKind::RankShifted, &cfg(2, None))
        .unwrap();
    assert!(bitwise(&run.outputs, &case.expected()));
    // 4 ranks x (16/2 * 16/4) tiles, each folded once into its owner
    assert_eq!(run.log.count(EventKind::Accumulate), 4 * 32);
    for owner in 0..4 {
        let per_owner = run.log.of_kind(EventKind::Accumulate).filter(|e| e.peer == Some(owner)).count();
        assert_eq!(per_owner, 4 * 8);
    }

    let staged = run_fused_gemm_reducescatter(&ws, tile, WriteMode::WriteAlltoAll, SwizzleKind::Naive, &cfg(1, None))
        .unwrap();
    assert!(bitwise(&staged.outputs, &case.expected()));
    assert_eq!(staged.log.count(EventKind::RemoteWrite), 4 * 24);
    assert_eq!(staged.log.count(EventKind::LocalWrite), 4 * 8);
    assert_eq!(staged.log.count(EventKind::Reduce), 4);
}

#[test]
fn rs_rejects_wrong_pattern_and_bad_tile() {
    let ws = golden_case("ag_tp4_m16n8k8_seed42").workspace();
    let cfg = EngineConfig::default();
    assert!(run_fused_gemm_reducescatter(&ws, TileShape::new(2, 2), WriteMode::FusedReduce, SwizzleKind::Naive, &cfg)
        .is_err());
    let ws = golden_case("rs_tp2_m8n4k4_seed42").workspace();
    assert!(run_fused_gemm_reducescatter(&ws, TileShape::new(3, 2), WriteMode::FusedReduce, SwizzleKind::Naive, &cfg)
        .is_err());
}

#[test]
fn rs_missing_peer_is_a_directory_error() {
    let mut ws = golden_case("rs_tp4_m16n16k16_seed42").workspace();
    ws.a_shards.pop();
    ws.b_shards.pop();
    let err = run_fused_gemm_reducescatter(
        &ws,
        TileShape::new(2, 2),
        WriteMode::FusedReduce,
        SwizzleKind::Naive,
        &EngineConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, tpoverlap::Error::Directory { rank: 3 }), "{err}");
}

#[test]
fn ag_tp4_golden_pull_sets_every_remote_flag_once() {
    let case = golden_case("ag_tp4_m16n8k8_seed42");
    let ws = case.workspace();
    let topo = Topology::nvlink_ring();
    let plan = CommPlan::per_rank(&ws.problem, &topo).unwrap();
    let run = run_fused_allgather_gemm(
        &ws,
        TileShape::new(2, 2),
        &plan,
        TransferMode::Pull,
        SwizzleKind::ArrivalAligned,
        &topo,
        &cfg(2, None),
    )
    .unwrap();
    assert!(bitwise(&run.outputs, &case.expected()));
    assert_eq!(run.log.count(EventKind::FlagPreset), 4);
    assert_eq!(run.log.count(EventKind::FlagSet), 12);
    for r in 0..4 {
        let mut flags: Vec<usize> = run
            .log
            .of_kind(EventKind::FlagSet)
            .filter(|e| e.rank == r)
            .map(|e| e.tile_row)
            .collect();
        flags.sort_unstable();
        let want: Vec<usize> = (0..4).filter(|&f| f != r).collect();
        assert_eq!(flags, want);
        // pull: every flag on r's board was set by r's own agent
        assert!(run.log.of_kind(EventKind::FlagSet).filter(|e| e.rank == r).all(|e| e.peer == Some(r)));
    }
    assert!(causality_violations(&run.log, |row| row * 2 / 4..row * 2 / 4 + 1).is_empty());
}

#[test]
fn ag_push_matches_pull_and_sets_remote_boards() {
    let case = golden_case("ag_tp4_m16n8k8_seed42");
    let ws = case.workspace();
    let topo = Topology::nvlink_ring();
    let plan = CommPlan::per_rank(&ws.problem, &topo).unwrap();
    let tile = TileShape::new(2, 2);
    let run = |mode| {
        run_fused_allgather_gemm(&ws, tile, &plan, mode, SwizzleKind::ArrivalAligned, &topo, &cfg(2, None)).unwrap()
    };
    let pull = run(TransferMode::Pull);
    let push = run(TransferMode::Push);
    assert!(bitwise(&pull.outputs, &push.outputs));
    let sets = |out: &tpoverlap::engine::RunOutput| {
        let mut v: Vec<(usize, usize)> =
            out.log.of_kind(EventKind::FlagSet).map(|e| (e.rank, e.tile_row)).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(sets(&pull), sets(&push));
    // push: the setter of rank r's flag f is the owner of block f
    for e in push.log.of_kind(EventKind::FlagSet) {
        assert_eq!(e.peer, Some(e.tile_row));
        assert_ne!(e.peer, Some(e.rank));
    }
}

#[test]
fn ag_tp1_has_only_preset_flags_and_no_waits() {
    let p = ProblemSpec::new(8, 4, 6, 1, Pattern::AllGatherGemm).unwrap();
    let ws = ShardedWorkspace::random(p, 9).unwrap();
    let topo = Topology::nvlink_ring();
    let plan = CommPlan::new(&p, &topo, 2).unwrap();
    let run = run_fused_allgather_gemm(&ws, TileShape::new(2, 2), &plan, TransferMode::Pull, SwizzleKind::Naive, &topo, &cfg(2, None))
        .unwrap();
    assert_eq!(run.log.count(EventKind::WaitBegin), 0);
    assert_eq!(run.log.count(EventKind::FlagSet), 0);
    assert_eq!(run.log.count(EventKind::FlagPreset), 4);
    assert!(bitwise(&run.outputs, &dense_oracle(&ws).unwrap()));
}

#[test]
fn ag_preset_count_equals_local_comm_tiles() {
    let p = ProblemSpec::new(32, 8, 4, 4, Pattern::AllGatherGemm).unwrap();
    let ws = ShardedWorkspace::random(p, 5).unwrap();
    let topo = Topology::nvlink_ring();
    for c in [8, 4, 2] {
        let plan = CommPlan::new(&p, &topo, c).unwrap();
        let run = run_fused_allgather_gemm(&ws, TileShape::new(2, 2), &plan, TransferMode::Push, SwizzleKind::Naive, &topo, &cfg(1, None))
            .unwrap();
        for r in 0..4 {
            let presets = run.log.of_kind(EventKind::FlagPreset).filter(|e| e.rank == r).count();
            assert_eq!(presets, 8 / c);
            assert_eq!(run.transfers[r].len(), 3 * 8 / c);
        }
    }
}

#[test]
fn host_loop_counts_and_orders() {
    // tp=2, one comm tile per peer
    let p = ProblemSpec::new(4, 2, 3, 2, Pattern::AllGatherGemm).unwrap();
    let ws = ShardedWorkspace::random(p, 1).unwrap();
    let plan = CommPlan::per_rank(&p, &Topology::nvlink_ring()).unwrap();
    let gather: Vec<SharedMatrix> = (0..2).map(|_| SharedMatrix::zeros(4, 3)).collect();
    let boards: Vec<SignalBoard> = (0..2).map(|r| SignalBoard::new(r, 2)).collect();
    let (recs, log) = host_transfer_loop(0, &ws.a_shards, &gather, &boards, &plan.specs[0], TransferMode::Pull).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(log.iter().filter(|e| e.event == EventKind::FlagSet).count(), 1);
    assert!(recs.iter().all(|r| r.copy_complete_ts <= r.flag_set_ts));
    assert_eq!(gather[0].read_rows(2..4), ws.a_shards[1].as_slice());

    // tp=4, half-block comm tiles: 3 peers x 2
    let p = ProblemSpec::new(16, 4, 2, 4, Pattern::AllGatherGemm).unwrap();
    let ws = ShardedWorkspace::random(p, 1).unwrap();
    let plan = CommPlan::new(&p, &Topology::nvlink_ring(), 2).unwrap();
    let gather: Vec<SharedMatrix> = (0..4).map(|_| SharedMatrix::zeros(16, 2)).collect();
    let boards: Vec<SignalBoard> = (0..4).map(|r| SignalBoard::new(r, 8)).collect();
    let (recs, _) = host_transfer_loop(2, &ws.a_shards, &gather, &boards, &plan.specs[2], TransferMode::Pull).unwrap();
    assert_eq!(recs.len(), 6);
    let peers: Vec<usize> = recs.iter().map(|r| r.descriptor.source).collect();
    assert_eq!(peers, vec![3, 3, 0, 0, 1, 1]);
}

#[test]
fn host_loop_rejects_out_of_bounds_descriptor() {
    let p = ProblemSpec::new(8, 2, 2, 2, Pattern::AllGatherGemm).unwrap();
    let ws = ShardedWorkspace::random(p, 1).unwrap();
    let mut spec = CommPlan::per_rank(&p, &Topology::nvlink_ring()).unwrap().specs[0].clone();
    spec.order[0].rows = 8..12;
    let gather: Vec<SharedMatrix> = (0..2).map(|_| SharedMatrix::zeros(8, 2)).collect();
    let boards: Vec<SignalBoard> = (0..2).map(|r| SignalBoard::new(r, 2)).collect();
    let err = host_transfer_loop(0, &ws.a_shards, &gather, &boards, &spec, TransferMode::Pull).unwrap_err();
    assert!(matches!(err, tpoverlap::Error::Bounds(_)), "{err}");
}

#[test]
fn nonoverlap_matches_golden_bitwise() {
    for name in ["ag_tp4_m16n16k16_seed42", "rs_tp4_m16n16k16_seed42"] {
        let case = golden_case(name);
        let out = run_nonoverlap(&case.workspace(), TileShape::new(2, 2)).unwrap();
        assert!(bitwise(&out, &case.expected()), "{name}");
    }
}

#[test]
fn nonoverlap_duplicates_rows_for_equal_shards() {
    let p = ProblemSpec::new(4, 4, 3, 2, Pattern::AllGatherGemm).unwrap();
    let mut ws = ShardedWorkspace::random(p, 8).unwrap();
    ws.a_shards[1] = ws.a_shards[0].clone();
    let out = run_nonoverlap(&ws, TileShape::new(1, 2)).unwrap();
    for c in &out {
        assert_eq!(c.row(0), c.row(2));
        assert_eq!(c.row(1), c.row(3));
    }
}

#[test]
fn medium_rs_tp2_alternates_gemm_and_add() {
    let case = golden_case("rs_tp2_m8n4k4_seed42");
    let (out, trace) = run_medium_grained(&case.workspace(), TileShape::new(2, 2), 2).unwrap();
    assert!(max_rel_error(&out, &case.expected()).unwrap() <= DETERMINISTIC_RTOL);
    for r in 0..2 {
        let kinds: Vec<&str> = trace
            .iter()
            .filter(|s| s.rank == r)
            .filter_map(|s| match s.op {
                MediumOp::ChunkGemm { .. } => Some("gemm"),
                MediumOp::Add { .. } => Some("add"),
                _ => None,
            })
            .collect();
        assert_eq!(kinds, vec!["gemm", "gemm", "add"]);
    }
}

#[test]
fn medium_tp4_eight_partitions_match_golden() {
    for name in ["rs_tp4_m16n16k16_seed42", "ag_tp4_m16n16k16_seed42"] {
        let case = golden_case(name);
        let (out, trace) = run_medium_grained(&case.workspace(), TileShape::new(2, 2), 8).unwrap();
        assert!(max_rel_error(&out, &case.expected()).unwrap() <= DETERMINISTIC_RTOL, "{name}");
        for r in 0..4 {
            let gemms = trace
                .iter()
                .filter(|s| s.rank == r && matches!(s.op, MediumOp::ChunkGemm { .. }))
                .count();
            assert_eq!(gemms, 8);
        }
    }
}

#[test]
fn medium_tp1_equals_nonoverlap() {
    for pattern in Pattern::ALL {
        let p = ProblemSpec::new(6, 4, 5, 1, pattern).unwrap();
        let ws = ShardedWorkspace::random(p, 2).unwrap();
        let (med, _) = run_medium_grained(&ws, TileShape::new(3, 2), 1).unwrap();
        assert!(bitwise(&med, &run_nonoverlap(&ws, TileShape::new(3, 2)).unwrap()));
    }
    let p = ProblemSpec::new(6, 4, 5, 1, Pattern::GemmReduceScatter).unwrap();
    let ws = ShardedWorkspace::random(p, 2).unwrap();
    assert!(run_medium_grained(&ws, TileShape::new(3, 2), 3).is_err());
}

#[test]
fn jittered_runs_are_bitwise_stable() {
    let case = golden_case("rs_tp4_m16n16k16_seed42");
    let ws = case.workspace();
    for seed in 0..5 {
        let run = run_fused_gemm_reducescatter(&ws, TileShape::new(2, 2), WriteMode::FusedReduce, SwizzleKind::Naive, &cfg(3, Some(seed)))
            .unwrap();
        assert!(bitwise(&run.outputs, &case.expected()), "seed {seed}");
    }
    let case = golden_case("ag_tp4_m16n16k16_seed42");
    let ws = case.workspace();
    let topo = Topology::nvlink_ring();
    let plan = CommPlan::new(&ws.problem, &topo, 2).unwrap();
    for seed in 0..5 {
        let run = run_fused_allgather_gemm(&ws, TileShape::new(2, 4), &plan, TransferMode::Push, SwizzleKind::ArrivalAligned, &topo, &cfg(3, Some(seed)))
            .unwrap();
        assert!(bitwise(&run.outputs, &case.expected()), "seed {seed}");
        assert!(causality_violations(&run.log, |row| row..row + 1).is_empty());
    }
}

fn problem_strategy() -> impl Strategy<Value = (ProblemSpec, TileShape, u64)> {
    (
        prop::sample::select(vec![1usize, 2, 4, 8]),
        1usize..=3,
        1usize..=3,
        1usize..=4,
        1usize..=3,
        prop::sample::select(vec![1usize, 2]),
        prop::sample::select(vec![1usize, 2]),
        prop::sample::select(Pattern::ALL.to_vec()),
        any::<u64>(),
    )
        .prop_map(|(tp, row_tiles, col_tiles, kk, tn_mult, tm, tn, pattern, seed)| {
            let m = tp * row_tiles * tm * 2;
            let local_n = col_tiles * tn;
            let n = match pattern {
                Pattern::AllGatherGemm => local_n * tp,
                Pattern::GemmReduceScatter => local_n,
            };
            let k = kk * tn_mult * tp;
            let p = ProblemSpec::new(m, n, k, tp, pattern).unwrap();
            (p, TileShape::new(tm, tn), seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_strategy_matches_the_oracle((p, tile, seed) in problem_strategy()) {
        let ws = ShardedWorkspace::random(p, seed).unwrap();
        let want = dense_oracle(&ws).unwrap();
        let cfg = cfg(2, Some(seed));
        prop_assert!(bitwise(&run_nonoverlap(&ws, tile).unwrap(), &want));
        for partitions in [p.tp, 2 * p.tp] {
            let (out, _) = run_medium_grained(&ws, tile, partitions).unwrap();
            prop_assert!(max_rel_error(&out, &want).unwrap() <= DETERMINISTIC_RTOL);
        }
        match p.pattern {
            Pattern::AllGatherGemm => {
                let topo = Topology::nvlink_ring();
                let plan = CommPlan::new(&p, &topo, tile.tm).unwrap();
                for mode in [TransferMode::Pull, TransferMode::Push] {
                    let run = run_fused_allgather_gemm(&ws, tile, &plan, mode, SwizzleKind::ArrivalAligned, &topo, &cfg).unwrap();
                    prop_assert!(bitwise(&run.outputs, &want));
                }
            }
            Pattern::GemmReduceScatter => {
                for mode in [WriteMode::WriteAlltoAll, WriteMode::FusedReduce] {
                    let run = run_fused_gemm_reducescatter(&ws, tile, mode, SwizzleKind::RankShifted, &cfg).unwrap();
                    prop_assert!(bitwise(&run.outputs, &want));
                }
            }
        }
    }
}
