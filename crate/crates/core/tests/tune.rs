use tpoverlap::engine::{EngineConfig, TransferMode, WriteMode};
use tpoverlap::exec::Exec;
use tpoverlap::sim::{simulate, MachineModel, Strategy};
use tpoverlap::swizzle::SwizzleKind;
use tpoverlap::tune::{
    cache_key, enumerate_knobs, tile_candidates, tune, tune_cached, KnobSpace, Objective,
    TuneConfig, TuneOptions, TUNE_CSV_HEADER,
};
use tpoverlap::{Error, Pattern, ProblemSpec, ShardedWorkspace, TileShape};

fn machine() -> MachineModel {
    MachineModel {
        sm_count: 16,
        flops_per_us: 1.0e5,
        link_bw_bytes_per_us: 4.0e3,
        link_latency_us: 1.0,
        elementwise_per_us: 5.0e4,
        ..MachineModel::default()
    }
}

fn ag(m: usize, tp: usize) -> ProblemSpec {
    ProblemSpec::new(m, 256, 256, tp, Pattern::AllGatherGemm).unwrap()
}

#[test]
fn halving_grid_has_twelve_points() {
    // 8 rows per rank, tm = 2
    let p = ag(32, 4);
    let configs = enumerate_knobs(&p, &TileShape::new(2, 64)).unwrap();
    assert_eq!(configs.len(), 12);
    let mut sizes: Vec<usize> = configs.iter().map(|c| c.rows_per_comm_tile).collect();
    sizes.dedup();
    sizes.sort_unstable();
    sizes.dedup();
    assert_eq!(sizes, vec![2, 4, 8]);

    let single = enumerate_knobs(&p, &TileShape::new(8, 64)).unwrap();
    assert!(single.iter().all(|c| c.rows_per_comm_tile == 8));
    assert_eq!(single.len(), 4);
}

#[test]
fn bad_tile_is_a_config_error() {
    let p = ag(32, 4);
    assert!(matches!(enumerate_knobs(&p, &TileShape::new(3, 64)), Err(Error::Config(_))));
    let empty = KnobSpace {
        transfer_modes: vec![],
        ..KnobSpace::for_tile(&p, TileShape::new(2, 64))
    };
    assert!(matches!(empty.configs(&p), Err(Error::Config(_))));
}

#[test]
fn tile_candidates_shrink_to_fit() {
    let p = ProblemSpec::new(64, 96, 32, 2, Pattern::GemmReduceScatter).unwrap();
    let tiles = tile_candidates(&p);
    assert_eq!(tiles, vec![TileShape::new(32, 32)]);
    let big = ProblemSpec::new(1024, 1024, 64, 2, Pattern::AllGatherGemm).unwrap();
    assert_eq!(tile_candidates(&big).len(), 4);
    // 512 rows per rank: four comm sizes for tm = 64, three for tm = 128
    assert_eq!(KnobSpace::full(&big).configs(&big).unwrap().len(), (4 + 3 + 4 + 3) * 2 * 2);
}

#[test]
fn simulated_pick_is_the_grid_minimum() {
    let p = ag(256, 4);
    let configs = enumerate_knobs(&p, &TileShape::new(16, 32)).unwrap();
    assert_eq!(configs.len(), 12);
    let m = machine();
    let result = tune(&p, None, &configs, &TuneOptions::simulated(m)).unwrap();
    // independent exhaustive pass
    let mut best: Option<(f64, String, TuneConfig)> = None;
    for c in &configs {
        let t = simulate(Strategy::Fine, &p, &c.tile, &m, &c.knobs()).unwrap().overall_us();
        let key = (t, c.encoding(), *c);
        if best.as_ref().is_none_or(|b| (key.0, &key.1) < (b.0, &b.1)) {
            best = Some(key);
        }
    }
    let (t, _, c) = best.unwrap();
    assert_eq!(result.best_config, c);
    assert_eq!(result.objective_us, t);
    assert!(result.table.iter().all(|r| r.objective_us >= result.objective_us));

    let seq = tune(&p, None, &configs, &TuneOptions { exec: Exec::Sequential, ..TuneOptions::simulated(m) }).unwrap();
    assert_eq!(seq, result);
}

#[test]
fn slow_links_prefer_the_coarsest_comm_tile() {
    let p = ag(512, 4);
    let slow = MachineModel {
        link_latency_us: 200.0,
        ..machine()
    };
    let configs = enumerate_knobs(&p, &TileShape::new(16, 32)).unwrap();
    let result = tune(&p, None, &configs, &TuneOptions::simulated(slow)).unwrap();
    assert_eq!(result.best_config.rows_per_comm_tile, p.rows_per_rank());
}

#[test]
fn single_config_and_ties() {
    let p = ag(64, 2);
    let configs = enumerate_knobs(&p, &TileShape::new(8, 32)).unwrap();
    let one = &configs[3..4];
    let r = tune(&p, None, one, &TuneOptions::simulated(machine())).unwrap();
    assert_eq!(r.best_config, one[0]);

    // swizzle has no effect at tp = 1, so every config ties
    let p1 = ag(64, 1);
    let configs = enumerate_knobs(&p1, &TileShape::new(8, 32)).unwrap();
    let r = tune(&p1, None, &configs, &TuneOptions::simulated(machine())).unwrap();
    let smallest = configs.iter().min_by_key(|c| c.encoding()).unwrap();
    assert!(r.table.iter().all(|row| row.objective_us == r.objective_us));
    assert_eq!(r.best_config, *smallest);
}

#[test]
fn wall_clock_checks_every_config() {
    let p = ProblemSpec::new(16, 8, 8, 2, Pattern::GemmReduceScatter).unwrap();
    let ws = ShardedWorkspace::random(p, 42).unwrap();
    let configs = enumerate_knobs(&p, &TileShape::new(4, 4)).unwrap();
    assert_eq!(configs.len(), 4);
    let engine = EngineConfig {
        workers_per_rank: Some(2),
        ..EngineConfig::default()
    };
    let r = tune(&p, Some(&ws), &configs, &TuneOptions::wall_clock(3, engine)).unwrap();
    assert_eq!(r.table.len(), 4);
    for row in &r.table {
        assert_eq!(row.repetitions, 3);
        assert_eq!(row.max_rel_error, Some(0.0));
        assert_eq!(row.flagged, row.dispersion > 0.2);
        assert!(row.objective_us >= r.objective_us);
    }
    assert!(tune(&p, Some(&ws), &configs, &TuneOptions::wall_clock(2, engine)).is_err());
    assert!(tune(&p, None, &configs, &TuneOptions::wall_clock(3, engine)).is_err());
}

#[test]
fn invalid_config_aborts_tuning() {
    let p = ag(16, 2);
    let ws = ShardedWorkspace::random(p, 7).unwrap();
    // comm size that does not divide the rows per rank
    let bad = TuneConfig {
        tile: TileShape::new(2, 4),
        transfer: TransferMode::Pull,
        rows_per_comm_tile: 3,
        swizzle: SwizzleKind::Naive,
        write_mode: WriteMode::WriteAlltoAll,
    };
    let err = tune(&p, Some(&ws), &[bad], &TuneOptions::simulated(machine())).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn cache_hit_is_reported() {
    let dir = std::env::temp_dir().join(format!("tpoverlap-tune-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let p = ag(128, 2);
    let configs = enumerate_knobs(&p, &TileShape::new(16, 32)).unwrap();
    let opts = TuneOptions::simulated(machine());
    let first = tune_cached(&dir, &p, None, &configs, &opts).unwrap();
    assert!(first.cached_from.is_none());
    let second = tune_cached(&dir, &p, None, &configs, &opts).unwrap();
    let path = second.cached_from.clone().unwrap();
    assert!(path.to_string_lossy().contains(&cache_key(&p, &configs, &opts)));
    assert_eq!(TuneResultView::from(&second), TuneResultView::from(&first));

    let other = TuneOptions::simulated(MachineModel { link_latency_us: 9.0, ..machine() });
    assert_ne!(cache_key(&p, &configs, &opts), cache_key(&p, &configs, &other));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[derive(Debug, PartialEq)]
struct TuneResultView(TuneConfig, f64, usize, Objective);

impl From<&tpoverlap::tune::TuneResult> for TuneResultView {
    fn from(r: &tpoverlap::tune::TuneResult) -> Self {
        Self(r.best_config, r.objective_us, r.table.len(), r.objective)
    }
}

#[test]
fn csv_has_one_row_per_config() {
    let p = ag(128, 2);
    let configs = enumerate_knobs(&p, &TileShape::new(16, 32)).unwrap();
    let r = tune(&p, None, &configs, &TuneOptions::simulated(machine())).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], TUNE_CSV_HEADER);
    assert_eq!(lines.len(), configs.len() + 1);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 1);
}
