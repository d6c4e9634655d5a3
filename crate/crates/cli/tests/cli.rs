use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use tpoverlap::engine::{EngineConfig, TransferMode, WriteMode};
use tpoverlap::sim::{MachineModel, OverlapKnobs, Strategy, METRICS_CSV_HEADER};
use tpoverlap::swizzle::{SwizzleKind, Topology};
use tpoverlap::tune::{KnobSpace, Objective};
use tpoverlap::{Error, Pattern, ProblemSpec, TileShape};
use tpoverlap_cli::commands::bench_header;
use tpoverlap_cli::config::{parse_strategies, BenchConfig, RunConfig, SweepConfig, TuneSettings};
use tpoverlap_cli::{exit_code, EXIT_CONFIG, EXIT_FAILED};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tpoverlap-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tpoverlap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpoverlap")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SWEEP: &str = r#"
seed = 3
[problem]
m = 64
n = 64
k = 64
tp = 2
pattern = "allgather_gemm"
[tile]
tm = 16
tn = 16
[machine]
sm_count = 4
flops_per_us = 1.0e4
launch_overhead_us = 2.0
link_bw_bytes_per_us = 1.0e3
link_latency_us = 1.0
bytes_per_element = 2
elementwise_per_us = 1.0e4
[sweep]
m = [64, 128, 256, 512]
patterns = ["allgather_gemm", "gemm_reducescatter"]
"#;

#[test]
fn default_machine_file_is_the_default_machine() {
    let text = fs::read_to_string(repo().join("configs/default_machine.toml")).unwrap();
    let m: MachineModel = toml::from_str(&text).unwrap();
    assert_eq!(m, MachineModel::default());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut seen = 0;
    for entry in fs::read_dir(repo().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "default_machine.toml" {
            continue;
        }
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 5);
}

#[test]
fn unknown_keys_are_rejected_with_their_name() {
    let base = "[problem]\nm = 8\nn = 8\nk = 8\ntp = 2\npattern = \"allgather_gemm\"\n[tile]\ntm = 2\ntn = 2\n";
    assert!(RunConfig::from_toml_str(base).is_ok());
    let top = format!("colour = 1\n{base}");
    let nested = base.replace("tm = 2", "tm = 2\ntk = 4");
    let machine = format!("{base}[machine]\nsm_count = 2\nflops_per_us = 1.0\nlaunch_overhead_us = 0.0\nlink_bw_bytes_per_us = 1.0\nlink_latency_us = 0.0\nbytes_per_element = 2\nelementwise_per_us = 1.0\nwarp_size = 32\n");
    for (text, key) in [(top, "colour"), (nested, "tk"), (machine, "warp_size")] {
        let err = RunConfig::from_toml_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse(_)));
        assert!(msg.contains(key) && msg.contains("line"), "{msg}");
    }
}

#[test]
fn csv_headers_are_stable() {
    assert_eq!(METRICS_CSV_HEADER, "strategy,pattern,m,n,k,tp,overall_us,gemm_us,ect_us,efficiency");
    assert_eq!(
        bench_header(2),
        "strategy,pattern,m,n,k,tp,seed,warmup,rep_1_us,rep_2_us,median_us,dispersion,flagged"
    );
}

#[test]
fn strategy_lists() {
    assert_eq!(parse_strategies("fine, coarse").unwrap(), vec![Strategy::Fine, Strategy::Coarse]);
    assert!(parse_strategies("").unwrap().is_empty());
    assert!(parse_strategies("fine,fastest").is_err());
}

#[test]
fn exit_codes() {
    assert_eq!(exit_code(&Error::Mismatch("x".into())), EXIT_FAILED);
    assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_CONFIG);
}

#[test]
fn verify_tp1_smoke() {
    let out = scratch("verify-tp1");
    let cfg = repo().join("configs/verify_tp1.toml");
    let o = tpoverlap(&["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("verify.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains(",0e0,") && r.ends_with(",true")), "{csv}");
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("verify_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 42);
}

#[test]
fn verify_seed42_tp4_passes_and_seed_flag_is_recorded() {
    let out = scratch("verify-tp4");
    let cfg = repo().join("configs/verify_tp4_seed42.toml");
    let o = tpoverlap(&["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 3);
    let o = tpoverlap(&["verify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9", "--strategies", "fine"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out.join("verify.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("fine,gemm_reducescatter,64,32,32,4,9,"));
}

#[test]
fn non_dividing_tile_is_a_config_error() {
    let dir = scratch("bad-tile");
    let cfg = write_config(&dir, "[problem]\nm = 16\nn = 8\nk = 8\ntp = 2\npattern = \"allgather_gemm\"\n[tile]\ntm = 3\ntn = 4\n");
    let o = tpoverlap(&["verify", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tm=3"), "{}", stderr(&o));
    let o = tpoverlap(&["verify", "--config", dir.join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = tpoverlap(&["verify"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_problem_and_strategy() {
    let dir = scratch("sweep");
    let cfg = write_config(&dir, SMALL_SWEEP);
    let o = tpoverlap(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 3 * 2);
    for r in rows.iter().filter(|r| r[0] == "coarse") {
        assert_eq!(r[9], "0.000000");
    }
    let jsonl = fs::read_to_string(dir.join("timelines.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 24);
    let meta = fs::read_to_string(dir.join("sweep_meta.json")).unwrap();
    assert!(meta.contains("\"seed\": 3"));

    let o = tpoverlap(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap(), "--strategies", ""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty"));
}

#[test]
fn tp1_sweep_has_zero_baseline_efficiency() {
    let dir = scratch("sweep-tp1");
    let text = SMALL_SWEEP.replace("tp = 2", "tp = 1").replace("m = [64, 128, 256, 512]", "m = [64, 128]");
    let cfg = write_config(&dir, &text);
    let o = tpoverlap(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap(), "--strategies", "coarse,fine"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let ect: f64 = cols[8].parse().unwrap();
        assert!(ect.abs() < 1e-9, "{line}");
        assert_eq!(cols[9], "0.000000", "{line}");
    }
}

#[test]
fn report_builds_tables_and_traces() {
    let dir = scratch("report");
    let cfg = write_config(&dir, SMALL_SWEEP);
    assert_eq!(tpoverlap(&["sweep", "--config", &cfg, "--out", dir.to_str().unwrap()]).status.code(), Some(0));
    let o = tpoverlap(&["report", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["report_ag.csv", "report_rs.csv", "trace_ag.json", "trace_rs.json", "report.txt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let table = fs::read_to_string(dir.join("report_rs.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("m,n_k_tp,coarse_overall_us,coarse_efficiency,medium_overall_us"));
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("trace_ag.json")).unwrap()).unwrap();
    assert!(!trace["traceEvents"].as_array().unwrap().is_empty());
}

#[test]
fn report_on_empty_dir_lists_expected_files() {
    let dir = scratch("report-empty");
    let o = tpoverlap(&["report", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for f in ["sweep.csv", "timelines.jsonl", "bench.csv", "tune.csv"] {
        assert!(err.contains(f), "{err}");
    }
}

#[test]
fn bench_records_every_repetition() {
    let dir = scratch("bench");
    let cfg = write_config(
        &dir,
        "[problem]\nm = 16\nn = 8\nk = 8\ntp = 2\npattern = \"gemm_reducescatter\"\n[tile]\ntm = 4\ntn = 4\n[engine]\nworkers_per_rank = 1\n",
    );
    let o = tpoverlap(&["bench", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.iter().filter(|h| h.starts_with("rep_")).count(), 10);
    assert_eq!(header[header.len() - 3], "median_us");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.len(), header.len());
        assert_eq!(r[6], "42");
        assert_eq!(r[7], "3");
    }
}

#[test]
fn tune_reuses_its_cache() {
    let dir = scratch("tune");
    let cfg = repo().join("configs/tune_ag.toml");
    let args = ["tune", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    let first = tpoverlap(&args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(!stdout(&first).contains("cache hit"));
    let csv = fs::read_to_string(dir.join("tune.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    let second = tpoverlap(&args);
    assert!(stdout(&second).contains("cache hit"), "{}", stdout(&second));
    let best = |o: &Output| stdout(o).lines().find(|l| l.contains("best")).map(str::to_string);
    assert_eq!(best(&first), best(&second));
}

fn arb_config() -> impl proptest::strategy::Strategy<Value = RunConfig> {
    let problem = (1usize..5, 1usize..4, 1usize..4, prop::sample::select(vec![1usize, 2, 4]), any::<bool>())
        .prop_map(|(m, n, k, tp, rs)| {
            let pattern = if rs { Pattern::GemmReduceScatter } else { Pattern::AllGatherGemm };
            ProblemSpec::new(8 * m * tp, 8 * n * tp, 8 * k * tp, tp, pattern).unwrap()
        });
    let machine = (1usize..200, 1.0f64..1e7, 0.0f64..20.0, 1.0f64..1e6, 0.0f64..10.0, prop::option::of(1.0f64..1e6), any::<bool>())
        .prop_map(|(sm, flops, launch, bw, lat, numa, multi)| MachineModel {
            sm_count: sm,
            flops_per_us: flops,
            launch_overhead_us: launch,
            link_bw_bytes_per_us: bw,
            link_latency_us: lat,
            inter_numa_bw_bytes_per_us: numa,
            topology: if multi { Topology::multi_node(1) } else { Topology::nvlink_ring() },
            ..MachineModel::default()
        });
    let knobs = (any::<bool>(), prop::option::of(prop::sample::select(vec![SwizzleKind::Naive, SwizzleKind::RankShifted])), any::<bool>())
        .prop_map(|(push, swizzle, fused)| OverlapKnobs {
            transfer: if push { TransferMode::Push } else { TransferMode::Pull },
            swizzle,
            write_mode: if fused { WriteMode::FusedReduce } else { WriteMode::WriteAlltoAll },
            ..OverlapKnobs::default()
        });
    (
        problem,
        machine,
        knobs,
        any::<u32>(),
        prop::sample::subsequence(Strategy::ALL.to_vec(), 1..=3),
        any::<bool>(),
        prop::option::of(1usize..8),
        (0usize..5, 1usize..20),
    )
        .prop_map(|(problem, machine, overlap, seed, strategies, sweep, workers, (warmup, reps))| {
            let tile = TileShape::new(8, 8);
            RunConfig {
                seed: seed as u64,
                out: sweep.then(|| PathBuf::from("results/run")),
                strategies,
                problem,
                tile,
                machine,
                overlap,
                knobs: (!sweep).then(|| KnobSpace::for_tile(&problem, tile)),
                engine: EngineConfig {
                    workers_per_rank: workers,
                    jitter_seed: workers.map(|w| w as u64 * 7),
                    ..EngineConfig::default()
                },
                sweep: sweep.then(|| SweepConfig {
                    m: vec![problem.m, 2 * problem.m],
                    patterns: Pattern::ALL.to_vec(),
                }),
                bench: BenchConfig { warmup, repetitions: reps },
                tune: TuneSettings {
                    objective: if sweep { Objective::SimulatedTime } else { Objective::EngineWallClock },
                    ..TuneSettings::default()
                },
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in arb_config()) {
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
