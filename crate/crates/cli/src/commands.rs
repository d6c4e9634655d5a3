use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use tpoverlap::engine::{run_medium_grained, run_nonoverlap};
use tpoverlap::exec::Exec;
use tpoverlap::oracle::{dense_oracle, max_rel_error, DETERMINISTIC_RTOL, NONDETERMINISTIC_RTOL};
use tpoverlap::sim::{
    chrome_trace, metrics, read_timelines_jsonl, simulate_batch, write_timelines_jsonl, SimCase,
    Strategy, Timeline, METRICS_CSV_HEADER,
};
use tpoverlap::tune::{run_fused, summarize, tune, tune_cached, TuneOptions, DISPERSION_LIMIT};
use tpoverlap::{Error, Matrix, Pattern, Result, ShardedWorkspace};

use crate::config::RunConfig;

/// What a command produced. `passed` is false when outputs disagree with the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub report: String,
    pub files: Vec<PathBuf>,
}

fn create(out: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    Ok((path.clone(), BufWriter::new(File::create(&path)?)))
}

fn write_meta(out: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let (path, mut w) = create(out, &format!("{command}_meta.json"))?;
    let meta = json!({ "command": command, "seed": cfg.seed, "config": cfg });
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

fn run_strategy(strategy: Strategy, ws: &ShardedWorkspace, cfg: &RunConfig) -> Result<Vec<Matrix>> {
    match strategy {
        Strategy::Coarse => run_nonoverlap(ws, cfg.tile),
        Strategy::Medium => Ok(run_medium_grained(ws, cfg.tile, cfg.overlap.partitions_for(&ws.problem))?.0),
        Strategy::Fine => Ok(run_fused(ws, &cfg.fine_config(), &cfg.machine.topology, &cfg.engine)?.outputs),
    }
}

fn tolerance(strategy: Strategy, cfg: &RunConfig) -> f64 {
    if strategy == Strategy::Fine && !cfg.engine.deterministic {
        NONDETERMINISTIC_RTOL
    } else {
        DETERMINISTIC_RTOL
    }
}

/// Runs every configured strategy on the seeded problem and compares with the oracle.
pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let p = cfg.problem;
    let ws = ShardedWorkspace::random(p, cfg.seed)?;
    let want = dense_oracle(&ws)?;
    let (csv_path, mut csv) = create(out, "verify.csv")?;
    writeln!(csv, "strategy,pattern,m,n,k,tp,seed,max_rel_error,tolerance,pass")?;
    let mut report = format!("verify {p} tile {} seed {}\n", cfg.tile, cfg.seed);
    let mut passed = true;
    for &s in &cfg.strategies {
        let err = max_rel_error(&run_strategy(s, &ws, cfg)?, &want)?;
        let tol = tolerance(s, cfg);
        let ok = err <= tol;
        passed &= ok;
        writeln!(csv, "{s},{},{},{},{},{},{},{err:e},{tol:e},{ok}", p.pattern, p.m, p.n, p.k, p.tp, cfg.seed)?;
        let _ = writeln!(
            report,
            "  {s:<7} max_rel_error {err:.3e} (tol {tol:.0e}) {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    csv.flush()?;
    let meta = write_meta(out, "verify", cfg)?;
    Ok(Outcome {
        passed,
        report,
        files: vec![csv_path, meta],
    })
}

/// Simulates every strategy over the sweep and writes one metrics row each.
/// Efficiency is measured against the coarse strategy of the same problem.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let problems = cfg.sweep_problems();
    let mut cases = Vec::new();
    for p in &problems {
        let baseline = std::iter::once(Strategy::Coarse);
        for strategy in baseline.chain(cfg.strategies.iter().copied()) {
            cases.push(SimCase {
                strategy,
                problem: *p,
                tile: cfg.tile,
                machine: cfg.machine,
                knobs: cfg.overlap,
            });
        }
    }
    let timelines = simulate_batch(Exec::default(), &cases)
        .into_iter()
        .collect::<Result<Vec<Timeline>>>()?;
    let per_problem = cfg.strategies.len() + 1;
    let (csv_path, mut csv) = create(out, "sweep.csv")?;
    writeln!(csv, "{METRICS_CSV_HEADER}")?;
    let mut kept = Vec::new();
    let mut rows = 0;
    for (p, group) in problems.iter().zip(timelines.chunks(per_problem)) {
        let base = &group[0];
        for t in &group[1..] {
            let mt = metrics(t, base, p, &cfg.tile, &cfg.machine);
            writeln!(csv, "{}", mt.csv_row())?;
            rows += 1;
            kept.push(t.clone());
        }
    }
    csv.flush()?;
    let (jsonl_path, mut jsonl) = create(out, "timelines.jsonl")?;
    write_timelines_jsonl(&mut jsonl, &kept)?;
    jsonl.flush()?;
    let meta = write_meta(out, "sweep", cfg)?;
    Ok(Outcome {
        passed: true,
        report: format!("sweep: {rows} rows over {} problems\n", problems.len()),
        files: vec![csv_path, jsonl_path, meta],
    })
}

/// Header of `bench.csv` for `reps` repetitions.
pub fn bench_header(reps: usize) -> String {
    let mut h = String::from("strategy,pattern,m,n,k,tp,seed,warmup");
    for i in 1..=reps {
        let _ = write!(h, ",rep_{i}_us");
    }
    h.push_str(",median_us,dispersion,flagged");
    h
}

/// Wall-clock timing of the engine for every configured strategy.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let p = cfg.problem;
    let ws = ShardedWorkspace::random(p, cfg.seed)?;
    let want = dense_oracle(&ws)?;
    let reps = cfg.bench.repetitions;
    let (csv_path, mut csv) = create(out, "bench.csv")?;
    writeln!(csv, "{}", bench_header(reps))?;
    let mut report = format!("bench {p} tile {} warmup {} reps {reps}\n", cfg.tile, cfg.bench.warmup);
    let mut passed = true;
    for &s in &cfg.strategies {
        let err = max_rel_error(&run_strategy(s, &ws, cfg)?, &want)?;
        if err > tolerance(s, cfg) {
            passed = false;
            let _ = writeln!(report, "  {s:<7} FAIL max_rel_error {err:.3e}, not timed");
            continue;
        }
        for _ in 0..cfg.bench.warmup {
            run_strategy(s, &ws, cfg)?;
        }
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            run_strategy(s, &ws, cfg)?;
            samples.push(t.elapsed().as_secs_f64() * 1e6);
        }
        let (med, disp) = summarize(&samples);
        let flagged = disp > DISPERSION_LIMIT;
        write!(csv, "{s},{},{},{},{},{},{},{}", p.pattern, p.m, p.n, p.k, p.tp, cfg.seed, cfg.bench.warmup)?;
        for x in &samples {
            write!(csv, ",{x:.3}")?;
        }
        writeln!(csv, ",{med:.3},{disp:.4},{flagged}")?;
        let _ = writeln!(
            report,
            "  {s:<7} median {med:>12.1} us  dispersion {disp:.3}{}",
            if flagged { "  (noisy)" } else { "" }
        );
    }
    csv.flush()?;
    let meta = write_meta(out, "bench", cfg)?;
    Ok(Outcome {
        passed,
        report,
        files: vec![csv_path, meta],
    })
}

/// Tunes the fused kernel over the configured knob space.
pub fn cmd_tune(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let p = cfg.problem;
    let configs = cfg.knob_space().configs(&p)?;
    let opts = TuneOptions {
        objective: cfg.tune.objective,
        repetitions: cfg.tune.repetitions,
        machine: cfg.machine,
        engine: cfg.engine,
        exec: match cfg.tune.objective {
            tpoverlap::tune::Objective::SimulatedTime => Exec::default(),
            tpoverlap::tune::Objective::EngineWallClock => Exec::Sequential,
        },
    };
    let needs_ws = cfg.tune.check_oracle || cfg.tune.objective == tpoverlap::tune::Objective::EngineWallClock;
    let ws = if needs_ws { Some(ShardedWorkspace::random(p, cfg.seed)?) } else { None };
    let result = if cfg.tune.cache {
        tune_cached(&out.join("cache"), &p, ws.as_ref(), &configs, &opts)?
    } else {
        tune(&p, ws.as_ref(), &configs, &opts)?
    };
    let (csv_path, mut csv) = create(out, "tune.csv")?;
    result.write_csv(&mut csv)?;
    csv.flush()?;
    let (json_path, mut js) = create(out, "tune.json")?;
    serde_json::to_writer_pretty(&mut js, &result)?;
    js.flush()?;
    let meta = write_meta(out, "tune", cfg)?;
    let mut report = format!(
        "tune {p}: {} configs, objective {}\n  best {} at {:.3} us\n",
        result.table.len(),
        result.objective,
        result.best_config,
        result.objective_us
    );
    if let Some(path) = &result.cached_from {
        let _ = writeln!(report, "  cache hit: {}", path.display());
    }
    Ok(Outcome {
        passed: true,
        report,
        files: vec![csv_path, json_path, meta],
    })
}

/// Files `report` reads, with the command that writes each.
pub const REPORT_INPUTS: [(&str, &str); 4] = [
    ("sweep.csv", "tpoverlap sweep"),
    ("timelines.jsonl", "tpoverlap sweep"),
    ("bench.csv", "tpoverlap bench"),
    ("tune.csv", "tpoverlap tune"),
];

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{} is empty", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != header.len()) {
            return Err(Error::Parse(format!("{} line {}: wrong column count", path.display(), i + 2)));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("missing column {name}")))
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

/// Per-pattern comparison tables from `sweep.csv`: one row per problem, one
/// overall/efficiency column pair per strategy.
fn sweep_tables(csv: &Csv, out: &Path, files: &mut Vec<PathBuf>, report: &mut String) -> Result<()> {
    let [cs, cp, cm, cn, ck, ct, co, ce] =
        ["strategy", "pattern", "m", "n", "k", "tp", "overall_us", "efficiency"].map(|c| csv.col(c));
    let (cs, cp, cm, cn, ck, ct, co, ce) = (cs?, cp?, cm?, cn?, ck?, ct?, co?, ce?);
    let mut by_pattern: BTreeMap<Pattern, BTreeMap<(usize, String), BTreeMap<Strategy, (f64, f64)>>> = BTreeMap::new();
    let mut strategies = std::collections::BTreeSet::new();
    for r in &csv.rows {
        let pattern: Pattern = r[cp].parse()?;
        let strategy: Strategy = r[cs].parse()?;
        let m: usize = r[cm].parse().map_err(|_| Error::Parse(format!("bad m {:?}", r[cm])))?;
        let shape = format!("n={} k={} tp={}", r[cn], r[ck], r[ct]);
        strategies.insert(strategy);
        by_pattern
            .entry(pattern)
            .or_default()
            .entry((m, shape))
            .or_default()
            .insert(strategy, (parse_f64(&r[co])?, parse_f64(&r[ce])?));
    }
    for (pattern, rows) in &by_pattern {
        let (path, mut w) = create(out, &format!("report_{}.csv", pattern.short()))?;
        let mut header = String::from("m,n_k_tp");
        for s in &strategies {
            let _ = write!(header, ",{s}_overall_us,{s}_efficiency");
        }
        writeln!(w, "{header}")?;
        let _ = writeln!(report, "\n{pattern}");
        let mut line = format!("  {:>8} {:<20}", "m", "shape");
        for s in &strategies {
            let _ = write!(line, " {:>14} {:>8}", format!("{s} us"), "eff");
        }
        let _ = writeln!(report, "{line}");
        for ((m, shape), cells) in rows {
            write!(w, "{m},{shape}")?;
            let mut line = format!("  {m:>8} {shape:<20}");
            for s in &strategies {
                match cells.get(s) {
                    Some((o, e)) => {
                        write!(w, ",{o:.6},{e:.6}")?;
                        let _ = write!(line, " {o:>14.1} {e:>8.3}");
                    }
                    None => {
                        write!(w, ",,")?;
                        let _ = write!(line, " {:>14} {:>8}", "-", "-");
                    }
                }
            }
            writeln!(w)?;
            let _ = writeln!(report, "{line}");
        }
        w.flush()?;
        files.push(path);
    }
    Ok(())
}

/// Aggregates the artifacts in `dir` into comparison tables and Chrome traces.
pub fn cmd_report(dir: &Path) -> Result<Outcome> {
    let present: Vec<_> = REPORT_INPUTS.iter().filter(|(f, _)| dir.join(f).is_file()).collect();
    if present.is_empty() {
        let expected: Vec<String> = REPORT_INPUTS.iter().map(|(f, by)| format!("{f} (from `{by}`)")).collect();
        return Err(Error::Config(format!(
            "no report inputs in {}; expected at least one of: {}",
            dir.display(),
            expected.join(", ")
        )));
    }
    let mut files = Vec::new();
    let mut report = format!("report for {}\n", dir.display());
    let sweep = dir.join("sweep.csv");
    if sweep.is_file() {
        sweep_tables(&Csv::read(&sweep)?, dir, &mut files, &mut report)?;
    }
    let timelines = dir.join("timelines.jsonl");
    if timelines.is_file() {
        let all = read_timelines_jsonl(BufReader::new(File::open(&timelines)?))?;
        for pattern in Pattern::ALL {
            let of: Vec<Timeline> = all.iter().filter(|t| t.problem.pattern == pattern).cloned().collect();
            if of.is_empty() {
                continue;
            }
            let (path, mut w) = create(dir, &format!("trace_{}.json", pattern.short()))?;
            serde_json::to_writer(&mut w, &chrome_trace(&of))?;
            w.flush()?;
            files.push(path);
        }
    }
    let bench = dir.join("bench.csv");
    if bench.is_file() {
        let csv = Csv::read(&bench)?;
        let (cs, cp, cm, cd) = (csv.col("strategy")?, csv.col("pattern")?, csv.col("median_us")?, csv.col("dispersion")?);
        let _ = writeln!(report, "\nbench");
        for r in &csv.rows {
            let _ = writeln!(report, "  {:<7} {:<20} median {:>12} us  dispersion {}", r[cs], r[cp], r[cm], r[cd]);
        }
    }
    let tune_csv = dir.join("tune.csv");
    if tune_csv.is_file() {
        let csv = Csv::read(&tune_csv)?;
        let (ce, co, cb) = (csv.col("encoding")?, csv.col("objective_us")?, csv.col("best")?);
        if let Some(best) = csv.rows.iter().find(|r| r[cb] == "true") {
            let _ = writeln!(report, "\ntune: {} configs, best {} at {} us", csv.rows.len(), best[ce], best[co]);
        }
    }
    let path = dir.join("report.txt");
    fs::write(&path, &report)?;
    files.push(path);
    Ok(Outcome {
        passed: true,
        report,
        files,
    })
}
