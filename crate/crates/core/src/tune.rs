//! Grid search over the knobs of the fused kernels.
//!
//! Every configuration of a [`KnobSpace`] is evaluated either by timing the
//! engine (median of repetitions, each configuration checked against the
//! dense oracle first) or by simulating it. The best configuration is the one
//! with the smallest objective; ties go to the smaller [`TuneConfig::encoding`].

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{
    run_fused_allgather_gemm, run_fused_gemm_reducescatter, CommPlan, EngineConfig, RunOutput,
    TransferMode, WriteMode,
};
use crate::error::{config_err, Error, Result};
use crate::exec::Exec;
use crate::oracle::{dense_oracle, max_rel_error, DETERMINISTIC_RTOL, NONDETERMINISTIC_RTOL};
use crate::problem::{Pattern, ProblemSpec, TileShape};
use crate::sim::{simulate, MachineModel, OverlapKnobs, Strategy};
use crate::swizzle::{SwizzleKind, Topology};
use crate::workspace::ShardedWorkspace;

/// Runs flagged as noisy above this `(max - min) / median`.
pub const DISPERSION_LIMIT: f64 = 0.2;

/// Tile shapes tried when none are given, before scaling to the problem.
pub const DEFAULT_TILE_SHAPES: [(usize, usize); 4] = [(64, 64), (128, 64), (64, 128), (128, 128)];

/// Communication tile sizes: `rows_per_rank`, then halved while the result
/// is still a whole multiple of `tm`.
pub fn comm_tile_sizes(rows_per_rank: usize, tm: usize) -> Result<Vec<usize>> {
    if tm == 0 || !rows_per_rank.is_multiple_of(tm) {
        return config_err(format!("tm={tm} does not divide {rows_per_rank} rows per rank"));
    }
    let mut out = vec![rows_per_rank];
    let mut c = rows_per_rank;
    while c > tm && c.is_multiple_of(2) && (c / 2).is_multiple_of(tm) {
        c /= 2;
        out.push(c);
    }
    Ok(out)
}

/// [`DEFAULT_TILE_SHAPES`] shrunk to divide the problem, deduplicated.
pub fn tile_candidates(problem: &ProblemSpec) -> Vec<TileShape> {
    let mut out: Vec<TileShape> = DEFAULT_TILE_SHAPES
        .iter()
        .map(|&(tm, tn)| TileShape::new(gcd(tm, problem.rows_per_rank()), gcd(tn, problem.local_n())))
        .collect();
    out.sort();
    out.dedup();
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One point of the search grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub tile: TileShape,
    pub transfer: TransferMode,
    pub rows_per_comm_tile: usize,
    pub swizzle: SwizzleKind,
    pub write_mode: WriteMode,
}

impl TuneConfig {
    /// Stable text form; numbers are zero padded so text order is numeric order.
    pub fn encoding(&self) -> String {
        format!(
            "tile={:06}x{:06};transfer={};comm={:06};swizzle={};write={}",
            self.tile.tm, self.tile.tn, self.transfer, self.rows_per_comm_tile, self.swizzle, self.write_mode
        )
    }

    pub fn knobs(&self) -> OverlapKnobs {
        OverlapKnobs {
            transfer: self.transfer,
            rows_per_comm_tile: Some(self.rows_per_comm_tile),
            swizzle: Some(self.swizzle),
            write_mode: self.write_mode,
            partitions: None,
        }
    }
}

impl fmt::Display for TuneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tile {} {} comm {} {} {}",
            self.tile, self.transfer, self.rows_per_comm_tile, self.swizzle, self.write_mode
        )
    }
}

/// Candidate values of every knob. Empty `comm_tile_sizes` means the halving
/// sequence of each tile shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnobSpace {
    pub transfer_modes: Vec<TransferMode>,
    #[serde(default)]
    pub comm_tile_sizes: Vec<usize>,
    pub swizzle_policies: Vec<SwizzleKind>,
    pub gemm_tile_shapes: Vec<TileShape>,
    pub write_modes: Vec<WriteMode>,
}

impl KnobSpace {
    /// The knobs that matter for `problem`'s pattern with a fixed tile shape.
    ///
    /// AllGather: pull/push, halving comm sizes, naive/arrival-aligned.
    /// ReduceScatter: naive/rank-shifted, both write modes.
    pub fn for_tile(problem: &ProblemSpec, tile: TileShape) -> Self {
        match problem.pattern {
            Pattern::AllGatherGemm => Self {
                transfer_modes: vec![TransferMode::Pull, TransferMode::Push],
                comm_tile_sizes: Vec::new(),
                swizzle_policies: vec![SwizzleKind::Naive, SwizzleKind::ArrivalAligned],
                gemm_tile_shapes: vec![tile],
                write_modes: vec![WriteMode::WriteAlltoAll],
            },
            Pattern::GemmReduceScatter => Self {
                transfer_modes: vec![TransferMode::Pull],
                comm_tile_sizes: vec![problem.rows_per_rank()],
                swizzle_policies: vec![SwizzleKind::Naive, SwizzleKind::RankShifted],
                gemm_tile_shapes: vec![tile],
                write_modes: vec![WriteMode::WriteAlltoAll, WriteMode::FusedReduce],
            },
        }
    }

    /// [`Self::for_tile`] widened to every scaled default tile shape.
    pub fn full(problem: &ProblemSpec) -> Self {
        let tiles = tile_candidates(problem);
        Self {
            gemm_tile_shapes: tiles.clone(),
            ..Self::for_tile(problem, tiles[0])
        }
    }

    /// Cartesian product, in tile, transfer, comm size, swizzle, write order.
    pub fn configs(&self, problem: &ProblemSpec) -> Result<Vec<TuneConfig>> {
        problem.validate()?;
        let mut out = Vec::new();
        for &tile in &self.gemm_tile_shapes {
            tile.validate(problem)?;
            let comm = if self.comm_tile_sizes.is_empty() {
                comm_tile_sizes(problem.rows_per_rank(), tile.tm)?
            } else {
                self.comm_tile_sizes.clone()
            };
            for &transfer in &self.transfer_modes {
                for &rows_per_comm_tile in &comm {
                    if rows_per_comm_tile == 0 || !problem.rows_per_rank().is_multiple_of(rows_per_comm_tile) {
                        return config_err(format!(
                            "comm tile of {rows_per_comm_tile} rows does not divide {} rows per rank",
                            problem.rows_per_rank()
                        ));
                    }
                    for &swizzle in &self.swizzle_policies {
                        for &write_mode in &self.write_modes {
                            out.push(TuneConfig {
                                tile,
                                transfer,
                                rows_per_comm_tile,
                                swizzle,
                                write_mode,
                            });
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return config_err("knob space is empty");
        }
        Ok(out)
    }
}

/// Grid for `problem` with the tile shape fixed.
pub fn enumerate_knobs(problem: &ProblemSpec, tile: &TileShape) -> Result<Vec<TuneConfig>> {
    tile.validate(problem)?;
    KnobSpace::for_tile(problem, *tile).configs(problem)
}

/// Runs the fused kernel of `problem`'s pattern with one configuration.
pub fn run_fused(ws: &ShardedWorkspace, config: &TuneConfig, topology: &Topology, engine: &EngineConfig) -> Result<RunOutput> {
    match ws.problem.pattern {
        Pattern::AllGatherGemm => {
            let plan = CommPlan::new(&ws.problem, topology, config.rows_per_comm_tile)?;
            run_fused_allgather_gemm(ws, config.tile, &plan, config.transfer, config.swizzle, topology, engine)
        }
        Pattern::GemmReduceScatter => {
            run_fused_gemm_reducescatter(ws, config.tile, config.write_mode, config.swizzle, engine)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    EngineWallClock,
    SimulatedTime,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::EngineWallClock => "engine_wall_clock",
            Objective::SimulatedTime => "simulated_time",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneOptions {
    pub objective: Objective,
    /// Timed runs per configuration; at least 3 for wall clock.
    pub repetitions: usize,
    pub machine: MachineModel,
    pub engine: EngineConfig,
    /// Executor for simulated evaluations; wall-clock runs are always sequential.
    pub exec: Exec,
}

impl TuneOptions {
    pub fn simulated(machine: MachineModel) -> Self {
        Self {
            objective: Objective::SimulatedTime,
            repetitions: 1,
            machine,
            engine: EngineConfig::default(),
            exec: Exec::default(),
        }
    }

    pub fn wall_clock(repetitions: usize, engine: EngineConfig) -> Self {
        Self {
            objective: Objective::EngineWallClock,
            repetitions,
            machine: MachineModel::default(),
            engine,
            exec: Exec::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub config: TuneConfig,
    pub objective_us: f64,
    pub repetitions: usize,
    /// `(max - min) / median` of the timed runs.
    pub dispersion: f64,
    pub flagged: bool,
    /// Worst relative error against the oracle, when it was checked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rel_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub problem: ProblemSpec,
    pub objective: Objective,
    pub best_config: TuneConfig,
    pub objective_us: f64,
    pub table: Vec<TuneRow>,
    /// Cache file this result was read from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_from: Option<PathBuf>,
}

pub const TUNE_CSV_HEADER: &str =
    "encoding,tm,tn,transfer,rows_per_comm_tile,swizzle,write_mode,objective_us,repetitions,dispersion,flagged,best";

impl TuneResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TUNE_CSV_HEADER}")?;
        for row in &self.table {
            let c = &row.config;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{:.6},{},{:.6},{},{}",
                c.encoding(),
                c.tile.tm,
                c.tile.tn,
                c.transfer,
                c.rows_per_comm_tile,
                c.swizzle,
                c.write_mode,
                row.objective_us,
                row.repetitions,
                row.dispersion,
                row.flagged,
                *c == self.best_config
            )?;
        }
        Ok(())
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median and `(max - min) / median` of wall-clock samples.
pub fn summarize(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut xs = samples.to_vec();
    let med = median(&mut xs);
    let spread = xs[xs.len() - 1] - xs[0];
    (med, if med > 0.0 { spread / med } else { 0.0 })
}

fn check(ws: &ShardedWorkspace, want: &[crate::Matrix], config: &TuneConfig, opts: &TuneOptions) -> Result<f64> {
    let out = run_fused(ws, config, &opts.machine.topology, &opts.engine)?;
    let err = max_rel_error(&out.outputs, want)?;
    let tol = if opts.engine.deterministic { DETERMINISTIC_RTOL } else { NONDETERMINISTIC_RTOL };
    if !(err <= tol) {
        return Err(Error::Mismatch(format!(
            "config {} ({}) is off the oracle by {err:e} (tolerance {tol:e})",
            config.encoding(),
            config
        )));
    }
    Ok(err)
}

/// Evaluates every configuration and picks the best.
///
/// Wall clock needs `workspace`; with the simulated objective a workspace is
/// optional and, when given, every configuration is still checked against the
/// oracle once.
pub fn tune(
    problem: &ProblemSpec,
    workspace: Option<&ShardedWorkspace>,
    configs: &[TuneConfig],
    opts: &TuneOptions,
) -> Result<TuneResult> {
    problem.validate()?;
    if configs.is_empty() {
        return config_err("knob space is empty");
    }
    if let Some(ws) = workspace {
        if ws.problem != *problem {
            return config_err(format!("workspace holds {}, tuning {problem}", ws.problem));
        }
    }
    let want = workspace.map(dense_oracle).transpose()?;
    let table: Vec<TuneRow> = match opts.objective {
        Objective::EngineWallClock => {
            if opts.repetitions < 3 {
                return config_err(format!("wall-clock tuning needs at least 3 repetitions, got {}", opts.repetitions));
            }
            let (Some(ws), Some(want)) = (workspace, want.as_deref()) else {
                return config_err("wall-clock tuning needs a workspace");
            };
            let mut rows = Vec::with_capacity(configs.len());
            for config in configs {
                let err = check(ws, want, config, opts)?;
                let mut samples = Vec::with_capacity(opts.repetitions);
                for _ in 0..opts.repetitions {
                    let t = Instant::now();
                    run_fused(ws, config, &opts.machine.topology, &opts.engine)?;
                    samples.push(t.elapsed().as_secs_f64() * 1e6);
                }
                let (med, dispersion) = summarize(&samples);
                rows.push(TuneRow {
                    config: *config,
                    objective_us: med,
                    repetitions: opts.repetitions,
                    dispersion,
                    flagged: dispersion > DISPERSION_LIMIT,
                    max_rel_error: Some(err),
                });
            }
            rows
        }
        Objective::SimulatedTime => {
            if let (Some(ws), Some(want)) = (workspace, want.as_deref()) {
                for config in configs {
                    check(ws, want, config, opts)?;
                }
            }
            opts.exec
                .map(configs, |config| {
                    let t = simulate(Strategy::Fine, problem, &config.tile, &opts.machine, &config.knobs())?;
                    Ok(TuneRow {
                        config: *config,
                        objective_us: t.overall_us(),
                        repetitions: 1,
                        dispersion: 0.0,
                        flagged: false,
                        max_rel_error: None,
                    })
                })
                .into_iter()
                .collect::<Result<_>>()?
        }
    };
    let best = table
        .iter()
        .min_by(|a, b| {
            a.objective_us
                .total_cmp(&b.objective_us)
                .then_with(|| a.config.encoding().cmp(&b.config.encoding()))
        })
        .expect("table is not empty");
    Ok(TuneResult {
        problem: *problem,
        objective: opts.objective,
        best_config: best.config,
        objective_us: best.objective_us,
        table,
        cached_from: None,
    })
}

/// Hex SHA-256 of the problem, machine, objective and configuration list.
pub fn cache_key(problem: &ProblemSpec, configs: &[TuneConfig], opts: &TuneOptions) -> String {
    let encodings: Vec<String> = configs.iter().map(TuneConfig::encoding).collect();
    let material = serde_json::json!({
        "problem": problem,
        "machine": opts.machine,
        "objective": opts.objective,
        "repetitions": opts.repetitions,
        "configs": encodings,
    });
    Sha256::digest(material.to_string().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// [`tune`] behind a directory of JSON results keyed by [`cache_key`].
pub fn tune_cached(
    cache_dir: &Path,
    problem: &ProblemSpec,
    workspace: Option<&ShardedWorkspace>,
    configs: &[TuneConfig],
    opts: &TuneOptions,
) -> Result<TuneResult> {
    let path = cache_dir.join(format!("tune-{}.json", cache_key(problem, configs, opts)));
    if path.exists() {
        let mut hit: TuneResult = serde_json::from_str(&fs::read_to_string(&path)?)?;
        hit.cached_from = Some(path);
        return Ok(hit);
    }
    let result = tune(problem, workspace, configs, opts)?;
    fs::create_dir_all(cache_dir)?;
    fs::write(&path, serde_json::to_string_pretty(&result)?)?;
    Ok(result)
}
