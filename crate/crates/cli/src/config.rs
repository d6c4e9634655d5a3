//! Run configuration, read from one TOML file.
//!
//! ```toml
//! seed = 42
//! strategies = ["coarse", "medium", "fine"]
//!
//! [problem]
//! m = 64
//! n = 32
//! k = 32
//! tp = 4
//! pattern = "allgather_gemm"   # or "gemm_reducescatter"
//!
//! [tile]
//! tm = 8
//! tn = 8
//! ```
//!
//! Optional tables: `[machine]` (with `[machine.topology]`), `[overlap]`,
//! `[knobs]`, `[engine]`, `[sweep]`, `[bench]`, `[tune]`. Unknown keys are
//! rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpoverlap::engine::EngineConfig;
use tpoverlap::sim::{MachineModel, OverlapKnobs, Strategy};
use tpoverlap::tune::{KnobSpace, Objective, TuneConfig};
use tpoverlap::{Error, Pattern, ProblemSpec, Result, TileShape};

fn default_seed() -> u64 {
    42
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; `--out` wins over this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    pub problem: ProblemSpec,
    pub tile: TileShape,
    #[serde(default)]
    pub machine: MachineModel,
    #[serde(default)]
    pub overlap: OverlapKnobs,
    /// Tuning grid; the pattern's default grid for `tile` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knobs: Option<KnobSpace>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub tune: TuneSettings,
}

/// Problems of a sweep: every `m` with every pattern, other dimensions from `[problem]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub m: Vec<usize>,
    pub patterns: Vec<Pattern>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "three")]
    pub warmup: usize,
    #[serde(default = "ten")]
    pub repetitions: usize,
}

fn three() -> usize {
    3
}

fn ten() -> usize {
    10
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 3,
            repetitions: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSettings {
    #[serde(default = "simulated")]
    pub objective: Objective,
    #[serde(default = "five")]
    pub repetitions: usize,
    /// Run every configuration against the oracle before it counts.
    #[serde(default = "yes")]
    pub check_oracle: bool,
    /// Reuse results from `<out>/cache`.
    #[serde(default = "yes")]
    pub cache: bool,
}

fn simulated() -> Objective {
    Objective::SimulatedTime
}

fn five() -> usize {
    5
}

fn yes() -> bool {
    true
}

impl Default for TuneSettings {
    fn default() -> Self {
        Self {
            objective: Objective::SimulatedTime,
            repetitions: 5,
            check_oracle: true,
            cache: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.tile.validate(&self.problem)?;
        self.machine.validate(self.problem.tp)?;
        if self.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.m.is_empty() || sweep.patterns.is_empty() {
                return Err(Error::Config("sweep needs at least one m and one pattern".into()));
            }
            for p in self.sweep_problems() {
                p.validate()?;
                self.tile.validate(&p)?;
            }
        }
        if self.bench.repetitions == 0 {
            return Err(Error::Config("bench.repetitions must be positive".into()));
        }
        if self.tune.objective == Objective::EngineWallClock && self.tune.repetitions < 3 {
            return Err(Error::Config(format!(
                "tune.repetitions must be at least 3 for wall-clock tuning, got {}",
                self.tune.repetitions
            )));
        }
        Ok(())
    }

    /// The sweep's problems in `m`-major order; just `[problem]` without a sweep.
    pub fn sweep_problems(&self) -> Vec<ProblemSpec> {
        match &self.sweep {
            None => vec![self.problem],
            Some(s) => s
                .m
                .iter()
                .flat_map(|&m| s.patterns.iter().map(move |&p| self.problem.with_m(m).with_pattern(p)))
                .collect(),
        }
    }

    pub fn knob_space(&self) -> KnobSpace {
        self.knobs
            .clone()
            .unwrap_or_else(|| KnobSpace::for_tile(&self.problem, self.tile))
    }

    /// The fused-kernel configuration `[overlap]` describes.
    pub fn fine_config(&self) -> TuneConfig {
        TuneConfig {
            tile: self.tile,
            transfer: self.overlap.transfer,
            rows_per_comm_tile: self
                .overlap
                .rows_per_comm_tile
                .unwrap_or(self.problem.rows_per_rank()),
            swizzle: self.overlap.swizzle_for(self.problem.pattern),
            write_mode: self.overlap.write_mode,
        }
    }
}

/// Parses a comma-separated strategy list.
pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}
