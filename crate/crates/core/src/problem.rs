//! Problem shapes, tile grids and the sharding layout of both overlap patterns.
//!
//! Shapes are global: `n` and `k` are the unsharded extents. Under
//! [`Pattern::AllGatherGemm`] each rank holds an `A` row shard `[m/tp, k]` and a
//! `B` column shard `[k, n/tp]`, gathers `A` and produces `[m, n/tp]`. Under
//! [`Pattern::GemmReduceScatter`] each rank holds `A` as `[m, k/tp]` and `B` as
//! `[k/tp, n]`, produces a full `[m, n]` partial product and keeps the sum of
//! row block `r` across ranks.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    #[serde(rename = "allgather_gemm")]
    AllGatherGemm,
    #[serde(rename = "gemm_reducescatter")]
    GemmReduceScatter,
}

impl Pattern {
    pub const ALL: [Pattern; 2] = [Pattern::AllGatherGemm, Pattern::GemmReduceScatter];

    pub fn short(self) -> &'static str {
        match self {
            Pattern::AllGatherGemm => "ag",
            Pattern::GemmReduceScatter => "rs",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::AllGatherGemm => "allgather_gemm",
            Pattern::GemmReduceScatter => "gemm_reducescatter",
        })
    }
}

impl std::str::FromStr for Pattern {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "allgather_gemm" | "ag" => Ok(Pattern::AllGatherGemm),
            "gemm_reducescatter" | "rs" => Ok(Pattern::GemmReduceScatter),
            other => config_err(format!(
                "unknown pattern {other:?}, expected allgather_gemm or gemm_reducescatter"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub tp: usize,
    pub pattern: Pattern,
}

impl ProblemSpec {
    pub fn new(m: usize, n: usize, k: usize, tp: usize, pattern: Pattern) -> Result<Self> {
        let p = Self { m, n, k, tp, pattern };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 || self.tp == 0 {
            return config_err(format!("dimensions must be positive: {self}"));
        }
        if !self.m.is_multiple_of(self.tp) {
            return config_err(format!("m={} is not divisible by tp={}", self.m, self.tp));
        }
        match self.pattern {
            Pattern::AllGatherGemm if !self.n.is_multiple_of(self.tp) => {
                config_err(format!("n={} is not divisible by tp={}", self.n, self.tp))
            }
            Pattern::GemmReduceScatter if !self.k.is_multiple_of(self.tp) => {
                config_err(format!("k={} is not divisible by tp={}", self.k, self.tp))
            }
            _ => Ok(()),
        }
    }

    /// Rows of `A` owned by one rank (AllGather) or of output owned by one rank (ReduceScatter).
    pub fn rows_per_rank(&self) -> usize {
        self.m / self.tp
    }

    /// Global rows owned by `rank`.
    pub fn owned_rows(&self, rank: usize) -> Range<usize> {
        let r = self.rows_per_rank();
        rank * r..(rank + 1) * r
    }

    /// Rank owning global row `row`.
    pub fn owner_of_row(&self, row: usize) -> usize {
        row / self.rows_per_rank()
    }

    /// Width of each rank's GEMM output.
    pub fn local_n(&self) -> usize {
        match self.pattern {
            Pattern::AllGatherGemm => self.n / self.tp,
            Pattern::GemmReduceScatter => self.n,
        }
    }

    /// Reduction extent of each rank's GEMM.
    pub fn local_k(&self) -> usize {
        match self.pattern {
            Pattern::AllGatherGemm => self.k,
            Pattern::GemmReduceScatter => self.k / self.tp,
        }
    }

    /// Shape of each rank's `A` shard.
    pub fn a_shard_shape(&self) -> (usize, usize) {
        match self.pattern {
            Pattern::AllGatherGemm => (self.rows_per_rank(), self.k),
            Pattern::GemmReduceScatter => (self.m, self.local_k()),
        }
    }

    pub fn b_shard_shape(&self) -> (usize, usize) {
        (self.local_k(), self.local_n())
    }

    /// Shape of each rank's final output.
    pub fn output_shape(&self) -> (usize, usize) {
        match self.pattern {
            Pattern::AllGatherGemm => (self.m, self.local_n()),
            Pattern::GemmReduceScatter => (self.rows_per_rank(), self.n),
        }
    }

    pub fn with_m(&self, m: usize) -> Self {
        Self { m, ..*self }
    }

    pub fn with_pattern(&self, pattern: Pattern) -> Self {
        Self { pattern, ..*self }
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} m={} n={} k={} tp={}",
            self.pattern, self.m, self.n, self.k, self.tp
        )
    }
}

/// Output tile extent of the per-rank GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileShape {
    pub tm: usize,
    pub tn: usize,
}

impl TileShape {
    pub fn new(tm: usize, tn: usize) -> Self {
        Self { tm, tn }
    }

    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        let rows = problem.rows_per_rank();
        let n = problem.local_n();
        if self.tm == 0 || self.tn == 0 {
            return config_err("tile extents must be positive");
        }
        if self.tm > rows || !rows.is_multiple_of(self.tm) {
            return config_err(format!(
                "tm={} must divide the {rows} rows held per rank",
                self.tm
            ));
        }
        if !n.is_multiple_of(self.tn) {
            return config_err(format!("tn={} does not divide local n={n}", self.tn));
        }
        Ok(())
    }

    pub fn grid(&self, problem: &ProblemSpec) -> GridDims {
        GridDims {
            rows: problem.m / self.tm,
            cols: problem.local_n() / self.tn,
        }
    }

    /// Flops of one output tile of the per-rank GEMM.
    pub fn flops(&self, problem: &ProblemSpec) -> f64 {
        2.0 * self.tm as f64 * self.tn as f64 * problem.local_k() as f64
    }
}

impl fmt::Display for TileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.tm, self.tn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileCoord {
    pub row: usize,
    pub col: usize,
}

impl TileCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Row-major enumeration of the per-rank output tile grid.
pub fn tile_grid(problem: &ProblemSpec, tile: &TileShape) -> Result<Vec<TileCoord>> {
    tile.validate(problem)?;
    let g = tile.grid(problem);
    Ok((0..g.rows)
        .flat_map(|row| (0..g.cols).map(move |col| TileCoord { row, col }))
        .collect())
}
