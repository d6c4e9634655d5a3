use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::problem::ProblemSpec;

/// Per-rank input shards. Buffers written during a run (gathered `A`, staging
/// planes, outputs) are allocated by the engine from this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedWorkspace {
    pub problem: ProblemSpec,
    pub a_shards: Vec<Matrix>,
    pub b_shards: Vec<Matrix>,
}

impl ShardedWorkspace {
    pub fn new(problem: ProblemSpec, a_shards: Vec<Matrix>, b_shards: Vec<Matrix>) -> Result<Self> {
        let ws = Self {
            problem,
            a_shards,
            b_shards,
        };
        ws.validate()?;
        Ok(ws)
    }

    /// Shards filled with uniform values in `[-1, 1)` from a seeded ChaCha8 stream,
    /// drawn rank by rank, `A` before `B`, row-major.
    pub fn random(problem: ProblemSpec, seed: u64) -> Result<Self> {
        problem.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ar, ac) = problem.a_shard_shape();
        let (br, bc) = problem.b_shard_shape();
        let mut a_shards = Vec::with_capacity(problem.tp);
        let mut b_shards = Vec::with_capacity(problem.tp);
        for _ in 0..problem.tp {
            a_shards.push(Matrix::from_fn(ar, ac, |_, _| rng.gen_range(-1.0..1.0)));
            b_shards.push(Matrix::from_fn(br, bc, |_, _| rng.gen_range(-1.0..1.0)));
        }
        Ok(Self {
            problem,
            a_shards,
            b_shards,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        let tp = self.problem.tp;
        for (name, shards) in [("A", &self.a_shards), ("B", &self.b_shards)] {
            if shards.len() < tp {
                return Err(Error::Directory { rank: shards.len() });
            }
            if shards.len() > tp {
                return Err(Error::Shape(format!(
                    "{} {name} shards for tp={tp}",
                    shards.len()
                )));
            }
        }
        let want_a = self.problem.a_shard_shape();
        let want_b = self.problem.b_shard_shape();
        for r in 0..tp {
            if self.a_shards[r].shape() != want_a {
                return Err(Error::Shape(format!(
                    "rank {r} A shard is {:?}, expected {want_a:?}",
                    self.a_shards[r].shape()
                )));
            }
            if self.b_shards[r].shape() != want_b {
                return Err(Error::Shape(format!(
                    "rank {r} B shard is {:?}, expected {want_b:?}",
                    self.b_shards[r].shape()
                )));
            }
            let finite = |m: &Matrix| m.as_slice().iter().all(|v| v.is_finite());
            if !finite(&self.a_shards[r]) || !finite(&self.b_shards[r]) {
                return Err(Error::Shape(format!("rank {r} holds non-finite values")));
            }
        }
        Ok(())
    }
}
