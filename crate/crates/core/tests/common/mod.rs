#![allow(dead_code)]

use std::path::PathBuf;

use tpoverlap::oracle::read_csv;
use tpoverlap::{Matrix, Pattern, ProblemSpec, ShardedWorkspace};

/// A seeded problem whose oracle outputs are frozen under `tests/golden/`.
pub struct GoldenCase {
    pub name: &'static str,
    pub problem: ProblemSpec,
    pub seed: u64,
}

pub fn golden_cases() -> Vec<GoldenCase> {
    let p = |m, n, k, tp, pattern| ProblemSpec::new(m, n, k, tp, pattern).unwrap();
    vec![
        GoldenCase {
            name: "ag_tp4_m16n16k16_seed42",
            problem: p(16, 16, 16, 4, Pattern::AllGatherGemm),
            seed: 42,
        },
        GoldenCase {
            name: "rs_tp4_m16n16k16_seed42",
            problem: p(16, 16, 16, 4, Pattern::GemmReduceScatter),
            seed: 42,
        },
        GoldenCase {
            name: "rs_tp2_m8n4k4_seed42",
            problem: p(8, 4, 4, 2, Pattern::GemmReduceScatter),
            seed: 42,
        },
        GoldenCase {
            name: "ag_tp4_m16n8k8_seed42",
            problem: p(16, 8, 8, 4, Pattern::AllGatherGemm),
            seed: 42,
        },
    ]
}

pub fn golden_case(name: &str) -> GoldenCase {
    golden_cases()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no golden case {name}"))
}

pub fn golden_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
        .join(name)
}

impl GoldenCase {
    pub fn workspace(&self) -> ShardedWorkspace {
        ShardedWorkspace::random(self.problem, self.seed).unwrap()
    }

    pub fn expected(&self) -> Vec<Matrix> {
        (0..self.problem.tp)
            .map(|r| read_csv(&golden_dir(self.name).join(format!("rank{r}.csv"))).unwrap())
            .collect()
    }
}
