//! Golden oracle outputs. Set `REGEN_GOLDEN=1` to rewrite them.

mod common;

use std::fs;

use common::{golden_cases, golden_dir};
use tpoverlap::oracle::{dense_oracle, matmul, write_csv};
use tpoverlap::{Matrix, Pattern};

/// Naive gather + triple loop + serial collective, written without the
/// library's collective code.
fn serial_reference(case: &common::GoldenCase) -> Vec<Matrix> {
    let p = case.problem;
    let ws = case.workspace();
    match p.pattern {
        Pattern::AllGatherGemm => {
            let mut a = Matrix::zeros(p.m, p.k);
            for (r, shard) in ws.a_shards.iter().enumerate() {
                for i in 0..shard.rows() {
                    for j in 0..p.k {
                        a.set(r * p.rows_per_rank() + i, j, shard.get(i, j));
                    }
                }
            }
            ws.b_shards.iter().map(|b| matmul(&a, b)).collect()
        }
        Pattern::GemmReduceScatter => {
            let parts: Vec<Matrix> = (0..p.tp)
                .map(|r| matmul(&ws.a_shards[r], &ws.b_shards[r]))
                .collect();
            (0..p.tp)
                .map(|r| {
                    let mut out = Matrix::zeros(p.rows_per_rank(), p.n);
                    for part in &parts {
                        for i in 0..p.rows_per_rank() {
                            for j in 0..p.n {
                                let v = out.get(i, j) + part.get(r * p.rows_per_rank() + i, j);
                                out.set(i, j, v);
                            }
                        }
                    }
                    out
                })
                .collect()
        }
    }
}

#[test]
fn golden_files_match_serial_reference_and_oracle() {
    let regen = std::env::var_os("REGEN_GOLDEN").is_some();
    for case in golden_cases() {
        let reference = serial_reference(&case);
        if regen {
            let dir = golden_dir(case.name);
            fs::create_dir_all(&dir).unwrap();
            for (r, m) in reference.iter().enumerate() {
                write_csv(&dir.join(format!("rank{r}.csv")), m).unwrap();
            }
        }
        let frozen = case.expected();
        assert_eq!(frozen, reference, "{}: frozen files drifted", case.name);
        let oracle = dense_oracle(&case.workspace()).unwrap();
        assert_eq!(oracle, frozen, "{}: oracle differs from golden files", case.name);
    }
}
