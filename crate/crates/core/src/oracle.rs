//! Ground truth: gather every shard, run one dense triple-loop GEMM per rank
//! and apply the collective serially. All strategies are checked against this.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matrix::Matrix;
use crate::problem::Pattern;
use crate::workspace::ShardedWorkspace;

/// Relative tolerance when every reduction happens in rank order.
pub const DETERMINISTIC_RTOL: f64 = 1e-10;
/// Relative tolerance when accumulation order depends on arrival.
pub const NONDETERMINISTIC_RTOL: f64 = 1e-8;

pub fn dense_oracle(ws: &ShardedWorkspace) -> Result<Vec<Matrix>> {
    dense_oracle_with(Exec::default(), ws)
}

pub fn dense_oracle_with(exec: Exec, ws: &ShardedWorkspace) -> Result<Vec<Matrix>> {
    ws.validate()?;
    let p = ws.problem;
    match p.pattern {
        Pattern::AllGatherGemm => {
            let a = Matrix::vstack(&ws.a_shards)?;
            Ok(exec.map(&ws.b_shards, |b| matmul(&a, b)))
        }
        Pattern::GemmReduceScatter => {
            let partials = exec.map_range(p.tp, |r| matmul(&ws.a_shards[r], &ws.b_shards[r]));
            Ok((0..p.tp)
                .map(|r| {
                    let rows = p.owned_rows(r);
                    Matrix::from_fn(rows.len(), p.n, |i, j| {
                        let mut s = 0.0;
                        for part in &partials {
                            s += part.get(rows.start + i, j);
                        }
                        s
                    })
                })
                .collect())
        }
    }
}

/// Reference triple loop, independent of the tiled kernels.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows(), "inner dimensions differ");
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            c.set(i, j, s);
        }
    }
    c
}

/// Largest relative error over all ranks; shape mismatch is an error.
pub fn max_rel_error(got: &[Matrix], want: &[Matrix]) -> Result<f64> {
    if got.len() != want.len() {
        return Err(Error::Shape(format!(
            "{} outputs, oracle has {}",
            got.len(),
            want.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for (r, (g, w)) in got.iter().zip(want).enumerate() {
        if g.shape() != w.shape() {
            return Err(Error::Shape(format!(
                "rank {r} output is {:?}, oracle is {:?}",
                g.shape(),
                w.shape()
            )));
        }
        worst = worst.max(g.max_rel_error(w));
    }
    Ok(worst)
}

/// Writes a matrix as CSV: one line per row, 17 significant digits.
pub fn write_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Matrix> {
    let f = fs::File::open(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::Parse(format!(
                    "{}:{}: expected {c} values, found {}",
                    path.display(),
                    lineno + 1,
                    vals.len()
                )))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}
