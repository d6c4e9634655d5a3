use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of rows `range` as a new matrix.
    pub fn row_block(&self, range: Range<usize>) -> Matrix {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::Shape(format!(
                "cannot stack {} columns onto {cols}",
                bad.cols
            )));
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Matrix {
            rows: data.len().checked_div(cols).unwrap_or(0),
            cols,
            data,
        })
    }

    /// Largest elementwise relative error against `reference`, using
    /// `|a-b| / max(|b|, 1)` so that values near zero are compared absolutely.
    pub fn max_rel_error(&self, reference: &Matrix) -> f64 {
        assert_eq!(self.shape(), reference.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// `acc[i][j] = sum_p a[row0+i][p] * b[p][col0+j]`, summed in increasing `p`.
///
/// This is the per-tile mainloop every strategy shares. The summation order
/// is fixed, so equal operands yield bitwise-equal tiles.
pub fn tile_product(a: &[f64], a_cols: usize, b: &Matrix, cols: Range<usize>) -> Vec<f64> {
    debug_assert_eq!(a_cols, b.rows());
    let rows = a.len() / a_cols.max(1);
    let width = cols.len();
    let mut acc = vec![0.0; rows * width];
    for i in 0..rows {
        let a_row = &a[i * a_cols..(i + 1) * a_cols];
        let out = &mut acc[i * width..(i + 1) * width];
        for (jj, j) in cols.clone().enumerate() {
            let mut s = 0.0;
            for (p, &av) in a_row.iter().enumerate() {
                s += av * b.get(p, j);
            }
            out[jj] = s;
        }
    }
    acc
}

/// Tiled `a * b`, each output tile computed by [`tile_product`].
pub fn tiled_gemm(a: &Matrix, b: &Matrix, tm: usize, tn: usize) -> Result<Matrix> {
    tiled_gemm_with(Exec::default(), a, b, tm, tn)
}

pub fn tiled_gemm_with(exec: Exec, a: &Matrix, b: &Matrix, tm: usize, tn: usize) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if tm == 0 || tn == 0 || !a.rows().is_multiple_of(tm) || !b.cols().is_multiple_of(tn) {
        return Err(Error::Config(format!(
            "tile {tm}x{tn} does not divide output {}x{}",
            a.rows(),
            b.cols()
        )));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(c);
    }
    // one chunk per tile row band
    exec.for_each_chunk_mut(c.as_mut_slice(), tm * n, |band, out| {
        let rows = band * tm..(band + 1) * tm;
        let a_band = &a.as_slice()[rows.start * a.cols()..rows.end * a.cols()];
        for tc in 0..n / tn {
            let cols = tc * tn..(tc + 1) * tn;
            let tile = tile_product(a_band, a.cols(), b, cols.clone());
            for i in 0..tm {
                out[i * n + cols.start..i * n + cols.end]
                    .copy_from_slice(&tile[i * tn..(i + 1) * tn]);
            }
        }
    });
    Ok(c)
}

/// Row-major matrix of atomically accessed `f64` cells shared between ranks.
///
/// Plain loads and stores are relaxed; cross-thread visibility is provided by
/// the signal flags and completion counters that guard each region.
#[derive(Debug)]
pub struct SharedMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<AtomicU64>,
}

impl SharedMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: (0..rows * cols).map(|_| AtomicU64::new(0f64.to_bits())).collect(),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            cells: m.as_slice().iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn load(&self, i: usize, j: usize) -> f64 {
        f64::from_bits(self.cells[i * self.cols + j].load(Ordering::Relaxed))
    }

    pub fn store(&self, i: usize, j: usize, v: f64) {
        self.cells[i * self.cols + j].store(v.to_bits(), Ordering::Relaxed);
    }

    /// Atomic `+=` via compare-and-swap; the order of concurrent adds is unspecified.
    pub fn fetch_add(&self, i: usize, j: usize, v: f64) {
        let cell = &self.cells[i * self.cols + j];
        let mut cur = cell.load(Ordering::Relaxed);
        loop {
            let next = (f64::from_bits(cur) + v).to_bits();
            match cell.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    pub fn check_rows(&self, range: &Range<usize>) -> Result<()> {
        if range.start > range.end || range.end > self.rows {
            return Err(Error::Bounds(format!(
                "rows {range:?} outside buffer of {} rows",
                self.rows
            )));
        }
        Ok(())
    }

    /// Copies rows `range` out as a contiguous row-major vector.
    pub fn read_rows(&self, range: Range<usize>) -> Vec<f64> {
        self.cells[range.start * self.cols..range.end * self.cols]
            .iter()
            .map(|c| f64::from_bits(c.load(Ordering::Relaxed)))
            .collect()
    }

    pub fn write_rows(&self, first_row: usize, values: &[f64]) {
        let base = first_row * self.cols;
        for (cell, v) in self.cells[base..base + values.len()].iter().zip(values) {
            cell.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    pub fn write_tile(&self, row0: usize, col0: usize, width: usize, values: &[f64]) {
        for (i, chunk) in values.chunks(width).enumerate() {
            for (j, v) in chunk.iter().enumerate() {
                self.store(row0 + i, col0 + j, *v);
            }
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.read_rows(0..self.rows),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiled_gemm_identity() {
        let a = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        let c = tiled_gemm(&a, &Matrix::identity(4), 2, 2).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn tiled_gemm_rejects_non_dividing_tile() {
        let a = Matrix::zeros(6, 4);
        let b = Matrix::zeros(4, 4);
        assert!(matches!(tiled_gemm(&a, &b, 4, 2), Err(Error::Config(_))));
        assert!(matches!(tiled_gemm(&a, &Matrix::zeros(3, 4), 2, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn tiled_gemm_sequential_matches_default() {
        let a = Matrix::from_fn(8, 5, |i, j| (i as f64 * 0.3 - j as f64).sin());
        let b = Matrix::from_fn(5, 6, |i, j| (i as f64 + 0.7 * j as f64).cos());
        let par = tiled_gemm(&a, &b, 2, 3).unwrap();
        let seq = tiled_gemm_with(Exec::Sequential, &a, &b, 4, 2).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn shared_fetch_add_accumulates() {
        let s = SharedMatrix::zeros(1, 1);
        std::thread::scope(|sc| {
            for _ in 0..4 {
                sc.spawn(|| (0..1000).for_each(|_| s.fetch_add(0, 0, 1.0)));
            }
        });
        assert_eq!(s.load(0, 0), 4000.0);
    }

    #[test]
    fn rel_error_is_absolute_near_zero() {
        let a = Matrix::from_vec(1, 2, vec![1e-12, 100.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.0, 100.0 + 1e-8]).unwrap();
        let e = a.max_rel_error(&b);
        assert!(e > 1e-13 && e < 2e-10);
    }
}
