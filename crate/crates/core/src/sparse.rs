//! Compressed sparse column storage for design matrices.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

/// One design row as `(column, value)` pairs with nonzero values.
pub type SparseRow = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Assemble from sparse rows. Columns within a row need not be sorted.
    pub fn from_rows(rows: &[SparseRow], ncols: usize) -> Result<Self> {
        let mut counts = vec![0usize; ncols];
        for row in rows {
            for &(j, _) in row {
                if j >= ncols {
                    return Err(invalid_input(format!("column {j} >= {ncols}")));
                }
                counts[j] += 1;
            }
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        col_ptr.push(0);
        for j in 0..ncols {
            col_ptr.push(col_ptr[j] + counts[j]);
        }
        let nnz = col_ptr[ncols];
        let mut row_idx = vec![0; nnz];
        let mut values = vec![0.0; nnz];
        let mut next = col_ptr[..ncols].to_vec();
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                row_idx[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        Ok(CscMatrix {
            nrows: rows.len(),
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Assemble from dense row-major data, dropping exact zeros.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(invalid_input("ragged dense matrix"));
        }
        let sparse: Vec<SparseRow> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect()
            })
            .collect();
        Self::from_rows(&sparse, ncols)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Row indices and values of column `j`.
    #[inline]
    pub fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> CscMatrix {
        let mut map = vec![usize::MAX; self.nrows];
        for (new, &old) in rows.iter().enumerate() {
            map[old] = new;
        }
        let mut col_ptr = Vec::with_capacity(self.ncols + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for j in 0..self.ncols {
            let (ri, vs) = self.column(j);
            let mut entries: Vec<(usize, f64)> = ri
                .iter()
                .zip(vs)
                .filter(|(&i, _)| map[i] != usize::MAX)
                .map(|(&i, &v)| (map[i], v))
                .collect();
            entries.sort_by_key(|e| e.0);
            for (i, v) in entries {
                row_idx.push(i);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows: rows.len(),
            ncols: self.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> CscMatrix {
        let mut col_ptr = Vec::with_capacity(cols.len() + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for &j in cols {
            let (ri, vs) = self.column(j);
            row_idx.extend_from_slice(ri);
            values.extend_from_slice(vs);
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: cols.len(),
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `out[i] += sum_j X[i][j] * beta[j]`.
    pub fn add_mul_vec(&self, beta: &[f64], out: &mut [f64]) {
        for (j, &b) in beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let (ri, vs) = self.column(j);
            for (&i, &v) in ri.iter().zip(vs) {
                out[i] += v * b;
            }
        }
    }

    /// Sparse rows, for scoring individual observations.
    pub fn to_rows(&self) -> Vec<SparseRow> {
        let mut rows = vec![Vec::new(); self.nrows];
        for j in 0..self.ncols {
            let (ri, vs) = self.column(j);
            for (&i, &v) in ri.iter().zip(vs) {
                rows[i].push((j, v));
            }
        }
        rows
    }
}
