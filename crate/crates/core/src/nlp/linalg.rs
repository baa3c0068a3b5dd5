//! Sparse Jacobian storage and the envelope LDLᵀ used for Newton steps.

use nalgebra::DMatrix;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_triplets(rows, cols, Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `out += Aᵀ y`
    pub fn tr_mul_acc(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate().take(self.rows) {
            if yr != 0.0 {
                for (c, v) in self.row(r) {
                    out[c] += v * yr;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let t = rows
            .iter()
            .enumerate()
            .flat_map(|(new, &old)| self.row(old).map(move |(c, v)| (new, c, v)))
            .collect();
        Self::from_triplets(rows.len(), self.cols, t)
    }

    /// Smallest column index touched by each row (`None` for empty rows).
    pub fn first_cols(&self) -> Vec<Option<usize>> {
        (0..self.rows).map(|r| self.row(r).map(|(c, _)| c).min()).collect()
    }
}

/// Outcome of an LDLᵀ factorization attempt.
#[derive(Debug)]
pub enum Factorization {
    Ok(EnvelopeLdl),
    /// A pivot collapsed to (numerical) zero at the given position.
    ZeroPivot(usize),
}

/// LDLᵀ without pivoting on a symmetric matrix, restricted to its row
/// envelope. Used on quasi-definite KKT matrices whose variables are ordered
/// stage by stage, where the envelope is narrow.
#[derive(Clone, Debug)]
pub struct EnvelopeLdl {
    n: usize,
    /// Row-major unit lower factor (strict lower part used).
    l: Vec<f64>,
    d: Vec<f64>,
    first: Vec<usize>,
}

impl EnvelopeLdl {
    /// Factor `a`. Only the lower triangle is read.
    pub fn factor(a: &DMatrix<f64>, pivot_tol: f64) -> Factorization {
        let n = a.nrows();
        let mut first = vec![0; n];
        for (i, f) in first.iter_mut().enumerate() {
            *f = (0..=i).find(|&j| a[(i, j)] != 0.0).unwrap_or(i);
        }
        let mut l = vec![0.0; n * n];
        let mut d = vec![0.0; n];
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(1.0, f64::max);
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j].max(fi);
                let mut s = a[(i, j)];
                let (ri, rj) = (i * n, j * n);
                for k in fj..j {
                    s -= l[ri + k] * d[k] * l[rj + k];
                }
                l[i * n + j] = s / d[j];
            }
            let mut s = a[(i, i)];
            for k in fi..i {
                let lik = l[i * n + k];
                s -= lik * lik * d[k];
            }
            if !s.is_finite() || s.abs() <= pivot_tol * scale {
                return Factorization::ZeroPivot(i);
            }
            d[i] = s;
        }
        Factorization::Ok(Self { n, l, d, first })
    }

    /// Number of negative pivots.
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in self.first[i]..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s;
        }
        for i in 0..n {
            b[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let bi = b[i];
            for k in self.first[i]..i {
                b[k] -= self.l[i * n + k] * bi;
            }
        }
    }
}
