//! Dense row-major matrices over a [`Field`].

use crate::field::{Field, Symbol};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Symbol>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1);
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<Symbol>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Symbol) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Symbol {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Symbol) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Symbol] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[Symbol] {
        &self.data
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn row_range(&self, start: usize, len: usize) -> Matrix {
        Matrix { rows: len, cols: self.cols, data: self.data[start * self.cols..(start + len) * self.cols].to_vec() }
    }

    pub fn mul_vec(&self, field: &Field, x: &[Symbol]) -> Vec<Symbol> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| field.dot(self.row(r), x)).collect()
    }

    pub fn mul(&self, field: &Field, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let acc = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                field.axpy(acc, self.get(r, k), other.row(k));
            }
        }
        out
    }

    pub fn rank(&self, field: &Field) -> usize {
        let mut m = self.clone();
        m.eliminate(field, None)
    }

    pub fn is_invertible(&self, field: &Field) -> bool {
        self.rows == self.cols && self.rank(field) == self.rows
    }

    /// Inverse by Gauss-Jordan elimination, `None` if singular.
    pub fn inverse(&self, field: &Field) -> Option<Matrix> {
        if self.rows != self.cols {
            return None;
        }
        let n = self.rows;
        let mut m = self.clone();
        let mut inv = Matrix::identity(n);
        if m.eliminate(field, Some(&mut inv)) != n {
            return None;
        }
        Some(inv)
    }

    /// Solves `self * x = b` for square invertible `self`.
    pub fn solve(&self, field: &Field, b: &[Symbol]) -> Option<Vec<Symbol>> {
        if self.rows != self.cols || b.len() != self.rows {
            return None;
        }
        let n = self.rows;
        let mut m = self.clone();
        let mut rhs = Matrix::from_rows(n, 1, b.to_vec());
        if m.eliminate(field, Some(&mut rhs)) != n {
            return None;
        }
        Some(rhs.data)
    }

    // Reduced row echelon form in place, mirroring row operations onto
    // `companion`. Returns the rank. When full rank and square, `self`
    // ends as the identity.
    fn eliminate(&mut self, field: &Field, mut companion: Option<&mut Matrix>) -> usize {
        let mut rank = 0;
        for col in 0..self.cols {
            if rank == self.rows {
                break;
            }
            let Some(pivot) = (rank..self.rows).find(|&r| self.get(r, col) != 0) else {
                continue;
            };
            self.swap_rows(pivot, rank);
            if let Some(c) = companion.as_deref_mut() {
                c.swap_rows(pivot, rank);
            }
            let scale = field.inv_raw(self.get(rank, col)).expect("nonzero pivot");
            self.scale_row(field, rank, scale);
            if let Some(c) = companion.as_deref_mut() {
                c.scale_row(field, rank, scale);
            }
            for r in 0..self.rows {
                if r == rank {
                    continue;
                }
                let factor = self.get(r, col);
                if factor != 0 {
                    self.add_scaled_row(field, r, rank, factor);
                    if let Some(c) = companion.as_deref_mut() {
                        c.add_scaled_row(field, r, rank, factor);
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }

    fn scale_row(&mut self, field: &Field, r: usize, scale: Symbol) {
        for v in &mut self.data[r * self.cols..(r + 1) * self.cols] {
            *v = field.mul_raw(*v, scale);
        }
    }

    // row[dst] += factor * row[src]
    fn add_scaled_row(&mut self, field: &Field, dst: usize, src: usize, factor: Symbol) {
        let cols = self.cols;
        let (src_row, dst_row) = if src < dst {
            let (lo, hi) = self.data.split_at_mut(dst * cols);
            (&lo[src * cols..(src + 1) * cols], &mut hi[..cols])
        } else {
            let (lo, hi) = self.data.split_at_mut(src * cols);
            (&hi[..cols], &mut lo[dst * cols..(dst + 1) * cols])
        };
        field.axpy(dst_row, factor, src_row);
    }
}
