//! Reed-Solomon style MDS generator matrices and uniform full-rank sampling.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::field::{Field, Symbol};
use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodingError {
    #[error("field with {order} elements is too small for a length-{length} code")]
    FieldTooSmall { length: usize, order: usize },
    #[error("invalid code dimensions e={e}, f={f}")]
    InvalidDimensions { e: usize, f: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("insufficient symbols: need {need}, have {have}")]
    InsufficientSymbols { need: usize, have: usize },
    #[error("coordinate {row} is inconsistent with the decoded codeword")]
    Corruption { row: usize },
    #[error("row index {row} out of range for a length-{length} code")]
    RowOutOfRange { row: usize, length: usize },
}

/// An `e x f` generator matrix whose every `f`-row submatrix is invertible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorMatrix {
    matrix: Matrix,
    systematic: bool,
}

impl GeneratorMatrix {
    /// Code length.
    pub fn e(&self) -> usize {
        self.matrix.rows()
    }

    /// Code dimension.
    pub fn f(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_systematic(&self) -> bool {
        self.systematic
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn row(&self, r: usize) -> &[Symbol] {
        self.matrix.row(r)
    }

    /// Number of parity rows; for a systematic code these are rows `0..e-f`.
    pub fn parity_len(&self) -> usize {
        self.e() - self.f()
    }

    pub fn encode(&self, field: &Field, x: &[Symbol]) -> Result<Vec<Symbol>, CodingError> {
        if x.len() != self.f() {
            return Err(CodingError::LengthMismatch { expected: self.f(), got: x.len() });
        }
        Ok(self.matrix.mul_vec(field, x))
    }

    /// Only the first `count` coordinates of the codeword.
    pub fn encode_prefix(&self, field: &Field, x: &[Symbol], count: usize) -> Result<Vec<Symbol>, CodingError> {
        if x.len() != self.f() {
            return Err(CodingError::LengthMismatch { expected: self.f(), got: x.len() });
        }
        Ok((0..count.min(self.e())).map(|r| field.dot(self.row(r), x)).collect())
    }

    /// Recovers the message from at least `f` known codeword coordinates.
    ///
    /// The first `f` distinct rows (in the order given) determine the
    /// solution; any extra rows are checked against it.
    pub fn erasure_decode(&self, field: &Field, known: &[(usize, Symbol)]) -> Result<Vec<Symbol>, CodingError> {
        let mut distinct: BTreeMap<usize, Symbol> = BTreeMap::new();
        let mut order = Vec::with_capacity(known.len());
        for &(row, value) in known {
            if row >= self.e() {
                return Err(CodingError::RowOutOfRange { row, length: self.e() });
            }
            match distinct.insert(row, value) {
                Some(prev) if prev != value => return Err(CodingError::Corruption { row }),
                Some(_) => {}
                None => order.push(row),
            }
        }
        let f = self.f();
        if order.len() < f {
            return Err(CodingError::InsufficientSymbols { need: f, have: order.len() });
        }
        let basis = &order[..f];
        let sub = self.matrix.select_rows(basis);
        let rhs: Vec<Symbol> = basis.iter().map(|r| distinct[r]).collect();
        let x = sub.solve(field, &rhs).expect("MDS submatrices are invertible");
        for &row in &order[f..] {
            if field.dot(self.row(row), &x) != distinct[&row] {
                return Err(CodingError::Corruption { row });
            }
        }
        Ok(x)
    }
}

fn check_dimensions(field: &Field, e: usize, f: usize) -> Result<(), CodingError> {
    if f == 0 || e < f {
        return Err(CodingError::InvalidDimensions { e, f });
    }
    if e > field.order() {
        return Err(CodingError::FieldTooSmall { length: e, order: field.order() });
    }
    Ok(())
}

/// Vandermonde generator on the evaluation points `0, 1, ..., e-1`.
pub fn make_mds(field: &Field, e: usize, f: usize) -> Result<GeneratorMatrix, CodingError> {
    check_dimensions(field, e, f)?;
    let matrix = Matrix::from_fn(e, f, |r, c| field.pow_raw(field.point(r), c as u64));
    Ok(GeneratorMatrix { matrix, systematic: false })
}

/// Systematic MDS generator `[V | I]'` with the identity in the last `f` rows.
pub fn make_systematic_mds(field: &Field, e: usize, f: usize) -> Result<GeneratorMatrix, CodingError> {
    let base = make_mds(field, e, f)?;
    let tail = base.matrix.row_range(e - f, f);
    let tail_inv = tail.inverse(field).expect("MDS submatrices are invertible");
    let matrix = base.matrix.mul(field, &tail_inv);
    Ok(GeneratorMatrix { matrix, systematic: true })
}

/// An invertible square matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullRankMatrix(Matrix);

impl FullRankMatrix {
    pub fn new(field: &Field, matrix: Matrix) -> Option<Self> {
        matrix.is_invertible(field).then_some(FullRankMatrix(matrix))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, r: usize) -> &[Symbol] {
        self.0.row(r)
    }

    pub fn solve(&self, field: &Field, b: &[Symbol]) -> Vec<Symbol> {
        self.0.solve(field, b).expect("full rank")
    }
}

/// Draws until `accept` holds. Returns the sample and the number of draws.
pub fn rejection_sample<T>(mut draw: impl FnMut() -> T, accept: impl Fn(&T) -> bool) -> (T, usize) {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let candidate = draw();
        if accept(&candidate) {
            return (candidate, attempts);
        }
    }
}

/// Uniform over the invertible `n x n` matrices, by rejection.
pub fn sample_full_rank<R: Rng + ?Sized>(field: &Field, n: usize, rng: &mut R) -> FullRankMatrix {
    assert!(n >= 1, "dimension must be positive");
    let (m, _) = rejection_sample(|| Matrix::from_fn(n, n, |_, _| field.random(rng)), |m| m.is_invertible(field));
    FullRankMatrix(m)
}
