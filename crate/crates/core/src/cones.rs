//! Dense matrices and the three cones used by every positivity hypothesis:
//! entrywise nonnegative, Metzler (nonnegative off-diagonal) and diagonal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Row-major dense real matrix with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LabError::Dimension(format!(
                "matrix shape {rows}x{cols} has a zero extent"
            )));
        }
        if data.len() != rows * cols {
            return Err(LabError::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Argument(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_diagonal(&[value])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Writes `self * x` into `out`.
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// Adds `scale * self * x` to `acc`.
    pub fn mul_vec_acc(&self, x: &[f64], scale: f64, acc: &mut [f64]) {
        for (i, a) in acc.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let dot: f64 = row.iter().zip(x).map(|(m, v)| m * v).sum();
            *a += scale * dot;
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(LabError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, other.cols, |i, j| {
            (0..self.cols).map(|k| self.get(i, k) * other.get(k, j)).sum()
        }))
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LabError::Dimension(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn diagonal_part(&self) -> Result<DenseMatrix> {
        self.require_square()?;
        Ok(Self::from_fn(self.rows, self.cols, |i, j| {
            if i == j {
                self.get(i, j)
            } else {
                0.0
            }
        }))
    }

    pub fn off_diagonal_part(&self) -> Result<DenseMatrix> {
        self.require_square()?;
        Ok(Self::from_fn(self.rows, self.cols, |i, j| {
            if i == j {
                0.0
            } else {
                self.get(i, j)
            }
        }))
    }

    /// Solves `self * x = rhs` by LU decomposition with partial pivoting.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.require_square()?;
        if rhs.len() != self.rows {
            return Err(LabError::Dimension(format!(
                "right-hand side of length {} for a {}x{} system",
                rhs.len(),
                self.rows,
                self.cols
            )));
        }
        let a = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let b = nalgebra::DVector::from_column_slice(rhs);
        a.lu()
            .solve(&b)
            .map(|x| x.as_slice().to_vec())
            .ok_or_else(|| LabError::Argument("singular linear system".into()))
    }

    fn require_square(&self) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(LabError::Dimension(format!(
                "square matrix required, got {}x{}",
                self.rows, self.cols
            )))
        }
    }
}

/// An offending matrix entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeMembership {
    pub in_nonneg: bool,
    pub in_metzler: bool,
    pub in_diagonal: bool,
    /// Most negative off-diagonal entry, if any is negative.
    pub worst_offender: Option<Offender>,
}

pub fn is_nonneg(a: &DenseMatrix, tol: f64) -> bool {
    a.data.iter().all(|&v| v >= -tol)
}

pub fn is_metzler(a: &DenseMatrix, tol: f64) -> Result<bool> {
    a.require_square()?;
    Ok(off_diagonal(a).all(|(_, _, v)| v >= -tol))
}

pub fn is_diagonal(a: &DenseMatrix, tol: f64) -> Result<bool> {
    a.require_square()?;
    Ok(off_diagonal(a).all(|(_, _, v)| v.abs() <= tol))
}

fn off_diagonal(a: &DenseMatrix) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    (0..a.rows)
        .flat_map(move |i| (0..a.cols).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| (i, j, a.get(i, j)))
}

/// Membership in all three cones. Non-square matrices belong to neither
/// the Metzler nor the diagonal cone.
pub fn cone_membership(a: &DenseMatrix, tol: f64) -> ConeMembership {
    let worst_offender = off_diagonal(a)
        .filter(|&(_, _, v)| v < 0.0)
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .map(|(row, col, value)| Offender { row, col, value });
    ConeMembership {
        in_nonneg: is_nonneg(a, tol),
        in_metzler: is_metzler(a, tol).unwrap_or(false),
        in_diagonal: is_diagonal(a, tol).unwrap_or(false),
        worst_offender,
    }
}

/// Outcome of the cone-preservation test `x >= 0 => A x >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preservation {
    pub preserves: bool,
    /// Index `j` of a basis vector `e_j` with a negative image.
    pub witness_basis: Option<usize>,
}

/// Tests whether `A` maps the nonnegative orthant into itself.
///
/// The verdict comes from the basis-vector test. Random nonnegative samples
/// are then checked against it.
///
/// # Panics
///
/// Panics if a sampled `x >= 0` has a negative image although every basis
/// vector passed, which would mean the arithmetic itself is broken.
pub fn cone_preservation_check(a: &DenseMatrix, sample_count: usize, seed: u64) -> Preservation {
    let witness_basis = (0..a.cols).find(|&j| (0..a.rows).any(|i| a.get(i, j) < 0.0));
    let preserves = witness_basis.is_none();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; a.cols];
    let mut image = vec![0.0; a.rows];
    for _ in 0..sample_count {
        for v in x.iter_mut() {
            *v = if rng.random_bool(0.25) { 0.0 } else { rng.random::<f64>() };
        }
        a.mul_vec_into(&x, &mut image);
        let sampled_ok = image.iter().all(|&v| v >= 0.0);
        assert!(
            sampled_ok || !preserves,
            "cone preservation: sampled image {image:?} of {x:?} is negative but every column is nonnegative"
        );
    }
    Preservation {
        preserves,
        witness_basis,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonneg_examples() {
        assert!(is_nonneg(&DenseMatrix::identity(2), 0.0));
        let m = DenseMatrix::from_rows(&[&[1.0, -1.0], &[0.0, 2.0]]).unwrap();
        assert!(!is_nonneg(&m, 0.0));
        let m = DenseMatrix::from_rows(&[&[0.0, 1e-13], &[-1e-13, 0.0]]).unwrap();
        assert!(is_nonneg(&m, 1e-12));
    }

    #[test]
    fn metzler_and_diagonal_examples() {
        let d = DenseMatrix::from_rows(&[&[-5.0, 0.0], &[0.0, -7.0]]).unwrap();
        assert!(is_metzler(&d, 0.0).unwrap());
        let r = DenseMatrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]).unwrap();
        assert!(!is_metzler(&r, 0.0).unwrap());
        let m = DenseMatrix::from_rows(&[&[3.0, 1e-3], &[0.0, -2.0]]).unwrap();
        assert!(!is_diagonal(&m, 0.0).unwrap());
        assert!(is_diagonal(&DenseMatrix::from_diagonal(&[3.0, -2.0]), 0.0).unwrap());
        for v in [-3.0, 0.0, 2.5] {
            let s = DenseMatrix::scalar(v);
            assert!(is_metzler(&s, 0.0).unwrap() && is_diagonal(&s, 0.0).unwrap());
        }
    }

    #[test]
    fn non_square_is_dimension_error() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(is_metzler(&m, 0.0), Err(LabError::Dimension(_))));
        assert!(matches!(is_diagonal(&m, 0.0), Err(LabError::Dimension(_))));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn preservation_examples() {
        let ok = DenseMatrix::from_rows(&[&[1.0, 2.0], &[0.0, 3.0]]).unwrap();
        assert!(cone_preservation_check(&ok, 100, 1).preserves);
        let bad = DenseMatrix::from_rows(&[&[1.0, -0.5], &[0.0, 3.0]]).unwrap();
        let p = cone_preservation_check(&bad, 100, 1);
        assert!(!p.preserves);
        assert_eq!(p.witness_basis, Some(1));
        assert!(cone_preservation_check(&DenseMatrix::zeros(3, 2), 10, 0).preserves);
    }

    #[test]
    fn worst_offender_is_most_negative_off_diagonal() {
        let m = DenseMatrix::from_rows(&[&[-9.0, -1.0], &[-2.0, 0.0]]).unwrap();
        let c = cone_membership(&m, 0.0);
        assert_eq!(
            c.worst_offender,
            Some(Offender {
                row: 1,
                col: 0,
                value: -2.0
            })
        );
        assert!(!c.in_metzler);
    }

    #[test]
    fn solve_small_system() {
        let m = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]).unwrap();
        let x = m.solve(&[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }
}
