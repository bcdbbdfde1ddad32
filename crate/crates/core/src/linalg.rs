//! Dense symmetric linear algebra on top of faer.

use crate::error::{PlrError, Result};
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt_pivoting;
use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &Mat<f64>) -> Result<Vec<f64>> {
    if a.nrows() != a.ncols() {
        return Err(PlrError::Shape {
            expected: "square matrix".into(),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let mut ev = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| PlrError::Divergence(format!("eigensolver failed: {e:?}")))?;
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// `P A Pᵀ ≈ L Lᵀ` with diagonal pivoting; `L` is `n × rank`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    /// `perm[i]` is the original index placed at position `i`.
    pub perm: Vec<usize>,
    pub rank: usize,
    pub l: Mat<f64>,
}

impl PivotedCholesky {
    pub fn new(a: MatRef<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        let mut work = a.to_owned();
        let mut perm = vec![0usize; n];
        let mut perm_inv = vec![0usize; n];
        let mut buf = MemBuffer::new(llt_pivoting::factor::cholesky_in_place_scratch::<usize, f64>(
            n,
            Par::Seq,
            Default::default(),
        ));
        let stack = MemStack::new(&mut buf);
        let rank = match llt_pivoting::factor::cholesky_in_place(
            work.as_mut(),
            &mut perm,
            &mut perm_inv,
            Par::Seq,
            stack,
            Default::default(),
        ) {
            Ok((info, _)) => info.rank,
            Err(e) => return Err(PlrError::Divergence(format!("pivoted Cholesky failed: {e:?}"))),
        };
        let l = Mat::from_fn(n, rank, |i, j| if i >= j { work[(i, j)] } else { 0.0 });
        Ok(Self { perm, rank, l })
    }

    /// Leading `rank × rank` triangle.
    pub fn l11(&self) -> MatRef<'_, f64> {
        self.l.as_ref().subrows(0, self.rank)
    }

    /// Solves `L11ᵀ y = b` in place.
    pub fn solve_upper_in_place(&self, b: &mut Mat<f64>) {
        triangular_solve::solve_upper_triangular_in_place(self.l11().transpose(), b.as_mut(), Par::Seq);
    }

    /// Solves `L11 y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut Mat<f64>) {
        triangular_solve::solve_lower_triangular_in_place(self.l11(), b.as_mut(), Par::Seq);
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: &Mat<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let llt = a.llt(Side::Lower).ok()?;
    let rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    let x = llt.solve(&rhs);
    let v: Vec<f64> = (0..b.len()).map(|i| x[(i, 0)]).collect();
    v.iter().all(|x| x.is_finite()).then_some(v)
}

/// `out = a * b`.
pub fn mat_mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

/// `a * v` for a column vector `v`.
pub fn mat_vec(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj != 0.0 {
            for (o, &aij) in out.iter_mut().zip(a.col(j).iter()) {
                *o += aij * vj;
            }
        }
    }
    out
}

/// `aᵀ * v`.
pub fn mat_t_vec(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| a.col(j).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
