//! Solves of the regularized bordered system `(H + R) Δs = b`.
//!
//! `H` is symmetric but indefinite, so Cholesky is out. Small systems use a
//! dense Bunch-Kaufman `LBLᵀ` factorization, large ones a sparse LU with
//! partial pivoting. Either result is accepted only if it is finite and
//! leaves a small residual.

use faer::prelude::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::{DVector, LBLT};

use crate::assembly::SparseSymmetricSystem;
use crate::error::{Error, Result};
use crate::graph::BLOCK;

/// Free-pose count from which [`LinearSolver::Auto`] switches to sparse LU.
pub const SPARSE_FROM_POSES: usize = 99;

/// Largest accepted `‖(H+R)x - b‖ / (‖H+R‖·‖x‖ + ‖b‖)`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    #[default]
    Auto,
    Dense,
    Sparse,
}

impl LinearSolver {
    fn use_sparse(self, free_poses: usize) -> bool {
        match self {
            LinearSolver::Auto => free_poses >= SPARSE_FROM_POSES,
            LinearSolver::Dense => false,
            LinearSolver::Sparse => true,
        }
    }
}

/// Solves `(H + diag(d, d, …)) x = b` where `d` repeats per free pose.
pub fn solve_regularized(
    sys: &SparseSymmetricSystem,
    diag: &[f64; BLOCK],
    b: &DVector<f64>,
    kind: LinearSolver,
) -> Result<DVector<f64>> {
    let mut reg = sys.clone();
    if diag.iter().any(|&v| v != 0.0) {
        reg.add_diagonal(diag);
    }
    let x = if kind.use_sparse(sys.free_count()) {
        solve_sparse(&reg, b)?
    } else {
        solve_dense(&reg, b)?
    };
    check_solution(&reg, &x, b)?;
    Ok(x)
}

fn solve_dense(sys: &SparseSymmetricSystem, b: &DVector<f64>) -> Result<DVector<f64>> {
    LBLT::new(sys.to_dense())
        .solve(b)
        .ok_or_else(|| Error::NumericalFailure("singular system (zero pivot in LBLT)".into()))
}

fn solve_sparse(sys: &SparseSymmetricSystem, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = sys.dim();
    let trips: Vec<Triplet<usize, usize, f64>> = sys
        .triplets()
        .into_iter()
        .map(|(r, c, v)| Triplet::new(r, c, v))
        .collect();
    let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
        .map_err(|e| Error::NumericalFailure(format!("sparse matrix construction failed: {e:?}")))?;
    let lu = m
        .sp_lu()
        .map_err(|e| Error::NumericalFailure(format!("sparse LU failed: {e:?}")))?;
    let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    lu.solve_in_place(rhs.as_mut());
    Ok(DVector::from_fn(n, |i, _| rhs[(i, 0)]))
}

fn check_solution(sys: &SparseSymmetricSystem, x: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalFailure("non-finite solution".into()));
    }
    let r = sys.mul_vec(x) - b;
    let h_norm = sys.blocks().values().map(|m| m.amax()).fold(0.0, f64::max);
    let scale = h_norm * x.amax() + b.amax();
    if scale > 0.0 && r.amax() > RESIDUAL_TOLERANCE * scale {
        return Err(Error::NumericalFailure(format!(
            "linear solve residual {:.3e} too large (scale {:.3e})",
            r.amax(),
            scale
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix5;

    fn one_block(m: Matrix5<f64>) -> SparseSymmetricSystem {
        let mut s = SparseSymmetricSystem::new(1);
        *s.block_mut(0, 0) = m;
        s
    }

    #[test]
    fn identity_system() {
        let s = one_block(Matrix5::identity());
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5, 4.0]);
        for kind in [LinearSolver::Dense, LinearSolver::Sparse] {
            let x = solve_regularized(&s, &[0.0; 5], &(-&v), kind).unwrap();
            assert!((x + &v).amax() < 1e-15);
        }
    }

    #[test]
    fn saddle_two_by_two() {
        // [[1,1],[1,0]] embedded in the leading corner, identity elsewhere
        let mut m = Matrix5::identity();
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 1.0;
        m[(1, 1)] = 0.0;
        let s = one_block(m);
        let g = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 0.0]);
        for kind in [LinearSolver::Dense, LinearSolver::Sparse] {
            let x = solve_regularized(&s, &[0.0; 5], &(-&g), kind).unwrap();
            assert!((x[0] + 1.0).abs() < 1e-15 && x[1].abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn singular_is_numerical_failure() {
        let s = one_block(Matrix5::zeros());
        let b = DVector::from_element(5, 1.0);
        for kind in [LinearSolver::Dense, LinearSolver::Sparse] {
            assert!(matches!(
                solve_regularized(&s, &[0.0; 5], &b, kind),
                Err(Error::NumericalFailure(_))
            ));
        }
    }

    #[test]
    fn regularization_applied() {
        let s = one_block(Matrix5::zeros());
        let b = DVector::from_element(5, 1.0);
        let x = solve_regularized(&s, &[2.0, 2.0, 2.0, 2.0, -4.0], &b, LinearSolver::Dense).unwrap();
        assert!((x - DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5, -0.25])).amax() < 1e-15);
    }
}
