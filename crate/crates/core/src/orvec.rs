//! Orientation-vector algebra.
//!
//! An angle θ is carried as the 2-vector `(cos θ, sin θ)`. Measurement vectors
//! are exactly unit length; state vectors only approach unit length through
//! the Lagrange constraint, so nothing here enforces normalization.
//!
//! The two operators used throughout the cost functions are
//!
//! ```text
//! Ω(z) = | z1  -z2 |        Ω̄(z) = | z1   z2 |  = Ω(z) M = M z1 + N z2
//!        | z2   z1 |               | z2  -z1 |
//! ```
//!
//! with the constant reflections `M = diag(1, -1)` and `N = [[0, 1], [1, 0]]`.
//! Ω(z) applied to a vector rotates it by the angle of `z` (when `z` is unit),
//! and the Jacobian of `z ↦ Ω(z)ᵀ x` is `Ω̄(x)`, the Jacobian of `z ↦ Ω(z) x`
//! is `Ω(x)`.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

/// A 2D orientation vector (angle encoded as a direction).
pub type OrVec = Vector2<f64>;

/// A 2×2 orientation-like matrix built from an [`OrVec`].
pub type OrMat = Matrix2<f64>;

/// Norms below this are rejected by [`normalize`] and [`norm_projector`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// `M = diag(1, -1)`.
pub const M: OrMat = Matrix2::new(1.0, 0.0, 0.0, -1.0);

/// `N = [[0, 1], [1, 0]]`.
pub const N: OrMat = Matrix2::new(0.0, 1.0, 1.0, 0.0);

/// Ω(z) = [[z1, -z2], [z2, z1]].
#[inline]
pub fn omega(z: &OrVec) -> OrMat {
    Matrix2::new(z[0], -z[1], z[1], z[0])
}

/// Ω̄(z) = [[z1, z2], [z2, -z1]].
#[inline]
pub fn omega_bar(z: &OrVec) -> OrMat {
    Matrix2::new(z[0], z[1], z[1], -z[0])
}

/// Orientation vector for an angle in radians.
#[inline]
pub fn from_angle(theta: f64) -> OrVec {
    Vector2::new(theta.cos(), theta.sin())
}

/// Angle encoded by `z` (its norm is ignored).
#[inline]
pub fn to_angle(z: &OrVec) -> f64 {
    z[1].atan2(z[0])
}

/// Returns `(z / ‖z‖, ‖z‖)`.
pub fn normalize(z: &OrVec) -> Result<(OrVec, f64)> {
    normalize_with(z, DEGENERATE_NORM, "z")
}

pub(crate) fn normalize_with(z: &OrVec, min_norm: f64, what: &'static str) -> Result<(OrVec, f64)> {
    let n = z.norm();
    if n.is_nan() || n < min_norm {
        return Err(Error::DegenerateVector { what, norm: n });
    }
    Ok((z / n, n))
}

/// Jacobian of `z ↦ z/‖z‖`, i.e. `(I - z0 z0ᵀ) / ‖z‖`.
pub fn norm_projector(z: &OrVec) -> Result<OrMat> {
    let (z0, n) = normalize(z)?;
    Ok(unit_projector(&z0) / n)
}

/// `I - z0 z0ᵀ` for an already normalized `z0`.
#[inline]
pub(crate) fn unit_projector(z0: &OrVec) -> OrMat {
    OrMat::identity() - z0 * z0.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_mat_eq(a: &OrMat, b: &OrMat, tol: f64) {
        assert!((a - b).amax() <= tol, "{a} != {b}");
    }

    #[test]
    fn omega_worked_example() {
        let q = Vector2::new(3f64.sqrt() / 2.0, 0.5);
        let expected = Matrix2::new(3f64.sqrt() / 2.0, -0.5, 0.5, 3f64.sqrt() / 2.0);
        assert_eq!(omega(&q), expected);
        let u = Vector2::new(0.5, 3f64.sqrt() / 2.0);
        let qu = omega(&q) * u;
        assert!((qu - Vector2::new(0.0, 1.0)).amax() < 1e-15);
    }

    #[test]
    fn omega_of_unit_x_is_identity() {
        assert_eq!(omega(&Vector2::new(1.0, 0.0)), OrMat::identity());
    }

    #[test]
    fn omega_bar_basis() {
        assert_eq!(omega_bar(&Vector2::new(1.0, 0.0)), M);
        assert_eq!(omega_bar(&Vector2::new(0.0, 1.0)), N);
        assert_eq!(
            omega_bar(&Vector2::new(3.0, -2.0)),
            Matrix2::new(3.0, -2.0, -2.0, -3.0)
        );
    }

    #[test]
    fn omega_bar_decompositions() {
        let z = Vector2::new(0.3, -1.7);
        assert_eq!(omega_bar(&z), omega(&z) * M);
        assert_eq!(omega_bar(&z), M * z[0] + N * z[1]);
    }

    #[test]
    fn normalize_cases() {
        let (v, n) = normalize(&Vector2::new(3.0, 4.0)).unwrap();
        assert_eq!(n, 5.0);
        assert!((v - Vector2::new(0.6, 0.8)).amax() < 1e-15);
        let (v, n) = normalize(&Vector2::new(1.0, 0.0)).unwrap();
        assert_eq!((v, n), (Vector2::new(1.0, 0.0), 1.0));
        assert!(matches!(
            normalize(&Vector2::zeros()),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn projector_cases() {
        assert_mat_eq(
            &norm_projector(&Vector2::new(1.0, 0.0)).unwrap(),
            &Matrix2::new(0.0, 0.0, 0.0, 1.0),
            0.0,
        );
        assert_mat_eq(
            &norm_projector(&Vector2::new(2.0, 0.0)).unwrap(),
            &Matrix2::new(0.0, 0.0, 0.0, 0.5),
            0.0,
        );
        let z = from_angle(0.77);
        assert!((norm_projector(&z).unwrap() * z).amax() < 1e-15);
        assert!(norm_projector(&Vector2::new(1e-13, 0.0)).is_err());
    }

    #[test]
    fn angle_round_trip() {
        for &t in &[-3.0, -1.2, 0.0, 0.4, 2.9] {
            assert!((to_angle(&from_angle(t)) - t).abs() < 1e-15);
        }
    }
}
