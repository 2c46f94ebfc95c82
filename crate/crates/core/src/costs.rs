//! Measurement cost functions and their exact first and second derivatives.
//!
//! Every evaluator works on a pair of poses `p = (x, u)` and `p' = (x', u')`
//! and returns a [`CostEval`]: the value, the two 4-element gradients and the
//! Hessian blocks `H_pp`, `H_pp'` and `H_p'p'` (with `H_p'p = H_pp'ᵀ`). Pose
//! blocks are laid out as `[x1, x2, u1, u2]`.
//!
//! Blocks are written out term by term as they arise from the chain rule
//! rather than simplified, so each one can be checked in isolation against
//! finite differences (see [`crate::fd_oracle`]).

use nalgebra::{Matrix2, Matrix4, SMatrix, SVector, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::orvec::{normalize_with, omega, omega_bar, unit_projector, OrMat, OrVec};

/// Norm threshold for `u`, `u'` and `δ` wherever a cost normalizes them.
pub const COST_DEGENERATE_NORM: f64 = 1e-9;

/// A robot pose in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: Vector2<f64>,
    /// Orientation vector; only unit length at a constrained solution.
    pub u: OrVec,
}

impl Pose {
    pub fn new(x1: f64, x2: f64, u1: f64, u2: f64) -> Self {
        Pose {
            x: Vector2::new(x1, x2),
            u: Vector2::new(u1, u2),
        }
    }

    pub fn from_angle(x1: f64, x2: f64, theta: f64) -> Self {
        Pose {
            x: Vector2::new(x1, x2),
            u: crate::orvec::from_angle(theta),
        }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x[0], self.x[1], self.u[0], self.u[1])
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Pose::new(v[0], v[1], v[2], v[3])
    }

    pub fn theta(&self) -> f64 {
        crate::orvec::to_angle(&self.u)
    }
}

/// Which family of rotational cost is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotForm {
    /// `t1 + t̄1 ‖u‖‖u'‖ - (Φu)ᵀu'` (un-normalized).
    First,
    /// `1 - (Φ u/‖u‖)ᵀ u'/‖u'‖` (invariant to constraint violations).
    Second,
}

/// Shared configuration of the rotation, home-vector and compass costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotCostConfig {
    pub form: RotForm,
    /// `t1 ∈ {0, 1}`; only read by [`RotForm::First`].
    pub t1: bool,
    /// Weight of all rotational terms.
    pub gamma: f64,
}

impl Default for RotCostConfig {
    fn default() -> Self {
        RotCostConfig {
            form: RotForm::First,
            t1: true,
            gamma: 1.0,
        }
    }
}

impl RotCostConfig {
    pub fn first(t1: bool) -> Self {
        RotCostConfig {
            form: RotForm::First,
            t1,
            gamma: 1.0,
        }
    }

    pub fn second() -> Self {
        RotCostConfig {
            form: RotForm::Second,
            t1: true,
            gamma: 1.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    fn t1_f(&self) -> f64 {
        if self.t1 {
            1.0
        } else {
            0.0
        }
    }
}

/// Value and derivative blocks of one cost term for a pose pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub value: f64,
    /// ∂/∂p, first pose.
    pub grad1: Vector4<f64>,
    /// ∂/∂p', second pose.
    pub grad2: Vector4<f64>,
    /// ∂/∂p (∂/∂p)ᵀ.
    pub h11: Matrix4<f64>,
    /// Rows indexed by `p`, columns by `p'`.
    pub h12: Matrix4<f64>,
    /// ∂/∂p' (∂/∂p')ᵀ.
    pub h22: Matrix4<f64>,
}

impl CostEval {
    pub fn zero() -> Self {
        CostEval {
            value: 0.0,
            grad1: Vector4::zeros(),
            grad2: Vector4::zeros(),
            h11: Matrix4::zeros(),
            h12: Matrix4::zeros(),
            h22: Matrix4::zeros(),
        }
    }

    /// Rows indexed by `p'`, columns by `p`.
    pub fn h21(&self) -> Matrix4<f64> {
        self.h12.transpose()
    }

    /// Gradient over the stacked `(p, p')` 8-vector.
    pub fn stacked_gradient(&self) -> SVector<f64, 8> {
        let mut g = SVector::<f64, 8>::zeros();
        g.fixed_rows_mut::<4>(0).copy_from(&self.grad1);
        g.fixed_rows_mut::<4>(4).copy_from(&self.grad2);
        g
    }

    /// Hessian over the stacked `(p, p')` 8-vector.
    pub fn stacked_hessian(&self) -> SMatrix<f64, 8, 8> {
        let mut h = SMatrix::<f64, 8, 8>::zeros();
        h.fixed_view_mut::<4, 4>(0, 0).copy_from(&self.h11);
        h.fixed_view_mut::<4, 4>(0, 4).copy_from(&self.h12);
        h.fixed_view_mut::<4, 4>(4, 0).copy_from(&self.h21());
        h.fixed_view_mut::<4, 4>(4, 4).copy_from(&self.h22);
        h
    }
}

fn put(m: &mut Matrix4<f64>, row: usize, col: usize, b: &Matrix2<f64>) {
    m.fixed_view_mut::<2, 2>(row, col).copy_from(b);
}

fn put_vec(v: &mut Vector4<f64>, row: usize, b: &Vector2<f64>) {
    v.fixed_rows_mut::<2>(row).copy_from(b);
}

const X: usize = 0;
const U: usize = 2;

/// Checks that `t` is symmetric positive definite and returns its inverse.
pub fn spd_inverse(t: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let asym = (t[(0, 1)] - t[(1, 0)]).abs();
    if !t.iter().all(|v| v.is_finite()) || asym > 1e-12 * t.amax().max(1.0) {
        return Err(Error::InvalidCovariance);
    }
    let chol = t.cholesky().ok_or(Error::InvalidCovariance)?;
    Ok(chol.inverse())
}

/// Translation error `½ (d - r)ᵀ T⁻¹ (d - r)` with `d = Ω(u)ᵀ (x' - x)`.
pub fn eval_translation(p: &Pose, p2: &Pose, t: &Matrix2<f64>, r: &Vector2<f64>) -> Result<CostEval> {
    let t_inv = spd_inverse(t)?;
    Ok(translation_with_inverse(p, p2, &t_inv, r))
}

pub(crate) fn translation_with_inverse(
    p: &Pose,
    p2: &Pose,
    t_inv: &Matrix2<f64>,
    r: &Vector2<f64>,
) -> CostEval {
    let um = omega(&p.u);
    let delta = p2.x - p.x;
    let d = um.transpose() * delta;
    let e = d - r;
    let te = t_inv * e;
    // Δ = Ω̄(δ) = ∂d/∂u
    let dm = omega_bar(&delta);

    let mut out = CostEval::zero();
    out.value = 0.5 * e.dot(&te);

    put_vec(&mut out.grad1, X, &(-(um * te)));
    put_vec(&mut out.grad1, U, &(dm * te));
    put_vec(&mut out.grad2, X, &(um * te));

    let utu = um * t_inv * um.transpose();
    // ∂/∂u (∂f/∂x')ᵀ = U T⁻¹ Δ + Ω(T⁻¹ [Δu - r])
    let mixed = um * t_inv * dm + omega(&(t_inv * (dm * p.u - r)));
    let h_uu = dm * t_inv * dm;

    put(&mut out.h11, X, X, &utu);
    put(&mut out.h11, X, U, &(-mixed));
    put(&mut out.h11, U, X, &(-mixed.transpose()));
    put(&mut out.h11, U, U, &h_uu);

    put(&mut out.h12, X, X, &(-utu));
    put(&mut out.h12, U, X, &mixed.transpose());

    put(&mut out.h22, X, X, &utu);
    out
}

/// Distance error `½ (1/σ_e) (‖x' - x‖ - ϱ)²`.
///
/// The weight is `1/σ_e`, not the inverse variance.
pub fn eval_distance(p: &Pose, p2: &Pose, sigma_e: f64, rho: f64) -> Result<CostEval> {
    if sigma_e.is_nan() || sigma_e <= 0.0 {
        return Err(Error::Precondition(format!("sigma_e must be positive, got {sigma_e}")));
    }
    let delta = p2.x - p.x;
    let (delta0, n) = normalize_with(&delta, COST_DEGENERATE_NORM, "delta")?;
    let w = 1.0 / sigma_e;
    let resid = n - rho;

    let mut out = CostEval::zero();
    out.value = 0.5 * w * resid * resid;
    put_vec(&mut out.grad1, X, &(-w * resid * delta0));
    put_vec(&mut out.grad2, X, &(w * resid * delta0));

    let h = w * (Matrix2::identity() - (rho / n) * unit_projector(&delta0));
    put(&mut out.h11, X, X, &h);
    put(&mut out.h12, X, X, &(-h));
    put(&mut out.h22, X, X, &h);
    Ok(out)
}

/// The generic rotational cost restricted to its `u`/`u'` blocks (unweighted).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationalEval {
    pub value: f64,
    pub grad_u: Vector2<f64>,
    pub grad_u2: Vector2<f64>,
    pub h_uu: Matrix2<f64>,
    /// Rows `u`, columns `u'`.
    pub h_uu2: Matrix2<f64>,
    pub h_u2u2: Matrix2<f64>,
}

impl RotationalEval {
    fn scaled(self, w: f64) -> Self {
        RotationalEval {
            value: w * self.value,
            grad_u: w * self.grad_u,
            grad_u2: w * self.grad_u2,
            h_uu: w * self.h_uu,
            h_uu2: w * self.h_uu2,
            h_u2u2: w * self.h_u2u2,
        }
    }

    fn into_cost_eval(self) -> CostEval {
        let mut out = CostEval::zero();
        out.value = self.value;
        put_vec(&mut out.grad1, U, &self.grad_u);
        put_vec(&mut out.grad2, U, &self.grad_u2);
        put(&mut out.h11, U, U, &self.h_uu);
        put(&mut out.h12, U, U, &self.h_uu2);
        put(&mut out.h22, U, U, &self.h_u2u2);
        out
    }
}

/// Generic rotational cost `s(Φ, u, u')` or `s̄(Φ, u, u')` and its derivatives.
///
/// Shared kernel of the rotation and compass errors.
pub fn eval_generic_rotational(
    phi: &OrMat,
    u: &OrVec,
    u2: &OrVec,
    cfg: &RotCostConfig,
) -> Result<RotationalEval> {
    match cfg.form {
        RotForm::First => Ok(generic_first_form(phi, u, u2, cfg.t1_f())?),
        RotForm::Second => generic_second_form(phi, u, u2),
    }
}

fn generic_first_form(phi: &OrMat, u: &OrVec, u2: &OrVec, t1: f64) -> Result<RotationalEval> {
    let tb = 1.0 - t1;
    let cross = (phi * u).dot(u2);
    if tb == 0.0 {
        return Ok(RotationalEval {
            value: t1 - cross,
            grad_u: -(phi.transpose() * u2),
            grad_u2: -(phi * u),
            h_uu: Matrix2::zeros(),
            h_uu2: -phi.transpose(),
            h_u2u2: Matrix2::zeros(),
        });
    }
    let (u0, nu) = normalize_with(u, COST_DEGENERATE_NORM, "u")?;
    let (u20, nu2) = normalize_with(u2, COST_DEGENERATE_NORM, "u'")?;
    Ok(RotationalEval {
        value: t1 + tb * nu * nu2 - cross,
        grad_u: tb * nu2 * u0 - phi.transpose() * u2,
        grad_u2: tb * nu * u20 - phi * u,
        h_uu: tb * (nu2 / nu) * unit_projector(&u0),
        h_uu2: tb * u0 * u20.transpose() - phi.transpose(),
        h_u2u2: tb * (nu / nu2) * unit_projector(&u20),
    })
}

fn generic_second_form(phi: &OrMat, u: &OrVec, u2: &OrVec) -> Result<RotationalEval> {
    let (u0, nu) = normalize_with(u, COST_DEGENERATE_NORM, "u")?;
    let (u20, nu2) = normalize_with(u2, COST_DEGENERATE_NORM, "u'")?;
    let pu = unit_projector(&u0);
    let pu2 = unit_projector(&u20);
    let phit = phi.transpose();
    let id = Matrix2::identity();

    let c = u0.dot(&(phit * u20));
    let h_uu = (phit * u20 * u0.transpose()
        + c * (id - 3.0 * u0 * u0.transpose())
        + u0 * u20.transpose() * phi)
        / (nu * nu);
    let h_u2u2 = (phi * u0 * u20.transpose()
        + c * (id - 3.0 * u20 * u20.transpose())
        + u20 * u0.transpose() * phit)
        / (nu2 * nu2);

    Ok(RotationalEval {
        value: 1.0 - c,
        grad_u: -(pu * phit * u20) / nu,
        grad_u2: -(pu2 * phi * u0) / nu2,
        h_uu,
        h_uu2: -(pu * phit * pu2) / (nu * nu2),
        h_u2u2,
    })
}

fn check_sigma(sigma: f64, name: &str) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} must be positive, got {sigma}")))
    }
}

/// Odometry rotation error, weight `γ/σ²`, rotation matrix `Q = Ω(q)`.
pub fn eval_rotation(p: &Pose, p2: &Pose, q: &OrMat, sigma: f64, cfg: &RotCostConfig) -> Result<CostEval> {
    check_sigma(sigma, "sigma")?;
    let w = cfg.gamma / (sigma * sigma);
    Ok(eval_generic_rotational(q, &p.u, &p2.u, cfg)?
        .scaled(w)
        .into_cost_eval())
}

/// Compass error, weight `γ/σ_c²`, compass matrix `Ψ = Ω(ψ)`.
pub fn eval_compass(p: &Pose, p2: &Pose, psi: &OrMat, sigma_c: f64, cfg: &RotCostConfig) -> Result<CostEval> {
    check_sigma(sigma_c, "sigma_c")?;
    let w = cfg.gamma / (sigma_c * sigma_c);
    Ok(eval_generic_rotational(psi, &p.u, &p2.u, cfg)?
        .scaled(w)
        .into_cost_eval())
}

/// Home-vector error between `A u` and the direction `δ0` from `x` to `x'`.
///
/// First form: `γ/σ_h² (t1 + t̄1‖u‖ - (Au)ᵀδ0)`; second form normalizes `u`.
/// The second pose's orientation does not enter.
pub fn eval_home_vector(
    p: &Pose,
    p2: &Pose,
    a: &OrMat,
    sigma_h: f64,
    cfg: &RotCostConfig,
) -> Result<CostEval> {
    check_sigma(sigma_h, "sigma_h")?;
    let w = cfg.gamma / (sigma_h * sigma_h);
    let delta = p2.x - p.x;
    let (d0, nd) = normalize_with(&delta, COST_DEGENERATE_NORM, "delta")?;
    let pd = unit_projector(&d0);
    let id = Matrix2::identity();
    let at = a.transpose();

    let mut out = CostEval::zero();

    // v is the rotated orientation matched against δ0
    let (v, grad_u, h_xu, h_uu) = match cfg.form {
        RotForm::First => {
            let t1 = cfg.t1_f();
            let tb = 1.0 - t1;
            let v = a * p.u;
            let (norm_term, grad_norm, h_uu) = if tb == 0.0 {
                (0.0, Vector2::zeros(), Matrix2::zeros())
            } else {
                let (u0, nu) = normalize_with(&p.u, COST_DEGENERATE_NORM, "u")?;
                (nu, u0, (tb / nu) * unit_projector(&u0))
            };
            out.value = w * (t1 + tb * norm_term - v.dot(&d0));
            let grad_u = w * (tb * grad_norm - at * d0);
            let h_xu = (w / nd) * pd * a;
            (v, grad_u, h_xu, w * h_uu)
        }
        RotForm::Second => {
            let (u0, nu) = normalize_with(&p.u, COST_DEGENERATE_NORM, "u")?;
            let pu = unit_projector(&u0);
            let v = a * u0;
            out.value = w * (1.0 - v.dot(&d0));
            let grad_u = -(w / nu) * pu * at * d0;
            let h_xu = (w / (nd * nu)) * pd * a * pu;
            let c = u0.dot(&(at * d0));
            let h_uu = (w / (nu * nu))
                * (at * d0 * u0.transpose() + c * (id - 3.0 * u0 * u0.transpose()) + u0 * d0.transpose() * a);
            (v, grad_u, h_xu, h_uu)
        }
    };

    let grad_x = (w / nd) * pd * v;
    put_vec(&mut out.grad1, X, &grad_x);
    put_vec(&mut out.grad1, U, &grad_u);
    put_vec(&mut out.grad2, X, &(-grad_x));

    let c = d0.dot(&v);
    let k = (v * d0.transpose() + c * (id - 3.0 * d0 * d0.transpose()) + d0 * v.transpose()) / (nd * nd);
    let h_xx = w * k;
    // ∂/∂u (∂h/∂x')ᵀ = -∂/∂u (∂h/∂x)ᵀ
    let h_x2u = -h_xu;

    put(&mut out.h11, X, X, &h_xx);
    put(&mut out.h11, X, U, &h_xu);
    put(&mut out.h11, U, X, &h_xu.transpose());
    put(&mut out.h11, U, U, &h_uu);

    put(&mut out.h12, X, X, &(-h_xx));
    put(&mut out.h12, U, X, &h_x2u.transpose());

    put(&mut out.h22, X, X, &h_xx);
    Ok(out)
}
