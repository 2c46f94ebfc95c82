//! Unit-length constraints `l(u) = ½(uᵀu - 1)` and their multipliers.

use nalgebra::{DVector, Matrix2, Vector2};

use crate::assembly::{self, ActiveMask};
use crate::costs::RotCostConfig;
use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::orvec::OrVec;

/// Tolerance on `‖u‖ - 1` required by [`init_lambdas`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// The constraint term `w = λ l(u)` and its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub w: f64,
    pub l: f64,
    pub grad_u: Vector2<f64>,
    pub grad_lambda: f64,
    pub h_uu: Matrix2<f64>,
    /// ∂²w/∂u∂λ; the λ-λ entry is always zero.
    pub h_ulambda: Vector2<f64>,
}

#[inline]
pub fn constraint_residual(u: &OrVec) -> f64 {
    0.5 * (u.dot(u) - 1.0)
}

pub fn eval_constraint(lambda: f64, u: &OrVec) -> ConstraintEval {
    let l = constraint_residual(u);
    ConstraintEval {
        w: lambda * l,
        l,
        grad_u: lambda * u,
        grad_lambda: l,
        h_uu: Matrix2::identity() * lambda,
        h_ulambda: *u,
    }
}

/// Initial multipliers `λ_i = -u_iᵀ ∂F/∂u_i` for every free pose, in layout order.
///
/// Only valid when every free orientation is unit length; then the general
/// least-squares estimate reduces to this projection.
pub fn init_lambdas(graph: &FactorGraph, cfg: &RotCostConfig, active: &ActiveMask) -> Result<Vec<f64>> {
    let layout = graph.layout();
    for (slot, &i) in layout.free_poses().iter().enumerate() {
        let n = graph.poses()[i].u.norm();
        if n.is_nan() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Precondition(format!(
                "initial orientation of pose {} (free slot {slot}) has norm {n}, expected 1",
                i + 1
            )));
        }
    }
    // λ = 0 everywhere, so the assembled gradient is exactly ∇F
    let state = graph.pack_state(&vec![0.0; layout.free_count()]);
    let g = assembly::cost_gradient(graph, &state, cfg, active)?;
    Ok(lambdas_from_gradient(graph, &state, &g))
}

fn lambdas_from_gradient(graph: &FactorGraph, state: &DVector<f64>, g: &DVector<f64>) -> Vec<f64> {
    let layout = graph.layout();
    (0..layout.free_count())
        .map(|slot| {
            let o = layout.offset(slot);
            let u = state.fixed_rows::<2>(o + 2);
            let gu = g.fixed_rows::<2>(o + 2);
            -u.dot(&gu)
        })
        .collect()
}
