//! Assembly of the Lagrangian's gradient and bordered Hessian.
//!
//! Measurements are visited in a fixed order: each odometry record yields a
//! translation, optional distance and rotation term, then each homing record
//! yields a home-vector and a compass term. Every term is scattered into the
//! blocks of the free poses it touches; a term touching the fixed pose only
//! contributes to the other pose's rows and columns. Constraint terms come
//! last.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix5};

use crate::constraints::eval_constraint;
use crate::costs::{
    eval_compass, eval_distance, eval_home_vector, eval_rotation, eval_translation, CostEval, RotCostConfig,
};
use crate::error::{MeasurementId, Result};
use crate::graph::{FactorGraph, BLOCK};

/// Which optional terms take part in an assembly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveMask {
    /// Per odometry record: include the distance error.
    pub distance: Vec<bool>,
    /// Per homing record: include the home-vector and compass errors.
    pub homing: Vec<bool>,
}

impl ActiveMask {
    /// Every homing record active; distance errors as requested.
    pub fn all(graph: &FactorGraph, use_distance: bool) -> Self {
        ActiveMask {
            distance: vec![use_distance; graph.odometry().len()],
            homing: vec![true; graph.homing().len()],
        }
    }

    /// Drops homing (and distance) terms whose poses are closer than `threshold`.
    ///
    /// The home direction is undefined for coincident positions and flips
    /// discontinuously near them.
    pub fn compute(graph: &FactorGraph, state: &DVector<f64>, threshold: f64, use_distance: bool) -> Self {
        let apart = |i1: usize, i2: usize| {
            let d = graph.pose_at(state, i2).x - graph.pose_at(state, i1).x;
            d.norm() >= threshold
        };
        ActiveMask {
            distance: graph
                .odometry()
                .iter()
                .map(|m| use_distance && apart(m.i1, m.i2))
                .collect(),
            homing: graph.homing().iter().map(|m| apart(m.i1, m.i2)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Translation,
    Distance,
    Rotation,
    HomeVector,
    Compass,
}

/// One evaluated cost term between poses `i1` and `i2`.
#[derive(Debug, Clone)]
pub struct Term {
    pub id: MeasurementId,
    pub kind: TermKind,
    pub i1: usize,
    pub i2: usize,
    pub eval: CostEval,
}

/// Evaluates all active cost terms at `state` in assembly order.
pub fn measurement_terms(
    graph: &FactorGraph,
    state: &DVector<f64>,
    cfg: &RotCostConfig,
    active: &ActiveMask,
) -> Result<Vec<Term>> {
    graph.layout().check(state)?;
    let mut terms = Vec::with_capacity(3 * graph.odometry().len() + 2 * graph.homing().len());
    for (k, m) in graph.odometry().iter().enumerate() {
        let id = MeasurementId::Odometry(k);
        let p = graph.pose_at(state, m.i1);
        let p2 = graph.pose_at(state, m.i2);
        let mut push = |kind, eval: Result<CostEval>| -> Result<()> {
            terms.push(Term {
                id,
                kind,
                i1: m.i1,
                i2: m.i2,
                eval: eval.map_err(|e| e.in_measurement(id))?,
            });
            Ok(())
        };
        push(TermKind::Translation, eval_translation(&p, &p2, &m.t, &m.r))?;
        if active.distance[k] {
            push(TermKind::Distance, eval_distance(&p, &p2, m.sigma_e, m.rho))?;
        }
        push(TermKind::Rotation, eval_rotation(&p, &p2, &m.q_matrix(), m.sigma, cfg))?;
    }
    for (k, m) in graph.homing().iter().enumerate() {
        if !active.homing[k] {
            continue;
        }
        let id = MeasurementId::Homing(k);
        let p = graph.pose_at(state, m.i1);
        let p2 = graph.pose_at(state, m.i2);
        let home = eval_home_vector(&p, &p2, &m.a_matrix(), m.sigma_h, cfg).map_err(|e| e.in_measurement(id))?;
        terms.push(Term {
            id,
            kind: TermKind::HomeVector,
            i1: m.i1,
            i2: m.i2,
            eval: home,
        });
        let compass = eval_compass(&p, &p2, &m.psi_matrix(), m.sigma_c, cfg).map_err(|e| e.in_measurement(id))?;
        terms.push(Term {
            id,
            kind: TermKind::Compass,
            i1: m.i1,
            i2: m.i2,
            eval: compass,
        });
    }
    Ok(terms)
}

/// Gradient `g` and block-sparse symmetric Hessian `H` of the Lagrangian.
///
/// Both triangles are stored. Block `(k, l)` is the 5×5 coupling of free
/// slots `k` and `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricSystem {
    free: usize,
    blocks: BTreeMap<(usize, usize), Matrix5<f64>>,
    pub g: DVector<f64>,
}

impl SparseSymmetricSystem {
    pub fn new(free: usize) -> Self {
        SparseSymmetricSystem {
            free,
            blocks: BTreeMap::new(),
            g: DVector::zeros(BLOCK * free),
        }
    }

    pub fn dim(&self) -> usize {
        BLOCK * self.free
    }

    pub fn free_count(&self) -> usize {
        self.free
    }

    pub fn blocks(&self) -> &BTreeMap<(usize, usize), Matrix5<f64>> {
        &self.blocks
    }

    pub fn block(&self, k: usize, l: usize) -> Option<&Matrix5<f64>> {
        self.blocks.get(&(k, l))
    }

    pub fn block_mut(&mut self, k: usize, l: usize) -> &mut Matrix5<f64> {
        self.blocks.entry((k, l)).or_insert_with(Matrix5::zeros)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for (&(k, l), b) in &self.blocks {
            h.fixed_view_mut::<5, 5>(BLOCK * k, BLOCK * l).copy_from(b);
        }
        h
    }

    /// Nonzero entries as `(row, col, value)`, row-major within blocks.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (&(k, l), b) in &self.blocks {
            for r in 0..BLOCK {
                for c in 0..BLOCK {
                    let v = b[(r, c)];
                    if v != 0.0 {
                        out.push((BLOCK * k + r, BLOCK * l + c, v));
                    }
                }
            }
        }
        out
    }

    pub fn write_triplets<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,col,value")?;
        for (r, c, v) in self.triplets() {
            writeln!(out, "{r},{c},{v}")?;
        }
        Ok(())
    }

    /// `max |H - Hᵀ|`.
    pub fn symmetry_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (&(k, l), b) in &self.blocks {
            let other = self.blocks.get(&(l, k)).copied().unwrap_or_else(Matrix5::zeros);
            worst = worst.max((b - other.transpose()).amax());
        }
        worst
    }

    /// `y = H x`.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        for (&(k, l), b) in &self.blocks {
            let xl = x.fixed_rows::<5>(BLOCK * l);
            let mut yk = y.fixed_rows_mut::<5>(BLOCK * k);
            yk += b * xl;
        }
        y
    }

    /// Adds `d[i]` to every diagonal entry.
    pub fn add_diagonal(&mut self, d: &[f64; BLOCK]) {
        for k in 0..self.free {
            let b = self.block_mut(k, k);
            for (i, v) in d.iter().enumerate() {
                b[(i, i)] += v;
            }
        }
    }
}

/// Result of one assembly.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub system: SparseSymmetricSystem,
    /// `L = F + Σ λ_i l_i`.
    pub lagrangian: f64,
    /// `F`, the total measurement cost.
    pub cost: f64,
    /// `max |l_i|`.
    pub max_constraint: f64,
    /// `Σ |l_i|`.
    pub sum_abs_constraint: f64,
}

/// Adds the terms' blocks for the free poses they touch, in order.
pub fn scatter_terms(graph: &FactorGraph, terms: &[Term], sys: &mut SparseSymmetricSystem) -> f64 {
    let layout = graph.layout();
    let mut cost = 0.0;
    for t in terms {
        cost += t.eval.value;
        let a = layout.slot(t.i1);
        let b = layout.slot(t.i2);
        if let Some(a) = a {
            let mut ga = sys.g.fixed_rows_mut::<4>(BLOCK * a);
            ga += &t.eval.grad1;
            let mut blk = sys.block_mut(a, a).fixed_view_mut::<4, 4>(0, 0);
            blk += &t.eval.h11;
        }
        if let (Some(a), Some(b)) = (a, b) {
            let mut blk = sys.block_mut(a, b).fixed_view_mut::<4, 4>(0, 0);
            blk += &t.eval.h12;
            let mut blk = sys.block_mut(b, a).fixed_view_mut::<4, 4>(0, 0);
            blk += &t.eval.h21();
        }
        if let Some(b) = b {
            let mut gb = sys.g.fixed_rows_mut::<4>(BLOCK * b);
            gb += &t.eval.grad2;
            let mut blk = sys.block_mut(b, b).fixed_view_mut::<4, 4>(0, 0);
            blk += &t.eval.h22;
        }
    }
    cost
}

/// Adds the constraint terms of every free pose. Returns `(Σ λl, max|l|, Σ|l|)`.
pub fn scatter_constraints(state: &DVector<f64>, sys: &mut SparseSymmetricSystem) -> (f64, f64, f64) {
    let mut w_sum = 0.0;
    let mut max_l: f64 = 0.0;
    let mut sum_l = 0.0;
    for k in 0..sys.free_count() {
        let o = BLOCK * k;
        let u = state.fixed_rows::<2>(o + 2).into_owned();
        let c = eval_constraint(state[o + 4], &u);
        w_sum += c.w;
        max_l = max_l.max(c.l.abs());
        sum_l += c.l.abs();

        let mut gu = sys.g.fixed_rows_mut::<2>(o + 2);
        gu += &c.grad_u;
        sys.g[o + 4] += c.grad_lambda;

        let b = sys.block_mut(k, k);
        let mut huu = b.fixed_view_mut::<2, 2>(2, 2);
        huu += &c.h_uu;
        for i in 0..2 {
            b[(2 + i, 4)] += c.h_ulambda[i];
            b[(4, 2 + i)] += c.h_ulambda[i];
        }
    }
    (w_sum, max_l, sum_l)
}

/// Assembles `g` and `H` of the Lagrangian at `state`.
pub fn assemble(
    graph: &FactorGraph,
    state: &DVector<f64>,
    cfg: &RotCostConfig,
    active: &ActiveMask,
) -> Result<Assembled> {
    let terms = measurement_terms(graph, state, cfg, active)?;
    let mut system = SparseSymmetricSystem::new(graph.layout().free_count());
    let cost = scatter_terms(graph, &terms, &mut system);
    let (w_sum, max_constraint, sum_abs_constraint) = scatter_constraints(state, &mut system);
    Ok(Assembled {
        system,
        lagrangian: cost + w_sum,
        cost,
        max_constraint,
        sum_abs_constraint,
    })
}

/// Gradient of the measurement cost `F` alone over the flat state.
///
/// The λ entries hold zero.
pub fn cost_gradient(
    graph: &FactorGraph,
    state: &DVector<f64>,
    cfg: &RotCostConfig,
    active: &ActiveMask,
) -> Result<DVector<f64>> {
    let terms = measurement_terms(graph, state, cfg, active)?;
    let mut system = SparseSymmetricSystem::new(graph.layout().free_count());
    scatter_terms(graph, &terms, &mut system);
    Ok(system.g)
}

/// Scalar quantities at a state, without derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Values {
    pub lagrangian: f64,
    pub cost: f64,
    pub max_constraint: f64,
    pub sum_abs_constraint: f64,
}

pub fn evaluate(graph: &FactorGraph, state: &DVector<f64>, cfg: &RotCostConfig, active: &ActiveMask) -> Result<Values> {
    let terms = measurement_terms(graph, state, cfg, active)?;
    let cost: f64 = terms.iter().map(|t| t.eval.value).sum();
    let mut w_sum = 0.0;
    let mut max_l: f64 = 0.0;
    let mut sum_l = 0.0;
    for k in 0..graph.layout().free_count() {
        let o = BLOCK * k;
        let u = state.fixed_rows::<2>(o + 2).into_owned();
        let c = eval_constraint(state[o + 4], &u);
        w_sum += c.w;
        max_l = max_l.max(c.l.abs());
        sum_l += c.l.abs();
    }
    Ok(Values {
        lagrangian: cost + w_sum,
        cost,
        max_constraint: max_l,
        sum_abs_constraint: sum_l,
    })
}

/// Line-search merit `L + μ Σ|l_i|`.
pub fn merit(graph: &FactorGraph, state: &DVector<f64>, cfg: &RotCostConfig, active: &ActiveMask, mu: f64) -> Result<f64> {
    let v = evaluate(graph, state, cfg, active)?;
    Ok(v.lagrangian + mu * v.sum_abs_constraint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::Pose;
    use crate::graph::{HomingMeasurement, OdometryMeasurement};
    use nalgebra::{Matrix2, Vector2};

    fn lone_pair(u2: Vector2<f64>) -> FactorGraph {
        FactorGraph::new(
            vec![Pose::new(0.0, 0.0, 1.0, 0.0), Pose::new(1.0, 0.0, u2[0], u2[1])],
            0,
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn constraint_only_system() {
        let g = lone_pair(Vector2::new(1.0, 0.0));
        let s = g.pack_state(&[3.0]);
        let a = assemble(&g, &s, &RotCostConfig::default(), &ActiveMask::all(&g, false)).unwrap();
        assert_eq!(a.system.g, DVector::from_vec(vec![0.0, 0.0, 3.0, 0.0, 0.0]));
        let h = a.system.to_dense();
        assert_eq!(h[(2, 2)], 3.0);
        assert_eq!(h[(3, 3)], 3.0);
        assert_eq!(h[(2, 4)], 1.0);
        assert_eq!(h[(4, 2)], 1.0);
        assert_eq!(h[(3, 4)], 0.0);
        assert_eq!(h[(4, 4)], 0.0);
    }

    #[test]
    fn merit_cases() {
        let cfg = RotCostConfig::default();
        let g = lone_pair(Vector2::new(2.0, 0.0));
        let s = g.pack_state(&[0.0]);
        let m = merit(&g, &s, &cfg, &ActiveMask::all(&g, false), 10.0).unwrap();
        assert_eq!(m, 15.0);

        let g = lone_pair(Vector2::new(0.6, 0.8));
        let s = g.pack_state(&[2.0]);
        let v = evaluate(&g, &s, &cfg, &ActiveMask::all(&g, false)).unwrap();
        assert!((merit(&g, &s, &cfg, &ActiveMask::all(&g, false), 10.0).unwrap() - v.lagrangian).abs() < 1e-15);
    }

    fn consistent_graph() -> FactorGraph {
        // pose 2 one meter ahead, pose 3 one meter left of it turned 90°
        let poses = vec![
            Pose::from_angle(0.0, 0.0, 0.0),
            Pose::from_angle(1.0, 0.0, 0.0),
            Pose::new(1.0, 1.0, 0.0, 1.0),
        ];
        let i = Matrix2::identity() * 0.01;
        let odo = vec![
            OdometryMeasurement::new(0, 1, Vector2::new(1.0, 0.0), Vector2::new(1.0, 0.0), i, 0.1, 0.1),
            OdometryMeasurement::new(1, 2, Vector2::new(0.0, 1.0), Vector2::new(0.0, 1.0), i, 0.1, 0.1),
        ];
        // from pose 3 the origin lies at world direction (-1,-1)/√2, i.e. -135°
        // in world, -225° = 135° in the frame of pose 3
        let home = vec![HomingMeasurement {
            i1: 2,
            i2: 0,
            alpha: crate::orvec::from_angle(-0.75 * std::f64::consts::PI - 0.5 * std::f64::consts::PI),
            psi: Vector2::new(0.0, -1.0),
            sigma_h: 0.1,
            sigma_c: 0.1,
        }];
        FactorGraph::new(poses, 0, odo, home).unwrap()
    }

    #[test]
    fn consistent_graph_is_stationary() {
        let g = consistent_graph();
        let s = g.pack_state(&[0.0, 0.0]);
        for cfg in [RotCostConfig::first(false), RotCostConfig::second()] {
            let a = assemble(&g, &s, &cfg, &ActiveMask::all(&g, true)).unwrap();
            assert!(a.system.g.amax() < 1e-12, "{cfg:?} {}", a.system.g);
            assert!(a.cost.abs() < 1e-12);
        }
    }

    #[test]
    fn sparsity_and_symmetry() {
        let g = consistent_graph();
        let mut s = g.pack_state(&[0.4, -0.2]);
        s[0] += 0.1;
        s[7] -= 0.2;
        let a = assemble(&g, &s, &RotCostConfig::second(), &ActiveMask::all(&g, true)).unwrap();
        // slots (0,0), (0,1), (1,0), (1,1); the homing edge touches the fixed pose only
        assert_eq!(a.system.blocks().len(), 4);
        assert!(a.system.symmetry_error() < 1e-10);
        for b in a.system.blocks().values() {
            assert_eq!(b[(4, 4)], 0.0);
        }
        let x = DVector::from_fn(10, |i, _| (i as f64).sin());
        let dense = a.system.to_dense() * &x;
        assert!((a.system.mul_vec(&x) - dense).amax() < 1e-12);
    }

    #[test]
    fn mask_drops_close_homing() {
        let g = consistent_graph();
        let mut s = g.pack_state(&[0.0, 0.0]);
        s[5] = 0.01;
        s[6] = 0.01;
        let m = ActiveMask::compute(&g, &s, 0.05, false);
        assert_eq!(m.homing, vec![false]);
        assert_eq!(m.distance, vec![false, false]);
        let m = ActiveMask::compute(&g, &g.pack_state(&[0.0, 0.0]), 0.05, true);
        assert_eq!(m.homing, vec![true]);
        assert_eq!(m.distance, vec![true, true]);
    }
}
