#![allow(dead_code)]

use nalgebra::{DVector, Matrix2, Vector2};
use orvec_sam::costs::{Pose, RotCostConfig};
use orvec_sam::graph::{FactorGraph, HomingMeasurement, OdometryMeasurement};
use orvec_sam::orvec::{from_angle, omega};
use orvec_sam::solver::SolverConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_spd(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
    let a = Matrix2::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    a * a.transpose() * 0.1 + Matrix2::identity() * 0.01
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::from_angle(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-3.0..3.0),
    )
}

fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (usize, usize) {
    let i1 = rng.random_range(0..n);
    let mut i2 = rng.random_range(0..n - 1);
    if i2 >= i1 {
        i2 += 1;
    }
    (i1, i2)
}

/// A random graph with `n` poses: a chain of odometry plus extra odometry
/// and homing records between random pairs.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> FactorGraph {
    let poses: Vec<Pose> = (0..n).map(|_| random_pose(rng)).collect();
    let mut odo = Vec::new();
    let odometry = |rng: &mut ChaCha8Rng, i1: usize, i2: usize| {
        let r = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = from_angle(rng.random_range(-1.0..1.0));
        let t = random_spd(rng);
        OdometryMeasurement::new(i1, i2, r, q, t, rng.random_range(0.05..0.5), rng.random_range(0.05..0.5))
    };
    for i in 0..n - 1 {
        odo.push(odometry(rng, i, i + 1));
    }
    for _ in 0..n / 3 {
        let (a, b) = random_pair(rng, n);
        odo.push(odometry(rng, a, b));
    }
    let hom = (0..n / 2)
        .map(|_| {
            let (i1, i2) = random_pair(rng, n);
            HomingMeasurement {
                i1,
                i2,
                alpha: from_angle(rng.random_range(-3.0..3.0)),
                psi: from_angle(rng.random_range(-3.0..3.0)),
                sigma_h: rng.random_range(0.05..0.5),
                sigma_c: rng.random_range(0.05..0.5),
            }
        })
        .collect();
    let fixed = rng.random_range(0..n);
    FactorGraph::new(poses, fixed, odo, hom).unwrap()
}

/// A state with orientation vectors off the unit circle and random multipliers.
pub fn random_state(rng: &mut ChaCha8Rng, g: &FactorGraph) -> DVector<f64> {
    let mut s = g.pack_state(&vec![0.0; g.len() - 1]);
    for k in 0..g.layout().free_count() {
        let o = 5 * k;
        s[o + 2] *= rng.random_range(0.7..1.3);
        s[o + 3] *= rng.random_range(0.7..1.3);
        s[o + 4] = rng.random_range(-2.0..2.0);
    }
    s
}

pub const TWO_POSE_R: [f64; 2] = [1.0, 0.5];
pub const TWO_POSE_Q_ANGLE: f64 = 0.3;

/// Two poses linked by one odometry record, pose 0 fixed.
pub fn two_pose_graph(second: Pose) -> FactorGraph {
    let t = Matrix2::new(0.01, 0.002, 0.002, 0.02);
    FactorGraph::new(
        vec![Pose::from_angle(0.2, -0.1, 0.4), second],
        0,
        vec![OdometryMeasurement::new(
            0,
            1,
            Vector2::from(TWO_POSE_R),
            from_angle(TWO_POSE_Q_ANGLE),
            t,
            0.05,
            0.1,
        )],
        vec![],
    )
    .unwrap()
}

/// The exact minimizer `x' = x + U r`, `u' = Q u` of the two-pose graph.
pub fn two_pose_optimum(g: &FactorGraph) -> Pose {
    let p = g.poses()[0];
    let m = &g.odometry()[0];
    Pose {
        x: p.x + omega(&p.u) * m.r,
        u: omega(&m.q) * p.u,
    }
}

/// The two-pose graph started 0.1 away from the optimum in every coordinate,
/// orientation renormalized.
pub fn perturbed_two_pose() -> FactorGraph {
    let opt = two_pose_optimum(&two_pose_graph(Pose::new(0.0, 0.0, 1.0, 0.0)));
    let v = opt.as_vector().add_scalar(0.1);
    let start = Pose::from_vector(&v);
    two_pose_graph(Pose {
        u: start.u.normalize(),
        ..start
    })
}

pub fn solver_config(cost: RotCostConfig) -> SolverConfig {
    SolverConfig {
        cost,
        ..SolverConfig::default()
    }
}
