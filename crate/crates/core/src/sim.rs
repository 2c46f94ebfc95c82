//! Synthetic lane-cleaning scenario.
//!
//! A differential-drive robot sweeps `lanes` parallel lanes in alternating
//! direction. A wheel speed bias makes the true path curve while odometry
//! reports straight segments; per-segment covariances come from first-order
//! error propagation of the odometry noise model. From every point of lane
//! `j ≥ 1` the robot homes to nearby points of lane `j - 1`, with Gaussian
//! noise on the true bearing and relative heading. There is no odometry
//! between lanes.
//!
//! Randomness comes from `ChaCha8Rng` (rand_chacha) seeded with
//! `seed_from_u64`, so a seed reproduces a graph bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::costs::Pose;
use crate::error::{Error, Result};
use crate::graph::{FactorGraph, HomingMeasurement, OdometryMeasurement};
use crate::orvec::from_angle;

pub const T_EIGEN_FLOOR: f64 = 1e-12;
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub lanes: usize,
    pub points_per_lane: usize,
    /// Distance between lanes (m).
    pub lane_spacing: f64,
    /// Nominal distance between lane points (m).
    pub segment_length: f64,
    /// Relative speed difference of the two wheels.
    pub wheel_speed_bias: f64,
    /// Wheel distance (m); curvature is `wheel_speed_bias / wheel_base`.
    pub wheel_base: f64,
    /// Euler steps per segment.
    pub euler_substeps: usize,
    /// Variance of travelled distance per meter (m²/m).
    pub trans_noise_density: f64,
    /// Variance of heading change per meter (rad²/m).
    pub ang_noise_density: f64,
    /// Home-vector noise (rad).
    pub sigma_h: f64,
    /// Compass noise (rad).
    pub sigma_c: f64,
    /// Previous-lane points homed to from each lane point.
    pub homing_neighbors: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            lanes: 3,
            points_per_lane: 10,
            lane_spacing: 0.5,
            segment_length: 0.5,
            wheel_speed_bias: 0.01,
            wheel_base: 0.3,
            euler_substeps: 10,
            trans_noise_density: 1e-4,
            ang_noise_density: 1e-3,
            sigma_h: 5f64.to_radians(),
            sigma_c: 5f64.to_radians(),
            homing_neighbors: 3,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.lanes < 2 {
            return bad(format!("need at least 2 lanes for homing, got {}", self.lanes));
        }
        if self.points_per_lane < 2 {
            return bad("need at least 2 points per lane".into());
        }
        if self.euler_substeps == 0 || self.homing_neighbors == 0 {
            return bad("euler_substeps and homing_neighbors must be at least 1".into());
        }
        for (v, name) in [
            (self.lane_spacing, "lane_spacing"),
            (self.segment_length, "segment_length"),
            (self.wheel_base, "wheel_base"),
            (self.sigma_h, "sigma_h"),
            (self.sigma_c, "sigma_c"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (v, name) in [
            (self.trans_noise_density, "trans_noise_density"),
            (self.ang_noise_density, "ang_noise_density"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !self.wheel_speed_bias.is_finite() {
            return bad("wheel_speed_bias must be finite".into());
        }
        Ok(())
    }

    pub fn curvature(&self) -> f64 {
        self.wheel_speed_bias / self.wheel_base
    }

    pub fn pose_count(&self) -> usize {
        self.lanes * self.points_per_lane
    }

    /// Graph index of point `k` on lane `j`.
    pub fn index(&self, lane: usize, k: usize) -> usize {
        lane * self.points_per_lane + k
    }

    fn lane_length(&self) -> f64 {
        (self.points_per_lane - 1) as f64 * self.segment_length
    }

    /// Nominal start pose of a lane: even lanes run along +x, odd along -x.
    pub fn lane_start(&self, lane: usize) -> Pose {
        let y = lane as f64 * self.lane_spacing;
        if lane.is_multiple_of(2) {
            Pose::from_angle(0.0, y, 0.0)
        } else {
            Pose::from_angle(self.lane_length(), y, std::f64::consts::PI)
        }
    }

    fn nominal_x(&self, lane: usize, k: usize) -> f64 {
        let s = k as f64 * self.segment_length;
        if lane.is_multiple_of(2) {
            s
        } else {
            self.lane_length() - s
        }
    }

    /// Previous-lane points homed to from point `k` of lane `lane ≥ 1`.
    pub fn homing_targets(&self, lane: usize, k: usize) -> std::ops::Range<usize> {
        let x = self.nominal_x(lane, k);
        let n = self.points_per_lane;
        let centre = (0..n)
            .min_by(|&a, &b| {
                let da = (self.nominal_x(lane - 1, a) - x).abs();
                let db = (self.nominal_x(lane - 1, b) - x).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        let h = self.homing_neighbors;
        let lo = centre as isize - ((h - 1) / 2) as isize;
        let hi = lo + h as isize;
        (lo.max(0) as usize)..(hi.min(n as isize) as usize)
    }
}

/// True world poses, indexed like the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub graph: FactorGraph,
    pub truth: GroundTruth,
}

/// Per-segment odometry model in the frame of the segment start.
struct Segment {
    t: Matrix2<f64>,
    sigma: f64,
    sigma_e: f64,
}

/// Propagates the pose covariance along a straight nominal segment.
fn segment_covariance(cfg: &SimConfig) -> Segment {
    let ds = cfg.segment_length / cfg.euler_substeps as f64;
    let qn = Matrix2::new(cfg.trans_noise_density * ds, 0.0, 0.0, cfg.ang_noise_density * ds);
    let mut c = Matrix3::<f64>::zeros();
    // believed heading stays 0 in the segment frame
    let theta: f64 = 0.0;
    for _ in 0..cfg.euler_substeps {
        let f = Matrix3::new(1.0, 0.0, -ds * theta.sin(), 0.0, 1.0, ds * theta.cos(), 0.0, 0.0, 1.0);
        let g = Matrix3x2::new(theta.cos(), 0.0, theta.sin(), 0.0, 0.0, 1.0);
        c = f * c * f.transpose() + g * qn * g.transpose();
    }
    let t_raw: Matrix2<f64> = c.fixed_view::<2, 2>(0, 0).into_owned();
    let t_sym = 0.5 * (t_raw + t_raw.transpose());
    let eig = t_sym.symmetric_eigen();
    let floored = eig.eigenvalues.map(|v| v.max(T_EIGEN_FLOOR));
    let mut t = eig.eigenvectors * Matrix2::from_diagonal(&floored) * eig.eigenvectors.transpose();
    t = 0.5 * (t + t.transpose());
    let r0 = Vector2::new(1.0, 0.0);
    Segment {
        t,
        sigma: c[(2, 2)].sqrt().max(SIGMA_FLOOR),
        sigma_e: r0.dot(&(t * r0)).sqrt().max(SIGMA_FLOOR),
    }
}

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("standard deviation is finite and nonnegative")
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.points_per_lane;
    let ds = cfg.segment_length / cfg.euler_substeps as f64;
    let kappa = cfg.curvature();
    let trans_noise = normal((cfg.trans_noise_density * ds).sqrt());
    let ang_noise = normal((cfg.ang_noise_density * ds).sqrt());
    let seg = segment_covariance(cfg);
    let r = Vector2::new(cfg.segment_length, 0.0);
    let q = Vector2::new(1.0, 0.0);

    let mut truth = Vec::with_capacity(cfg.pose_count());
    let mut estimate = Vec::with_capacity(cfg.pose_count());
    let mut odometry = Vec::new();

    for lane in 0..cfg.lanes {
        let start = cfg.lane_start(lane);
        let (mut x, mut theta) = (start.x, start.theta());
        for k in 0..n {
            if k > 0 {
                for _ in 0..cfg.euler_substeps {
                    let step = ds + trans_noise.sample(&mut rng);
                    x += step * from_angle(theta);
                    theta += kappa * ds + ang_noise.sample(&mut rng);
                }
                odometry.push(OdometryMeasurement::new(
                    cfg.index(lane, k - 1),
                    cfg.index(lane, k),
                    r,
                    q,
                    seg.t,
                    seg.sigma,
                    seg.sigma_e,
                ));
            }
            truth.push(Pose { x, u: from_angle(theta) });
            let s = k as f64 * cfg.segment_length;
            estimate.push(Pose {
                x: start.x + s * start.u,
                u: start.u,
            });
        }
    }

    let home_noise = normal(cfg.sigma_h);
    let compass_noise = normal(cfg.sigma_c);
    let mut homing = Vec::new();
    for lane in 1..cfg.lanes {
        for k in 0..n {
            let i1 = cfg.index(lane, k);
            for k2 in cfg.homing_targets(lane, k) {
                let i2 = cfg.index(lane - 1, k2);
                let (p1, p2) = (&truth[i1], &truth[i2]);
                let d = p2.x - p1.x;
                let alpha = d[1].atan2(d[0]) - p1.theta() + home_noise.sample(&mut rng);
                let psi = p2.theta() - p1.theta() + compass_noise.sample(&mut rng);
                homing.push(HomingMeasurement {
                    i1,
                    i2,
                    alpha: from_angle(alpha),
                    psi: from_angle(psi),
                    sigma_h: cfg.sigma_h,
                    sigma_c: cfg.sigma_c,
                });
            }
        }
    }

    Ok(Simulation {
        graph: FactorGraph::new(estimate, 0, odometry, homing)?,
        truth: GroundTruth { poses: truth },
    })
}

/// Root-mean-square position difference.
pub fn rms_position_error(a: &[Pose], b: &[Pose]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p.x - q.x).norm_squared()).sum();
    (sum / a.len() as f64).sqrt()
}

pub fn write_truth<W: Write>(truth: &GroundTruth, mut out: W) -> Result<()> {
    for (i, p) in truth.poses.iter().enumerate() {
        writeln!(out, "TRUE {} {} {} {}", i + 1, p.x[0], p.x[1], p.theta())?;
    }
    Ok(())
}

pub fn write_plot_csv<W: Write>(estimate: &[Pose], truth: &GroundTruth, mut out: W) -> Result<()> {
    writeln!(out, "id,est_x,est_y,est_theta,true_x,true_y,true_theta")?;
    for (i, (e, t)) in estimate.iter().zip(&truth.poses).enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i + 1,
            e.x[0],
            e.x[1],
            e.theta(),
            t.x[0],
            t.x[1],
            t.theta()
        )?;
    }
    Ok(())
}

/// Writes `graph.txt`, `truth.txt` and `plot.csv` into `dir`.
pub fn write_outputs(sim: &Simulation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    sim.graph.save(fs::File::create(dir.join("graph.txt"))?)?;
    write_truth(&sim.truth, fs::File::create(dir.join("truth.txt"))?)?;
    write_plot_csv(sim.graph.poses(), &sim.truth, fs::File::create(dir.join("plot.csv"))?)?;
    Ok(())
}
