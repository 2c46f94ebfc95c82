//! Pose graph, state layout and the line-based text format.
//!
//! Poses are stored 0-based; the file format is 1-based.
//!
//! ```text
//! POSE <id> <x1> <x2> <u1> <u2> [FIXED]
//! ODOM <id1> <id2> <r1> <r2> <q1> <q2> <T11> <T12> <T22> <sigma> <sigma_e>
//! HOME <id1> <id2> <a1> <a2> <psi1> <psi2> <sigma_h> <sigma_c>
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DVector, Matrix2, Vector2};

use crate::costs::{spd_inverse, Pose};
use crate::error::{Error, MeasurementId, Result};
use crate::orvec::{omega, OrMat, OrVec};

/// Tolerance on `‖q‖`, `‖α‖`, `‖ψ‖` being 1.
pub const MEASUREMENT_UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryMeasurement {
    pub i1: usize,
    pub i2: usize,
    /// Translation in the frame of pose `i1`.
    pub r: Vector2<f64>,
    pub q: OrVec,
    /// Translational covariance.
    pub t: Matrix2<f64>,
    pub sigma: f64,
    pub sigma_e: f64,
    /// `‖r‖`.
    pub rho: f64,
}

impl OdometryMeasurement {
    pub fn new(i1: usize, i2: usize, r: Vector2<f64>, q: OrVec, t: Matrix2<f64>, sigma: f64, sigma_e: f64) -> Self {
        OdometryMeasurement {
            i1,
            i2,
            r,
            q,
            t,
            sigma,
            sigma_e,
            rho: r.norm(),
        }
    }

    pub fn q_matrix(&self) -> OrMat {
        omega(&self.q)
    }

    fn validate(&self, n: usize) -> std::result::Result<(), String> {
        check_indices(self.i1, self.i2, n)?;
        check_finite(&[self.r[0], self.r[1], self.q[0], self.q[1]])?;
        check_unit(&self.q, "q")?;
        spd_inverse(&self.t).map_err(|_| "T is not symmetric positive definite".to_string())?;
        check_positive(self.sigma, "sigma")?;
        check_positive(self.sigma_e, "sigma_e")?;
        if (self.rho - self.r.norm()).abs() > 1e-9 {
            return Err(format!("rho {} does not match |r| = {}", self.rho, self.r.norm()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomingMeasurement {
    /// Current pose.
    pub i1: usize,
    /// Earlier pose whose image is homed to.
    pub i2: usize,
    /// Home direction in the frame of `i1`.
    pub alpha: OrVec,
    /// Relative orientation from the visual compass.
    pub psi: OrVec,
    pub sigma_h: f64,
    pub sigma_c: f64,
}

impl HomingMeasurement {
    pub fn a_matrix(&self) -> OrMat {
        omega(&self.alpha)
    }

    pub fn psi_matrix(&self) -> OrMat {
        omega(&self.psi)
    }

    fn validate(&self, n: usize) -> std::result::Result<(), String> {
        check_indices(self.i1, self.i2, n)?;
        check_finite(&[self.alpha[0], self.alpha[1], self.psi[0], self.psi[1]])?;
        check_unit(&self.alpha, "alpha")?;
        check_unit(&self.psi, "psi")?;
        check_positive(self.sigma_h, "sigma_h")?;
        check_positive(self.sigma_c, "sigma_c")?;
        Ok(())
    }
}

fn check_indices(i1: usize, i2: usize, n: usize) -> std::result::Result<(), String> {
    if i1 >= n || i2 >= n {
        return Err(format!("pose index out of range (ids {} and {}, {} poses)", i1 + 1, i2 + 1, n));
    }
    if i1 == i2 {
        return Err(format!("both ends refer to pose {}", i1 + 1));
    }
    Ok(())
}

fn check_finite(vals: &[f64]) -> std::result::Result<(), String> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err("non-finite value".to_string())
    }
}

fn check_unit(v: &OrVec, name: &str) -> std::result::Result<(), String> {
    let n = v.norm();
    if (n - 1.0).abs() <= MEASUREMENT_UNIT_TOLERANCE {
        Ok(())
    } else {
        Err(format!("{name} must be unit length, has norm {n}"))
    }
}

fn check_positive(v: f64, name: &str) -> std::result::Result<(), String> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be positive, got {v}"))
    }
}

/// Which argument of a measurement a pose fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incidence {
    pub id: MeasurementId,
    pub slot: Slot,
}

/// Per-pose list of incident measurements.
pub type Adjacency = Vec<Vec<Incidence>>;

/// Lists every measurement touching each pose.
pub fn build_adjacency(
    n: usize,
    odometry: &[OdometryMeasurement],
    homing: &[HomingMeasurement],
) -> Result<Adjacency> {
    let mut adj = vec![Vec::new(); n];
    let ends = odometry
        .iter()
        .enumerate()
        .map(|(k, m)| (MeasurementId::Odometry(k), m.i1, m.i2))
        .chain(
            homing
                .iter()
                .enumerate()
                .map(|(k, m)| (MeasurementId::Homing(k), m.i1, m.i2)),
        );
    for (id, i1, i2) in ends {
        if i1 >= n || i2 >= n {
            return Err(Error::MalformedGraph(format!("{id} refers to a pose outside 1..={n}")));
        }
        adj[i1].push(Incidence { id, slot: Slot::First });
        adj[i2].push(Incidence { id, slot: Slot::Second });
    }
    Ok(adj)
}

/// Placement of the free poses in the flat state vector.
///
/// Each free pose owns the block `[x1, x2, u1, u2, λ]`; blocks follow
/// ascending pose index with the fixed pose left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    free: Vec<usize>,
    slot_of: Vec<Option<usize>>,
}

pub const BLOCK: usize = 5;

impl StateLayout {
    pub fn new(n: usize, fixed: usize) -> Self {
        let free: Vec<usize> = (0..n).filter(|&i| i != fixed).collect();
        let mut slot_of = vec![None; n];
        for (s, &i) in free.iter().enumerate() {
            slot_of[i] = Some(s);
        }
        StateLayout { free, slot_of }
    }

    pub fn len(&self) -> usize {
        BLOCK * self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    /// Pose indices of the free blocks in order.
    pub fn free_poses(&self) -> &[usize] {
        &self.free
    }

    /// Block slot of pose `i`, `None` for the fixed pose.
    pub fn slot(&self, i: usize) -> Option<usize> {
        self.slot_of[i]
    }

    pub fn offset(&self, slot: usize) -> usize {
        BLOCK * slot
    }

    pub fn check(&self, state: &DVector<f64>) -> Result<()> {
        if state.len() == self.len() {
            Ok(())
        } else {
            Err(Error::Layout {
                expected: self.len(),
                got: state.len(),
            })
        }
    }
}

/// An immutable, validated pose graph with its initial poses.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    poses: Vec<Pose>,
    fixed: usize,
    odometry: Vec<OdometryMeasurement>,
    homing: Vec<HomingMeasurement>,
    adjacency: Adjacency,
    layout: StateLayout,
}

impl FactorGraph {
    pub fn new(
        poses: Vec<Pose>,
        fixed: usize,
        odometry: Vec<OdometryMeasurement>,
        homing: Vec<HomingMeasurement>,
    ) -> Result<Self> {
        let n = poses.len();
        if n < 2 {
            return Err(Error::MalformedGraph(format!("need at least 2 poses, got {n}")));
        }
        if fixed >= n {
            return Err(Error::MalformedGraph(format!("fixed pose {} out of range", fixed + 1)));
        }
        for (i, p) in poses.iter().enumerate() {
            if !p.as_vector().iter().all(|v| v.is_finite()) {
                return Err(Error::Validation {
                    record: format!("pose {}", i + 1),
                    msg: "non-finite value".into(),
                });
            }
        }
        for (k, m) in odometry.iter().enumerate() {
            m.validate(n).map_err(|msg| Error::Validation {
                record: MeasurementId::Odometry(k).to_string(),
                msg,
            })?;
        }
        for (k, m) in homing.iter().enumerate() {
            m.validate(n).map_err(|msg| Error::Validation {
                record: MeasurementId::Homing(k).to_string(),
                msg,
            })?;
        }
        let adjacency = build_adjacency(n, &odometry, &homing)?;
        Ok(FactorGraph {
            layout: StateLayout::new(n, fixed),
            poses,
            fixed,
            odometry,
            homing,
            adjacency,
        })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// 0-based index of the anchored pose.
    pub fn fixed(&self) -> usize {
        self.fixed
    }

    pub fn odometry(&self) -> &[OdometryMeasurement] {
        &self.odometry
    }

    pub fn homing(&self) -> &[HomingMeasurement] {
        &self.homing
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    /// Same measurements, different anchor (0-based index).
    pub fn with_fixed_pose(&self, fixed: usize) -> Result<Self> {
        FactorGraph::new(self.poses.clone(), fixed, self.odometry.clone(), self.homing.clone())
    }

    /// Same measurements and anchor, new poses.
    pub fn with_poses(&self, poses: Vec<Pose>) -> Result<Self> {
        if poses.len() != self.poses.len() {
            return Err(Error::Layout {
                expected: self.poses.len(),
                got: poses.len(),
            });
        }
        FactorGraph::new(poses, self.fixed, self.odometry.clone(), self.homing.clone())
    }

    /// Flat state from the graph's poses and the given per-slot multipliers.
    pub fn pack_state(&self, lambdas: &[f64]) -> DVector<f64> {
        assert_eq!(lambdas.len(), self.layout.free_count(), "one multiplier per free pose");
        let mut s = DVector::zeros(self.layout.len());
        for (slot, &i) in self.layout.free.iter().enumerate() {
            let o = self.layout.offset(slot);
            s.fixed_rows_mut::<4>(o).copy_from(&self.poses[i].as_vector());
            s[o + 4] = lambdas[slot];
        }
        s
    }

    /// All poses (fixed one from the graph) and the multipliers held in `state`.
    pub fn unpack_state(&self, state: &DVector<f64>) -> Result<(Vec<Pose>, Vec<f64>)> {
        self.layout.check(state)?;
        let poses = (0..self.len()).map(|i| self.pose_at(state, i)).collect();
        let lambdas = (0..self.layout.free_count())
            .map(|slot| state[self.layout.offset(slot) + 4])
            .collect();
        Ok((poses, lambdas))
    }

    /// Pose `i` under `state`; the fixed pose is always read from the graph.
    #[inline]
    pub fn pose_at(&self, state: &DVector<f64>, i: usize) -> Pose {
        match self.layout.slot(i) {
            None => self.poses[i],
            Some(slot) => {
                let o = self.layout.offset(slot);
                Pose::new(state[o], state[o + 1], state[o + 2], state[o + 3])
            }
        }
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.poses.iter().enumerate() {
            let _ = write!(s, "POSE {} {} {} {} {}", i + 1, p.x[0], p.x[1], p.u[0], p.u[1]);
            if i == self.fixed {
                s.push_str(" FIXED");
            }
            s.push('\n');
        }
        for m in &self.odometry {
            let _ = writeln!(
                s,
                "ODOM {} {} {} {} {} {} {} {} {} {} {}",
                m.i1 + 1,
                m.i2 + 1,
                m.r[0],
                m.r[1],
                m.q[0],
                m.q[1],
                m.t[(0, 0)],
                m.t[(0, 1)],
                m.t[(1, 1)],
                m.sigma,
                m.sigma_e
            );
        }
        for m in &self.homing {
            let _ = writeln!(
                s,
                "HOME {} {} {} {} {} {} {} {}",
                m.i1 + 1,
                m.i2 + 1,
                m.alpha[0],
                m.alpha[1],
                m.psi[0],
                m.psi[1],
                m.sigma_h,
                m.sigma_c
            );
        }
        s
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut poses: Vec<Option<Pose>> = Vec::new();
        let mut fixed: Option<usize> = None;
        let mut odometry = Vec::new();
        let mut homing = Vec::new();
        let mut lines_of = (Vec::new(), Vec::new());

        for (lineno, line) in input.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut fields = content.split_whitespace();
            let tag = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            let perr = |msg: String| Error::Parse { line: lineno, msg };
            match tag {
                "POSE" => {
                    let (nums, flag) = match rest.len() {
                        5 => (&rest[..], None),
                        6 => (&rest[..5], Some(rest[5])),
                        k => return Err(perr(format!("POSE expects 5 or 6 fields, got {k}"))),
                    };
                    if let Some(f) = flag {
                        if f != "FIXED" {
                            return Err(perr(format!("unexpected trailing field `{f}`")));
                        }
                    }
                    let id = parse_id(nums[0]).map_err(perr)?;
                    let v = parse_floats(&nums[1..]).map_err(perr)?;
                    if id >= poses.len() {
                        poses.resize(id + 1, None);
                    }
                    if poses[id].is_some() {
                        return Err(perr(format!("duplicate pose id {}", id + 1)));
                    }
                    poses[id] = Some(Pose::new(v[0], v[1], v[2], v[3]));
                    if flag.is_some() {
                        if fixed.is_some() {
                            return Err(perr("more than one FIXED pose".into()));
                        }
                        fixed = Some(id);
                    }
                }
                "ODOM" => {
                    if rest.len() != 11 {
                        return Err(perr(format!("ODOM expects 11 fields, got {}", rest.len())));
                    }
                    let i1 = parse_id(rest[0]).map_err(perr)?;
                    let i2 = parse_id(rest[1]).map_err(perr)?;
                    let v = parse_floats(&rest[2..]).map_err(perr)?;
                    odometry.push(OdometryMeasurement::new(
                        i1,
                        i2,
                        Vector2::new(v[0], v[1]),
                        Vector2::new(v[2], v[3]),
                        Matrix2::new(v[4], v[5], v[5], v[6]),
                        v[7],
                        v[8],
                    ));
                    lines_of.0.push(lineno);
                }
                "HOME" => {
                    if rest.len() != 8 {
                        return Err(perr(format!("HOME expects 8 fields, got {}", rest.len())));
                    }
                    let i1 = parse_id(rest[0]).map_err(perr)?;
                    let i2 = parse_id(rest[1]).map_err(perr)?;
                    let v = parse_floats(&rest[2..]).map_err(perr)?;
                    homing.push(HomingMeasurement {
                        i1,
                        i2,
                        alpha: Vector2::new(v[0], v[1]),
                        psi: Vector2::new(v[2], v[3]),
                        sigma_h: v[4],
                        sigma_c: v[5],
                    });
                    lines_of.1.push(lineno);
                }
                other => return Err(perr(format!("unknown record `{other}`"))),
            }
        }

        let poses: Vec<Pose> = poses
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| Error::MalformedGraph(format!("pose id {} missing", i + 1))))
            .collect::<Result<_>>()?;
        let fixed = fixed.ok_or_else(|| Error::MalformedGraph("no pose marked FIXED".into()))?;

        FactorGraph::new(poses, fixed, odometry, homing).map_err(|e| match e {
            Error::Validation { record, msg } => {
                let line = record_line(&record, &lines_of);
                Error::Validation {
                    record: match line {
                        Some(l) => format!("{record} (line {l})"),
                        None => record,
                    },
                    msg,
                }
            }
            other => other,
        })
    }

    pub fn load_str(text: &str) -> Result<Self> {
        Self::load(text.as_bytes())
    }
}

fn record_line(record: &str, lines_of: &(Vec<usize>, Vec<usize>)) -> Option<usize> {
    let (kind, idx) = record.split_once(" #")?;
    let idx: usize = idx.parse().ok()?;
    match kind {
        "odometry" => lines_of.0.get(idx).copied(),
        "homing" => lines_of.1.get(idx).copied(),
        _ => None,
    }
}

fn parse_id(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(id) if id >= 1 => Ok(id - 1),
        _ => Err(format!("invalid pose id `{s}` (ids are 1-based integers)")),
    }
}

fn parse_floats(fields: &[&str]) -> std::result::Result<Vec<f64>, String> {
    fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|_| format!("invalid number `{f}`")))
        .collect()
}
