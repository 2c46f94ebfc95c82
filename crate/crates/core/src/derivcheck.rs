//! Analytic-versus-finite-difference check of every cost derivative.
//!
//! A [`Family`] samples random non-degenerate configurations and evaluates the
//! analytic value, gradient and Hessian at a flat parameter point. The
//! gradient is compared with [`fd_gradient`] of the value, the Hessian with
//! [`fd_jacobian`] of the analytic gradient, block by block.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::eval_constraint;
use crate::costs::{
    eval_compass, eval_distance, eval_home_vector, eval_rotation, eval_translation, CostEval, Pose, RotCostConfig,
};
use crate::error::Result;
use crate::fd_oracle::{fd_gradient, fd_jacobian, relative_error, DEFAULT_STEP};
use crate::orvec::{from_angle, omega};

/// Analytic derivatives at one point.
#[derive(Debug, Clone)]
pub struct Analytic {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl From<CostEval> for Analytic {
    fn from(e: CostEval) -> Self {
        Analytic {
            value: e.value,
            grad: DVector::from_column_slice(e.stacked_gradient().as_slice()),
            hess: DMatrix::from_column_slice(8, 8, e.stacked_hessian().as_slice()),
        }
    }
}

pub type Evaluator = Box<dyn Fn(&DVector<f64>) -> Result<Analytic>>;

/// One sampled configuration: the point and the evaluator with its fixed
/// measurement parameters.
pub struct Case {
    pub point: DVector<f64>,
    pub eval: Evaluator,
}

pub type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;

pub struct Family {
    pub name: String,
    /// Named coordinate ranges of the point, e.g. `p` and `p'`.
    pub blocks: Vec<(&'static str, Range<usize>)>,
    pub sample: Sampler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub gradient: f64,
    pub hessian: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            gradient: 1e-5,
            hessian: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub family: String,
    /// e.g. `grad_p'` or `H_pp'`.
    pub block: String,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl BlockError {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub samples: usize,
    pub seed: u64,
    pub entries: Vec<BlockError>,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(BlockError::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockError> {
        self.entries.iter().filter(|e| !e.passed())
    }

    /// Worst block error of a family.
    pub fn family_max(&self, family: &str) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.family == family)
            .map(|e| e.max_rel_error)
            .reduce(f64::max)
    }
}

impl fmt::Display for DerivativeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "derivative check: {} samples per family, seed {}", self.samples, self.seed)?;
        writeln!(f, "{:<20} {:<16} {:>12} {:>10}  status", "family", "block", "max rel err", "threshold")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<20} {:<16} {:>12.3e} {:>10.0e}  {}",
                e.family,
                e.block,
                e.max_rel_error,
                e.threshold,
                if e.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Runs every family on `samples` configurations.
///
/// Each family gets its own stream of the seeded generator, so adding or
/// reordering families does not change the others' samples.
pub fn check_families(families: &[Family], samples: usize, seed: u64, th: Thresholds) -> Result<DerivativeReport> {
    let mut entries = Vec::new();
    for (fi, fam) in families.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fi as u64);
        let nb = fam.blocks.len();
        let mut grad_err = vec![0.0f64; nb];
        let mut hess_err = vec![vec![0.0f64; nb]; nb];

        for _ in 0..samples {
            let case = (fam.sample)(&mut rng);
            let a = (case.eval)(&case.point)?;
            let fd_g = fd_gradient(
                |x| (case.eval)(x).map_or(f64::NAN, |e| e.value),
                &case.point,
                DEFAULT_STEP,
            )?;
            let n = case.point.len();
            let fd_h = fd_jacobian(
                |x| {
                    (case.eval)(x)
                        .map(|e| e.grad)
                        .unwrap_or_else(|_| DVector::from_element(n, f64::NAN))
                },
                &case.point,
                DEFAULT_STEP,
            )?;

            for (bi, (_, ri)) in fam.blocks.iter().enumerate() {
                let e = relative_error(a.grad.rows_range(ri.clone()).iter(), fd_g.rows_range(ri.clone()).iter());
                grad_err[bi] = grad_err[bi].max(e);
                for (bj, (_, rj)) in fam.blocks.iter().enumerate() {
                    let av = a.hess.view((ri.start, rj.start), (ri.len(), rj.len()));
                    // fd_jacobian row i is ∂g_i/∂x_j, matching H[i][j]
                    let fv = fd_h.view((ri.start, rj.start), (ri.len(), rj.len()));
                    let e = relative_error(av.iter(), fv.iter());
                    hess_err[bi][bj] = hess_err[bi][bj].max(e);
                }
            }
        }

        for (bi, (name, _)) in fam.blocks.iter().enumerate() {
            entries.push(BlockError {
                family: fam.name.clone(),
                block: format!("grad_{name}"),
                max_rel_error: grad_err[bi],
                threshold: th.gradient,
            });
        }
        for (bi, (ni, _)) in fam.blocks.iter().enumerate() {
            for (bj, (nj, _)) in fam.blocks.iter().enumerate() {
                entries.push(BlockError {
                    family: fam.name.clone(),
                    block: format!("H_{ni}{nj}"),
                    max_rel_error: hess_err[bi][bj],
                    threshold: th.hessian,
                });
            }
        }
    }
    Ok(DerivativeReport { samples, seed, entries })
}

/// The standard suite: five costs in all forms plus the constraint.
pub fn check_derivatives(samples: usize, seed: u64, th: Thresholds) -> Result<DerivativeReport> {
    check_families(&standard_families(), samples, seed, th)
}

fn pose_blocks() -> Vec<(&'static str, Range<usize>)> {
    vec![("p", 0..4), ("p'", 4..8)]
}

fn split(x: &DVector<f64>) -> (Pose, Pose) {
    (Pose::new(x[0], x[1], x[2], x[3]), Pose::new(x[4], x[5], x[6], x[7]))
}

fn random_orvec(rng: &mut ChaCha8Rng) -> Vector2<f64> {
    from_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
}

/// Two poses at least 0.3 apart with orientation norms in [0.5, 1.5].
fn random_pose_pair(rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let mut v = DVector::zeros(8);
        for k in [0, 4] {
            v[k] = rng.random_range(-2.0..2.0);
            v[k + 1] = rng.random_range(-2.0..2.0);
            let u = rng.random_range(0.5..1.5) * random_orvec(rng);
            v[k + 2] = u[0];
            v[k + 3] = u[1];
        }
        if (v[4] - v[0]).hypot(v[5] - v[1]) >= 0.3 {
            return v;
        }
    }
}

fn random_spd(rng: &mut ChaCha8Rng) -> Matrix2<f64> {
    let a = Matrix2::from_fn(|_, _| rng.random_range(-0.3..0.3));
    a * a.transpose() + Matrix2::identity() * 0.01
}

fn pose_family<F>(name: &str, make: F) -> Family
where
    F: Fn(&mut ChaCha8Rng) -> Evaluator + 'static,
{
    Family {
        name: name.to_string(),
        blocks: pose_blocks(),
        sample: Box::new(move |rng| {
            let eval = make(rng);
            Case {
                point: random_pose_pair(rng),
                eval,
            }
        }),
    }
}

fn rot_configs() -> [(&'static str, RotCostConfig); 3] {
    [
        ("first(t1=0)", RotCostConfig::first(false)),
        ("first(t1=1)", RotCostConfig::first(true)),
        ("second", RotCostConfig::second()),
    ]
}

pub fn standard_families() -> Vec<Family> {
    let mut fams = vec![
        pose_family("translation", |rng| {
            let t = random_spd(rng);
            let r = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            Box::new(move |x| {
                let (p, p2) = split(x);
                eval_translation(&p, &p2, &t, &r).map(Analytic::from)
            })
        }),
        pose_family("distance", |rng| {
            let sigma_e = rng.random_range(0.05..0.5);
            let rho = rng.random_range(0.0..3.0);
            Box::new(move |x| {
                let (p, p2) = split(x);
                eval_distance(&p, &p2, sigma_e, rho).map(Analytic::from)
            })
        }),
    ];
    for (form, cfg) in rot_configs() {
        fams.push(pose_family(&format!("rotation-{form}"), move |rng| {
            let q = omega(&random_orvec(rng));
            let sigma = rng.random_range(0.05..0.5);
            let cfg = cfg.with_gamma(rng.random_range(0.5..2.0));
            Box::new(move |x| {
                let (p, p2) = split(x);
                eval_rotation(&p, &p2, &q, sigma, &cfg).map(Analytic::from)
            })
        }));
    }
    for (form, cfg) in rot_configs() {
        fams.push(pose_family(&format!("home-{form}"), move |rng| {
            let a = omega(&random_orvec(rng));
            let sigma_h = rng.random_range(0.05..0.5);
            let cfg = cfg.with_gamma(rng.random_range(0.5..2.0));
            Box::new(move |x| {
                let (p, p2) = split(x);
                eval_home_vector(&p, &p2, &a, sigma_h, &cfg).map(Analytic::from)
            })
        }));
    }
    for (form, cfg) in rot_configs() {
        fams.push(pose_family(&format!("compass-{form}"), move |rng| {
            let psi = omega(&random_orvec(rng));
            let sigma_c = rng.random_range(0.05..0.5);
            let cfg = cfg.with_gamma(rng.random_range(0.5..2.0));
            Box::new(move |x| {
                let (p, p2) = split(x);
                eval_compass(&p, &p2, &psi, sigma_c, &cfg).map(Analytic::from)
            })
        }));
    }
    fams.push(Family {
        name: "constraint".to_string(),
        blocks: vec![("u", 0..2), ("lambda", 2..3)],
        sample: Box::new(|rng| {
            let u = rng.random_range(0.5..1.5) * random_orvec(rng);
            let lambda = rng.random_range(-3.0..3.0);
            Case {
                point: DVector::from_vec(vec![u[0], u[1], lambda]),
                eval: Box::new(|x| {
                    let c = eval_constraint(x[2], &Vector2::new(x[0], x[1]));
                    let mut hess = DMatrix::zeros(3, 3);
                    hess.view_mut((0, 0), (2, 2)).copy_from(&c.h_uu);
                    for i in 0..2 {
                        hess[(i, 2)] = c.h_ulambda[i];
                        hess[(2, i)] = c.h_ulambda[i];
                    }
                    Ok(Analytic {
                        value: c.w,
                        grad: DVector::from_vec(vec![c.grad_u[0], c.grad_u[1], c.grad_lambda]),
                        hess,
                    })
                }),
            }
        }),
    });
    fams
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_suite_passes() {
        let report = check_derivatives(20, 11, Thresholds::default()).unwrap();
        assert_eq!(standard_families().len(), 12);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn deterministic_under_seed() {
        let a = check_derivatives(5, 3, Thresholds::default()).unwrap();
        let b = check_derivatives(5, 3, Thresholds::default()).unwrap();
        assert_eq!(a.entries, b.entries);
    }
}
