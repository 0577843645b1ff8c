//! Point-to-plane ICP with Tukey biweight reweighting.
//!
//! Each iteration solves the weighted Gauss-Newton system for a twist and
//! backtracks along it until the robust objective does not increase. Source
//! points without a target within the correspondence distance contribute the
//! saturated loss `k²/6`, so the objective is defined for every pose.

use nalgebra::{Matrix6, Point3, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, PreparedCloud, RegistrationParams, RegistrationResult};
use crate::error::{Error, Result};
use crate::mesh::{voxel_downsample, PointCloud, RigidTransform, SpatialIndex};

/// Below this step norm (rad + mm) the iteration stops.
const STEP_TOLERANCE: f64 = 1e-6;
const MAX_HALVINGS: usize = 30;
/// Smallest-to-largest eigenvalue ratio treated as singular.
const RANK_TOLERANCE: f64 = 1e-10;

pub fn tukey_weight(r: f64, k: f64) -> f64 {
    if r.abs() < k {
        let u = 1.0 - (r / k).powi(2);
        u * u
    } else {
        0.0
    }
}

pub fn tukey_rho(r: f64, k: f64) -> f64 {
    let sat = k * k / 6.0;
    if r.abs() < k {
        sat * (1.0 - (1.0 - (r / k).powi(2)).powi(3))
    } else {
        sat
    }
}

/// Robust objective after each accepted step (entry 0 is the initial pose).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTrace {
    pub objective: Vec<f64>,
    pub step_norms: Vec<f64>,
    pub iterations: usize,
}

struct Target<'a> {
    points: &'a [Point3<f64>],
    normals: &'a [Vector3<f64>],
    index: &'a SpatialIndex,
}

impl Target<'_> {
    /// Point-to-plane residual and target normal of the nearest point.
    fn residual(&self, q: &Point3<f64>, max_dist: f64) -> Option<(f64, Vector3<f64>)> {
        self.index.nearest_within(q, max_dist).map(|(j, _)| {
            let n = self.normals[j];
            ((q - self.points[j]).dot(&n), n)
        })
    }

    fn objective(&self, src: &[Point3<f64>], t: &RigidTransform, params: &RegistrationParams) -> f64 {
        let k = params.tukey_k;
        let terms: Vec<f64> = src
            .par_iter()
            .map(|p| match self.residual(&t.apply_point(p), params.icp_max_corr_dist) {
                Some((r, _)) => tukey_rho(r, k),
                None => tukey_rho(k, k),
            })
            .collect();
        terms.iter().sum()
    }

    fn normal_equations(
        &self,
        src: &[Point3<f64>],
        t: &RigidTransform,
        params: &RegistrationParams,
    ) -> (Matrix6<f64>, Vector6<f64>, usize) {
        let k = params.tukey_k;
        let rows: Vec<Option<(Vector6<f64>, f64, f64)>> = src
            .par_iter()
            .map(|p| {
                let q = t.apply_point(p);
                let (r, n) = self.residual(&q, params.icp_max_corr_dist)?;
                let w = tukey_weight(r, k);
                (w > 0.0).then(|| {
                    let c = q.coords.cross(&n);
                    (Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z), r, w)
                })
            })
            .collect();
        let mut a = Matrix6::zeros();
        let mut b = Vector6::zeros();
        let mut used = 0;
        for (j, r, w) in rows.into_iter().flatten() {
            a += w * j * j.transpose();
            b -= w * r * j;
            used += 1;
        }
        (a, b, used)
    }
}

fn twist(xi: &Vector6<f64>) -> RigidTransform {
    RigidTransform::from_twist(&Vector3::new(xi[0], xi[1], xi[2]), &Vector3::new(xi[3], xi[4], xi[5]))
}

fn icp(
    src: &[Point3<f64>],
    target: &Target<'_>,
    init: &RigidTransform,
    params: &RegistrationParams,
) -> Result<(RigidTransform, FineTrace)> {
    params.validate()?;
    init.validate()?;
    let mut t = *init;
    let mut e = target.objective(src, &t, params);
    let mut trace = FineTrace {
        objective: vec![e],
        ..Default::default()
    };
    for it in 0..params.icp_max_iters {
        trace.iterations = it + 1;
        let (a, b, used) = target.normal_equations(src, &t, params);
        if used < 6 {
            return Err(Error::RankDeficient(format!(
                "{used} weighted correspondences cannot constrain a rigid motion"
            )));
        }
        let eig = SymmetricEigen::new(a);
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(hi > 0.0) || lo < RANK_TOLERANCE * hi {
            return Err(Error::RankDeficient(format!(
                "point-to-plane system is singular (eigenvalues {lo:.3e} to {hi:.3e})"
            )));
        }
        let xi = a.cholesky().map(|c| c.solve(&b)).ok_or_else(|| {
            Error::RankDeficient("point-to-plane system is not positive definite".into())
        })?;
        if xi.norm() < STEP_TOLERANCE {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = twist(&(xi * alpha)).compose(&t).orthonormalized();
            let ec = target.objective(src, &cand, params);
            if ec <= e {
                accepted = Some((cand, ec));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, ec)) = accepted else { break };
        let step = alpha * xi.norm();
        t = cand;
        e = ec;
        trace.objective.push(e);
        trace.step_norms.push(step);
        if step < STEP_TOLERANCE {
            break;
        }
    }
    Ok((t, trace))
}

/// Refines `init` (source → target) on clouds downsampled at the voxel size.
pub fn fine_register(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &RegistrationParams,
) -> Result<(RegistrationResult, FineTrace)> {
    params.validate()?;
    let src = voxel_downsample(source, params.voxel)?;
    let tgt = voxel_downsample(target, params.voxel)?;
    let normals = tgt
        .normals
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("point-to-plane ICP needs target normals".into()))?;
    let index = SpatialIndex::build(&tgt.points)?;
    let view = Target {
        points: &tgt.points,
        normals,
        index: &index,
    };
    finish(&src.points, &view, init, params)
}

pub fn fine_register_prepared(
    source: &PreparedCloud,
    target: &PreparedCloud,
    init: &RigidTransform,
    params: &RegistrationParams,
) -> Result<(RegistrationResult, FineTrace)> {
    let view = Target {
        points: &target.cloud.points,
        normals: target.normals(),
        index: &target.index,
    };
    finish(&source.cloud.points, &view, init, params)
}

fn finish(
    src: &[Point3<f64>],
    target: &Target<'_>,
    init: &RigidTransform,
    params: &RegistrationParams,
) -> Result<(RegistrationResult, FineTrace)> {
    let (transform, trace) = icp(src, target, init, params)?;
    let (fitness, inlier_rmse) = evaluate(src, target.index, &transform, params.icp_max_corr_dist);
    Ok((
        RegistrationResult {
            transform,
            fitness,
            inlier_rmse,
            chosen_template: None,
        },
        trace,
    ))
}
