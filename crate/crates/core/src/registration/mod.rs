//! Rigid registration of a scan onto a template: FPFH/RANSAC global
//! alignment, robust point-to-plane ICP, and routing between candidate
//! templates by fitness.

mod coarse;
mod fine;
mod routing;

pub use coarse::{coarse_register, coarse_register_prepared, edge_lengths_compatible};
pub use fine::{fine_register, fine_register_prepared, tukey_rho, tukey_weight, FineTrace};
pub use routing::{register_with_routing, Attempt, PreparedLibrary, RoutingResult};

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_fpfh, FpfhDescriptor, FPFH_DIM};
use crate::mesh::{voxel_downsample, KdTree, PointCloud, RigidTransform, SpatialIndex};
use crate::templates::TemplateKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationParams {
    /// Voxel size for downsampling (mm).
    pub voxel: f64,
    /// FPFH radius as a multiple of the voxel size.
    pub fpfh_radius_factor: f64,
    /// Minimum ratio between corresponding edge lengths of a RANSAC sample.
    pub edge_similarity: f64,
    pub ransac_max_iters: usize,
    pub ransac_confidence: f64,
    /// Correspondence inlier distance for RANSAC (mm).
    pub ransac_distance_threshold: f64,
    /// Correspondence distance for ICP and fitness (mm).
    pub icp_max_corr_dist: f64,
    pub icp_max_iters: usize,
    /// Tukey biweight cutoff on point-to-plane residuals (mm).
    pub tukey_k: f64,
    pub seed: u64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            voxel: 0.8,
            fpfh_radius_factor: 7.0,
            edge_similarity: 0.95,
            ransac_max_iters: 100_000,
            ransac_confidence: 0.999,
            ransac_distance_threshold: 1.2,
            icp_max_corr_dist: 1.0,
            icp_max_iters: 60,
            tukey_k: 0.5,
            seed: 0,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.voxel > 0.0
            && self.fpfh_radius_factor > 0.0
            && self.edge_similarity > 0.0
            && self.edge_similarity <= 1.0
            && self.ransac_confidence > 0.0
            && self.ransac_confidence < 1.0
            && self.ransac_distance_threshold > 0.0
            && self.icp_max_corr_dist > 0.0
            && self.tukey_k > 0.0
            && self.ransac_max_iters > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid registration parameters: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub transform: RigidTransform,
    /// Fraction of source points with a target point within the ICP
    /// correspondence distance.
    pub fitness: f64,
    pub inlier_rmse: f64,
    pub chosen_template: Option<TemplateKey>,
}

/// A downsampled cloud with descriptors and a spatial index, reusable across
/// registrations.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub fpfh: FpfhDescriptor,
    pub index: SpatialIndex,
    pub feature_index: KdTree<FPFH_DIM>,
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, params: &RegistrationParams) -> Result<PreparedCloud> {
        params.validate()?;
        if cloud.normals.is_none() {
            return Err(Error::InvalidArgument("registration needs point normals".into()));
        }
        let down = voxel_downsample(cloud, params.voxel)?;
        if down.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "{} points after downsampling; at least 3 are needed",
                down.len()
            )));
        }
        let (fpfh, _) = compute_fpfh(&down, params.voxel * params.fpfh_radius_factor)?;
        let index = SpatialIndex::build(&down.points)?;
        let feature_index = KdTree::build(fpfh.histograms.clone())?;
        Ok(PreparedCloud {
            cloud: down,
            fpfh,
            index,
            feature_index,
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        self.cloud.normals.as_deref().expect("prepared clouds carry normals")
    }
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(Error::InvalidArgument("kabsch needs at least 3 paired points".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let cd = dst.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform {
        rotation: r,
        translation: cd - r * cs,
    })
}

/// Fitness and inlier RMSE of `source` under `t` against `target`.
pub fn evaluate(source: &[Point3<f64>], target: &SpatialIndex, t: &RigidTransform, max_dist: f64) -> (f64, f64) {
    if source.is_empty() {
        return (0.0, 0.0);
    }
    let mut inliers = 0usize;
    let mut sq = 0.0;
    for p in source {
        if let Some((_, d)) = target.nearest_within(&t.apply_point(p), max_dist) {
            inliers += 1;
            sq += d * d;
        }
    }
    let rmse = if inliers > 0 { (sq / inliers as f64).sqrt() } else { 0.0 };
    (inliers as f64 / source.len() as f64, rmse)
}
