use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use super::PointCloud;
use crate::error::{Error, Result};

pub(crate) fn voxel_key(p: &Point3<f64>, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// One point per occupied voxel at the centroid of its members. Normals are
/// averaged and renormalized. Output follows first-occupancy order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel}"
        )));
    }
    let mut slot: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, Vector3<f64>, usize, usize)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let k = voxel_key(p, voxel);
        let idx = *slot.entry(k).or_insert_with(|| {
            sums.push((Vector3::zeros(), Vector3::zeros(), 0, i));
            sums.len() - 1
        });
        let s = &mut sums[idx];
        s.0 += p.coords;
        if let Some(ns) = &cloud.normals {
            s.1 += ns[i];
        }
        s.2 += 1;
    }
    let points = sums
        .iter()
        .map(|(sum, _, n, _)| Point3::from(sum / *n as f64))
        .collect();
    let normals = cloud.normals.as_ref().map(|ns| {
        sums.iter()
            .map(|(_, nsum, _, first)| {
                let len = nsum.norm();
                if len > 1e-12 {
                    nsum / len
                } else {
                    ns[*first]
                }
            })
            .collect()
    });
    Ok(PointCloud { points, normals })
}
