//! Global alignment by RANSAC over FPFH correspondences.

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{evaluate, kabsch, PreparedCloud, RegistrationParams, RegistrationResult};
use crate::error::{CoarseDiagnostics, Error, Result};
use crate::mesh::{PointCloud, RigidTransform};

/// Trials evaluated per parallel batch; early termination is checked between
/// batches so the result does not depend on the thread count.
const BATCH: usize = 512;

/// True when every pair of corresponding edges of the two triangles has
/// length ratio at least `similarity`.
pub fn edge_lengths_compatible(src: &[Point3<f64>; 3], dst: &[Point3<f64>; 3], similarity: f64) -> bool {
    [(0, 1), (1, 2), (0, 2)].iter().all(|&(a, b)| {
        let ds = (src[a] - src[b]).norm();
        let dt = (dst[a] - dst[b]).norm();
        ds >= similarity * dt && dt >= similarity * ds
    })
}

pub fn coarse_register(source: &PointCloud, target: &PointCloud, params: &RegistrationParams) -> Result<RegistrationResult> {
    let s = PreparedCloud::new(source, params)?;
    let t = PreparedCloud::new(target, params)?;
    coarse_register_prepared(&s, &t, params)
}

struct Trial {
    inliers: usize,
    transform: RigidTransform,
}

pub fn coarse_register_prepared(
    source: &PreparedCloud,
    target: &PreparedCloud,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    params.validate()?;
    let corr: Vec<(usize, usize)> = source
        .fpfh
        .histograms
        .par_iter()
        .enumerate()
        .map(|(i, h)| (i, target.feature_index.nearest(h).0))
        .collect();
    let sp = &source.cloud.points;
    let tp = &target.cloud.points;
    let mut diag = CoarseDiagnostics {
        source_points: sp.len(),
        target_points: tp.len(),
        correspondences: corr.len(),
        ..Default::default()
    };
    if corr.len() < 3 {
        return Err(Error::CoarseFailure(diag));
    }
    let thr2 = params.ransac_distance_threshold.powi(2);
    let count_inliers = |t: &RigidTransform| {
        corr.iter()
            .filter(|&&(i, j)| (t.apply_point(&sp[i]) - tp[j]).norm_squared() < thr2)
            .count()
    };
    let trial = |iteration: usize| -> Option<Trial> {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(iteration as u64);
        let mut pick = [0usize; 3];
        for k in 0..3 {
            loop {
                let c = rng.random_range(0..corr.len());
                if !pick[..k].contains(&c) {
                    pick[k] = c;
                    break;
                }
            }
        }
        let s = pick.map(|c| sp[corr[c].0]);
        let d = pick.map(|c| tp[corr[c].1]);
        if !edge_lengths_compatible(&s, &d, params.edge_similarity) {
            return None;
        }
        // Degenerate (near-collinear) samples give no stable rotation.
        if (s[1] - s[0]).cross(&(s[2] - s[0])).norm() < 1e-6 {
            return None;
        }
        let t = kabsch(&s, &d).ok()?;
        Some(Trial {
            inliers: count_inliers(&t),
            transform: t,
        })
    };

    let mut best: Option<Trial> = None;
    let mut needed = params.ransac_max_iters;
    let mut done = 0;
    while done < needed {
        let end = (done + BATCH).min(needed);
        let batch: Vec<Option<Trial>> = (done..end).into_par_iter().map(trial).collect();
        for t in batch.into_iter().flatten() {
            diag.candidates_passing_edge_check += 1;
            if best.as_ref().is_none_or(|b| t.inliers > b.inliers) {
                best = Some(t);
            }
        }
        done = end;
        if let Some(b) = &best {
            let w = b.inliers as f64 / corr.len() as f64;
            if w > 0.0 {
                let k = (1.0 - params.ransac_confidence).ln() / (1.0 - w.powi(3)).ln();
                if k.is_finite() {
                    needed = needed.min((k.ceil() as usize).max(1));
                }
            }
        }
    }
    diag.iterations = done;
    let best = match best {
        Some(b) if b.inliers >= 3 => b,
        other => {
            diag.best_inliers = other.map_or(0, |b| b.inliers);
            return Err(Error::CoarseFailure(diag));
        }
    };

    // Refit on every inlier of the best hypothesis.
    let (src_in, dst_in): (Vec<Point3<f64>>, Vec<Point3<f64>>) = corr
        .iter()
        .filter(|&&(i, j)| (best.transform.apply_point(&sp[i]) - tp[j]).norm_squared() < thr2)
        .map(|&(i, j)| (sp[i], tp[j]))
        .unzip();
    let mut transform = best.transform;
    if let Ok(refit) = kabsch(&src_in, &dst_in) {
        if count_inliers(&refit) >= best.inliers {
            transform = refit;
        }
    }
    let (fitness, inlier_rmse) = evaluate(sp, &target.index, &transform, params.icp_max_corr_dist);
    log::debug!(
        "coarse: {} iterations, {} inliers of {} correspondences, fitness {fitness:.3}",
        done,
        best.inliers,
        corr.len()
    );
    Ok(RegistrationResult {
        transform,
        fitness,
        inlier_rmse,
        chosen_template: None,
    })
}
