//! Per-point features and Fast Point Feature Histograms.
//!
//! Point features are the centered position, the unit normal, and polar
//! coordinates `(r, φ)` in the XY plane about the cloud centroid. FPFH uses
//! the Darboux-frame pair angles with 11 bins per angle and `1/distance`
//! neighbor weighting.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result, Warning};
use crate::mesh::{PointCloud, SpatialIndex};

pub const FPFH_BINS: usize = 11;
pub const FPFH_DIM: usize = 3 * FPFH_BINS;

#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    /// Positions relative to the cloud centroid.
    pub positions: Vec<Point3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub r: Vec<f64>,
    pub phi: Vec<f64>,
    /// Centroid subtracted from the input positions.
    pub center: Point3<f64>,
}

impl PointFeatures {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The 8-component row `(x, y, z, nx, ny, nz, r, φ)` of point `i`.
    pub fn row(&self, i: usize) -> [f64; 8] {
        let p = self.positions[i];
        let n = self.normals[i];
        [p.x, p.y, p.z, n.x, n.y, n.z, self.r[i], self.phi[i]]
    }

    /// Same features with positions and radii divided by the largest radius.
    /// Angles and normals are unchanged.
    pub fn unit_scaled(&self) -> PointFeatures {
        let scale = self.r.iter().cloned().fold(0.0, f64::max);
        let s = if scale > 0.0 { 1.0 / scale } else { 1.0 };
        PointFeatures {
            positions: self.positions.iter().map(|p| Point3::from(p.coords * s)).collect(),
            normals: self.normals.clone(),
            r: self.r.iter().map(|r| r * s).collect(),
            phi: self.phi.clone(),
            center: self.center,
        }
    }
}

/// Azimuth in (−π, π] with `φ(0, 0) = 0`.
pub fn azimuth(x: f64, y: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        0.0
    } else {
        let a = y.atan2(x);
        if a == -std::f64::consts::PI {
            std::f64::consts::PI
        } else {
            a
        }
    }
}

pub fn compute_point_features(cloud: &PointCloud) -> Result<PointFeatures> {
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("point features need normals".into()))?;
    let center = cloud
        .centroid()
        .ok_or_else(|| Error::InvalidArgument("point features of an empty cloud".into()))?;
    let positions: Vec<Point3<f64>> = cloud
        .points
        .iter()
        .map(|p| Point3::from(p - center))
        .collect();
    let r = positions.iter().map(|p| p.x.hypot(p.y)).collect();
    let phi = positions.iter().map(|p| azimuth(p.x, p.y)).collect();
    Ok(PointFeatures {
        positions,
        normals: normals.clone(),
        r,
        phi,
        center,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpfhDescriptor {
    pub histograms: Vec<[f64; FPFH_DIM]>,
}

impl FpfhDescriptor {
    pub fn len(&self) -> usize {
        self.histograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histograms.is_empty()
    }
}

/// Pair angles `(α, φ, θ)` for two oriented points, with the source chosen
/// as the point whose normal makes the smaller angle with the connecting
/// line. Returns zeros for coincident points or a degenerate frame.
pub fn pair_features(
    p1: &Point3<f64>,
    n1: &Vector3<f64>,
    p2: &Point3<f64>,
    n2: &Vector3<f64>,
) -> [f64; 3] {
    let mut d = p2 - p1;
    let len = d.norm();
    if len == 0.0 {
        return [0.0; 3];
    }
    let a1 = n1.dot(&d) / len;
    let a2 = n2.dot(&d) / len;
    let (ns, nt, f3) = if a1.abs().min(1.0).acos() > a2.abs().min(1.0).acos() {
        d = -d;
        (n2, n1, -a2)
    } else {
        (n1, n2, a1)
    };
    let v = d.cross(ns);
    let vn = v.norm();
    if vn == 0.0 {
        return [0.0; 3];
    }
    let v = v / vn;
    let w = ns.cross(&v);
    let f2 = v.dot(nt);
    let f1 = w.dot(nt).atan2(ns.dot(nt));
    [f1, f2, f3]
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = (FPFH_BINS as f64 * (value - lo) / (hi - lo)).floor();
    (b.max(0.0) as usize).min(FPFH_BINS - 1)
}

fn spfh_bins(f: [f64; 3]) -> [usize; 3] {
    [
        bin(f[0], -std::f64::consts::PI, std::f64::consts::PI),
        FPFH_BINS + bin(f[1], -1.0, 1.0),
        2 * FPFH_BINS + bin(f[2], -1.0, 1.0),
    ]
}

fn normalize_subhistograms(h: &mut [f64; FPFH_DIM]) {
    for part in h.chunks_mut(FPFH_BINS) {
        let s: f64 = part.iter().sum();
        if s > 0.0 {
            part.iter_mut().for_each(|v| *v *= 100.0 / s);
        }
    }
}

/// Two-pass FPFH. Each point's SPFH spreads 100 units per sub-histogram
/// over its radius neighbors; the FPFH adds `1/distance`-weighted neighbor
/// SPFHs to the point's own and renormalizes each sub-histogram to 100.
/// Points with no neighbor get a zero histogram and a warning.
pub fn compute_fpfh(cloud: &PointCloud, radius: f64) -> Result<(FpfhDescriptor, Vec<Warning>)> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("FPFH radius must be positive, got {radius}")));
    }
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("FPFH needs normals".into()))?;
    if cloud.is_empty() {
        return Ok((FpfhDescriptor { histograms: Vec::new() }, Vec::new()));
    }
    let index = SpatialIndex::build(&cloud.points)?;
    let pts = &cloud.points;

    let neighbors: Vec<Vec<(usize, f64)>> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            index
                .within_radius(&pts[i], radius)
                .into_iter()
                .filter(|&(j, _)| j != i)
                .collect()
        })
        .collect();

    let spfh: Vec<[f64; FPFH_DIM]> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut h = [0.0; FPFH_DIM];
            let nb = &neighbors[i];
            if nb.is_empty() {
                return h;
            }
            let inc = 100.0 / nb.len() as f64;
            for &(j, _) in nb {
                let f = pair_features(&pts[i], &normals[i], &pts[j], &normals[j]);
                for b in spfh_bins(f) {
                    h[b] += inc;
                }
            }
            h
        })
        .collect();

    let histograms: Vec<[f64; FPFH_DIM]> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut h = spfh[i];
            for &(j, d) in &neighbors[i] {
                if d == 0.0 {
                    continue;
                }
                let w = 1.0 / d;
                for (acc, v) in h.iter_mut().zip(spfh[j].iter()) {
                    *acc += w * v;
                }
            }
            normalize_subhistograms(&mut h);
            h
        })
        .collect();

    let warnings = neighbors
        .iter()
        .enumerate()
        .filter(|(_, nb)| nb.is_empty())
        .map(|(i, _)| Warning::EmptyNeighborhood { point: i })
        .collect();
    Ok((FpfhDescriptor { histograms }, warnings))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::RigidTransform;

    fn random_cloud(seed: u64, n: usize, extent: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut ns = Vec::new();
        for _ in 0..n {
            // Points on a bumpy sheet so normals vary smoothly.
            let x: f64 = rng.random_range(-extent..extent);
            let y: f64 = rng.random_range(-extent..extent);
            let z = 0.8 * (0.5 * x).sin() * (0.4 * y).cos();
            let dzdx = 0.4 * (0.5 * x).cos() * (0.4 * y).cos();
            let dzdy = -0.32 * (0.5 * x).sin() * (0.4 * y).sin();
            pts.push(Point3::new(x, y, z));
            ns.push(Vector3::new(-dzdx, -dzdy, 1.0).normalize());
        }
        PointCloud::with_normals(pts, ns).unwrap()
    }

    #[test]
    fn centroid_point_has_zero_polar_coords() {
        let c = PointCloud::with_normals(
            vec![Point3::new(-1.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 0.0, 0.0)],
            vec![Vector3::z(); 3],
        )
        .unwrap();
        let f = compute_point_features(&c).unwrap();
        assert_eq!(f.r[2], 0.0);
        assert_eq!(f.phi[2], 0.0);
    }

    #[test]
    fn polar_coords_by_hand() {
        let c = PointCloud::with_normals(
            vec![Point3::new(3.0, 4.0, 0.0), Point3::new(-3.0, -4.0, 0.0)],
            vec![Vector3::z(); 2],
        )
        .unwrap();
        let f = compute_point_features(&c).unwrap();
        assert!((f.r[0] - 5.0).abs() < 1e-12);
        assert!((f.phi[0] - 4f64.atan2(3.0)).abs() < 1e-12);
        assert!((f.phi[0] - 0.9273).abs() < 1e-4);
        assert_eq!(f.row(0)[6], f.r[0]);
    }

    #[test]
    fn features_need_normals() {
        assert!(compute_point_features(&PointCloud::new(vec![Point3::origin()])).is_err());
    }

    #[test]
    fn azimuth_range() {
        assert_eq!(azimuth(-1.0, 0.0), std::f64::consts::PI);
        assert_eq!(azimuth(-1.0, -0.0), std::f64::consts::PI);
        assert!(azimuth(-1.0, -1e-300) > -std::f64::consts::PI);
    }

    #[test]
    fn unit_scaled_variant() {
        let c = random_cloud(4, 50, 10.0);
        let f = compute_point_features(&c).unwrap();
        let u = f.unit_scaled();
        let max_r = u.r.iter().cloned().fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-12);
        assert_eq!(u.phi, f.phi);
    }

    #[test]
    fn descriptor_radius_for_default_voxel() {
        let nu = 0.8;
        assert!((7.0 * nu - 5.6f64).abs() < 1e-12);
    }

    #[test]
    fn coplanar_cloud_concentrates_mass() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Point3::new(i as f64 * 0.5, j as f64 * 0.5, 0.0));
            }
        }
        let n = pts.len();
        let c = PointCloud::with_normals(pts, vec![Vector3::z(); n]).unwrap();
        let (d, w) = compute_fpfh(&c, 1.2).unwrap();
        assert!(w.is_empty());
        // α = atan2(0, 1) = 0, φ = 0, θ = 0: one bin per sub-histogram.
        let expect = [bin(0.0, -std::f64::consts::PI, std::f64::consts::PI), FPFH_BINS + 5, 2 * FPFH_BINS + 5];
        for h in &d.histograms {
            for (k, v) in h.iter().enumerate() {
                if expect.contains(&k) {
                    assert!((v - 100.0).abs() < 1e-9);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn isolated_point_gets_zero_histogram_and_warning() {
        let c = PointCloud::with_normals(
            vec![Point3::origin(), Point3::new(0.1, 0.0, 0.0), Point3::new(50.0, 0.0, 0.0)],
            vec![Vector3::z(), Vector3::x(), Vector3::z()],
        )
        .unwrap();
        let (d, w) = compute_fpfh(&c, 1.0).unwrap();
        assert_eq!(w, vec![Warning::EmptyNeighborhood { point: 2 }]);
        assert!(d.histograms[2].iter().all(|&v| v == 0.0));
    }

    /// Independent reference: explicit Darboux frame per ordered pair, a
    /// plain double loop for neighbors, and direct bin arithmetic.
    fn reference_fpfh(cloud: &PointCloud, radius: f64) -> Vec<Vec<f64>> {
        let pts = &cloud.points;
        let ns = cloud.normals.as_ref().unwrap();
        let n = pts.len();
        let pi = std::f64::consts::PI;
        let darboux = |i: usize, j: usize| -> [f64; 3] {
            let (mut ps, mut pt, mut nsrc, mut ntgt) = (pts[i], pts[j], ns[i], ns[j]);
            let line = (pt - ps).normalize();
            let ang_i = nsrc.dot(&line).abs().min(1.0).acos();
            let ang_j = ntgt.dot(&line).abs().min(1.0).acos();
            if ang_i > ang_j {
                std::mem::swap(&mut ps, &mut pt);
                std::mem::swap(&mut nsrc, &mut ntgt);
            }
            let dvec = pt - ps;
            let u = nsrc;
            let v = dvec.cross(&u).normalize();
            let w = u.cross(&v);
            let theta = u.dot(&(dvec / dvec.norm()));
            let phi_ = v.dot(&ntgt);
            let alpha = w.dot(&ntgt).atan2(u.dot(&ntgt));
            [alpha, phi_, theta]
        };
        let to_bin = |x: f64, lo: f64, hi: f64| -> usize {
            let t = ((x - lo) / (hi - lo) * 11.0).floor() as i64;
            t.clamp(0, 10) as usize
        };
        let mut nbrs = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                let d = (pts[i] - pts[j]).norm();
                if i != j && d <= radius {
                    nbrs[i].push((j, d));
                }
            }
        }
        let mut spfh = vec![vec![0.0; 33]; n];
        for i in 0..n {
            let k = nbrs[i].len() as f64;
            for &(j, _) in &nbrs[i] {
                let f = darboux(i, j);
                spfh[i][to_bin(f[0], -pi, pi)] += 100.0 / k;
                spfh[i][11 + to_bin(f[1], -1.0, 1.0)] += 100.0 / k;
                spfh[i][22 + to_bin(f[2], -1.0, 1.0)] += 100.0 / k;
            }
        }
        let mut out = vec![vec![0.0; 33]; n];
        for i in 0..n {
            for b in 0..33 {
                let mut v = spfh[i][b];
                for &(j, d) in &nbrs[i] {
                    v += spfh[j][b] / d;
                }
                out[i][b] = v;
            }
            for part in 0..3 {
                let s: f64 = out[i][part * 11..part * 11 + 11].iter().sum();
                if s > 0.0 {
                    for b in part * 11..part * 11 + 11 {
                        out[i][b] *= 100.0 / s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_reference_on_50_points() {
        let c = random_cloud(11, 50, 4.0);
        let (d, _) = compute_fpfh(&c, 2.5).unwrap();
        let r = reference_fpfh(&c, 2.5);
        for (h, g) in d.histograms.iter().zip(&r) {
            for (a, b) in h.iter().zip(g) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn phi_rotates_with_cloud(seed in any::<u64>(), theta in -3.0f64..3.0) {
            let c = random_cloud(seed, 40, 5.0);
            let rot = RigidTransform::from_axis_angle(&Vector3::z(), theta);
            let a = compute_point_features(&c).unwrap();
            let b = compute_point_features(&c.transformed(&rot)).unwrap();
            for i in 0..c.len() {
                prop_assert!((a.r[i] - b.r[i]).abs() < 1e-9);
                if a.r[i] > 1e-6 {
                    let diff = (b.phi[i] - a.phi[i] - theta).rem_euclid(std::f64::consts::TAU);
                    let diff = diff.min(std::f64::consts::TAU - diff);
                    prop_assert!(diff < 1e-9);
                }
            }
        }

        #[test]
        fn fpfh_invariant_under_rigid_motion(seed in any::<u64>(), rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0, t in -20.0f64..20.0) {
            let c = random_cloud(seed, 120, 5.0);
            let tf = RigidTransform::from_euler_deg(rx.to_degrees(), ry.to_degrees(), rz.to_degrees(), Vector3::new(t, -t, 0.5 * t));
            let (a, _) = compute_fpfh(&c, 2.0).unwrap();
            let (b, _) = compute_fpfh(&c.transformed(&tf), 2.0).unwrap();
            for (h, g) in a.histograms.iter().zip(&b.histograms) {
                for (x, y) in h.iter().zip(g) {
                    prop_assert!((x - y).abs() < 1e-5, "{} vs {}", x, y);
                }
                for part in h.chunks(FPFH_BINS) {
                    let s: f64 = part.iter().sum();
                    prop_assert!(part.iter().all(|&v| v >= 0.0));
                    prop_assert!(s == 0.0 || (s - 100.0).abs() < 1e-6);
                }
            }
        }
    }
}
